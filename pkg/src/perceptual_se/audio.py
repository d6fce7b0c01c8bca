"""PCM16 mono WAV reading and writing via the stdlib ``wave`` module."""
from __future__ import annotations

import os
import wave

import numpy as np

from .dsp import SAMPLE_RATE, Waveform


class WavFormatError(ValueError):
    def __init__(self, path, field, value, expected):
        super().__init__(f"{path}: unsupported {field}={value} (expected {expected})")
        self.field = field


def read_wav(path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    try:
        with wave.open(os.fspath(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise WavFormatError(path, "compression", w.getcomptype(), "NONE (PCM)")
            if w.getnchannels() != 1:
                raise WavFormatError(path, "channels", w.getnchannels(), 1)
            if w.getsampwidth() != 2:
                raise WavFormatError(path, "sample_width", 8 * w.getsampwidth(), "16 bits")
            if w.getframerate() != sample_rate:
                raise WavFormatError(path, "sample_rate", w.getframerate(), sample_rate)
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise WavFormatError(path, "header", str(exc), "RIFF/WAVE PCM") from None
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, sample_rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(wave_: Waveform, path) -> None:
    with wave.open(os.fspath(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wave_.sample_rate)
        w.writeframes(to_pcm16(wave_.samples).tobytes())
