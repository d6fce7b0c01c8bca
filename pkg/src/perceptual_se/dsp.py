"""Front end: STFT/ISTFT, log-magnitude features, SNR-controlled mixing.

Defaults follow 16 kHz audio with 32 ms windows and 16 ms hop (512/256
samples), giving 257 frequency bins.  The signal is zero-padded by half a
window at the start (and enough at the end to complete the last hop), so
frame t is centred on sample t*hop and every sample lies under two windows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
FFT_SIZE = 512
WIN_LEN = 512
HOP = 256
WSUM_FLOOR = 0.1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray          # (T, F) complex
    fft_size: int = FFT_SIZE
    win_len: int = WIN_LEN
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE
    length: int = 0             # source waveform length, 0 when unknown

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(frames, self.fft_size, self.win_len, self.hop, self.sample_rate, self.length)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (COLA at 50% overlap)."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def n_frames(n_samples: int, hop: int = HOP) -> int:
    return 0 if n_samples <= 0 else 1 + -(-n_samples // hop)


def _padding(n_samples: int, win_len: int, hop: int) -> tuple:
    n = n_frames(n_samples, hop)
    front = win_len // 2
    return front, (n - 1) * hop + win_len - front - n_samples


def stft(wave: Waveform, fft_size: int = FFT_SIZE, win_len: int = WIN_LEN, hop: int = HOP) -> ComplexSpectrogram:
    x = wave.samples
    if x.size == 0:
        raise ValueError("stft of an empty signal")
    if win_len > fft_size:
        raise ValueError(f"win_len {win_len} exceeds fft_size {fft_size}")
    if win_len % hop:
        raise ValueError(f"hop {hop} must divide win_len {win_len}")
    front, back = _padding(x.size, win_len, hop)
    frames = np.lib.stride_tricks.sliding_window_view(np.pad(x, (front, back)), win_len)[::hop]
    spec = np.fft.rfft(frames * hann(win_len), n=fft_size, axis=-1)
    return ComplexSpectrogram(spec, fft_size, win_len, hop, wave.sample_rate, x.size)


def istft(spec: ComplexSpectrogram) -> Waveform:
    """Weighted overlap-add with the analysis window, normalized by the (floored) window-square sum."""
    t = spec.n_frames
    if t == 0:
        raise ValueError("istft: spectrogram has no frames (window sum is zero everywhere)")
    if spec.n_bins != spec.fft_size // 2 + 1:
        raise ValueError(f"istft: {spec.n_bins} bins inconsistent with fft_size {spec.fft_size}")
    if spec.hop > spec.win_len:
        raise ValueError("istft: hop longer than window leaves zero window-sum gaps")
    length = spec.length or (t - 1) * spec.hop
    if n_frames(length, spec.hop) != t:
        raise ValueError(f"istft: {t} frames inconsistent with a {length}-sample signal")
    win = hann(spec.win_len)
    frames = np.fft.irfft(spec.frames, n=spec.fft_size, axis=-1)[:, :spec.win_len] * win
    n_out = (t - 1) * spec.hop + spec.win_len
    out = np.zeros(n_out)
    wsum = np.zeros(n_out)
    for i in range(t):
        sl = slice(i * spec.hop, i * spec.hop + spec.win_len)
        out[sl] += frames[i]
        wsum[sl] += win ** 2
    # inside the signal two windows overlap and the sum stays >= 0.5; only the
    # padding (trimmed below) can approach zero, where division would amplify
    # whatever a mask left there
    out /= np.maximum(wsum, WSUM_FLOOR)
    front = spec.win_len // 2
    return Waveform(out[front:front + length], spec.sample_rate)


def log_magnitude(spec: ComplexSpectrogram) -> np.ndarray:
    """ln(1 + |X|), shape (T, F)."""
    return np.log1p(np.abs(spec.frames))


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def fit_length(noise: np.ndarray, n: int) -> np.ndarray:
    """Loop or crop ``noise`` to exactly ``n`` samples."""
    if noise.size == 0:
        raise ValueError("empty noise signal")
    reps = -(-n // noise.size)
    return np.tile(noise, reps)[:n]


def scale_noise(clean: Waveform, noise: Waveform, snr_db: float) -> np.ndarray:
    """Noise looped/cropped to the clean length and scaled to the requested SNR."""
    n = fit_length(noise.samples, len(clean))
    rc, rn = rms(clean.samples), rms(n)
    if rc == 0.0:
        raise ValueError("clean signal is silent; SNR undefined")
    if rn == 0.0:
        raise ValueError("noise signal is silent; SNR undefined")
    return n * (rc / (rn * 10.0 ** (snr_db / 20.0)))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    return Waveform(clean.samples + scale_noise(clean, noise, snr_db), clean.sample_rate)


def snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    return 20.0 * np.log10(rms(signal) / rms(noise))


def frame_energy(feats: np.ndarray) -> tuple:
    """Per-frame energy (mean over frequency) and the utterance mean of those energies."""
    feats = np.asarray(feats)
    e = feats.mean(axis=-1)
    return e, float(e.mean())


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int = FFT_SIZE, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters on the mel scale, shape (fft_size//2 + 1, n_mels)."""
    n_bins = fft_size // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_bins, n_mels))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[:, m] = np.maximum(0.0, np.minimum(up, down))
    return fb
