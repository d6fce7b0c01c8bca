"""Synthetic phoneme corpus: generation, manifest I/O and feature access.

Clean utterances are sequences of synthetic units separated by silence.
Analysis frames are centred on multiples of the hop, and each frame "owns"
the hop around its centre (samples [t*hop - hop/2, t*hop + hop/2)), so
frame-level alignments are exact by construction and an utterance of K
frames has (K - 1) * hop samples.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import dsp
from .audio import read_wav, write_wav
from .dsp import HOP, SAMPLE_RATE, Waveform

SILENCE = "sil"
SPLITS = ("train", "dev", "test", "test-unseen-noise")
SNR_LEVELS = (0.0, 5.0, 10.0, 15.0)
BASE_RMS = 0.25
FADE = 64
MANIFEST_FIELDS = ("utt_id", "split", "clean_path", "noisy_path", "noise_id", "snr_db",
                   "n_frames", "targets", "alignment")


@dataclass(frozen=True)
class SyntheticPhonemeSpec:
    pid: int
    name: str
    kind: str                  # "harmonic" (voiced, formant-shaped) or "noise" (fricative-like)
    bands: tuple               # ((center_hz, bandwidth_hz), ...)
    level_db: float            # intrinsic level relative to BASE_RMS
    min_frames: int = 4
    max_frames: int = 9

    def __post_init__(self):
        nyq = SAMPLE_RATE / 2
        if any(c >= nyq or c <= 0 for c, _ in self.bands):
            raise ValueError(f"{self.name}: band centres must lie in (0, {nyq}) Hz")
        if self.min_frames < 1 or self.max_frames < self.min_frames:
            raise ValueError(f"{self.name}: bad duration range")


def default_inventory() -> list:
    """Eight units spanning 26 dB: loud vowel-like to quiet fricative-like."""
    return [
        SyntheticPhonemeSpec(1, "aa", "harmonic", ((750, 150), (1250, 200)), 0.0),
        SyntheticPhonemeSpec(2, "iy", "harmonic", ((300, 90), (2300, 250)), -2.0),
        SyntheticPhonemeSpec(3, "uw", "harmonic", ((350, 90), (850, 150)), -4.0),
        SyntheticPhonemeSpec(4, "m", "harmonic", ((250, 80), (1700, 300)), -9.0),
        SyntheticPhonemeSpec(5, "sh", "noise", ((2700, 500),), -16.0),
        SyntheticPhonemeSpec(6, "v", "harmonic", ((180, 60), (3800, 700)), -20.0),
        SyntheticPhonemeSpec(7, "s", "noise", ((6200, 900),), -22.0),
        SyntheticPhonemeSpec(8, "f", "noise", ((4500, 1800),), -26.0),
    ]


@dataclass(frozen=True)
class NoiseFamily:
    name: str
    bands: tuple               # ((center_hz, bandwidth_hz, weight), ...); empty means pink
    modulation_hz: float = 0.0


def default_noise_families() -> dict:
    return {
        "lowband": NoiseFamily("lowband", ((400, 350, 1.0),), 2.0),
        "midband": NoiseFamily("midband", ((1800, 700, 1.0),), 0.0),
        "highband": NoiseFamily("highband", ((5000, 1500, 1.0),), 3.0),
        # held out for the unseen-noise test split
        "multiband": NoiseFamily("multiband", ((1100, 250, 1.0), (3200, 400, 0.8), (6800, 500, 0.6)), 1.5),
        # used only for fine-tuning augmentation
        "pink": NoiseFamily("pink", (), 0.0),
    }


SEEN_NOISES = ("lowband", "midband", "highband")
UNSEEN_NOISE = "multiband"
AUGMENT_NOISE = "pink"


def _band_gain(freqs: np.ndarray, bands) -> np.ndarray:
    g = np.zeros_like(freqs)
    for band in bands:
        c, bw = band[0], band[1]
        w = band[2] if len(band) > 2 else 1.0
        g += w * np.exp(-0.5 * ((freqs - c) / bw) ** 2)
    return g


def shaped_noise(rng: np.random.Generator, n: int, bands, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """White noise shaped by Gaussian bands (or 1/f when ``bands`` is empty), unit RMS."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    if bands:
        gain = _band_gain(freqs, bands)
    else:
        gain = 1.0 / np.sqrt(np.maximum(freqs, 50.0))
    x = np.fft.irfft(spec * gain, n=n)
    return x / max(dsp.rms(x), 1e-12)


def make_noise(family: NoiseFamily, rng: np.random.Generator, n: int) -> np.ndarray:
    x = shaped_noise(rng, n, family.bands)
    if family.modulation_hz > 0:
        t = np.arange(n) / SAMPLE_RATE
        x = x * (1.0 + 0.5 * np.sin(2 * np.pi * family.modulation_hz * t + rng.uniform(0, 2 * np.pi)))
    return x / dsp.rms(x)


def synth_unit(spec: SyntheticPhonemeSpec, n: int, f0: float, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "harmonic":
        t = np.arange(n) / SAMPLE_RATE
        harmonics = np.arange(1, int((SAMPLE_RATE / 2 - 200) // f0) + 1) * f0
        amps = _band_gain(harmonics, spec.bands)
        keep = amps > 1e-3
        phases = rng.uniform(0, 2 * np.pi, size=keep.sum())
        x = (amps[keep, None] * np.sin(2 * np.pi * harmonics[keep, None] * t + phases[:, None])).sum(axis=0)
        x += 0.05 * shaped_noise(rng, n, spec.bands)
    else:
        x = shaped_noise(rng, n, spec.bands)
    x = x / max(dsp.rms(x), 1e-12) * BASE_RMS * 10.0 ** (spec.level_db / 20.0)
    fade = min(FADE, n // 2)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
    x[:fade] *= ramp
    x[n - fade:] *= ramp[::-1]
    return x


@dataclass
class UtteranceRecord:
    utt_id: str
    split: str
    clean_path: str
    noisy_path: str
    noise_id: str
    snr_db: float
    n_frames: int
    targets: list              # unit names
    alignment: list            # one label per frame (SILENCE or unit name)

    def alignment_rle(self) -> str:
        return encode_rle(self.alignment)


def encode_rle(labels: Sequence[str]) -> str:
    out = []
    for lab in labels:
        if out and out[-1][0] == lab:
            out[-1][1] += 1
        else:
            out.append([lab, 1])
    return " ".join(f"{lab}:{n}" for lab, n in out)


def decode_rle(text: str) -> list:
    labels = []
    for item in text.split():
        lab, n = item.rsplit(":", 1)
        labels.extend([lab] * int(n))
    return labels


@dataclass
class CorpusSpec:
    seed: int = 0
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    n_unseen: int = 200
    min_seconds: float = 1.0
    max_seconds: float = 3.0
    inventory: list = field(default_factory=default_inventory)
    noises: dict = field(default_factory=default_noise_families)

    def validate(self) -> None:
        if min(self.n_train, self.n_dev, self.n_test, self.n_unseen) < 0:
            raise ValueError("split sizes must be non-negative")
        if not 0.5 <= self.min_seconds <= self.max_seconds:
            raise ValueError(f"need 0.5 <= min_seconds <= max_seconds, got {self.min_seconds}, {self.max_seconds}")
        if len(self.inventory) < 6:
            raise ValueError("inventory needs at least 6 units")
        levels = [p.level_db for p in self.inventory]
        if max(levels) - min(levels) < 20.0:
            raise ValueError("inventory must span at least 20 dB of intrinsic level")
        if UNSEEN_NOISE not in self.noises or not set(SEEN_NOISES) <= set(self.noises):
            raise ValueError("need the seen noise families plus a held-out family")


def _plan_labels(rng: np.random.Generator, n_frames: int, inventory) -> list:
    labels = [SILENCE] * int(rng.integers(2, 6))
    while True:
        unit = inventory[int(rng.integers(len(inventory)))]
        dur = int(rng.integers(unit.min_frames, unit.max_frames + 1))
        gap = int(rng.integers(0, 4))
        if labels[-1] == unit.name:
            # keep repeated units distinct rather than merging into one run
            labels.append(SILENCE)
        if len(labels) + dur + 2 > n_frames:
            break
        labels.extend([unit.name] * dur)
        labels.extend([SILENCE] * min(gap, n_frames - len(labels)))
    labels = labels[:n_frames]
    labels.extend([SILENCE] * (n_frames - len(labels)))
    return labels


def synth_clean(rng: np.random.Generator, labels: Sequence[str], inventory) -> np.ndarray:
    by_name = {p.name: p for p in inventory}
    n_frames = len(labels)
    x = np.zeros((n_frames - 1) * HOP)
    f0 = rng.uniform(100.0, 200.0)
    t = 0
    while t < n_frames:
        lab = labels[t]
        end = t
        while end < n_frames and labels[end] == lab:
            end += 1
        if lab != SILENCE:
            # consecutive identical labels in the plan belong to one unit
            start = max(t * HOP - HOP // 2, 0)
            stop = min(end * HOP - HOP // 2, x.size)
            x[start:stop] += synth_unit(by_name[lab], stop - start, f0 * rng.uniform(0.95, 1.05), rng)
        t = end
    return x


def targets_from_labels(labels: Sequence[str]) -> list:
    out = []
    prev = None
    for lab in labels:
        if lab != prev and lab != SILENCE:
            out.append(lab)
        prev = lab
    return out


def _split_plan(spec: CorpusSpec) -> list:
    plan = []
    for split, n in zip(SPLITS, (spec.n_train, spec.n_dev, spec.n_test, spec.n_unseen)):
        plan.extend((split, i) for i in range(n))
    return plan


def generate_utterance(spec: CorpusSpec, split: str, index: int) -> tuple:
    """Deterministic (clean, noisy, record-fields) for one utterance id."""
    split_id = SPLITS.index(split)
    rng = np.random.default_rng([spec.seed, split_id, index])
    seconds = rng.uniform(spec.min_seconds, spec.max_seconds)
    n_frames = int(round(seconds * SAMPLE_RATE / HOP)) + 1
    labels = _plan_labels(rng, n_frames, spec.inventory)
    clean = synth_clean(rng, labels, spec.inventory)
    if split == "test-unseen-noise":
        family = UNSEEN_NOISE
    else:
        family = SEEN_NOISES[int(rng.integers(len(SEEN_NOISES)))]
    snr = float(SNR_LEVELS[int(rng.integers(len(SNR_LEVELS)))])
    noise = make_noise(spec.noises[family], rng, clean.size)
    noisy = clean + dsp.scale_noise(Waveform(clean), Waveform(noise), snr)
    peak = max(np.abs(noisy).max(), np.abs(clean).max())
    if peak > 0.95:
        scale = 0.95 / peak
        clean, noisy = clean * scale, noisy * scale
    utt_id = f"{split}-{index:05d}"
    return clean, noisy, dict(utt_id=utt_id, split=split, noise_id=f"{family}-{index:05d}", snr_db=snr,
                              n_frames=n_frames, targets=targets_from_labels(labels), alignment=labels)


def generate_corpus(spec: CorpusSpec, out_dir) -> "Manifest":
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"corpus directory {out} is not writable")
    records = []
    for split, index in _split_plan(spec):
        clean, noisy, fields = generate_utterance(spec, split, index)
        clean_rel = f"wav/{fields['utt_id']}_clean.wav"
        noisy_rel = f"wav/{fields['utt_id']}_noisy.wav"
        write_wav(Waveform(clean), out / clean_rel)
        write_wav(Waveform(noisy), out / noisy_rel)
        records.append(UtteranceRecord(clean_path=clean_rel, noisy_path=noisy_rel, **fields))
    manifest = Manifest(records, out, spec.inventory)
    manifest.save(out / "manifest.csv")
    write_inventory(spec.inventory, out / "inventory.csv")
    return manifest


def write_inventory(inventory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pid", "name", "kind", "bands", "level_db", "min_frames", "max_frames"])
        for p in inventory:
            bands = ";".join(f"{c:g}/{bw:g}" for c, bw in p.bands)
            w.writerow([p.pid, p.name, p.kind, bands, f"{p.level_db:g}", p.min_frames, p.max_frames])


def read_inventory(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            bands = tuple(tuple(float(v) for v in b.split("/")) for b in row["bands"].split(";"))
            out.append(SyntheticPhonemeSpec(int(row["pid"]), row["name"], row["kind"], bands,
                                            float(row["level_db"]), int(row["min_frames"]), int(row["max_frames"])))
    return out


class ManifestError(ValueError):
    pass


class Manifest:
    def __init__(self, records: list, root, inventory: list):
        self.records = list(records)
        self.root = Path(root)
        self.inventory = list(inventory)

    @property
    def symbols(self) -> list:
        return [p.name for p in self.inventory]

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_FIELDS)
            for r in self.records:
                w.writerow([r.utt_id, r.split, r.clean_path, r.noisy_path, r.noise_id, f"{r.snr_db:g}",
                            r.n_frames, " ".join(r.targets), r.alignment_rle()])

    @classmethod
    def load(cls, path, validate: bool = True) -> "Manifest":
        path = Path(path)
        root = path.parent
        records = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
                raise ManifestError(f"{path}: header {reader.fieldnames} != {list(MANIFEST_FIELDS)}")
            for row in reader:
                records.append(UtteranceRecord(
                    row["utt_id"], row["split"], row["clean_path"], row["noisy_path"], row["noise_id"],
                    float(row["snr_db"]), int(row["n_frames"]), row["targets"].split(),
                    decode_rle(row["alignment"])))
        inventory = read_inventory(root / "inventory.csv")
        manifest = cls(records, root, inventory)
        if validate:
            manifest.validate()
        return manifest

    def validate(self) -> None:
        """Referential integrity: paths exist, alignments match frame counts, labels known."""
        names = set(self.symbols) | {SILENCE}
        seen = set()
        for r in self.records:
            if r.utt_id in seen:
                raise ManifestError(f"duplicate utterance id {r.utt_id}")
            seen.add(r.utt_id)
            if r.split not in SPLITS:
                raise ManifestError(f"{r.utt_id}: unknown split {r.split!r}")
            for p in (r.clean_path, r.noisy_path):
                if not (self.root / p).is_file():
                    raise ManifestError(f"{r.utt_id}: missing audio {p}")
            if len(r.alignment) != r.n_frames:
                raise ManifestError(f"{r.utt_id}: alignment has {len(r.alignment)} frames, expected {r.n_frames}")
            unknown = (set(r.alignment) | set(r.targets)) - names
            if unknown:
                raise ManifestError(f"{r.utt_id}: unknown labels {sorted(unknown)}")


@dataclass
class Utterance:
    """Cached features of one manifest record; audio is re-read on demand."""
    record: UtteranceRecord
    root: Path
    clean_feats: np.ndarray        # (T, F) float32 log-magnitude
    noisy_mag: np.ndarray          # (T, F) float32 magnitude
    target_ids: list               # 1-based symbol ids

    @property
    def noisy_feats(self) -> np.ndarray:
        return np.log1p(self.noisy_mag)

    @property
    def n_frames(self) -> int:
        return self.clean_feats.shape[0]

    def clean(self) -> Waveform:
        return read_wav(self.root / self.record.clean_path)

    def noisy(self) -> Waveform:
        return read_wav(self.root / self.record.noisy_path)

    def noisy_spec(self) -> dsp.ComplexSpectrogram:
        return dsp.stft(self.noisy())


class Corpus:
    """Feature access with an in-memory cache keyed by utterance id."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self.symbol_ids = {name: i + 1 for i, name in enumerate(manifest.symbols)}
        self._cache = {}

    @classmethod
    def load(cls, path) -> "Corpus":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.csv"
        return cls(Manifest.load(path))

    @property
    def n_symbols(self) -> int:
        return len(self.symbol_ids)

    def records(self, split: str) -> list:
        return self.manifest.split(split)

    def encode(self, labels: Iterable[str]) -> list:
        return [self.symbol_ids[lab] for lab in labels]

    def get(self, record: UtteranceRecord) -> Utterance:
        utt = self._cache.get(record.utt_id)
        if utt is None:
            root = self.manifest.root
            clean_feats = dsp.log_magnitude(dsp.stft(read_wav(root / record.clean_path))).astype(np.float32)
            noisy_mag = np.abs(dsp.stft(read_wav(root / record.noisy_path)).frames).astype(np.float32)
            if clean_feats.shape[0] != record.n_frames:
                raise ManifestError(f"{record.utt_id}: {clean_feats.shape[0]} frames, manifest says {record.n_frames}")
            utt = Utterance(record, root, clean_feats, noisy_mag, self.encode(record.targets))
            self._cache[record.utt_id] = utt
        return utt

    def utterances(self, split: str, limit: Optional[int] = None) -> list:
        recs = self.records(split)
        if limit is not None:
            recs = recs[:limit]
        return [self.get(r) for r in recs]
