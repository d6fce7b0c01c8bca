"""Objective metrics, CTC decoding, phone error rates and phoneme-energy analysis."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from ._kernels import edit_alignment
from .dsp import Waveform

SI_SNR_CAP = 80.0
ENERGY_FLOOR = 1e-10
BLANK = 0


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def si_snr(estimate, reference) -> float:
    """Scale-invariant SNR in dB, capped at +80 dB.

    Both signals are made zero-mean; the estimate is projected onto the
    reference and energies are floored at 1e-10.
    """
    est, ref = _samples(estimate), _samples(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy <= ENERGY_FLOOR:
        raise ValueError("reference signal is silent")
    target = np.dot(est, ref) / ref_energy * ref
    noise = est - target
    ratio = max(float(np.dot(target, target)), ENERGY_FLOOR) / max(float(np.dot(noise, noise)), ENERGY_FLOOR)
    return min(10.0 * np.log10(ratio), SI_SNR_CAP)


def log_spectral_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Per-frame RMS of bin differences, averaged over frames."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2, axis=-1)).mean())


def greedy_ctc_decode(posteriors: np.ndarray, blank: int = BLANK) -> list:
    """Frame argmax, merge repeats, drop blanks."""
    best = np.asarray(posteriors).argmax(axis=-1)
    out = []
    prev = None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    h, r = _ids(hyp, ref)
    return int(edit_alignment(h, r)[0])


def _ids(hyp, ref):
    """Map arbitrary hashable tokens to int64 ids for the kernel."""
    table = {}
    h = np.array([table.setdefault(x, len(table)) for x in hyp], dtype=np.int64)
    r = np.array([table.setdefault(x, len(table)) for x in ref], dtype=np.int64)
    return h, r


def phone_error_rate(hyp: Sequence, ref: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("reference sequence is empty")
    h, r = _ids(hyp, ref)
    return edit_alignment(h, r)[0] / len(ref)


def corpus_error_rate(hyps: Iterable[Sequence], refs: Iterable[Sequence]) -> float:
    """Total edits over total reference length."""
    errs = total = 0
    for hyp, ref in zip(hyps, refs):
        h, r = _ids(hyp, ref)
        errs += edit_alignment(h, r)[0]
        total += len(ref)
    if total == 0:
        raise ValueError("references are empty")
    return errs / total


@dataclass
class PrecisionCounts:
    emitted: dict = field(default_factory=lambda: defaultdict(int))
    correct: dict = field(default_factory=lambda: defaultdict(int))

    def precision(self, inventory: Iterable) -> dict:
        """phoneme -> precision; phonemes never emitted map to None."""
        return {p: (self.correct[p] / self.emitted[p] if self.emitted[p] else None) for p in inventory}


def precision_counts(hyps: Iterable[Sequence], refs: Iterable[Sequence]) -> PrecisionCounts:
    """Count emissions and correct emissions under a minimum-edit alignment.

    A hypothesis token is correct when the alignment pairs it with an equal
    reference token (ties in the alignment prefer substitutions).
    """
    counts = PrecisionCounts()
    for hyp, ref in zip(hyps, refs):
        h, r = _ids(hyp, ref)
        _, link = edit_alignment(h, r)
        for i, tok in enumerate(hyp):
            counts.emitted[tok] += 1
            j = link[i]
            if j >= 0 and ref[j] == tok:
                counts.correct[tok] += 1
    return counts


def phoneme_precision(hyps, refs, inventory) -> dict:
    return precision_counts(hyps, refs).precision(inventory)


def avg_phoneme_energy(frame_energies: Iterable[np.ndarray], alignments: Iterable[Sequence]) -> dict:
    """Mean frame energy per aligned label over a corpus.

    ``alignments`` gives one label per frame (None for unlabeled frames).
    """
    sums = defaultdict(float)
    counts = defaultdict(int)
    seen = False
    for energies, labels in zip(frame_energies, alignments):
        if labels is None:
            raise ValueError("utterance without frame alignment")
        energies = np.asarray(energies)
        if len(labels) != len(energies):
            raise ValueError(f"alignment has {len(labels)} labels for {len(energies)} frames")
        seen = True
        for e, lab in zip(energies.tolist(), labels):
            if lab is None:
                continue
            sums[lab] += e
            counts[lab] += 1
    if not seen:
        raise ValueError("corpus has no aligned utterances")
    return {lab: sums[lab] / counts[lab] for lab in sorted(sums)}


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length series of at least 2 values")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.dot(dx, dx)), np.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise ValueError("pearson undefined for a constant series")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


def precision_improvement(with_loss: Mapping, without_loss: Mapping) -> dict:
    """precision(with) - precision(without), skipping phonemes undefined in either."""
    return {p: with_loss[p] - without_loss[p] for p in with_loss
            if with_loss.get(p) is not None and without_loss.get(p) is not None}


@dataclass
class PhonemeAnalysis:
    rows: list            # (phoneme, avg energy, precision improvement)
    pearson_all: Optional[float]
    pearson_subsets: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phoneme", "avg_energy", "precision_improvement"])
        for p, e, d in self.rows:
            w.writerow([p, f"{e:.6f}", f"{d:.6f}"])
        return buf.getvalue()


def energy_precision_analysis(energy: Mapping, improvement: Mapping,
                              subsets: Optional[Mapping[str, Iterable]] = None) -> PhonemeAnalysis:
    keys = [p for p in sorted(improvement) if p in energy]
    rows = [(p, energy[p], improvement[p]) for p in keys]

    def corr(ps):
        ps = [p for p in ps if p in improvement and p in energy]
        try:
            return pearson([energy[p] for p in ps], [improvement[p] for p in ps])
        except ValueError:
            return None
    out = PhonemeAnalysis(rows, corr(keys))
    for name, members in (subsets or {}).items():
        out.pearson_subsets[name] = corr(list(members))
    return out


SNR_BUCKETS = ((0, 3), (5, 8), (10, 13), (15, 18))


def snr_bucket(snr: float) -> str:
    for lo, hi in SNR_BUCKETS:
        if lo <= snr <= hi:
            return f"{lo}-{hi} dB"
    return "other"


@dataclass
class UtteranceScore:
    utt_id: str
    snr_db: float
    si_snr: float
    lsd: float
    per: Optional[float] = None
    ref_len: int = 0
    edits: int = 0


@dataclass
class EvalReport:
    system: str
    rows: list = field(default_factory=list)

    def add(self, row: UtteranceScore) -> None:
        self.rows.append(row)

    def aggregate(self, rows: Optional[list] = None) -> dict:
        rows = self.rows if rows is None else rows
        if not rows:
            return {"n": 0}
        out = {"n": len(rows),
               "si_snr": float(np.mean([r.si_snr for r in rows])),
               "lsd": float(np.mean([r.lsd for r in rows]))}
        scored = [r for r in rows if r.per is not None]
        if scored:
            out["per"] = sum(r.edits for r in scored) / max(sum(r.ref_len for r in scored), 1)
        return out

    def by_snr(self) -> dict:
        groups = defaultdict(list)
        for r in self.rows:
            groups[snr_bucket(r.snr_db)].append(r)
        return {k: self.aggregate(v) for k, v in sorted(groups.items())}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["system", "utt_id", "snr_db", "si_snr", "lsd", "per"])
        for r in self.rows:
            w.writerow([self.system, r.utt_id, f"{r.snr_db:g}", f"{r.si_snr:.4f}", f"{r.lsd:.6f}",
                        "" if r.per is None else f"{r.per:.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        agg = self.aggregate()
        lines = [f"system {self.system}: n={agg.get('n', 0)} si_snr={agg.get('si_snr', float('nan')):.3f} dB "
                 f"lsd={agg.get('lsd', float('nan')):.4f}" + (f" per={agg['per']:.4f}" if "per" in agg else "")]
        for bucket, a in self.by_snr().items():
            lines.append(f"  {bucket}: n={a['n']} si_snr={a['si_snr']:.3f} lsd={a['lsd']:.4f}"
                         + (f" per={a['per']:.4f}" if "per" in a else ""))
        return "\n".join(lines)
