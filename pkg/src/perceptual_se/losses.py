"""Training objectives.

All reductions are means over elements (or frames / tokens), so the
perceptual term can be balanced against the spectral term with a single
scale ``alpha``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.tensor import ShapeError
from ._kernels import CTCLengthError

BLANK = 0
PROB_FLOOR = 1e-10


@dataclass
class LossConfig:
    spectral_norm: str = "L1"
    perceptual_norm: str = "L1"
    alpha: float = 1.0
    tap: str = "layer6"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        for norm in (self.spectral_norm, self.perceptual_norm):
            if norm not in ("L1", "L2"):
                raise ValueError(f"norm must be L1 or L2, got {norm!r}")


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _distance(diff: Tensor, norm: str, weight: Optional[np.ndarray]) -> Tensor:
    per = ops.abs(diff) if norm == "L1" else ops.square(diff)
    if weight is None:
        return ops.mean(per)
    w = np.broadcast_to(weight, diff.shape).astype(diff.dtype)
    return ops.sum(per * w) / float(w.sum())


def spectral_loss(pred, target, norm: str = "L1", weight: Optional[np.ndarray] = None) -> Tensor:
    """Mean |pred - target| (L1) or mean (pred - target)^2 (L2).

    ``weight`` (broadcastable, e.g. a frame validity mask) turns the mean
    into a weighted mean over the entries it selects.
    """
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeError("spectral_loss", f"pred {pred.shape} vs target {target.shape}")
    return _distance(pred - target, norm, weight)


def perceptual_loss(clean_acts, denoised_acts, config: LossConfig,
                    weight: Optional[np.ndarray] = None) -> Tensor:
    """alpha * mean distance between tap activations.

    The clean branch is treated as a constant target: no gradient flows
    into it, only into the denoised activations.
    """
    clean = clean_acts.detach() if isinstance(clean_acts, Tensor) else _as_tensor(clean_acts)
    den = _as_tensor(denoised_acts, clean)
    if clean.shape != den.shape:
        raise ShapeError("perceptual_loss", f"tap shapes differ: {clean.shape} vs {den.shape}")
    return _distance(den - clean, config.perceptual_norm, weight) * config.alpha


def enhancement_loss(pred, target, clean_acts, denoised_acts, config: LossConfig,
                     weight: Optional[np.ndarray] = None, act_weight: Optional[np.ndarray] = None) -> tuple:
    """(total, spectral, perceptual) with total = spectral + alpha * perceptual distance."""
    spec = spectral_loss(pred, target, config.spectral_norm, weight)
    if config.alpha == 0 or denoised_acts is None:
        return spec, spec, None
    perc = perceptual_loss(clean_acts, denoised_acts, config, act_weight)
    return spec + perc, spec, perc


def ctc_loss(log_posteriors, target: Sequence[int], lengths=None, blank: int = BLANK) -> Tensor:
    """CTC negative log-likelihood.

    Accepts one utterance (T, N) with one target, or a batch (B, T, N) with
    a list of targets (batch mean).  Raises CTCLengthError when a target
    cannot be emitted within its frames.
    """
    lp = _as_tensor(log_posteriors)
    if lp.ndim == 2:
        return ops.ctc_loss(ops.reshape(lp, (1,) + lp.shape), [list(target)], None, blank)
    return ops.ctc_loss(lp, target, lengths, blank)


def alignment_indicator(energy: float, mean_energy: float, n: int, blank: int = BLANK) -> int:
    """1 for blank on low-energy frames and non-blank on the others.

    A frame with energy exactly equal to the mean counts as non-silence.
    """
    silent = energy < mean_energy
    return int(silent == (n == blank))


def alignment_indicators(energies: np.ndarray, mean_energy, n_classes: int, blank: int = BLANK) -> np.ndarray:
    """(…, T, N) 0/1 matrix of the indicator over all frames and symbols."""
    energies = np.asarray(energies)
    silent = energies < np.asarray(mean_energy)[..., None] if np.ndim(mean_energy) else energies < mean_energy
    is_blank = np.arange(n_classes) == blank
    return (silent[..., None] == is_blank).astype(np.float64)


def alignment_loss(posteriors, energies, mean_energy, blank: int = BLANK,
                   mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over frames of -log(sum_n I(t, n) P_n(t)), probabilities floored at 1e-10.

    ``posteriors`` is (T, N) or (B, T, N) probabilities; ``mean_energy`` is a
    scalar or one value per utterance; ``mask`` selects valid frames.
    """
    post = _as_tensor(posteriors)
    ind = alignment_indicators(energies, mean_energy, post.shape[-1], blank).astype(post.dtype)
    if ind.shape != post.shape:
        raise ShapeError("alignment_loss", f"energies {np.shape(energies)} vs posteriors {post.shape}")
    picked = ops.sum(post * ind, axis=-1)
    lo = ops.log(ops.clamp(picked, PROB_FLOOR, np.inf))
    if mask is None:
        return -ops.mean(lo)
    m = np.asarray(mask, dtype=post.dtype)
    return -ops.sum(lo * m) / float(m.sum())


def nll_loss(log_probs, targets, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean -log P(target_i) over (valid) positions.

    log_probs: (L, V) or (B, L, V); targets: matching integer array.
    """
    lp = _as_tensor(log_probs)
    tg = np.asarray(targets, dtype=np.int64)
    if lp.shape[:-1] != tg.shape:
        raise ShapeError("nll_loss", f"log-probs {lp.shape} vs targets {tg.shape}")
    v = lp.shape[-1]
    if tg.size and (tg.min() < 0 or tg.max() >= v):
        raise ValueError(f"target token out of range 0..{v - 1}")
    onehot = (tg[..., None] == np.arange(v)).astype(lp.dtype)
    picked = ops.sum(lp * onehot, axis=-1)
    if mask is None:
        return -ops.mean(picked)
    m = np.asarray(mask, dtype=lp.dtype)
    return -ops.sum(picked * m) / float(m.sum())


__all__ = ["BLANK", "CTCLengthError", "LossConfig", "alignment_indicator", "alignment_indicators",
           "alignment_loss", "ctc_loss", "enhancement_loss", "nll_loss", "perceptual_loss", "spectral_loss"]
