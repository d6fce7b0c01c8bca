"""Training loops: perceptual-model pretraining, enhancement with a perceptual
loss, and recognizer fine-tuning (joint or with a frozen enhancer).

All randomness derives from ``TrainPlan.seed`` through per-purpose
generators, so a (seed, config, corpus) triple fixes the whole trajectory.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import dsp
from .autodiff import Tensor, backward, no_grad, ops
from .autodiff.tensor import ShapeError
from .blocks import DecoderNet, EnhancerNet, PerceptualEncoder, masked_features
from .checkpoint import Checkpoint, save_checkpoint
from .corpus import Corpus, NoiseFamily, Utterance, make_noise
from .evaluation import corpus_error_rate, greedy_ctc_decode
from .losses import BLANK, LossConfig, alignment_loss, enhancement_loss, nll_loss

# generator tags keep the random streams of different purposes independent
_SHUFFLE, _CROP, _NOISE, _SNR = 1, 2, 3, 4


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


@dataclass
class TrainPlan:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    lr_decay_factor: float = 0.7
    decay_interval_epochs: int = 3
    freeze_epochs: int = 3
    joint: bool = False
    augment_snr_range: tuple = (0.0, 15.0)
    seed: int = 0
    batches_per_epoch: Optional[int] = None   # None: one pass over the training split
    crop_frames: Optional[int] = None         # enhancement only; None: whole utterances

    def __post_init__(self):
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")
        lo, hi = self.augment_snr_range
        if lo > hi:
            raise ValueError(f"augment range low {lo} > high {hi}")
        if self.epochs < 1 or self.batch_size < 1 or self.decay_interval_epochs < 1:
            raise ValueError("epochs, batch_size and decay_interval_epochs must be >= 1")
        if self.freeze_epochs < 0:
            raise ValueError("freeze_epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: decayed once per completed interval."""
        return self.lr * self.lr_decay_factor ** ((epoch - 1) // self.decay_interval_epochs)


# ---------------------------------------------------------------- optimizer

class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass
class AdamState:
    m: dict = field(default_factory=OrderedDict)
    v: dict = field(default_factory=OrderedDict)
    t: dict = field(default_factory=OrderedDict)


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
                   lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Adam update of ``params`` in place.

    Each parameter keeps its own step count, so a group that is thawed late
    starts with fresh bias correction.  All gradients are validated before
    any parameter moves.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError("optimizer_step", f"{name}: grad {g.shape} vs param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        t = state.t.get(name, 0) + 1
        state.t[name] = t
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        step = (lr / (1.0 - beta1 ** t)) * m / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)
        p.data = (p.data - step).astype(p.data.dtype)


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for name, g in grads.items():
        sq = float(np.sum(np.square(g, dtype=np.float64)))
        if not math.isfinite(sq):
            raise NonFiniteGradientError(name)
        total += sq
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = OrderedDict((k, g * scale) for k, g in grads.items())
    return grads, norm


class Optimizer:
    """Adam with global-norm clipping over whichever parameters currently require grad."""

    def __init__(self, named_params: Sequence[tuple], plan: TrainPlan):
        self.params = OrderedDict(named_params)
        self.plan = plan
        self.state = AdamState()

    def step(self, lr: float) -> float:
        grads = OrderedDict((n, p.grad) for n, p in self.params.items() if p.requires_grad and p.grad is not None)
        grads, norm = clip_grad_norm(grads, self.plan.clip_norm)
        optimizer_step(self.params, grads, self.state, lr, self.plan.beta1, self.plan.beta2, self.plan.eps)
        self.zero_grad()
        return norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def named(prefix: str, module) -> list:
    return [(f"{prefix}.{n}", p) for n, p in module.named_parameters()]


# ---------------------------------------------------------------- metrics log

class MetricsLog:
    """Line-delimited JSON metrics; no timestamps so identical runs give identical files."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.rows = []

    def write(self, **fields) -> None:
        row = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in fields.items()}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


class TrainingDivergedError(FloatingPointError):
    pass


def _check_finite(loss: float, what: str, epoch: int, batch: int, diag: Optional[Callable]) -> None:
    if math.isfinite(loss):
        return
    where = ""
    if diag is not None:
        where = f"; diagnostic checkpoint at {diag(epoch)}"
    raise TrainingDivergedError(f"{what} loss became {loss} at epoch {epoch}, batch {batch}{where}")


# ---------------------------------------------------------------- batching

def epoch_batches(n_items: int, batch_size: int, rng: np.random.Generator, limit: Optional[int] = None) -> list:
    order = rng.permutation(n_items)
    batches = [order[i:i + batch_size] for i in range(0, n_items, batch_size)]
    return batches[:limit] if limit else batches


def pad_batch(arrays: Sequence[np.ndarray], length: Optional[int] = None) -> tuple:
    """Zero-pad along the first axis: (B, T, ...) array and the true lengths."""
    lengths = [a.shape[0] for a in arrays]
    t = length or max(lengths)
    out = np.zeros((len(arrays), t) + arrays[0].shape[1:], dtype=arrays[0].dtype)
    for i, a in enumerate(arrays):
        out[i, :a.shape[0]] = a
    return out, lengths


def length_mask(lengths: Sequence[int], t: int, dtype=np.float32) -> np.ndarray:
    return (np.arange(t)[None, :] < np.asarray(lengths)[:, None]).astype(dtype)


def pooled_lengths(lengths: Sequence[int], pool: int) -> list:
    return [-(-n // pool) for n in lengths]


def pool_mean(x: np.ndarray, pool: int) -> np.ndarray:
    """Mean over consecutive groups of ``pool`` frames along axis 1 (ragged tail averaged alone)."""
    if pool == 1:
        return x
    b, t = x.shape[:2]
    out = np.zeros((b, -(-t // pool)) + x.shape[2:], dtype=x.dtype)
    for k in range(out.shape[1]):
        out[:, k] = x[:, k * pool:(k + 1) * pool].mean(axis=1)
    return out


# ---------------------------------------------------------------- targets

@dataclass
class TargetCoder:
    """Maps phoneme sequences to recognizer targets (1-based ids; 0 is blank / end-of-sequence)."""
    kind: str
    vocab: list
    pool_frames: int = 1

    @property
    def n_symbols(self) -> int:
        return len(self.vocab)

    def units(self, phonemes: Sequence[str]) -> list:
        if self.kind == "phonemes":
            return list(phonemes)
        if self.kind == "characters":
            return [c for p in phonemes for c in p]
        pieces = [phonemes[i] + "+" + phonemes[i + 1] for i in range(0, len(phonemes) - 1, 2)]
        if len(phonemes) % 2:
            pieces.append(phonemes[-1])
        return pieces

    def encode(self, phonemes: Sequence[str]) -> list:
        index = {u: i + 1 for i, u in enumerate(self.vocab)}
        return [index[u] for u in self.units(phonemes)]

    def decode(self, ids: Sequence[int]) -> list:
        return [self.vocab[i - 1] for i in ids]


TARGET_KINDS = ("phonemes", "characters", "word-pieces")
WORD_PIECE_POOL = 4


def make_target_coder(kind: str, phonemes: Sequence[str]) -> TargetCoder:
    """Phonemes, letters of the phoneme names, or phoneme pairs (pooled 4 frames per output)."""
    if kind == "phonemes":
        return TargetCoder(kind, list(phonemes))
    if kind == "characters":
        return TargetCoder(kind, sorted({c for p in phonemes for c in p}))
    if kind == "word-pieces":
        vocab = list(phonemes) + [a + "+" + b for a in phonemes for b in phonemes]
        return TargetCoder(kind, vocab, WORD_PIECE_POOL)
    raise ValueError(f"unknown target kind {kind!r}; choose from {TARGET_KINDS}")


# ---------------------------------------------------------------- perceptual model

@dataclass
class LossWeights:
    ctc: float = 1.0
    ctc_after: float = 0.0      # CTC (and alignment) weight once the warm-up epochs are over
    ctc_epochs: int = 5
    align: float = 1.0
    nll: float = 1.0

    def at(self, epoch: int) -> tuple:
        """(ctc weight, alignment weight) for a 1-based epoch."""
        if epoch <= self.ctc_epochs:
            return self.ctc, self.align
        scale = self.ctc_after / self.ctc if self.ctc else 0.0
        return self.ctc_after, self.align * scale


@dataclass
class PerceptualModel:
    encoder: PerceptualEncoder
    decoder: DecoderNet
    coder: TargetCoder


def _decoder_io(target_ids: Sequence[Sequence[int]], bos: int) -> tuple:
    """Teacher-forcing inputs ([BOS] + y), outputs (y + [EOS]) and the token mask."""
    width = max(len(t) for t in target_ids) + 1
    inputs = np.zeros((len(target_ids), width), dtype=np.int64)
    outputs = np.zeros_like(inputs)
    mask = np.zeros(inputs.shape, dtype=np.float32)
    for i, t in enumerate(target_ids):
        inputs[i, 0] = bos
        inputs[i, 1:len(t) + 1] = t
        outputs[i, :len(t)] = t
        mask[i, :len(t) + 1] = 1.0
    return inputs, outputs, mask


def recognizer_losses(model: PerceptualModel, feats: Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]],
                      ctc_weight: float = 1.0, nll_weight: float = 1.0, align_weight: float = 0.0,
                      energies: Optional[np.ndarray] = None) -> dict:
    """Loss terms for one padded batch; ``total`` is their weighted sum.

    ``energies`` (B, T) are per-frame energies of the clean input, required
    when the alignment term is on.  Utterance mean energies use valid frames only.
    """
    out = model.encoder(feats)
    pool = out.pooled
    plen = pooled_lengths(lengths, pool)
    terms = {}
    total = None
    if ctc_weight:
        terms["ctc"] = ops.ctc_loss(out.log_probs, targets, plen, BLANK)
        total = terms["ctc"] * ctc_weight
    if align_weight:
        mask = length_mask(plen, out.log_probs.shape[1], out.log_probs.dtype)
        e = pool_mean(energies, pool)[:, :out.log_probs.shape[1]]
        mean_e = (e * mask).sum(axis=1) / mask.sum(axis=1)
        terms["align"] = alignment_loss(ops.exp(out.log_probs), e, mean_e, BLANK, mask)
        total = terms["align"] * align_weight if total is None else total + terms["align"] * align_weight
    if nll_weight:
        dec = model.decoder
        inputs, outputs, tmask = _decoder_io(targets, dec.bos)
        state = dec.init_state(out.top, plen)
        terms["nll"] = nll_loss(dec.teacher_forced(state, inputs), outputs, tmask)
        total = terms["nll"] * nll_weight if total is None else total + terms["nll"] * nll_weight
    if total is None:
        raise ValueError("all loss weights are zero")
    terms["total"] = total
    terms["log_probs"] = out.log_probs
    return terms


def _frame_energies(feats_list: Sequence[np.ndarray], t: int) -> np.ndarray:
    e = np.zeros((len(feats_list), t), dtype=np.float64)
    for i, f in enumerate(feats_list):
        e[i, :f.shape[0]] = dsp.frame_energy(f)[0]
    return e


def decode_batch(model: PerceptualModel, feats: np.ndarray, lengths: Sequence[int]) -> list:
    with no_grad():
        model.encoder.eval()
        out = model.encoder(Tensor(feats))
    plen = pooled_lengths(lengths, out.pooled)
    lp = out.log_probs.data
    return [greedy_ctc_decode(lp[i, :plen[i]]) for i in range(len(lengths))]


def perceptual_error_rate(model: PerceptualModel, utts: Sequence[Utterance], batch_size: int = 16,
                          features: Optional[Callable] = None) -> float:
    """Greedy-CTC token error rate of the encoder on ``utts`` (clean features by default)."""
    hyps, refs = [], []
    for i in range(0, len(utts), batch_size):
        chunk = utts[i:i + batch_size]
        feats, lengths = pad_batch([features(u) if features else u.clean_feats for u in chunk])
        hyps.extend(decode_batch(model, feats, lengths))
        refs.extend(model.coder.encode(u.record.targets) for u in chunk)
    return corpus_error_rate(hyps, refs)


def train_perceptual(corpus: Corpus, encoder: PerceptualEncoder, decoder: DecoderNet, coder: TargetCoder,
                     plan: TrainPlan, weights: LossWeights = LossWeights(), log: Optional[MetricsLog] = None,
                     run: str = "perceptual", eval_limit: Optional[int] = None,
                     diag_path=None) -> PerceptualModel:
    """CTC (+ alignment) on the encoder and NLL on the decoder, on clean features."""
    if encoder.n_classes != coder.n_symbols + 1:
        raise ShapeError("train_perceptual", f"encoder has {encoder.n_classes} classes, "
                                             f"targets need {coder.n_symbols} + blank")
    if encoder.pool_frames != coder.pool_frames:
        raise ValueError(f"{coder.kind} targets need pool_frames={coder.pool_frames}")
    model = PerceptualModel(encoder, decoder, coder)
    log = log or MetricsLog()
    train = corpus.utterances("train")
    dev = corpus.utterances("dev", eval_limit)
    opt = Optimizer(named("encoder", encoder) + named("decoder", decoder), plan)
    encoder.freeze(False)
    decoder.freeze(False)

    def diag(epoch):
        if diag_path is None:
            return None
        save_checkpoint(_model_checkpoint(model, epoch, opt.state), diag_path)
        return diag_path

    for epoch in range(1, plan.epochs + 1):
        encoder.train()
        ctc_w, align_w = weights.at(epoch)
        lr = plan.lr_at(epoch)
        sums = {}
        batches = epoch_batches(len(train), plan.batch_size, _rng(plan.seed, _SHUFFLE, epoch), plan.batches_per_epoch)
        for b, idx in enumerate(batches):
            chunk = [train[i] for i in idx]
            feats, lengths = pad_batch([u.clean_feats for u in chunk])
            targets = [coder.encode(u.record.targets) for u in chunk]
            energies = _frame_energies([u.clean_feats for u in chunk], feats.shape[1]) if align_w else None
            terms = recognizer_losses(model, Tensor(feats), lengths, targets, ctc_w, weights.nll, align_w, energies)
            loss = terms["total"].item()
            _check_finite(loss, "perceptual", epoch, b, diag)
            backward(terms["total"])
            opt.step(lr)
            for k in ("total", "ctc", "align", "nll"):
                if k in terms:
                    sums[k] = sums.get(k, 0.0) + terms[k].item()
        row = {f"loss_{k}": v / len(batches) for k, v in sums.items()}
        row["dev_error_rate"] = perceptual_error_rate(model, dev)
        log.write(run=run, epoch=epoch, split="train", lr=lr, **row)
    encoder.eval()
    return model


def _model_checkpoint(model: PerceptualModel, epoch: int, state: Optional[AdamState] = None) -> Checkpoint:
    ckpt = Checkpoint(epoch=epoch)
    ckpt.add_module("encoder", model.encoder)
    ckpt.add_module("decoder", model.decoder)
    ckpt.meta["family"] = model.encoder.family
    ckpt.meta["targets"] = {"kind": model.coder.kind, "vocab": model.coder.vocab, "pool": model.coder.pool_frames}
    if state is not None:
        ckpt.add_optimizer(state)
    return ckpt


# ---------------------------------------------------------------- enhancement

def enhance_mags(enhancer: EnhancerNet, mags: np.ndarray, grad: bool = False) -> tuple:
    """(raw mask, enhanced log-magnitude) tensors for a padded batch of noisy magnitudes."""
    x = Tensor(np.log1p(mags))
    if grad:
        raw = enhancer(x)
    else:
        with no_grad():
            raw = enhancer(x)
    return raw, masked_features(raw, mags)


def _crop(rng: np.random.Generator, n: int, crop: Optional[int]) -> slice:
    if crop is None or n <= crop:
        return slice(0, n)
    start = int(rng.integers(0, n - crop + 1))
    return slice(start, start + crop)


def _act_weight(mask: np.ndarray, acts: Tensor) -> np.ndarray:
    return mask.reshape(mask.shape + (1,) * (acts.ndim - 2))


@dataclass
class EnhancementScores:
    spectral: float            # mean spectral distance (loss norm) over valid frames
    perceptual: Optional[float]
    lsd: float


def score_enhancer(enhancer: EnhancerNet, utts: Sequence[Utterance], perceptual: Optional[PerceptualEncoder] = None,
                   config: LossConfig = LossConfig(), batch_size: int = 8) -> EnhancementScores:
    """Frame-weighted spectral and tap distances plus log-spectral distance, full utterances."""
    from .evaluation import log_spectral_distance
    enhancer.eval()
    spec_sum = perc_sum = 0.0
    frames = perc_count = 0
    lsd = []
    for i in range(0, len(utts), batch_size):
        chunk = utts[i:i + batch_size]
        mags, lengths = pad_batch([u.noisy_mag for u in chunk])
        clean, _ = pad_batch([u.clean_feats for u in chunk])
        mask = length_mask(lengths, mags.shape[1])
        with no_grad():
            _, den = enhance_mags(enhancer, mags)
            d = den.data - clean
            per = np.abs(d) if config.spectral_norm == "L1" else np.square(d)
            spec_sum += float((per.mean(axis=-1) * mask).sum())
            frames += int(mask.sum())
            for k, u in enumerate(chunk):
                lsd.append(log_spectral_distance(den.data[k, :lengths[k]], u.clean_feats))
            if perceptual is not None:
                perceptual.eval()
                ca = perceptual(Tensor(clean), stop_at=config.tap).taps[config.tap].data
                da = perceptual(den, stop_at=config.tap).taps[config.tap].data
                diff = np.abs(da - ca) if config.perceptual_norm == "L1" else np.square(da - ca)
                w = np.broadcast_to(_act_weight(mask, den), diff.shape)
                perc_sum += float((diff * w).sum())
                perc_count += int(w.sum())
    return EnhancementScores(spec_sum / frames, perc_sum / perc_count if perceptual is not None else None,
                             float(np.mean(lsd)))


def check_perceptual_compatible(enhancer: EnhancerNet, perceptual: PerceptualEncoder, tap: str) -> None:
    """Fail before training when the tap or feature shapes cannot line up."""
    perceptual.check_tap(tap)
    if perceptual.n_bins != enhancer.n_bins:
        raise ShapeError("train_enhancement", f"perceptual model expects {perceptual.n_bins} bins, "
                                              f"enhancer produces {enhancer.n_bins}")
    with no_grad():
        probe = Tensor(np.zeros((1, 4, enhancer.n_bins), dtype=enhancer.fc_out.weight.dtype))
        perceptual(probe, stop_at=tap)


def train_enhancement(corpus: Corpus, enhancer: EnhancerNet, perceptual: Optional[PerceptualEncoder],
                      config: LossConfig, plan: TrainPlan, log: Optional[MetricsLog] = None,
                      run: str = "enhance", eval_limit: Optional[int] = None, diag_path=None) -> EnhancerNet:
    """noisy -> mask -> enhanced log-magnitude; spectral loss vs clean plus alpha times tap distance.

    The perceptual model is put in eval mode and frozen; with alpha = 0 it is
    never evaluated, which makes the run identical to spectral-only training.
    """
    use_perc = perceptual is not None and config.alpha > 0
    if use_perc:
        check_perceptual_compatible(enhancer, perceptual, config.tap)
        perceptual.eval()
        perceptual.freeze(True)
    log = log or MetricsLog()
    train = corpus.utterances("train")
    dev = corpus.utterances("dev", eval_limit)
    enhancer.freeze(False)
    opt = Optimizer(named("enhancer", enhancer), plan)

    def diag(epoch):
        if diag_path is None:
            return None
        ckpt = Checkpoint(epoch=epoch)
        ckpt.add_module("enhancer", enhancer)
        save_checkpoint(ckpt, diag_path)
        return diag_path

    for epoch in range(1, plan.epochs + 1):
        lr = plan.lr_at(epoch)
        crop_rng = _rng(plan.seed, _CROP, epoch)
        batches = epoch_batches(len(train), plan.batch_size, _rng(plan.seed, _SHUFFLE, epoch), plan.batches_per_epoch)
        sums = {"total": 0.0, "spectral": 0.0, "perceptual": 0.0}
        for b, idx in enumerate(batches):
            enhancer.train()
            chunk = [train[i] for i in idx]
            cuts = [_crop(crop_rng, u.n_frames, plan.crop_frames) for u in chunk]
            mags, lengths = pad_batch([u.noisy_mag[c] for u, c in zip(chunk, cuts)])
            clean, _ = pad_batch([u.clean_feats[c] for u, c in zip(chunk, cuts)])
            mask = length_mask(lengths, mags.shape[1])
            _, den = enhance_mags(enhancer, mags, grad=True)
            clean_acts = den_acts = act_w = None
            if use_perc:
                with no_grad():
                    clean_acts = perceptual(Tensor(clean), stop_at=config.tap).taps[config.tap]
                den_acts = perceptual(den, stop_at=config.tap).taps[config.tap]
                act_w = _act_weight(mask, den_acts)
            total, spec, perc = enhancement_loss(den, Tensor(clean), clean_acts, den_acts, config,
                                                 weight=mask[..., None], act_weight=act_w)
            loss = total.item()
            _check_finite(loss, "enhancement", epoch, b, diag)
            backward(total)
            opt.step(lr)
            sums["total"] += loss
            sums["spectral"] += spec.item()
            sums["perceptual"] += perc.item() if perc is not None else 0.0
        scores = score_enhancer(enhancer, dev, perceptual, config)
        log.write(run=run, epoch=epoch, split="train", lr=lr, alpha=config.alpha,
                  **{f"loss_{k}": v / len(batches) for k, v in sums.items()},
                  dev_spectral=scores.spectral, dev_perceptual=scores.perceptual, dev_lsd=scores.lsd)
    enhancer.eval()
    return enhancer


# ---------------------------------------------------------------- recognizer fine-tuning

def draw_snr(rng: np.random.Generator, low: float, high: float) -> float:
    return float(rng.uniform(low, high)) if high > low else float(low)


def mix_fresh_noise(clean: dsp.Waveform, family: NoiseFamily, snr: float, rng: np.random.Generator) -> dsp.Waveform:
    noise = make_noise(family, rng, len(clean))
    return dsp.mix_at_snr(clean, dsp.Waveform(noise, clean.sample_rate), snr)


@dataclass
class FinetuneResult:
    model: PerceptualModel
    enhancer: EnhancerNet
    history: list = field(default_factory=list)


def finetune_recognizer(corpus: Corpus, enhancer: EnhancerNet, model: PerceptualModel, plan: TrainPlan,
                        noise: NoiseFamily, log: Optional[MetricsLog] = None, run: str = "finetune",
                        ctc_weight: float = 1.0, nll_weight: float = 1.0,
                        eval_limit: Optional[int] = None,
                        on_epoch_end: Optional[Callable[[int], None]] = None) -> FinetuneResult:
    """Adapt the recognizer to enhanced features of freshly noised training audio.

    Every utterance gets new noise from ``noise`` at an SNR drawn uniformly
    from the plan's range.  The enhancer always runs with frozen batch-norm
    statistics; with ``plan.joint`` its weights also receive the recognizer's
    gradients, otherwise it runs without gradients.  Slow thaw: for the
    first ``freeze_epochs`` only the decoder is updated.  ``on_epoch_end``
    is called with the 1-based epoch after each epoch's update and log row.
    """
    enc, dec = model.encoder, model.decoder
    log = log or MetricsLog()
    train_recs = corpus.records("train")
    dev = corpus.utterances("dev", eval_limit)
    groups = named("decoder", dec) + named("encoder", enc) + (named("enhancer", enhancer) if plan.joint else [])
    opt = Optimizer(groups, plan)
    enhancer.eval()
    history = []
    for epoch in range(1, plan.epochs + 1):
        thawed = epoch > plan.freeze_epochs
        dec.freeze(False)
        enc.freeze(not thawed)
        enhancer.freeze(not (plan.joint and thawed))
        enhancer_grad = plan.joint and thawed
        lr = plan.lr_at(epoch)
        noise_rng = _rng(plan.seed, _NOISE, epoch)
        snr_rng = _rng(plan.seed, _SNR, epoch)
        batches = epoch_batches(len(train_recs), plan.batch_size, _rng(plan.seed, _SHUFFLE, epoch),
                                plan.batches_per_epoch)
        sums = {}
        for b, idx in enumerate(batches):
            enc.train()
            mags, targets, snrs = [], [], []
            for i in idx:
                utt = corpus.get(train_recs[i])
                snr = draw_snr(snr_rng, *plan.augment_snr_range)
                noisy = mix_fresh_noise(utt.clean(), noise, snr, noise_rng)
                mags.append(np.abs(dsp.stft(noisy).frames).astype(np.float32))
                targets.append(model.coder.encode(utt.record.targets))
                snrs.append(snr)
            mags, lengths = pad_batch(mags)
            _, feats = enhance_mags(enhancer, mags, grad=enhancer_grad)
            terms = recognizer_losses(model, feats, lengths, targets, ctc_weight, nll_weight)
            loss = terms["total"].item()
            _check_finite(loss, "fine-tuning", epoch, b, None)
            backward(terms["total"])
            if enhancer_grad and any(p.grad is None for p in enhancer.parameters()):
                raise RuntimeError("joint fine-tuning: enhancer parameters received no gradient")
            opt.step(lr)
            for k in ("total", "ctc", "nll"):
                if k in terms:
                    sums[k] = sums.get(k, 0.0) + terms[k].item()
        row = {f"loss_{k}": v / len(batches) for k, v in sums.items()}
        row["dev_per"] = recognizer_error_rate(enhancer, model, dev)
        history.append(row)
        log.write(run=run, epoch=epoch, split="train", lr=lr, joint=plan.joint, thawed=thawed, **row)
        if on_epoch_end is not None:
            on_epoch_end(epoch)
    enc.eval()
    enhancer.eval()
    enc.freeze(False)
    enhancer.freeze(False)
    return FinetuneResult(model, enhancer, history)


def recognize(enhancer: Optional[EnhancerNet], model: PerceptualModel, mags: Sequence[np.ndarray],
              batch_size: int = 8) -> list:
    """Greedy-CTC hypotheses (target ids) for noisy magnitudes, through the enhancer when given."""
    hyps = []
    for i in range(0, len(mags), batch_size):
        batch, lengths = pad_batch(list(mags[i:i + batch_size]))
        if enhancer is not None:
            enhancer.eval()
            _, feats = enhance_mags(enhancer, batch)
            feats = feats.data
        else:
            feats = np.log1p(batch)
        hyps.extend(decode_batch(model, feats, lengths))
    return hyps


def recognizer_error_rate(enhancer: Optional[EnhancerNet], model: PerceptualModel,
                          utts: Sequence[Utterance]) -> float:
    hyps = recognize(enhancer, model, [u.noisy_mag for u in utts])
    return corpus_error_rate(hyps, [model.coder.encode(u.record.targets) for u in utts])


def enhance_waveform(enhancer: EnhancerNet, noisy: dsp.Waveform) -> dsp.Waveform:
    """Mask the noisy STFT with the clamped enhancer output and resynthesize with the noisy phase."""
    from .blocks import apply_mask
    spec = dsp.stft(noisy)
    enhancer.eval()
    mags = np.abs(spec.frames).astype(np.float32)[None]
    raw, _ = enhance_mags(enhancer, mags)
    return dsp.istft(apply_mask(raw.data[0].astype(np.float64), spec))
