"""Network architectures: masking enhancer, perceptual encoders, GRU decoder.

Feature maps are channel-last (N, T, F, C).  All convolutions use stride 1
in time with "same" padding, so every model emits one row per input frame
(the word-piece encoder head optionally pools 4 frames into one).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import dsp
from .autodiff import Tensor, ops
from .autodiff.nn import BatchNorm2d, Conv2d, Embedding, GRUCell, Linear, Module, ModuleList
from .autodiff.tensor import ShapeError

PAPER_ENHANCER_WIDTHS = (128, 128, 256, 256, 512, 512)
TOY_DIVISOR = 8


def enhancer_widths(divisor: int = TOY_DIVISOR) -> tuple:
    return tuple(w // divisor for w in PAPER_ENHANCER_WIDTHS)


class UnknownTapError(KeyError):
    def __init__(self, tap, valid):
        super().__init__(f"unknown tap {tap!r}; valid taps: {', '.join(valid)}")
        self.valid = list(valid)


class SEBlock(Module):
    """Squeeze-and-excitation: channel gates from globally pooled features."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        if channels < reduction:
            raise ValueError(f"{channels} channels < reduction ratio {reduction}")
        self.squeeze = Linear(channels, channels // reduction, rng)
        self.excite = Linear(channels // reduction, channels, rng)

    def gates(self, x: Tensor) -> Tensor:
        s = ops.global_avg_pool(x)
        return ops.sigmoid(self.excite(ops.relu(self.squeeze(s))))

    def forward(self, x: Tensor) -> Tensor:
        g = self.gates(x)
        return x * ops.reshape(g, (g.shape[0], 1, 1, g.shape[1]))


class ResBlock(Module):
    """Downsampling conv (freq stride 2) followed by a gated two-conv residual."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, se: bool = True,
                 activation: str = "gelu", freq_stride: int = 2):
        super().__init__()
        self.act = ops.gelu if activation == "gelu" else ops.leaky_relu
        self.down = Conv2d(c_in, c_out, rng, stride=(1, freq_stride))
        self.bn0 = BatchNorm2d(c_out)
        self.conv1 = Conv2d(c_out, c_out, rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, rng)
        self.bn2 = BatchNorm2d(c_out)
        self.se = SEBlock(c_out, rng) if se else None

    def forward(self, x: Tensor) -> Tensor:
        a = self.bn0(self.act(self.down(x)))
        r = self.bn1(self.act(self.conv1(a)))
        r = self.bn2(self.act(self.conv2(r)))
        if self.se is not None:
            r = self.se(r)
        return a + r


def _downsampled(n: int, blocks: int, stride: int = 2) -> int:
    for _ in range(blocks):
        n = (n + 2 - 3) // stride + 1
    return n


class EnhancerNet(Module):
    """Wide-ResNet-style mask estimator: (N, T, F) log-magnitude -> (N, T, F) raw mask."""

    def __init__(self, n_bins: int = 257, widths: Sequence[int] = enhancer_widths(),
                 fc_layers: int = 2, fc_hidden: int = 256, se: bool = True, seed: int = 0):
        super().__init__()
        self.init_args = dict(n_bins=n_bins, widths=list(widths), fc_layers=fc_layers, fc_hidden=fc_hidden,
                              se=se, seed=seed)
        rng = np.random.default_rng(seed)
        self.n_bins = n_bins
        self.widths = tuple(widths)
        self.fc_layers = fc_layers
        self.blocks = ModuleList()
        c = 1
        for w in self.widths:
            self.blocks.append(ResBlock(c, w, rng, se=se))
            c = w
        flat = c * _downsampled(n_bins, len(self.widths))
        if fc_layers == 2:
            self.fc_hidden = Linear(flat, fc_hidden, rng)
            self.fc_out = Linear(fc_hidden, n_bins, rng)
        elif fc_layers == 1:
            self.fc_out = Linear(flat, n_bins, rng)
        else:
            raise ValueError("fc_layers must be 1 or 2")

    def topology(self) -> str:
        return f"enhancer bins={self.n_bins} widths={','.join(map(str, self.widths))} fc={self.fc_layers}"

    def forward(self, feats: Tensor) -> Tensor:
        if feats.ndim != 3 or feats.shape[-1] != self.n_bins:
            raise ShapeError("enhancer", f"expected (N, T, {self.n_bins}) features, got {feats.shape}")
        n, t, _ = feats.shape
        h = ops.reshape(feats, (n, t, self.n_bins, 1))
        for blk in self.blocks:
            h = blk(h)
        h = ops.reshape(h, (n, t, h.shape[2] * h.shape[3]))
        if self.fc_layers == 2:
            h = ops.gelu(self.fc_hidden(h))
        return self.fc_out(h)


def enhancer_forward(net: EnhancerNet, noisy_feats) -> Tensor:
    """Raw mask logits (T, F) for one utterance, or (N, T, F) for a batch."""
    x = noisy_feats if isinstance(noisy_feats, Tensor) else Tensor(np.asarray(noisy_feats, dtype=net.fc_out.weight.dtype))
    if x.ndim == 2:
        return net(ops.reshape(x, (1,) + x.shape))[0]
    return net(x)


def mask_values(raw) -> np.ndarray:
    raw = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    return np.clip(raw, 0.0, 1.0)


def apply_mask(raw, noisy_spec: dsp.ComplexSpectrogram) -> dsp.ComplexSpectrogram:
    """Clamp the raw output to [0, 1] and scale the complex noisy spectrogram by it."""
    m = mask_values(raw)
    if m.shape != noisy_spec.frames.shape:
        raise ShapeError("apply_mask", f"mask {m.shape} vs spectrogram {noisy_spec.frames.shape}")
    return noisy_spec.with_frames(m * noisy_spec.frames)


def masked_features(raw: Tensor, noisy_mag) -> Tensor:
    """Differentiable log(1 + clamp(raw) * |noisy|), the enhanced log-magnitude."""
    return ops.log1p(ops.clamp(raw, 0.0, 1.0) * noisy_mag)


# ---------------------------------------------------------------- perceptual encoders

class InputTransform(Module):
    """Maps log-magnitude features to the encoder's input domain."""

    def __init__(self, kind: str = "spectral", n_bins: int = 257):
        super().__init__()
        self.kind = kind
        if kind == "spectral":
            self.fbank = None
            self.dim = n_bins
        elif kind.startswith("fbank"):
            n_mels = int(kind[len("fbank"):])
            self.fbank = dsp.mel_filterbank(n_mels, fft_size=2 * (n_bins - 1))
            self.dim = n_mels
        else:
            raise ValueError(f"unknown input kind {kind!r}")

    def forward(self, feats: Tensor) -> Tensor:
        if self.fbank is None:
            return feats
        mag = ops.exp(feats) - 1.0
        return ops.log1p(ops.matmul(mag, self.fbank.astype(feats.dtype)))


@dataclass
class EncoderOutput:
    taps: dict = field(default_factory=dict)
    top: Optional[Tensor] = None          # (N, T', D) features feeding the heads
    log_probs: Optional[Tensor] = None    # (N, T', n_classes)
    pooled: int = 1

    def posteriors(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


class PerceptualEncoder(Module):
    family = "base"
    tap_names: tuple = ()

    def __init__(self, n_bins: int, n_classes: int, inputs: str, pool_frames: int):
        super().__init__()
        self.n_bins = n_bins
        self.n_classes = n_classes
        self.inputs = InputTransform(inputs, n_bins)
        self.pool_frames = pool_frames

    def topology(self) -> str:
        return (f"encoder family={self.family} bins={self.n_bins} classes={self.n_classes} "
                f"inputs={self.inputs.kind} pool={self.pool_frames} {self.describe()}")

    def describe(self) -> str:
        return ""

    @property
    def top_dim(self) -> int:
        return self.head.weight.shape[0]

    def receptive_field(self, tap: str) -> Optional[int]:
        raise NotImplementedError

    def check_tap(self, tap: str) -> None:
        if tap not in self.tap_names:
            raise UnknownTapError(tap, self.tap_names)

    def _trunk(self, x: Tensor, stop_at: Optional[str]) -> EncoderOutput:
        raise NotImplementedError

    def forward(self, feats: Tensor, stop_at: Optional[str] = None) -> EncoderOutput:
        """Run the encoder; with ``stop_at`` only layers up to that tap are computed."""
        if stop_at is not None:
            self.check_tap(stop_at)
        if feats.ndim != 3 or feats.shape[-1] != self.n_bins:
            raise ShapeError(self.family, f"expected (N, T, {self.n_bins}) features, got {feats.shape}")
        out = self._trunk(self.inputs(feats), stop_at)
        if stop_at is not None:
            return out
        top = out.top
        if self.pool_frames > 1:
            top = ops.max_pool(top, axis=1, size=self.pool_frames)
            out.pooled = self.pool_frames
        out.top = top
        out.log_probs = ops.log_softmax(self.head(top), axis=-1)
        return out


def context_stack(x: Tensor, context: int) -> Tensor:
    """(N, T, D) -> (N, T, (2c+1) D): each frame with c zero-padded neighbours per side."""
    n, t, d = x.shape
    xp = ops.pad(x, ((0, 0), (context, context), (0, 0)))
    return ops.concat([xp[:, k:k + t, :] for k in range(2 * context + 1)], axis=-1)


class MLPContextEncoder(PerceptualEncoder):
    """Frame + context DNN: 11-frame window, leaky-ReLU layers, one tap per layer."""
    family = "mlp-context"

    def __init__(self, n_bins: int = 257, n_classes: int = 10, hidden: int = 256, layers: int = 6,
                 context: int = 5, inputs: str = "spectral", pool_frames: int = 1, seed: int = 0):
        super().__init__(n_bins, n_classes, inputs, pool_frames)
        self.init_args = dict(n_bins=n_bins, n_classes=n_classes, hidden=hidden, layers=layers, context=context,
                              inputs=inputs, pool_frames=pool_frames, seed=seed)
        rng = np.random.default_rng(seed)
        self.context = context
        self.hidden = hidden
        self.tap_names = tuple(f"layer{i + 1}" for i in range(layers))
        self.layers = ModuleList()
        d = self.inputs.dim * (2 * context + 1)
        for _ in range(layers):
            self.layers.append(Linear(d, hidden, rng))
            d = hidden
        self.head = Linear(hidden, n_classes, rng)

    def describe(self) -> str:
        return f"hidden={self.hidden} layers={len(self.layers)} context={self.context}"

    def receptive_field(self, tap: str) -> int:
        self.check_tap(tap)
        return 2 * self.context + 1

    def _trunk(self, x, stop_at):
        out = EncoderOutput()
        h = context_stack(x, self.context)
        for name, layer in zip(self.tap_names, self.layers):
            h = ops.leaky_relu(layer(h))
            out.taps[name] = h
            if name == stop_at:
                return out
        out.top = h
        return out


class WideResNetEncoder(PerceptualEncoder):
    """Utterance-wise Wide-ResNet trunk; each block widens temporal context by 6 frames."""
    family = "wide-resnet"

    def __init__(self, n_bins: int = 257, n_classes: int = 10, widths: Sequence[int] = (16, 16, 32, 32),
                 fc_hidden: int = 256, se: bool = False, inputs: str = "spectral", pool_frames: int = 1,
                 seed: int = 0):
        super().__init__(n_bins, n_classes, inputs, pool_frames)
        self.init_args = dict(n_bins=n_bins, n_classes=n_classes, widths=list(widths), fc_hidden=fc_hidden, se=se,
                              inputs=inputs, pool_frames=pool_frames, seed=seed)
        rng = np.random.default_rng(seed)
        self.widths = tuple(widths)
        self.tap_names = tuple(f"block{i + 1}" for i in range(len(widths))) + ("fc",)
        self.blocks = ModuleList()
        c = 1
        for w in self.widths:
            self.blocks.append(ResBlock(c, w, rng, se=se, activation="leaky_relu"))
            c = w
        self.fc = Linear(c * _downsampled(self.inputs.dim, len(widths)), fc_hidden, rng)
        self.head = Linear(fc_hidden, n_classes, rng)

    def describe(self) -> str:
        return f"widths={','.join(map(str, self.widths))}"

    def receptive_field(self, tap: str) -> Optional[int]:
        self.check_tap(tap)
        if tap == "fc":
            return 1 + 6 * len(self.widths)
        return 1 + 6 * int(tap[len("block"):])

    def _trunk(self, x, stop_at):
        out = EncoderOutput()
        n, t, d = x.shape
        h = ops.reshape(x, (n, t, d, 1))
        for name, blk in zip(self.tap_names, self.blocks):
            h = blk(h)
            out.taps[name] = h
            if name == stop_at:
                return out
        h = ops.leaky_relu(self.fc(ops.reshape(h, (n, t, h.shape[2] * h.shape[3]))))
        out.taps["fc"] = h
        out.top = h
        return out


class CNNBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, rng)
        self.bn2 = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        h = self.bn1(ops.leaky_relu(self.conv1(x)))
        h = self.bn2(ops.leaky_relu(self.conv2(h)))
        return ops.max_pool(h, axis=2, size=2)


class BiGRU(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.fwd = GRUCell(n_in, hidden, rng)
        self.bwd = GRUCell(n_in, hidden, rng)

    def _run(self, cell, x: Tensor, order) -> list:
        n = x.shape[0]
        h = Tensor(np.zeros((n, self.hidden), dtype=x.dtype))
        outs = [None] * x.shape[1]
        for t in order:
            h = cell(x[:, t, :], h)
            outs[t] = ops.reshape(h, (n, 1, self.hidden))
        return outs

    def forward(self, x: Tensor) -> Tensor:
        t = x.shape[1]
        f = self._run(self.fwd, x, range(t))
        b = self._run(self.bwd, x, range(t - 1, -1, -1))
        return ops.concat([ops.concat(f, axis=1), ops.concat(b, axis=1)], axis=-1)


class CRDNNEncoder(PerceptualEncoder):
    """3 CNN blocks (5/9/13-frame context), optional BiGRU, dense layer."""
    family = "crdnn"

    def __init__(self, n_bins: int = 257, n_classes: int = 10, channels: Sequence[int] = (8, 16, 16),
                 rnn_hidden: int = 64, dnn_hidden: int = 128, use_rnn: bool = True,
                 inputs: str = "spectral", pool_frames: int = 1, seed: int = 0):
        super().__init__(n_bins, n_classes, inputs, pool_frames)
        self.init_args = dict(n_bins=n_bins, n_classes=n_classes, channels=list(channels), rnn_hidden=rnn_hidden,
                              dnn_hidden=dnn_hidden, use_rnn=use_rnn, inputs=inputs, pool_frames=pool_frames, seed=seed)
        rng = np.random.default_rng(seed)
        self.channels = tuple(channels)
        self.use_rnn = use_rnn
        self.cnn = ModuleList()
        c = 1
        d = self.inputs.dim
        for w in self.channels:
            self.cnn.append(CNNBlock(c, w, rng))
            c = w
            d = -(-d // 2)
        flat = c * d
        taps = [f"cnn{i + 1}" for i in range(len(self.channels))]
        if use_rnn:
            self.rnn = BiGRU(flat, rnn_hidden, rng)
            flat = 2 * rnn_hidden
            taps.append("rnn")
        self.dnn = Linear(flat, dnn_hidden, rng)
        taps.append("dnn")
        self.tap_names = tuple(taps)
        self.head = Linear(dnn_hidden, n_classes, rng)

    def describe(self) -> str:
        return f"channels={','.join(map(str, self.channels))} rnn={int(self.use_rnn)}"

    def receptive_field(self, tap: str) -> Optional[int]:
        self.check_tap(tap)
        if tap.startswith("cnn"):
            return 1 + 4 * int(tap[3:])
        if tap == "rnn":
            return None  # whole utterance
        return None if self.use_rnn else 1 + 4 * len(self.channels)

    def _trunk(self, x, stop_at):
        out = EncoderOutput()
        n, t, d = x.shape
        h = ops.reshape(x, (n, t, d, 1))
        for i, blk in enumerate(self.cnn):
            h = blk(h)
            out.taps[f"cnn{i + 1}"] = h
            if stop_at == f"cnn{i + 1}":
                return out
        h = ops.reshape(h, (n, t, h.shape[2] * h.shape[3]))
        if self.use_rnn:
            h = self.rnn(h)
            out.taps["rnn"] = h
            if stop_at == "rnn":
                return out
        h = ops.leaky_relu(self.dnn(h))
        out.taps["dnn"] = h
        out.top = h
        return out


def build_encoder(family: str, **kwargs) -> PerceptualEncoder:
    families = {"mlp-context": MLPContextEncoder, "wide-resnet": WideResNetEncoder, "crdnn": CRDNNEncoder}
    if family not in families:
        raise ValueError(f"unknown encoder family {family!r}; choose from {sorted(families)}")
    return families[family](**kwargs)


def perceptual_forward(enc: PerceptualEncoder, feats, tap: str) -> tuple:
    """Tap activations and the posteriorgram for one utterance (T, F) or a batch."""
    enc.check_tap(tap)
    x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=enc.head.weight.dtype))
    single = x.ndim == 2
    if single:
        x = ops.reshape(x, (1,) + x.shape)
    out = enc(x)
    acts, post = out.taps[tap], out.posteriors()
    if single:
        return acts[0], post[0]
    return acts, post


# ---------------------------------------------------------------- decoder

class DecoderNet(Module):
    """Attention-free GRU decoder conditioned on the mean encoder state.

    Output vocabulary: 0 = end-of-sequence, 1..n_symbols = target symbols.
    Input vocabulary adds begin-of-sequence at index n_symbols + 1.
    """

    def __init__(self, n_symbols: int, enc_dim: int, hidden: int = 256, embed: int = 64, seed: int = 0):
        super().__init__()
        self.init_args = dict(n_symbols=n_symbols, enc_dim=enc_dim, hidden=hidden, embed=embed, seed=seed)
        rng = np.random.default_rng(seed)
        self.n_symbols = n_symbols
        self.hidden = hidden
        self.bos = n_symbols + 1
        self.eos = 0
        self.embedding = Embedding(n_symbols + 2, embed, rng)
        self.bridge = Linear(enc_dim, hidden, rng)
        self.cell = GRUCell(embed, hidden, rng)
        self.out = Linear(hidden, n_symbols + 1, rng)

    @property
    def vocab_size(self) -> int:
        return self.n_symbols + 1

    def topology(self) -> str:
        return f"decoder symbols={self.n_symbols} hidden={self.hidden} embed={self.embedding.weight.shape[1]}"

    def init_state(self, enc_top: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
        n, t, _ = enc_top.shape
        if lengths is None:
            summary = ops.mean(enc_top, axis=1)
        else:
            w = np.zeros((n, t, 1), dtype=enc_top.dtype)
            for i, length in enumerate(lengths):
                w[i, :length] = 1.0 / max(int(length), 1)
            summary = ops.sum(enc_top * w, axis=1)
        return ops.tanh(self.bridge(summary))

    def step(self, state: Tensor, prev_token) -> tuple:
        ids = np.atleast_1d(np.asarray(prev_token, dtype=np.int64))
        if ids.min() < 0 or ids.max() > self.bos:
            raise ValueError(f"token id out of range 0..{self.bos}: {ids}")
        state = self.cell(self.embedding(ids), state)
        return state, ops.log_softmax(self.out(state), axis=-1)

    def teacher_forced(self, state: Tensor, inputs: np.ndarray) -> Tensor:
        """inputs: (B, L) token ids -> (B, L, vocab) log-probs."""
        inputs = np.asarray(inputs, dtype=np.int64)
        b, length = inputs.shape
        rows = []
        for i in range(length):
            state, lp = self.step(state, inputs[:, i])
            rows.append(ops.reshape(lp, (b, 1, self.vocab_size)))
        return ops.concat(rows, axis=1)


def decoder_step(dec: DecoderNet, state: Tensor, prev_token) -> tuple:
    return dec.step(state, prev_token)
