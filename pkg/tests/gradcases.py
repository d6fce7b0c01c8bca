"""Finite-difference cases for every differentiable op and every model.

Each case is ``make(rng) -> (build, inputs, names)``; ``build`` recomputes a
scalar loss from the current values of ``inputs``.  Elementwise outputs are
reduced with a fixed random weighting so every output entry contributes a
distinct gradient.  Inputs to kinked ops are kept away from their kinks.
"""
import numpy as np

from perceptual_se import losses
from perceptual_se.autodiff import Tensor, ops
from perceptual_se.blocks import (CRDNNEncoder, DecoderNet, EnhancerNet, MLPContextEncoder,
                                  WideResNetEncoder, masked_features)


def _param(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.1):
    return Tensor(rng.uniform(margin, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)


def _weighted(out, rng):
    w = Tensor(rng.normal(size=out.shape))
    return lambda y: ops.sum(y * w)


def _unary(fn, gen=_param):
    def make(rng):
        x = gen(rng, (3, 4))
        red = _weighted(fn(x), rng)
        return (lambda: red(fn(x))), [x], ["x"]
    return make


def _binary(fn, a_shape=(3, 4), b_shape=(3, 4), b_gen=_param):
    def make(rng):
        a, b = _param(rng, a_shape), b_gen(rng, b_shape)
        red = _weighted(fn(a, b), rng)
        return (lambda: red(fn(a, b))), [a, b], ["a", "b"]
    return make


def _positive(rng, shape):
    return _param(rng, shape, 0.3, 2.0)


def _max_pool(rng):
    # distinct values spaced well beyond the FD step so the argmax never flips
    x = Tensor(rng.permutation(2 * 7 * 3).reshape(2, 7, 3) * 0.1 + rng.uniform(0, 0.01, (2, 7, 3)),
               requires_grad=True)
    red = _weighted(ops.max_pool(x, axis=1, size=3), rng)
    return (lambda: red(ops.max_pool(x, axis=1, size=3))), [x], ["x"]


def _conv(stride):
    def make(rng):
        x, w, b = _param(rng, (2, 5, 6, 2)), _param(rng, (3, 3, 2, 3)), _param(rng, (3,))
        red = _weighted(ops.conv2d(x, w, b, stride, (1, 1)), rng)
        return (lambda: red(ops.conv2d(x, w, b, stride, (1, 1)))), [x, w, b], ["x", "w", "b"]
    return make


def _batch_norm(training):
    def make(rng):
        x, g, b = _param(rng, (2, 3, 4, 3)), _param(rng, (3,), 0.5, 1.5), _param(rng, (3,))
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, 3)

        def f():
            return ops.batch_norm2d(x, g, b, rm.copy(), rv.copy(), training=training)
        red = _weighted(f(), rng)
        return (lambda: red(f())), [x, g, b], ["x", "gamma", "beta"]
    return make


def _gru(rng):
    x, h = _param(rng, (2, 3)), _param(rng, (2, 4))
    wi, wh = _param(rng, (3, 12), -0.5, 0.5), _param(rng, (4, 12), -0.5, 0.5)
    bi, bh = _param(rng, (12,), -0.5, 0.5), _param(rng, (12,), -0.5, 0.5)
    ins = [x, h, wi, wh, bi, bh]
    red = _weighted(ops.gru_cell(*ins), rng)
    return (lambda: red(ops.gru_cell(*ins))), ins, ["x", "h", "w_ih", "w_hh", "b_ih", "b_hh"]


def _ctc(rng):
    x = _param(rng, (2, 6, 4), -2.0, 2.0)
    targets = [list(rng.integers(1, 4, size=2)), list(rng.integers(1, 4, size=3))]
    return (lambda: ops.ctc_loss(ops.log_softmax(x, axis=-1), targets, [6, 5])), [x], ["logits"]


def _ctc_raw(rng):
    # unnormalized scores: the op must differentiate whatever it is given
    x = _param(rng, (1, 5, 3), -3.0, 0.0)
    return (lambda: ops.ctc_loss(x, [[1, 2]])), [x], ["scores"]


def _softmax(log):
    fn = ops.log_softmax if log else ops.softmax
    return _unary(lambda x: fn(x, axis=-1))


def _getitem(idx):
    return _unary(lambda x: ops.getitem(x, idx))


OP_CASES = {
    "add": _binary(ops.add, (3, 4), (4,)),
    "sub": _binary(ops.sub, (3, 1), (3, 4)),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, b_gen=_away_from_zero),
    "neg": _unary(ops.neg),
    "power": _unary(lambda x: ops.power(x, 2.5), _positive),
    "square": _unary(ops.square),
    "abs": _unary(ops.abs, _away_from_zero),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, _positive),
    "log1p": _unary(ops.log1p, _positive),
    "sqrt": _unary(ops.sqrt, _positive),
    "relu": _unary(ops.relu, _away_from_zero),
    "leaky_relu": _unary(ops.leaky_relu, _away_from_zero),
    "gelu": _unary(ops.gelu),
    "sigmoid": _unary(ops.sigmoid),
    "tanh": _unary(ops.tanh),
    "clamp": _unary(lambda x: ops.clamp(x, -0.5, 0.5), lambda r, s: Tensor(
        r.choice([-0.9, -0.25, 0.0, 0.3, 0.8], size=s) + r.uniform(-0.05, 0.05, s), requires_grad=True)),
    "softmax": _softmax(False),
    "log_softmax": _softmax(True),
    "sum": _unary(lambda x: ops.sum(x, axis=0, keepdims=True)),
    "mean": _unary(lambda x: ops.mean(x, axis=1)),
    "reshape": _unary(lambda x: ops.reshape(x, (2, 6))),
    "transpose": _unary(lambda x: ops.transpose(x, (1, 0))),
    "broadcast_to": _unary(lambda x: ops.broadcast_to(x, (2, 3, 4))),
    "concat": _binary(lambda a, b: ops.concat([a, b, a], axis=1), (3, 2), (3, 4)),
    "getitem_slice": _getitem((slice(None), slice(1, 3))),
    "getitem_fancy": _getitem(np.array([2, 0, 2])),
    "pad": _unary(lambda x: ops.pad(x, ((1, 0), (2, 1)))),
    "matmul": _binary(ops.matmul, (2, 3, 4), (4, 5)),
    "max_pool": _max_pool,
    "conv2d": _conv((1, 1)),
    "conv2d_strided": _conv((1, 2)),
    "global_avg_pool": _unary(lambda x: ops.global_avg_pool(ops.reshape(x, (1, 3, 2, 2)))),
    "batch_norm2d_train": _batch_norm(True),
    "batch_norm2d_eval": _batch_norm(False),
    "gru_cell": _gru,
    "ctc_loss": _ctc,
    "ctc_loss_unnormalized": _ctc_raw,
}


# ---------------------------------------------------------------- models

N_BINS = 17
TOY_WIDTHS = (4, 4, 4, 4, 4, 4)


def _module_inputs(*modules):
    names, params = [], []
    for tag, m in modules:
        for k, p in m.named_parameters():
            names.append(f"{tag}.{k}")
            params.append(p)
    return names, params


def _model_seed(rng):
    return int(rng.integers(2 ** 31))


def _enhancer_case(rng):
    enh = EnhancerNet(N_BINS, TOY_WIDTHS, fc_layers=2, fc_hidden=6, se=True, seed=_model_seed(rng))
    perc = MLPContextEncoder(N_BINS, 5, hidden=6, layers=2, context=1, seed=_model_seed(rng))
    perc.eval()
    mag = rng.uniform(0.05, 2.0, (2, 4, N_BINS))
    clean = mag * rng.uniform(0.2, 1.0, mag.shape)
    noisy = Tensor(np.log1p(mag))
    cfg = losses.LossConfig(spectral_norm="L2", perceptual_norm="L2", alpha=0.5, tap="layer2")
    clean_acts = perc(Tensor(np.log1p(clean)), stop_at="layer2").taps["layer2"].detach()

    def build():
        feats = masked_features(enh(noisy), mag)
        den = perc(feats, stop_at="layer2").taps["layer2"]
        total, _, _ = losses.enhancement_loss(feats, np.log1p(clean), clean_acts, den, cfg)
        return total
    names, params = _module_inputs(("enhancer", enh))
    return build, params, names


def _encoder_case(factory):
    def make(rng):
        enc = factory(_model_seed(rng))
        x = Tensor(rng.uniform(0.0, 1.5, (2, 5, N_BINS)), requires_grad=True)
        energies = rng.uniform(0.0, 1.0, (2, 5))

        def build():
            out = enc(x)
            lp = out.log_probs
            ctc = ops.ctc_loss(lp, [[1, 2], [3]])
            align = losses.alignment_loss(ops.exp(lp), energies, energies.mean(axis=1))
            return ctc + align
        names, params = _module_inputs(("encoder", enc))
        return build, [x] + params, ["features"] + names
    return make


def _decoder_case(rng):
    dec = DecoderNet(4, 6, hidden=5, embed=3, seed=_model_seed(rng))
    enc_top = Tensor(rng.normal(size=(2, 3, 6)), requires_grad=True)
    inputs = np.array([[5, 1, 2], [5, 3, 3]])
    targets = np.array([[1, 2, 0], [3, 3, 0]])
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=np.float64)

    def build():
        state = dec.init_state(enc_top, [3, 2])
        return losses.nll_loss(dec.teacher_forced(state, inputs), targets, mask)
    names, params = _module_inputs(("decoder", dec))
    return build, [enc_top] + params, ["enc_top"] + names


def _enhancer_plain(rng):
    enh = EnhancerNet(N_BINS, TOY_WIDTHS, fc_layers=1, se=False, seed=_model_seed(rng))
    mag = rng.uniform(0.05, 2.0, (2, 4, N_BINS))
    target = np.log1p(mag * 0.5)
    noisy = Tensor(np.log1p(mag))

    def build():
        return losses.spectral_loss(masked_features(enh(noisy), mag), target, "L2")
    names, params = _module_inputs(("enhancer", enh))
    return build, params, names


# name -> (case, entries sampled per parameter tensor); the enhancer has ~100
# parameter tensors, so it is probed more sparsely to keep the suite fast
MODEL_CASES = {
    "enhancer+perceptual": (_enhancer_case, 2),
    "enhancer-spectral-1fc": (_enhancer_plain, 2),
    "mlp-context": (_encoder_case(lambda s: MLPContextEncoder(N_BINS, 4, hidden=6, layers=3, context=2, seed=s)), 8),
    "mlp-context-fbank": (_encoder_case(lambda s: MLPContextEncoder(N_BINS, 4, hidden=5, layers=2, context=1,
                                                                    inputs="fbank8", seed=s)), 8),
    "wide-resnet": (_encoder_case(lambda s: WideResNetEncoder(N_BINS, 4, widths=(4, 4), fc_hidden=5, se=True,
                                                             seed=s)), 4),
    "crdnn": (_encoder_case(lambda s: CRDNNEncoder(N_BINS, 4, channels=(2, 3), rnn_hidden=3, dnn_hidden=4,
                                                  seed=s)), 4),
    "decoder": (_decoder_case, 8),
}
