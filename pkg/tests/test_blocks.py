import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perceptual_se import dsp
from perceptual_se.autodiff import Tensor, backward, no_grad, ops
from perceptual_se.blocks import (CRDNNEncoder, DecoderNet, EnhancerNet, MLPContextEncoder, SEBlock,
                                  UnknownTapError, WideResNetEncoder, apply_mask, build_encoder, enhancer_forward,
                                  enhancer_widths, mask_values, masked_features, perceptual_forward)

N_BINS = 33


def test_enhancer_widths():
    assert enhancer_widths(1) == (128, 128, 256, 256, 512, 512)
    assert enhancer_widths(16) == (8, 8, 16, 16, 32, 32)


def test_enhancer_shapes_and_eval_determinism():
    enh = EnhancerNet(N_BINS, enhancer_widths(32), fc_hidden=16, seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (2, 7, N_BINS)).astype(np.float32)
    assert enhancer_forward(enh, x).shape == (2, 7, N_BINS)
    assert enhancer_forward(enh, x[0]).shape == (7, N_BINS)
    enh.eval()
    with no_grad():
        a = enhancer_forward(enh, x).data
        b = enhancer_forward(enh, x).data
    assert a.tobytes() == b.tobytes()


def test_enhancer_fc_layer_count():
    one = EnhancerNet(N_BINS, enhancer_widths(32), fc_layers=1)
    two = EnhancerNet(N_BINS, enhancer_widths(32), fc_layers=2)
    assert not any(k.startswith("fc_hidden") for k, _ in one.named_parameters())
    assert any(k.startswith("fc_hidden") for k, _ in two.named_parameters())
    with pytest.raises(ValueError):
        EnhancerNet(N_BINS, enhancer_widths(32), fc_layers=3)


def test_se_gates_in_unit_interval():
    se = SEBlock(8, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4, 8)) * 10)
    g = se.gates(x).data
    assert g.shape == (2, 8) and (g > 0).all() and (g < 1).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 20.0))
def test_mask_contract(seed, spread):
    rng = np.random.default_rng(seed)
    raw = rng.normal(0.5, spread, (5, 257))
    spec = dsp.ComplexSpectrogram(rng.normal(size=(5, 257)) + 1j * rng.normal(size=(5, 257)))
    out = apply_mask(raw, spec)
    assert (np.abs(out.frames) <= np.abs(spec.frames) + 1e-12).all()
    m = mask_values(raw)
    assert m.min() >= 0.0 and m.max() <= 1.0
    np.testing.assert_array_equal(m[raw < 0], 0.0)
    np.testing.assert_array_equal(m[raw > 1], 1.0)


def test_all_ones_mask_identity():
    spec = dsp.stft(dsp.Waveform(np.random.default_rng(0).normal(size=3000)))
    out = apply_mask(np.ones(spec.frames.shape), spec)
    assert out.frames.tobytes() == spec.frames.tobytes()


def test_masked_features_matches_numpy():
    rng = np.random.default_rng(3)
    raw, mag = rng.normal(0.5, 1, (4, 6)), rng.uniform(0, 3, (4, 6))
    got = masked_features(Tensor(raw), mag).data
    np.testing.assert_allclose(got, np.log1p(np.clip(raw, 0, 1) * mag))


@pytest.mark.parametrize("family,kwargs,taps", [
    ("mlp-context", dict(hidden=8, layers=3, context=2), ["layer1", "layer2", "layer3"]),
    ("wide-resnet", dict(widths=(4, 4), fc_hidden=8), ["block1", "block2", "fc"]),
    ("crdnn", dict(channels=(2, 3), rnn_hidden=4, dnn_hidden=6), ["cnn1", "cnn2", "rnn", "dnn"]),
])
def test_encoder_taps_and_heads(family, kwargs, taps):
    enc = build_encoder(family, n_bins=N_BINS, n_classes=5, **kwargs)
    assert list(enc.tap_names) == taps
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 6, N_BINS)))
    out = enc(x)
    assert set(out.taps) == set(taps)
    assert out.log_probs.shape == (2, 6, 5)
    np.testing.assert_allclose(out.posteriors().sum(-1), 1.0, rtol=1e-5)
    early = enc(x, stop_at=taps[0])
    assert list(early.taps) == [taps[0]] and early.log_probs is None
    with pytest.raises(UnknownTapError, match="valid taps"):
        enc(x, stop_at="layer99")


def test_mlp_receptive_field():
    enc = MLPContextEncoder(N_BINS, 4, hidden=8, layers=2, context=2, seed=1)
    enc.eval()
    x = np.random.default_rng(0).uniform(0, 1, (12, N_BINS)).astype(np.float32)
    y = x.copy()
    y[0] += 1.0
    with no_grad():
        a, _ = perceptual_forward(enc, x, "layer2")
        b, _ = perceptual_forward(enc, y, "layer2")
    changed = np.abs(a.data - b.data).max(axis=1) > 0
    assert changed.tolist() == [True] * 3 + [False] * 9
    assert enc.receptive_field("layer2") == 5


def test_wide_resnet_receptive_field_grows():
    enc = WideResNetEncoder(N_BINS, 4, widths=(4, 4), fc_hidden=6, seed=2)
    enc.eval()
    x = np.random.default_rng(1).uniform(0, 1, (20, N_BINS)).astype(np.float32)
    y = x.copy()
    y[10] += 1.0
    with no_grad():
        for tap in ("block1", "block2"):
            a, _ = perceptual_forward(enc, x, tap)
            b, _ = perceptual_forward(enc, y, tap)
            reach = np.nonzero(np.abs(a.data - b.data).reshape(20, -1).max(axis=1) > 0)[0]
            assert reach.max() - reach.min() + 1 == enc.receptive_field(tap)


def test_word_piece_pooling():
    enc = MLPContextEncoder(N_BINS, 4, hidden=8, layers=2, pool_frames=4)
    out = enc(Tensor(np.zeros((1, 10, N_BINS))))
    assert out.log_probs.shape == (1, 3, 4) and out.pooled == 4


def test_fbank_inputs():
    enc = MLPContextEncoder(N_BINS, 4, hidden=8, layers=2, inputs="fbank8")
    assert enc.inputs.dim == 8
    assert enc(Tensor(np.zeros((1, 3, N_BINS)))).log_probs.shape == (1, 3, 4)


def test_crdnn_without_rnn():
    enc = CRDNNEncoder(N_BINS, 4, channels=(2,), dnn_hidden=5, use_rnn=False)
    assert "rnn" not in enc.tap_names
    assert enc.receptive_field("dnn") == 5


def test_decoder_teacher_forcing_matches_steps():
    dec = DecoderNet(4, 6, hidden=5, embed=3, seed=0)
    top = Tensor(np.random.default_rng(0).normal(size=(2, 3, 6)))
    inputs = np.array([[dec.bos, 1, 2], [dec.bos, 4, 4]])
    with no_grad():
        lp = dec.teacher_forced(dec.init_state(top), inputs).data
        state = dec.init_state(top)
        for i in range(3):
            state, step = dec.step(state, inputs[:, i])
            np.testing.assert_allclose(lp[:, i], step.data, rtol=1e-6)
    assert lp.shape == (2, 3, 5)
    with pytest.raises(ValueError):
        dec.step(state, [7, 1])


def test_decoder_init_state_respects_lengths():
    dec = DecoderNet(3, 4, hidden=5, embed=2)
    top = np.random.default_rng(1).normal(size=(1, 5, 4))
    padded = top.copy()
    padded[0, 3:] = 100.0
    with no_grad():
        a = dec.init_state(Tensor(top[:, :3])).data
        b = dec.init_state(Tensor(padded), [3]).data
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_perceptual_params_receive_no_update_when_frozen():
    enc = MLPContextEncoder(N_BINS, 4, hidden=8, layers=2)
    enc.freeze()
    x = Tensor(np.ones((1, 3, N_BINS)), requires_grad=True)
    backward(ops.sum(enc(x).taps["layer2"]))
    assert x.grad is not None and all(p.grad is None for p in enc.parameters())
