"""Acceptance suite: one or more tests per criterion, tagged ``criterion_N``.

The terminal summary prints one PASS/FAIL line per criterion.  The
end-to-end criteria (6, 7, 9) share one default-size corpus and one
pretrained recognizer built once per session.
"""
import math
import time

import numpy as np
import pytest

from perceptual_se import dsp, losses
from perceptual_se._kernels import CTCLengthError, ctc_forward_backward, fallback
from perceptual_se.autodiff import reference_precision
from perceptual_se.autodiff.gradcheck import finite_difference_check
from perceptual_se.blocks import apply_mask, mask_values
from perceptual_se.evaluation import pearson

from gradcases import MODEL_CASES, OP_CASES
from oracles import brute_force_ctc, pearson_manual

SEEDS = range(10)


# ---------------------------------------------------------------- 1: gradient oracle

@pytest.mark.criterion_1
def test_finite_differences_every_op_and_model():
    start = time.perf_counter()
    worst, failures = {}, []
    with reference_precision():
        for name, make in OP_CASES.items():
            for seed in SEEDS:
                build, inputs, names = make(np.random.default_rng(seed))
                rep = finite_difference_check(build, inputs, 1e-4, names, seed=seed)
                worst[name] = max(worst.get(name, 0.0), rep.max_error)
                if not rep.passed:
                    failures.append(f"{name} seed {seed}: {rep}")
        for name, (make, max_elements) in MODEL_CASES.items():
            for seed in SEEDS:
                build, inputs, names = make(np.random.default_rng(seed))
                rep = finite_difference_check(build, inputs, 1e-4, names, max_elements=max_elements,
                                              seed=seed, step=1e-6)
                worst[name] = max(worst.get(name, 0.0), rep.max_error)
                if not rep.passed:
                    failures.append(f"model {name} seed {seed}: {rep}")
    elapsed = time.perf_counter() - start
    print(f"\n{len(OP_CASES)} op cases + {len(MODEL_CASES)} models x {len(SEEDS)} seeds in {elapsed:.1f}s; "
          f"max rel err {max(worst.values()):.2e} ({max(worst, key=worst.get)})")
    assert not failures, failures
    assert max(worst.values()) < 1e-4
    assert elapsed < 120.0


# ---------------------------------------------------------------- 2: CTC vs brute force

@pytest.mark.criterion_2
def test_ctc_matches_brute_force_enumeration():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    checked = 0
    worst = 0.0
    for t_len in range(1, 9):
        for n_sym in range(2, 5):
            for u in range(0, 4):
                for _ in range(3):
                    target = [int(k) for k in rng.integers(1, n_sym, size=u)]
                    lp = np.log(rng.dirichlet(np.ones(n_sym), size=t_len))
                    want = brute_force_ctc(lp, target)
                    if not np.isfinite(want):
                        with pytest.raises(CTCLengthError):
                            losses.ctc_loss(lp, target)
                        continue
                    with reference_precision():
                        got = losses.ctc_loss(lp, target).item()
                    pure = fallback.ctc_forward_backward(lp, target)[0]
                    fast = ctc_forward_backward(lp, target)[0]
                    worst = max(worst, abs(got - want), abs(pure - want), abs(fast - want))
                    checked += 1
    elapsed = time.perf_counter() - start
    print(f"\n{checked} posteriorgrams, max abs diff {worst:.2e}, {elapsed:.1f}s")
    assert checked >= 200
    assert worst < 1e-6
    assert elapsed < 60.0


# ---------------------------------------------------------------- 3: alignment loss

@pytest.mark.criterion_3
def test_alignment_loss_decomposition():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        t_len, n = int(rng.integers(1, 30)), int(rng.integers(2, 10))
        post = rng.dirichlet(np.ones(n), size=t_len)
        e = rng.uniform(0, 2, size=t_len)
        mean = float(e.mean())
        with reference_precision():
            got = losses.alignment_loss(post, e, mean).item()
        silence = e < mean
        parts = [-math.log(post[t, 0]) if silence[t] else -math.log(post[t, 1:].sum()) for t in range(t_len)]
        worst = max(worst, abs(got - sum(parts) / t_len))
    assert worst < 1e-9


@pytest.mark.criterion_3
def test_alignment_loss_worked_examples():
    with reference_precision():
        assert losses.alignment_loss(np.array([[1.0, 0.0, 0.0]]), [0.0], 1.0).item() == pytest.approx(0.0, abs=1e-9)
        p = np.array([[0.5, 0.3, 0.2]])
        assert losses.alignment_loss(p, [0.0], 1.0).item() == pytest.approx(math.log(2), abs=1e-9)
        assert losses.alignment_loss(p, [2.0], 1.0).item() == pytest.approx(math.log(2), abs=1e-9)


# ---------------------------------------------------------------- 4: DSP

@pytest.mark.criterion_4
def test_stft_round_trip_and_bins():
    rng = np.random.default_rng(4)
    snrs = []
    for n in (4 * dsp.WIN_LEN, 5000, 16000, 16000 + 77):
        x = dsp.Waveform(rng.normal(size=n))
        spec = dsp.stft(x)
        assert spec.n_bins == 257 and spec.frames.shape[1] == 257
        y = dsp.istft(spec)
        assert len(y) == n
        snrs.append(dsp.snr_db(x.samples, y.samples - x.samples))
    print(f"\nround-trip SNR min {min(snrs):.1f} dB")
    assert min(snrs) > 60.0


@pytest.mark.criterion_4
def test_mix_at_snr_exact():
    rng = np.random.default_rng(5)
    worst = 0.0
    for snr in (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 7.3):
        clean = dsp.Waveform(rng.normal(size=8000) * rng.uniform(0.01, 1))
        noise = dsp.Waveform(rng.normal(size=3001) * rng.uniform(0.01, 1))
        mixed = dsp.mix_at_snr(clean, noise, snr)
        worst = max(worst, abs(dsp.snr_db(clean.samples, mixed.samples - clean.samples) - snr))
    assert worst < 1e-6


# ---------------------------------------------------------------- 5: mask contract

@pytest.mark.criterion_5
def test_mask_contract():
    rng = np.random.default_rng(6)
    for _ in range(50):
        raw = rng.normal(0.5, rng.uniform(0.1, 10), (9, 257))
        spec = dsp.ComplexSpectrogram(rng.normal(size=(9, 257)) + 1j * rng.normal(size=(9, 257)))
        m = mask_values(raw)
        assert m.min() >= 0.0 and m.max() <= 1.0
        assert (np.abs(apply_mask(raw, spec).frames) <= np.abs(spec.frames)).all()
    spec = dsp.stft(dsp.Waveform(rng.normal(size=4000)))
    same = apply_mask(np.ones(spec.frames.shape), spec)
    assert same.frames.tobytes() == spec.frames.tobytes()
    x = dsp.Waveform(rng.normal(size=4000))
    y = dsp.istft(apply_mask(np.ones((dsp.stft(x).n_frames, 257)), dsp.stft(x)))
    assert dsp.snr_db(x.samples, y.samples - x.samples) > 60.0


# ---------------------------------------------------------------- 9 (oracle half): pearson

@pytest.mark.criterion_9
def test_pearson_matches_manual_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n = int(rng.integers(3, 40))
        x, y = rng.normal(size=n), rng.normal(size=n) + rng.normal() * np.arange(n)
        assert abs(pearson(x, y) - pearson_manual(x.tolist(), y.tolist())) < 1e-12


# ---------------------------------------------------------------- 8: frozen-parameter contracts

def _state_bytes(module):
    return {k: np.asarray(v).tobytes() for k, v in module.state_dict().items()}


def _tiny_models(corpus, seed=0):
    from perceptual_se.blocks import DecoderNet, EnhancerNet, MLPContextEncoder, enhancer_widths
    from perceptual_se.training import PerceptualModel, TrainPlan, make_target_coder, train_perceptual
    coder = make_target_coder("phonemes", corpus.manifest.symbols)
    enc = MLPContextEncoder(n_classes=coder.n_symbols + 1, hidden=16, layers=2, context=1, seed=seed)
    dec = DecoderNet(coder.n_symbols, enc.top_dim, hidden=8, embed=4, seed=seed)
    model = train_perceptual(corpus, enc, dec, coder, TrainPlan(epochs=1, batch_size=4, seed=seed))
    assert isinstance(model, PerceptualModel)
    return model, EnhancerNet(widths=enhancer_widths(32), fc_hidden=16, seed=seed)


@pytest.mark.criterion_8
@pytest.mark.parametrize("joint", [False, True])
def test_frozen_enhancer_and_slow_thaw(tiny_corpus, joint):
    from perceptual_se.corpus import Corpus, default_noise_families
    from perceptual_se.training import TrainPlan, finetune_recognizer
    corpus = Corpus.load(tiny_corpus)
    model, enh = _tiny_models(corpus)
    enh0, enc0, dec0 = _state_bytes(enh), _state_bytes(model.encoder), _state_bytes(model.decoder)
    seen = {}

    def snapshot(epoch):
        seen[epoch] = (_state_bytes(enh) == enh0, _state_bytes(model.encoder) == enc0,
                       _state_bytes(model.decoder) == dec0)

    plan = TrainPlan(epochs=5, batch_size=4, seed=1, batches_per_epoch=2, freeze_epochs=3, joint=joint)
    finetune_recognizer(corpus, enh, model, plan, default_noise_families()["pink"], on_epoch_end=snapshot)
    for epoch in (1, 2, 3):
        enh_same, enc_same, dec_same = seen[epoch]
        assert enh_same and enc_same and not dec_same, (epoch, seen[epoch])
    enh_same, enc_same, _ = seen[5]
    assert not enc_same
    assert enh_same is (not joint)


# ---------------------------------------------------------------- 10: reproducible CLI runs

TINY_CONFIG = """
[corpus]
seed = 3
n_train = 8
n_dev = 3
n_test = 4
n_unseen = 3
min_seconds = 0.6
max_seconds = 1.0

[perceptual]
hidden = 16
layers = 2
context = 1
decoder_hidden = 8
decoder_embed = 4
epochs = 2
batch_size = 4

[enhance]
width_divisor = 32
fc_hidden = 16
tap = layer2
alpha = 1.0
epochs = 2
batch_size = 4
crop_frames = 16

[finetune]
epochs = 2
freeze_epochs = 1
batch_size = 4
batches_per_epoch = 1
"""


@pytest.mark.criterion_10
def test_identical_cli_runs_identical_logs(tmp_path):
    from perceptual_se.cli import run_cli
    cfg = tmp_path / "run.ini"
    cfg.write_text(TINY_CONFIG)
    logs = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        c = str(d / "corpus")
        steps = [
            ["gen-corpus", "--out", c],
            ["train-perceptual", "--corpus", c, "--out", str(d / "perc.mfck")],
            ["train-enhance", "--corpus", c, "--perceptual", str(d / "perc.mfck"), "--out", str(d / "enh.mfck")],
            ["finetune-asr", "--corpus", c, "--enhancer", str(d / "enh.mfck"), "--recognizer", str(d / "perc.mfck"),
             "--out", str(d / "ft.mfck")],
            ["evaluate", "--corpus", c, "--enhancer", str(d / "enh.mfck"), "--recognizer", str(d / "perc.mfck"),
             "--report", str(d / "eval.csv")],
            ["analyze-phonemes", "--corpus", c, "--recognizer", str(d / "perc.mfck"), "--with", str(d / "enh.mfck"),
             "--without", "noisy", "--scatter", str(d / "scatter.csv")],
        ]
        for argv in steps:
            assert run_cli([argv[0], "--config", str(cfg)] + argv[1:]) == 0, argv[0]
        logs.append({p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*.jsonl"))})
    assert len(logs[0]) == 6 and logs[0].keys() == logs[1].keys()
    for name in logs[0]:
        assert logs[0][name] == logs[1][name], name


# ---------------------------------------------------------------- end-to-end: 6, 7, 9
#
# Shared fixtures: the default-size corpus and a recognizer pretrained on its
# clean features.  Their build time is reported separately from the
# per-criterion runtimes.

E2E_SEEDS = (0, 1, 2)
ALPHA_GRID = (0.1, 1.0, 10.0)
TAP = "layer1"
LSD_SLACK = 1.05


def _report(line):
    import conftest
    conftest.ACCEPTANCE_REPORT.append(line)
    print(line)


@pytest.fixture(scope="session")
def full_corpus(tmp_path_factory):
    from perceptual_se.corpus import Corpus, CorpusSpec, generate_corpus
    start = time.perf_counter()
    root = tmp_path_factory.mktemp("full_corpus")
    generate_corpus(CorpusSpec(seed=0), root)
    corpus = Corpus.load(root)
    for split in ("train", "dev", "test", "test-unseen-noise"):
        corpus.utterances(split)
    _report(f"  fixture: default-size corpus generated and featurized in {time.perf_counter() - start:.0f}s")
    return corpus


@pytest.fixture(scope="session")
def recognizer(full_corpus):
    from perceptual_se.blocks import DecoderNet, MLPContextEncoder
    from perceptual_se.training import TrainPlan, make_target_coder, perceptual_error_rate, train_perceptual
    start = time.perf_counter()
    coder = make_target_coder("phonemes", full_corpus.manifest.symbols)
    enc = MLPContextEncoder(n_classes=coder.n_symbols + 1, seed=0)
    dec = DecoderNet(coder.n_symbols, enc.top_dim, seed=0)
    model = train_perceptual(full_corpus, enc, dec, coder, TrainPlan(epochs=3, batch_size=16, lr=1e-3, seed=0),
                             eval_limit=100)
    per = perceptual_error_rate(model, full_corpus.utterances("test"))
    _report(f"  fixture: recognizer pretrained in {time.perf_counter() - start:.0f}s, clean test PER {per:.3f}")
    return model


def _train_enhancer(corpus, recognizer, alpha, seed):
    from perceptual_se.blocks import EnhancerNet, enhancer_widths
    from perceptual_se.losses import LossConfig
    from perceptual_se.training import TrainPlan, train_enhancement
    enh = EnhancerNet(widths=enhancer_widths(16), seed=seed)
    plan = TrainPlan(epochs=2, batch_size=8, lr=1e-3, seed=seed, batches_per_epoch=100, crop_frames=48)
    perceptual = recognizer.encoder if alpha > 0 else None
    return train_enhancement(corpus, enh, perceptual, LossConfig(alpha=alpha, tap=TAP), plan, eval_limit=40)


def _scores(enh, utts, recognizer, with_si_snr=False):
    from perceptual_se.evaluation import si_snr
    from perceptual_se.losses import LossConfig
    from perceptual_se.training import enhance_waveform, score_enhancer
    s = score_enhancer(enh, utts, recognizer.encoder, LossConfig(tap=TAP))
    out = {"perceptual": s.perceptual, "lsd": s.lsd}
    if with_si_snr:
        gains = []
        for u in utts:
            clean, noisy = u.clean(), u.noisy()
            gains.append(si_snr(enhance_waveform(enh, noisy), clean) - si_snr(noisy, clean))
        out["si_snr_gain"] = float(np.mean(gains))
    return out


def _pick_alpha(base, candidates):
    """Lowest dev tap distance among alphas that also keep dev LSD within the slack; else lowest LSD."""
    ok = [a for a, s in candidates.items()
          if s["perceptual"] < base["perceptual"] and s["lsd"] <= LSD_SLACK * base["lsd"]]
    if ok:
        return min(ok, key=lambda a: candidates[a]["perceptual"])
    return min(candidates, key=lambda a: candidates[a]["lsd"])


@pytest.fixture(scope="session")
def enhancement_study(full_corpus, recognizer):
    """Spectral-only vs perceptual-loss enhancers for every seed; alpha tuned on the dev split of seed 0."""
    start = time.perf_counter()
    dev = full_corpus.utterances("dev", 100)
    test = full_corpus.utterances("test")
    base0 = _train_enhancer(full_corpus, recognizer, 0.0, E2E_SEEDS[0])
    base_dev = _scores(base0, dev, recognizer)
    tuned, tuned_dev = {}, {}
    for alpha in ALPHA_GRID:
        tuned[alpha] = _train_enhancer(full_corpus, recognizer, alpha, E2E_SEEDS[0])
        tuned_dev[alpha] = _scores(tuned[alpha], dev, recognizer)
    alpha = _pick_alpha(base_dev, tuned_dev)
    _report(f"  criterion 6: dev tuning (seed {E2E_SEEDS[0]}): spectral-only tap {base_dev['perceptual']:.4f} "
            f"LSD {base_dev['lsd']:.4f}; " + "; ".join(
                f"alpha {a:g}: tap {s['perceptual']:.4f} LSD {s['lsd']:.4f}" for a, s in tuned_dev.items())
            + f" -> alpha {alpha:g}")
    runs = {}
    for seed in E2E_SEEDS:
        base = base0 if seed == E2E_SEEDS[0] else _train_enhancer(full_corpus, recognizer, 0.0, seed)
        perc = tuned[alpha] if seed == E2E_SEEDS[0] else _train_enhancer(full_corpus, recognizer, alpha, seed)
        runs[seed] = {"spectral": (base, _scores(base, test, recognizer, with_si_snr=True)),
                      "perceptual": (perc, _scores(perc, test, recognizer))}
        b, p = runs[seed]["spectral"][1], runs[seed]["perceptual"][1]
        _report(f"  criterion 6: seed {seed}: SI-SNR gain {b['si_snr_gain']:.2f} dB; tap distance "
                f"{b['perceptual']:.4f} -> {p['perceptual']:.4f}; LSD {b['lsd']:.4f} -> {p['lsd']:.4f}")
    elapsed = time.perf_counter() - start
    _report(f"  criterion 6: runtime {elapsed:.0f}s")
    return {"alpha": alpha, "runs": runs, "elapsed": elapsed}


@pytest.mark.slow
@pytest.mark.criterion_6
def test_spectral_only_improves_si_snr(enhancement_study):
    gains = [r["spectral"][1]["si_snr_gain"] for r in enhancement_study["runs"].values()]
    assert min(gains) >= 3.0, gains


@pytest.mark.slow
@pytest.mark.criterion_6
def test_perceptual_loss_lowers_tap_distance_without_lsd_cost(enhancement_study):
    runs = enhancement_study["runs"].values()
    assert all(r["perceptual"][1]["perceptual"] < r["spectral"][1]["perceptual"] for r in runs)
    base_lsd = np.mean([r["spectral"][1]["lsd"] for r in runs])
    perc_lsd = np.mean([r["perceptual"][1]["lsd"] for r in runs])
    assert perc_lsd <= LSD_SLACK * base_lsd, (perc_lsd, base_lsd)


@pytest.mark.slow
@pytest.mark.criterion_6
def test_enhancement_study_runtime(enhancement_study):
    assert enhancement_study["elapsed"] < 15 * 60


@pytest.fixture(scope="session")
def finetune_study(full_corpus, recognizer, enhancement_study):
    """Frozen-enhancer vs joint fine-tuning from the same starting point, per seed."""
    import copy
    from perceptual_se.corpus import default_noise_families
    from perceptual_se.training import TrainPlan, finetune_recognizer, recognizer_error_rate
    start = time.perf_counter()
    unseen = full_corpus.utterances("test-unseen-noise")
    pers = {}
    for seed in E2E_SEEDS:
        enhancer = enhancement_study["runs"][seed]["perceptual"][0]
        before = recognizer_error_rate(enhancer, recognizer, unseen)
        for joint in (False, True):
            model, enh = copy.deepcopy(recognizer), copy.deepcopy(enhancer)
            plan = TrainPlan(epochs=6, batch_size=8, lr=5e-4, seed=seed, batches_per_epoch=20, joint=joint,
                             freeze_epochs=3)
            finetune_recognizer(full_corpus, enh, model, plan, default_noise_families()["pink"], eval_limit=40)
            pers[seed, joint] = recognizer_error_rate(enh, model, unseen)
        _report(f"  criterion 7: seed {seed}: unseen-noise PER before {before:.4f}, frozen enhancer "
                f"{pers[seed, False]:.4f}, joint {pers[seed, True]:.4f}")
    frozen = float(np.mean([pers[s, False] for s in E2E_SEEDS]))
    joint = float(np.mean([pers[s, True] for s in E2E_SEEDS]))
    elapsed = time.perf_counter() - start
    _report(f"  criterion 7: mean unseen-noise PER frozen {frozen:.4f} vs joint {joint:.4f}; runtime {elapsed:.0f}s")
    return {"frozen": frozen, "joint": joint, "elapsed": elapsed}


@pytest.mark.slow
@pytest.mark.criterion_7
def test_frozen_enhancer_finetune_beats_joint_on_unseen_noise(finetune_study):
    assert finetune_study["frozen"] <= finetune_study["joint"]


@pytest.mark.slow
@pytest.mark.criterion_7
def test_finetune_study_runtime(finetune_study):
    assert finetune_study["elapsed"] < 20 * 60


@pytest.mark.slow
@pytest.mark.criterion_9
def test_analyze_phonemes_negative_correlation_under_low_energy_handicap(full_corpus, recognizer,
                                                                        enhancement_study, tmp_path):
    import json
    from perceptual_se.checkpoint import Checkpoint, save_checkpoint
    from perceptual_se.cli import perceptual_checkpoint, run_cli
    save_checkpoint(perceptual_checkpoint(recognizer), tmp_path / "rec.mfck")
    ckpt = Checkpoint()
    ckpt.add_module("enhancer", enhancement_study["runs"][E2E_SEEDS[0]]["perceptual"][0])
    save_checkpoint(ckpt, tmp_path / "enh.mfck")
    cfg = tmp_path / "run.ini"
    cfg.write_text("")
    enh = str(tmp_path / "enh.mfck")
    assert run_cli(["analyze-phonemes", "--config", str(cfg), "--corpus", str(full_corpus.manifest.root),
                    "--recognizer", str(tmp_path / "rec.mfck"), "--with", enh,
                    "--without", f"handicap:mean:{enh}", "--scatter", str(tmp_path / "scatter.csv")]) == 0
    rows = [json.loads(line) for line in (tmp_path / "scatter.metrics.jsonl").read_text().splitlines()]
    r = [row for row in rows if row.get("event") == "pearson"][0]["all"]
    _report(f"  criterion 9: pearson(energy, precision improvement) = {r:.4f}")
    assert r is not None and r < 0.0
