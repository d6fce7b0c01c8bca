"""Command-line entry point: ``perceptual-se <subcommand> --config FILE ...``.

Every subcommand truncates and writes a line-delimited JSON metrics log whose
first row records the command, the config hash and the seed.  Logs never
contain timestamps or output paths, so two runs with the same
(config, seed, corpus) produce byte-identical logs.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import dsp
from .audio import WavFormatError, read_wav, write_wav
from .blocks import (DecoderNet, EnhancerNet, apply_mask, build_encoder, enhancer_widths)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError
from .corpus import (Corpus, CorpusSpec, ManifestError, default_noise_families, generate_corpus)
from .evaluation import (EvalReport, UtteranceScore, avg_phoneme_energy, edit_distance,
                         energy_precision_analysis, log_spectral_distance, phoneme_precision,
                         precision_improvement, si_snr)
from .losses import LossConfig
from .training import (LossWeights, MetricsLog, PerceptualModel, TargetCoder, TrainingDivergedError, TrainPlan,
                       enhance_mags, finetune_recognizer, make_target_coder, train_enhancement,
                       train_perceptual)


# ---------------------------------------------------------------- model construction

def build_perceptual(cfg: Config, symbols, seed: int) -> PerceptualModel:
    p = cfg["perceptual"]
    coder = make_target_coder(p["targets"], symbols)
    kwargs = dict(n_classes=coder.n_symbols + 1, inputs=p["inputs"], pool_frames=coder.pool_frames, seed=seed)
    if p["family"] == "mlp-context":
        kwargs.update(hidden=p["hidden"], layers=p["layers"], context=p["context"])
    enc = build_encoder(p["family"], **kwargs)
    dec = DecoderNet(coder.n_symbols, enc.top_dim, hidden=p["decoder_hidden"], embed=p["decoder_embed"], seed=seed)
    return PerceptualModel(enc, dec, coder)


def build_enhancer(cfg: Config, seed: int) -> EnhancerNet:
    e = cfg["enhance"]
    return EnhancerNet(widths=enhancer_widths(e["width_divisor"]), fc_layers=e["fc_layers"],
                       fc_hidden=e["fc_hidden"], se=e["se"], seed=seed)


def perceptual_checkpoint(model: PerceptualModel) -> Checkpoint:
    ckpt = Checkpoint()
    ckpt.add_module("encoder", model.encoder)
    ckpt.add_module("decoder", model.decoder)
    ckpt.meta["family"] = model.encoder.family
    ckpt.meta["targets"] = {"kind": model.coder.kind, "vocab": model.coder.vocab, "pool": model.coder.pool_frames}
    return ckpt


def load_perceptual(ckpt: Checkpoint) -> PerceptualModel:
    try:
        args = ckpt.meta["init_args"]
        enc = build_encoder(ckpt.meta["family"], **args["encoder"])
        dec = DecoderNet(**args["decoder"])
        t = ckpt.meta["targets"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks recognizer metadata {exc}") from None
    ckpt.restore("encoder", enc)
    ckpt.restore("decoder", dec)
    enc.eval()
    return PerceptualModel(enc, dec, TargetCoder(t["kind"], list(t["vocab"]), t["pool"]))


def load_enhancer(ckpt: Checkpoint) -> EnhancerNet:
    try:
        net = EnhancerNet(**ckpt.meta["init_args"]["enhancer"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks enhancer metadata {exc}") from None
    ckpt.restore("enhancer", net)
    net.eval()
    return net


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------- subcommands

def _config(args) -> Config:
    cfg = Config.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.set("corpus" if args.command == "gen-corpus" else "run", "seed", args.seed)
    for section, key, attr in (("enhance", "alpha", "alpha"), ("finetune", "joint", "joint"),
                               ("perceptual", "family", "family"), ("perceptual", "targets", "targets")):
        if getattr(args, attr, None) is not None:
            cfg.set(section, key, getattr(args, attr))
    return cfg


def _log(args, cfg: Config, default: Path) -> MetricsLog:
    path = Path(args.log) if args.log else default
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("")
    log = MetricsLog(path)
    seed = cfg["corpus"]["seed"] if args.command == "gen-corpus" else cfg["run"]["seed"]
    log.write(event="start", command=args.command, config_hash=cfg.hash(), seed=seed)
    return log


def _n(v: int) -> Optional[int]:
    return v or None


def cmd_gen_corpus(args, cfg: Config) -> int:
    c = cfg["corpus"]
    out = Path(args.out)
    log = _log(args, cfg, out / "metrics.jsonl")
    spec = CorpusSpec(seed=c["seed"], n_train=c["n_train"], n_dev=c["n_dev"], n_test=c["n_test"],
                      n_unseen=c["n_unseen"], min_seconds=c["min_seconds"], max_seconds=c["max_seconds"])
    manifest = generate_corpus(spec, out)
    for split in ("train", "dev", "test", "test-unseen-noise"):
        recs = manifest.split(split)
        log.write(event="split", split=split, utterances=len(recs), frames=sum(r.n_frames for r in recs))
    log.write(event="done", manifest_sha256=file_digest(out / "manifest.csv"))
    print(f"wrote {len(manifest.records)} utterances to {out}")
    return 0


def cmd_train_perceptual(args, cfg: Config) -> int:
    p, o = cfg["perceptual"], cfg["optim"]
    corpus = Corpus.load(args.corpus)
    seed = cfg["run"]["seed"]
    log = _log(args, cfg, Path(args.out).with_suffix(".metrics.jsonl"))
    model = build_perceptual(cfg, corpus.manifest.symbols, seed)
    plan = TrainPlan(epochs=p["epochs"], batch_size=p["batch_size"], lr=p["lr"], beta1=o["beta1"], beta2=o["beta2"],
                     eps=o["eps"], clip_norm=o["clip_norm"], seed=seed, batches_per_epoch=_n(p["batches_per_epoch"]))
    weights = LossWeights(ctc=p["ctc_weight"], ctc_after=p["ctc_weight_after"], ctc_epochs=p["ctc_epochs"],
                          align=p["align_weight"], nll=p["nll_weight"])
    train_perceptual(corpus, model.encoder, model.decoder, model.coder, plan, weights, log,
                     diag_path=Path(args.out).with_suffix(".diverged.mfck"))
    ckpt = perceptual_checkpoint(model)
    ckpt.epoch, ckpt.config_hash = plan.epochs, cfg.hash()
    save_checkpoint(ckpt, args.out)
    log.write(event="done", checkpoint_sha256=file_digest(args.out))
    return 0


def cmd_train_enhance(args, cfg: Config) -> int:
    e, o = cfg["enhance"], cfg["optim"]
    corpus = Corpus.load(args.corpus)
    seed = cfg["run"]["seed"]
    log = _log(args, cfg, Path(args.out).with_suffix(".metrics.jsonl"))
    loss_cfg = LossConfig(e["spectral_norm"], e["perceptual_norm"], e["alpha"], e["tap"])
    perceptual = None
    if loss_cfg.alpha > 0:
        if not args.perceptual:
            raise ValueError("alpha > 0 needs --perceptual CHECKPOINT")
        perceptual = load_perceptual(load_checkpoint(args.perceptual)).encoder
    enhancer = build_enhancer(cfg, seed)
    plan = TrainPlan(epochs=e["epochs"], batch_size=e["batch_size"], lr=e["lr"], beta1=o["beta1"], beta2=o["beta2"],
                     eps=o["eps"], clip_norm=o["clip_norm"], seed=seed, batches_per_epoch=_n(e["batches_per_epoch"]),
                     crop_frames=_n(e["crop_frames"]))
    train_enhancement(corpus, enhancer, perceptual, loss_cfg, plan, log,
                      diag_path=Path(args.out).with_suffix(".diverged.mfck"))
    ckpt = Checkpoint(epoch=plan.epochs, config_hash=cfg.hash())
    ckpt.add_module("enhancer", enhancer)
    save_checkpoint(ckpt, args.out)
    log.write(event="done", checkpoint_sha256=file_digest(args.out))
    return 0


def cmd_finetune_asr(args, cfg: Config) -> int:
    f, o = cfg["finetune"], cfg["optim"]
    corpus = Corpus.load(args.corpus)
    seed = cfg["run"]["seed"]
    log = _log(args, cfg, Path(args.out).with_suffix(".metrics.jsonl"))
    enhancer = load_enhancer(load_checkpoint(args.enhancer))
    model = load_perceptual(load_checkpoint(args.recognizer))
    families = default_noise_families()
    if f["augment_noise"] not in families:
        raise ValueError(f"unknown augment_noise {f['augment_noise']!r}; choose from {sorted(families)}")
    plan = TrainPlan(epochs=f["epochs"], batch_size=f["batch_size"], lr=f["lr"], beta1=o["beta1"], beta2=o["beta2"],
                     eps=o["eps"], clip_norm=o["clip_norm"], lr_decay_factor=f["lr_decay_factor"],
                     decay_interval_epochs=f["decay_interval_epochs"], freeze_epochs=f["freeze_epochs"],
                     joint=f["joint"], augment_snr_range=(f["augment_snr_low"], f["augment_snr_high"]), seed=seed,
                     batches_per_epoch=_n(f["batches_per_epoch"]))
    finetune_recognizer(corpus, enhancer, model, plan, families[f["augment_noise"]], log,
                        ctc_weight=f["ctc_weight"], nll_weight=f["nll_weight"])
    ckpt = perceptual_checkpoint(model)
    ckpt.add_module("enhancer", enhancer)
    ckpt.epoch, ckpt.config_hash = plan.epochs, cfg.hash()
    save_checkpoint(ckpt, args.out)
    log.write(event="done", checkpoint_sha256=file_digest(args.out), joint=plan.joint)
    return 0


def _wav_inputs(paths) -> list:
    out = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob("*.wav")) if p.is_dir() else [p])
    if not out:
        raise ValueError("no input WAV files")
    return out


def cmd_enhance(args, cfg: Config) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = _log(args, cfg, out / "metrics.jsonl")
    enhancer = load_enhancer(load_checkpoint(args.enhancer))
    names = set()
    for path in _wav_inputs(args.inputs):
        if path.name in names:
            raise ValueError(f"duplicate output name {path.name}")
        names.add(path.name)
        noisy = read_wav(path)
        spec = dsp.stft(noisy)
        raw, _ = enhance_mags(enhancer, np.abs(spec.frames).astype(np.float32)[None])
        enhanced = dsp.istft(apply_mask(raw.data[0].astype(np.float64), spec))
        write_wav(enhanced, out / path.name)
        log.write(event="enhanced", file=path.name, frames=spec.n_frames,
                  mean_mask=float(np.clip(raw.data, 0, 1).mean()))
    log.write(event="done", files=len(names))
    return 0


def _enhanced_feats(path: str, utts, enhancer_cache: dict) -> list:
    if path not in enhancer_cache:
        enhancer_cache[path] = load_enhancer(load_checkpoint(path))
    enh = enhancer_cache[path]
    return [enhance_mags(enh, u.noisy_mag[None])[1].data[0] for u in utts]


def _system_feats(system: str, utts, enhancer_cache: dict) -> list:
    """Recognizer input features for a named system.

    ``clean``, ``noisy``, an enhancer checkpoint path, ``gate:LEVEL`` (noisy
    bins below LEVEL zeroed) or ``handicap:LEVEL:CHECKPOINT`` (the enhancer,
    but frames whose enhanced energy is below LEVEL, or below the utterance
    mean energy for ``handicap:mean:CHECKPOINT``, fall back to the noisy
    features, so the enhancer does nothing for low-energy units).
    """
    if system == "clean":
        return [u.clean_feats for u in utts]
    if system == "noisy":
        return [u.noisy_feats for u in utts]
    if system.startswith("gate:"):
        level = float(system[len("gate:"):])
        return [np.log1p(u.noisy_mag * (u.noisy_feats >= level)) for u in utts]
    if system.startswith("handicap:"):
        level, _, path = system[len("handicap:"):].partition(":")
        if not path:
            raise ValueError(f"expected handicap:LEVEL:CHECKPOINT, got {system!r}")
        out = []
        for u, f in zip(utts, _enhanced_feats(path, utts, enhancer_cache)):
            energy, mean = dsp.frame_energy(f)
            quiet = energy < (mean if level == "mean" else float(level))
            out.append(np.where(quiet[:, None], u.noisy_feats, f))
        return out
    return _enhanced_feats(system, utts, enhancer_cache)


def _hypotheses(model: PerceptualModel, feats) -> list:
    from .training import decode_batch, pad_batch
    hyps = []
    for i in range(0, len(feats), 8):
        batch, lengths = pad_batch(list(feats[i:i + 8]))
        hyps.extend(decode_batch(model, batch, lengths))
    return hyps


def cmd_evaluate(args, cfg: Config) -> int:
    corpus = Corpus.load(args.corpus)
    log = _log(args, cfg, Path(args.report).with_suffix(".metrics.jsonl"))
    utts = corpus.utterances(args.split, args.limit)
    enhancer = load_enhancer(load_checkpoint(args.enhancer)) if args.enhancer else None
    model = load_perceptual(load_checkpoint(args.recognizer)) if args.recognizer else None
    report = EvalReport(args.system or ("enhanced" if enhancer else "noisy"))
    feats = []
    for u in utts:
        clean = u.clean()
        noisy = u.noisy()
        if enhancer is None:
            est, f = noisy, u.noisy_feats
        else:
            spec = dsp.stft(noisy)
            raw, den = enhance_mags(enhancer, u.noisy_mag[None])
            est = dsp.istft(apply_mask(raw.data[0].astype(np.float64), spec))
            f = den.data[0]
        feats.append(f)
        report.add(UtteranceScore(u.record.utt_id, u.record.snr_db, si_snr(est, clean),
                                  log_spectral_distance(f, u.clean_feats)))
    if model is not None:
        for row, hyp, u in zip(report.rows, _hypotheses(model, feats), utts):
            ref = model.coder.encode(u.record.targets)
            row.edits = edit_distance(hyp, ref)
            row.ref_len = len(ref)
            row.per = row.edits / len(ref)
    Path(args.report).write_text(report.to_csv())
    summary = report.summary()
    if args.summary:
        Path(args.summary).write_text(summary + "\n")
    print(summary)
    log.write(event="aggregate", split=args.split, **report.aggregate())
    for bucket, agg in report.by_snr().items():
        log.write(event="bucket", bucket=bucket, **agg)
    return 0


def cmd_analyze_phonemes(args, cfg: Config) -> int:
    corpus = Corpus.load(args.corpus)
    log = _log(args, cfg, Path(args.scatter).with_suffix(".metrics.jsonl"))
    model = load_perceptual(load_checkpoint(args.recognizer))
    if model.coder.kind != "phonemes":
        raise ValueError("phoneme analysis needs a recognizer trained on phoneme targets")
    utts = corpus.utterances(args.split, args.limit)
    refs = [u.record.targets for u in utts]
    inventory = corpus.manifest.symbols
    cache = {}
    precisions = {}
    for tag, system in (("with", args.with_system), ("without", args.without_system)):
        feats = _system_feats(system, utts, cache)
        hyps = [model.coder.decode(h) for h in _hypotheses(model, feats)]
        precisions[tag] = phoneme_precision(hyps, refs, inventory)
        log.write(event="precision", system=tag, **{p: v for p, v in precisions[tag].items()})
    energy = avg_phoneme_energy([dsp.frame_energy(u.clean_feats)[0] for u in utts],
                                [u.record.alignment for u in utts])
    energy = {p: e for p, e in energy.items() if p in inventory}
    kinds = {}
    for unit in corpus.manifest.inventory:
        kinds.setdefault(unit.kind, []).append(unit.name)
    analysis = energy_precision_analysis(energy, precision_improvement(precisions["with"], precisions["without"]),
                                         kinds)
    Path(args.scatter).write_text(analysis.to_csv())
    fmt = lambda r: "undefined" if r is None else f"{r:.4f}"
    print(f"pearson(all phonemes) = {fmt(analysis.pearson_all)}")
    for name, r in analysis.pearson_subsets.items():
        print(f"pearson({name} units) = {fmt(r)}")
    log.write(event="pearson", all=analysis.pearson_all, **analysis.pearson_subsets)
    return 0


# ---------------------------------------------------------------- argument parsing

def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perceptual-se", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="INI config file (every key optional)")
        p.add_argument("--log", help="metrics log path (JSON lines; truncated at start)")
        return p

    p = command("gen-corpus", "generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = command("train-perceptual", "pretrain the perceptual model / recognizer on clean features")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--family")
    p.add_argument("--targets")

    p = command("train-enhance", "train the masking enhancer")
    p.add_argument("--corpus", required=True)
    p.add_argument("--perceptual", help="perceptual-model checkpoint (needed when alpha > 0)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)

    p = command("finetune-asr", "fine-tune the recognizer on enhanced, freshly noised audio")
    p.add_argument("--corpus", required=True)
    p.add_argument("--enhancer", required=True)
    p.add_argument("--recognizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--joint", type=_bool)

    p = command("enhance", "denoise WAV files")
    p.add_argument("--enhancer", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("inputs", nargs="+", help="WAV files or directories of WAV files")

    p = command("evaluate", "score a system on a corpus split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--enhancer", help="enhancer checkpoint; omit to score the noisy input")
    p.add_argument("--recognizer", help="recognizer checkpoint for phone error rates")
    p.add_argument("--report", required=True, help="per-utterance CSV")
    p.add_argument("--summary", help="plain-text summary file")
    p.add_argument("--system", help="system name written into the report")
    p.add_argument("--limit", type=int)

    p = command("analyze-phonemes", "phoneme energy vs precision-improvement scatter data")
    p.add_argument("--corpus", required=True)
    p.add_argument("--recognizer", required=True)
    p.add_argument("--with", dest="with_system", required=True,
                   help="system trained with the perceptual loss: checkpoint, clean, noisy, gate:LEVEL "
                        "or handicap:LEVEL:CHECKPOINT")
    p.add_argument("--without", dest="without_system", required=True, help="baseline system, same forms")
    p.add_argument("--split", default="test")
    p.add_argument("--scatter", required=True, help="CSV of phoneme, avg energy, precision improvement")
    p.add_argument("--limit", type=int)
    return parser


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-perceptual": cmd_train_perceptual,
    "train-enhance": cmd_train_enhance,
    "finetune-asr": cmd_finetune_asr,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "analyze-phonemes": cmd_analyze_phonemes,
}


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CheckpointError, ManifestError, WavFormatError, TrainingDivergedError,
            ValueError, OSError, KeyError) as exc:
        print(f"perceptual-se {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
