"""Run configuration: INI-style ``key = value`` sections with documented defaults.

Every key must appear in ``DEFAULTS``; unknown sections or keys are errors so
typos never fall back silently to a default.  The canonical text of the fully
resolved configuration is hashed into every log and checkpoint.
"""
from __future__ import annotations

import configparser
import hashlib
from collections import OrderedDict
from pathlib import Path

# section -> key -> (default, help)
DEFAULTS = OrderedDict([
    ("run", OrderedDict([
        ("seed", (0, "seed for initialization, shuffling, crops and augmentation")),
    ])),
    ("corpus", OrderedDict([
        ("seed", (0, "corpus generation seed")),
        ("n_train", (2000, "training utterances")),
        ("n_dev", (200, "development utterances")),
        ("n_test", (200, "test utterances (seen noise families)")),
        ("n_unseen", (200, "test utterances with the held-out noise family")),
        ("min_seconds", (1.0, "shortest utterance")),
        ("max_seconds", (3.0, "longest utterance")),
    ])),
    ("perceptual", OrderedDict([
        ("family", ("mlp-context", "mlp-context | wide-resnet | crdnn")),
        ("targets", ("phonemes", "phonemes | characters | word-pieces")),
        ("inputs", ("spectral", "spectral | fbank40 | fbank80")),
        ("hidden", (256, "mlp-context hidden width")),
        ("layers", (6, "mlp-context layer count")),
        ("context", (5, "mlp-context frames of context per side")),
        ("decoder_hidden", (256, "GRU decoder units")),
        ("decoder_embed", (64, "decoder token embedding size")),
        ("epochs", (5, "training epochs")),
        ("batch_size", (16, "utterances per batch")),
        ("lr", (1e-3, "initial learning rate")),
        ("batches_per_epoch", (0, "0 = full pass over the training split")),
        ("ctc_epochs", (5, "epochs trained with the CTC head (and alignment loss)")),
        ("ctc_weight", (1.0, "CTC weight during the CTC epochs")),
        ("ctc_weight_after", (0.0, "CTC and alignment scale after the CTC epochs")),
        ("align_weight", (1.0, "alignment-loss weight")),
        ("nll_weight", (1.0, "decoder NLL weight")),
    ])),
    ("enhance", OrderedDict([
        ("width_divisor", (8, "divide the full block widths (128..512) by this; 1 = full size")),
        ("fc_layers", (2, "fully-connected layers in the head (1 or 2)")),
        ("fc_hidden", (256, "hidden units of the first fully-connected layer")),
        ("se", (True, "squeeze-and-excitation in every block")),
        ("spectral_norm", ("L1", "L1 | L2")),
        ("perceptual_norm", ("L1", "L1 | L2")),
        ("alpha", (1.0, "perceptual-loss scale; 0 = spectral-only")),
        ("tap", ("layer6", "perceptual-model layer compared on clean vs enhanced")),
        ("epochs", (5, "training epochs")),
        ("batch_size", (8, "crops per batch")),
        ("crop_frames", (48, "random crop length in frames; 0 = whole utterances")),
        ("lr", (1e-3, "initial learning rate")),
        ("batches_per_epoch", (0, "0 = full pass over the training split")),
    ])),
    ("finetune", OrderedDict([
        ("joint", (False, "also update the enhancer through the recognizer loss")),
        ("epochs", (6, "fine-tuning epochs")),
        ("batch_size", (8, "utterances per batch")),
        ("lr", (5e-4, "initial learning rate")),
        ("lr_decay_factor", (0.7, "multiply the learning rate by this ...")),
        ("decay_interval_epochs", (3, "... every this many epochs")),
        ("freeze_epochs", (3, "slow thaw: epochs during which only the decoder trains")),
        ("augment_snr_low", (0.0, "fresh-noise SNR lower bound (dB)")),
        ("augment_snr_high", (15.0, "fresh-noise SNR upper bound (dB)")),
        ("augment_noise", ("pink", "noise family mixed in during fine-tuning")),
        ("batches_per_epoch", (0, "0 = full pass over the training split")),
        ("ctc_weight", (1.0, "CTC weight")),
        ("nll_weight", (1.0, "decoder NLL weight")),
    ])),
    ("optim", OrderedDict([
        ("beta1", (0.9, "Adam first-moment decay")),
        ("beta2", (0.999, "Adam second-moment decay")),
        ("eps", (1e-8, "Adam denominator guard")),
        ("clip_norm", (5.0, "global gradient-norm clip")),
    ])),
])


class ConfigError(ValueError):
    pass


def _parse(value: str, default, where: str):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}") from None
    return value.strip()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config:
    def __init__(self, values=None):
        self.values = OrderedDict((s, OrderedDict((k, d) for k, (d, _) in keys.items())) for s, keys in DEFAULTS.items())
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.set(section, key, value)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "Config":
        parser = configparser.ConfigParser(interpolation=None, default_section="\x00none")
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        cfg = cls()
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw, source)
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        return cls.from_text(path.read_text(), str(path))

    def set(self, section: str, key: str, value, source: str = "override") -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"{source}: unknown section [{section}]; known: {', '.join(DEFAULTS)}")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"{source}: unknown key {key!r} in [{section}]; "
                              f"known: {', '.join(DEFAULTS[section])}")
        default = DEFAULTS[section][key][0]
        if isinstance(value, str):
            value = _parse(value, default, f"{source} [{section}] {key}")
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        self.values[section][key] = value

    def __getitem__(self, section: str) -> OrderedDict:
        return self.values[section]

    def to_text(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_format(v)}" for k, v in keys.items())
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


def documented_defaults() -> str:
    """Commented config text listing every key with its default."""
    lines = []
    for section, keys in DEFAULTS.items():
        lines.append(f"[{section}]")
        for key, (default, help_) in keys.items():
            lines.append(f"# {help_}")
            lines.append(f"{key} = {_format(default)}")
        lines.append("")
    return "\n".join(lines)
