"""Sectioned key=value run configuration: files, overrides, echo.

A run is described by three sections mirroring the library layers:
``[model]`` holds everything the network blueprint needs, ``[data]`` names
the corpus, and ``[training]`` holds the loop and optimizer knobs. Values
come from defaults, then a config file, then ``section.key=value``
overrides, in that order; every key is type-checked against the schema so
typos fail loudly with the full dotted name.
"""

import configparser
import copy
import importlib.resources
import os
from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig
from .training import OptimizerConfig, TrainConfig

# Converter name per key; resolve() rejects anything not listed here.
SCHEMA = {
    "model": {
        "architecture": "str",
        "embed_dim": "int",
        "boom_dim": "int",
        "num_heads": "int",
        "adaptive_cutoffs": "int_list",
        "adaptive_div_factor": "int",
        "dropout": "float",
        "embedding_rnn_dropout": "float",
        "rnn_dropout": "float",
        "rnn_weight_dropout": "float",
        "bptt_len": "int",
        "train_attn_len": "int",
        "eval_attn_len": "int",
        "tie_weights": "bool",
        "dtype": "str",
    },
    "data": {
        "kind": "str",
        "dataset": "path",
        "valid_dataset": "path",
        "test_dataset": "path",
        "vocab": "path",
        "article_marker": "str",
        "split": "int_list",
        "synthetic_chars": "int",
        "synthetic_seed": "int",
    },
    "training": {
        "total_steps": "int",
        "batch_size": "int",
        "micro_batches": "int",
        "seed": "int",
        "log_every": "int",
        "val_every": "int",
        "val_batch_size": "int",
        "val_attn_len": "int",
        "checkpoint_every": "int",
        "deterministic": "bool",
        "peak_lr": "float",
        "start_lr": "float",
        "final_lr": "float",
        "weight_decay": "float",
        "beta1": "float",
        "beta2": "float",
        "epsilon": "float",
        "grad_clip": "float",
    },
}

# Keys absent here must be given somewhere: the seed is deliberately
# never defaulted, so every run's determinism story is spelled out.
DEFAULTS = {
    "model": {
        "architecture": "hybrid",
        "embed_dim": 512,
        "boom_dim": 2048,
        "num_heads": 8,
        "adaptive_cutoffs": (),
        "adaptive_div_factor": 4,
        "dropout": 0.0,
        "embedding_rnn_dropout": 0.0,
        "rnn_dropout": 0.0,
        "rnn_weight_dropout": 0.0,
        "bptt_len": 512,
        "train_attn_len": 768,
        "eval_attn_len": 2048,
        "tie_weights": True,
        "dtype": "float32",
    },
    "data": {
        "kind": "char",
        "article_marker": "<article>",
        "split": (90, 5, 5),
        "synthetic_chars": 1_000_000,
        "synthetic_seed": 0,
    },
    "training": {
        "batch_size": 64,
        "micro_batches": 1,
        "log_every": 1,
        "val_every": 0,
        "val_batch_size": 1,
        "checkpoint_every": 0,
        "deterministic": True,
        "start_lr": 1e-7,
        "final_lr": 5e-6,
        "weight_decay": 0.0,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
        "grad_clip": 0.25,
    },
}

DATA_KINDS = ("char", "word", "byte", "ids", "synthetic")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

_OPT_KEYS = ("peak_lr", "start_lr", "final_lr", "weight_decay",
             "beta1", "beta2", "epsilon", "grad_clip")


def _check_key(section, key):
    if section not in SCHEMA:
        known = ", ".join(sorted(SCHEMA))
        raise ConfigError(f"unknown config section [{section}]; sections: {known}")
    if key not in SCHEMA[section]:
        known = ", ".join(sorted(SCHEMA[section]))
        raise ConfigError(
            f"unknown config key {section}.{key}; [{section}] keys: {known}")


def _convert(section, key, raw):
    kind = SCHEMA[section][key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int_list":
            if not raw:
                return ()
            return tuple(int(part) for part in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(
            f"{section}.{key}: cannot parse {raw!r} as {kind}") from None


def format_value(value):
    """One config value back to its file spelling."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path):
    """Parse a sectioned key=value file into raw string values."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from None
    return {section: dict(parser.items(section))
            for section in parser.sections()}


def parse_override(text):
    """Split one ``section.key=value`` command-line override."""
    head, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} needs the form section.key=value")
    section, dot, key = head.strip().partition(".")
    if not dot or not section or not key:
        raise ConfigError(f"override {text!r} needs a dotted section.key name")
    return section, key, value


@dataclass
class ResolvedConfig:
    """Fully merged, type-checked run description."""

    model: dict
    data: dict
    training: dict

    def section(self, name):
        return getattr(self, name)

    def model_config(self, vocab_size) -> ModelConfig:
        kwargs = {k: v for k, v in self.model.items() if k != "architecture"}
        return ModelConfig(vocab_size=vocab_size, **kwargs)

    def optimizer_config(self) -> OptimizerConfig:
        t = self.training
        if "peak_lr" not in t:
            raise ConfigError("training.peak_lr must be set")
        return OptimizerConfig(**{k: t[k] for k in _OPT_KEYS if k in t})

    def train_config(self, out_dir=None) -> TrainConfig:
        t = self.training
        if "seed" not in t:
            raise ConfigError("training.seed must be set explicitly")
        return TrainConfig(
            optimizer=self.optimizer_config(),
            batch_size=t["batch_size"],
            bptt_len=self.model["bptt_len"],
            micro_batches=t["micro_batches"],
            seed=t["seed"],
            log_every=t["log_every"],
            val_every=t["val_every"],
            val_batch_size=t["val_batch_size"],
            val_attn_len=t.get("val_attn_len"),
            checkpoint_every=t["checkpoint_every"],
            out_dir=out_dir,
            deterministic=t["deterministic"])


def resolve(file_values=None, overrides=()) -> ResolvedConfig:
    """Merge defaults, file values, and overrides into one description."""
    merged = copy.deepcopy(DEFAULTS)
    for section, items in (file_values or {}).items():
        for key, raw in items.items():
            _check_key(section, key)
            merged[section][key] = _convert(section, key, raw)
    for text in overrides:
        section, key, raw = parse_override(text)
        _check_key(section, key)
        merged[section][key] = _convert(section, key, raw)
    return ResolvedConfig(**merged)


def validate_for_training(cfg: ResolvedConfig):
    """Demand the keys a training run cannot guess; absolutize paths."""
    t = cfg.training
    for key in ("seed", "peak_lr", "total_steps"):
        if key not in t:
            raise ConfigError(f"training.{key} must be set explicitly")
    kind = cfg.data["kind"]
    if kind not in DATA_KINDS:
        raise ConfigError(
            f"data.kind must be one of {', '.join(DATA_KINDS)}, got {kind!r}")
    if kind != "synthetic":
        path = cfg.data.get("dataset")
        if not path:
            raise ConfigError("data.dataset must name the training corpus file")
        if not os.path.exists(path):
            raise ConfigError(f"data.dataset path does not exist: {path}")
        cfg.data["dataset"] = os.path.abspath(path)
    if kind == "ids":
        vocab = cfg.data.get("vocab")
        if not vocab:
            raise ConfigError("data.vocab must name the symbol sidecar file")
        if not os.path.exists(vocab):
            raise ConfigError(f"data.vocab path does not exist: {vocab}")
        cfg.data["vocab"] = os.path.abspath(vocab)
    for key in ("valid_dataset", "test_dataset"):
        path = cfg.data.get(key)
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"data.{key} path does not exist: {path}")
            cfg.data[key] = os.path.abspath(path)


def echo_text(cfg: ResolvedConfig) -> str:
    """The resolved configuration as a reloadable config file."""
    lines = []
    for section in ("model", "data", "training"):
        lines.append(f"[{section}]")
        items = cfg.section(section)
        for key in sorted(items):
            if items[key] is None:
                continue
            lines.append(f"{key} = {format_value(items[key])}")
        lines.append("")
    return "\n".join(lines)


def preset_names():
    root = importlib.resources.files("hybridlm") / "presets"
    return sorted(entry.name[:-4] for entry in root.iterdir()
                  if entry.name.endswith(".ini"))


def locate_config(name_or_path):
    """An existing file wins; otherwise the argument names a bundled preset."""
    if os.path.exists(name_or_path):
        return str(name_or_path)
    root = importlib.resources.files("hybridlm") / "presets"
    candidate = root / f"{name_or_path}.ini"
    if candidate.is_file():
        return str(candidate)
    known = ", ".join(preset_names())
    raise ConfigError(
        f"no config file or preset named {name_or_path!r}; presets: {known}")
