"""Command-line driver: train, evaluate, params, schedule.

A thin single-threaded front over the library: every subcommand resolves
a configuration, calls the matching library entry point, and maps errors
to exit codes (0 ok, 2 bad configuration, 3 I/O or checkpoint trouble,
4 numerical abort). Training runs write a ``config.echo`` file holding
the fully resolved configuration; re-running from the echo reproduces
the run bit-exactly in deterministic mode.
"""

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as run_config
from .arch import NAMED_ARCHITECTURES, named_architecture, parse_architecture
from .checkpoint import apply_parameters, load_arrays
from .config import DATA_KINDS, DEFAULTS, SCHEMA, format_value
from .data import (Corpus, Vocab, byte_tokenize, char_split_spans,
                   load_char_corpus, load_pretokenized, load_word_corpus,
                   synthetic_text)
from .errors import (ArchitectureError, CheckpointError, ConfigError,
                     NumericalError)
from .evaluation import EvalReport, evaluate
from .model import ModelConfig, build_model, count_params
from .training import one_cycle_lr, train


def architecture_of(text):
    """A named architecture or a raw block string, whichever matches."""
    if text in NAMED_ARCHITECTURES:
        return named_architecture(text)
    return parse_architecture(text)


# ---------------------------------------------------------------------------
# corpus loading


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def _read_text(path):
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def load_training_corpora(cfg):
    """(train, valid, test) per the [data] section; valid/test may be None."""
    d = cfg.data
    kind = d["kind"]
    if kind == "synthetic":
        text = synthetic_text(d["synthetic_chars"], seed=d["synthetic_seed"])
        return load_char_corpus(text, split=d["split"])
    if kind == "char":
        return load_char_corpus(_read_bytes(d["dataset"]), split=d["split"])
    if kind == "byte":
        raw = _read_bytes(d["dataset"])
        return tuple(byte_tokenize(raw[lo:hi])
                     for lo, hi in char_split_spans(raw, d["split"]))
    if kind == "word":
        marker = d["article_marker"]
        first = load_word_corpus(_read_text(d["dataset"]), marker)
        rest = [
            load_word_corpus(_read_text(d[key]), marker, vocab=first.vocab)
            if d.get(key) else None
            for key in ("valid_dataset", "test_dataset")
        ]
        return (first, *rest)
    if kind == "ids":
        first = load_pretokenized(d["dataset"], d["vocab"])
        rest = [load_pretokenized(d[key], d["vocab"]) if d.get(key) else None
                for key in ("valid_dataset", "test_dataset")]
        return (first, *rest)
    raise ConfigError(
        f"data.kind must be one of {', '.join(DATA_KINDS)}, got {kind!r}")


_SPLIT_INDEX = {"train": 0, "valid": 1, "test": 2}


def _pick_piece(raw, split_props, split_name):
    if split_name == "all":
        return raw
    spans = char_split_spans(raw, tuple(split_props))
    lo, hi = spans[_SPLIT_INDEX[split_name]]
    return raw[lo:hi]


def _split_file(section, args):
    """The per-split corpus file for kinds that ship one file per split."""
    if args.dataset:
        return args.dataset
    if args.split == "all":
        raise ConfigError("pass a dataset file to score it whole")
    key = ("dataset", "valid_dataset", "test_dataset")[_SPLIT_INDEX[args.split]]
    path = section.get(key)
    if not path:
        raise ConfigError(f"checkpoint stores no data.{key}; pass a dataset file")
    return path


def load_eval_corpus(section, args, vocab, model_vocab_size):
    """Rebuild the corpus a checkpoint should be scored on.

    ``section`` is the [data] mapping stored in the checkpoint (possibly
    empty); an explicit dataset argument overrides its paths, ``--kind``
    overrides its kind. Character data is re-encoded with the checkpoint
    vocabulary so rare symbols keep the ids they had in training.
    """
    kind = args.kind or section.get("kind")
    if kind is None:
        raise ConfigError("checkpoint stores no data section; pass --kind")
    split_props = tuple(section.get("split", (90, 5, 5)))
    if kind == "synthetic":
        chars = section.get("synthetic_chars", DEFAULTS["data"]["synthetic_chars"])
        seed = section.get("synthetic_seed", DEFAULTS["data"]["synthetic_seed"])
        raw = synthetic_text(chars, seed=seed).encode("utf-8")
        piece = _pick_piece(raw, split_props, args.split)
        return Corpus(vocab.encode(piece.decode("utf-8")), vocab,
                      utf8_bytes=len(piece))
    if kind == "char":
        raw = _read_bytes(args.dataset or _require(section, "dataset"))
        piece = _pick_piece(raw, split_props, args.split)
        return Corpus(vocab.encode(piece.decode("utf-8")), vocab,
                      utf8_bytes=len(piece))
    if kind == "byte":
        raw = _read_bytes(args.dataset or _require(section, "dataset"))
        corpus = byte_tokenize(_pick_piece(raw, split_props, args.split))
        if corpus.vocab_size != model_vocab_size:
            raise ConfigError(
                f"byte table size {corpus.vocab_size} != model vocabulary "
                f"{model_vocab_size}")
        return corpus
    if kind == "word":
        marker = args.article_marker or section.get(
            "article_marker", DEFAULTS["data"]["article_marker"])
        return load_word_corpus(_read_text(_split_file(section, args)),
                                marker, vocab=vocab)
    if kind == "ids":
        vocab_path = args.vocab or section.get("vocab")
        if not vocab_path:
            raise ConfigError("id corpora need --vocab for the symbol sidecar")
        corpus = load_pretokenized(_split_file(section, args), vocab_path)
        if corpus.vocab_size != model_vocab_size:
            raise ConfigError(
                f"sidecar vocabulary {corpus.vocab_size} != model vocabulary "
                f"{model_vocab_size}")
        return corpus
    raise ConfigError(
        f"data kind must be one of {', '.join(DATA_KINDS)}, got {kind!r}")


def _require(section, key):
    path = section.get(key)
    if not path:
        raise ConfigError(f"checkpoint stores no data.{key}; pass a dataset file")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    path = run_config.locate_config(args.config)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"training.seed={args.seed}")
    if args.steps is not None:
        overrides.append(f"training.total_steps={args.steps}")
    cfg = run_config.resolve(run_config.read_config_file(path), overrides)
    run_config.validate_for_training(cfg)

    train_corpus, valid_corpus, _ = load_training_corpora(cfg)
    vocab = train_corpus.vocab
    model_cfg = cfg.model_config(train_corpus.vocab_size)
    spec = architecture_of(cfg.model["architecture"])
    train_cfg = cfg.train_config(out_dir=args.out)
    model = build_model(spec, model_cfg, train_cfg.seed)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = run_config.echo_text(cfg)
    (out_dir / "config.echo").write_text(echo)

    meta = {
        "architecture": cfg.model["architecture"],
        "model_config": asdict(model_cfg),
        "vocab_symbols": list(vocab.symbols),
        "vocab_unk": vocab.unk_id,
        "vocab_pad": vocab.pad_id,
        "data_section": dict(cfg.data),
        "config_echo": echo,
    }
    print(f"{spec} | {count_params(model):,} parameters | "
          f"vocabulary {train_corpus.vocab_size}")
    result = train(model, train_corpus, train_cfg, cfg.training["total_steps"],
                   valid_corpus=valid_corpus, resume_from=args.resume,
                   checkpoint_meta=meta)
    print(f"finished at step {result.steps_completed}")
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    if result.final_valid_bpc is not None:
        print(f"valid bpc: {result.final_valid_bpc:.4f}")
    return 0


def cmd_evaluate(args):
    meta, arrays = load_arrays(args.checkpoint)
    blueprint = meta.get("model_config")
    if blueprint is None:
        raise CheckpointError(
            f"{args.checkpoint} stores no model blueprint; it was not written "
            "by the training command")
    model_cfg = ModelConfig(**blueprint)
    model = build_model(architecture_of(meta["architecture"]), model_cfg, 0)
    apply_parameters(model, arrays, meta.get("aliases"))
    vocab = Vocab(meta["vocab_symbols"], unk_id=meta.get("vocab_unk"),
                  pad_id=meta.get("vocab_pad"))

    corpus = load_eval_corpus(dict(meta.get("data_section") or {}), args,
                              vocab, model_cfg.vocab_size)
    out = evaluate(model, corpus, eval_attn_len=args.attn_len,
                   batch_size=args.batch_size, bptt_len=args.bptt,
                   collect_token_nll=bool(args.token_nll))
    if args.token_nll:
        report, token_nll = out
        np.save(args.token_nll, token_nll)
    else:
        report = out
    print(report.summary())
    print(EvalReport.CSV_HEADER)
    print(report.to_csv_row())
    return 0


_LAYER_LABELS = {
    "DropLayer": "dropout",
    "QRNN": "qrnn",
    "RecurrentBoom": "qrnn block",
    "RelativeAttention": "attention",
    "FeedForward": "boom",
}


def _layer_param_count(layer):
    seen = set()
    total = 0
    for p in layer.parameters():
        if id(p) not in seen:
            seen.add(id(p))
            total += p.data.size
    return total


def cmd_params(args):
    file_values = None
    if args.config:
        file_values = run_config.read_config_file(
            run_config.locate_config(args.config))
    cfg = run_config.resolve(file_values, args.set)
    arch_text = args.architecture or cfg.model["architecture"]
    spec = architecture_of(arch_text)
    model = build_model(spec, cfg.model_config(args.vocab_size), 0)

    total = count_params(model)
    inner = count_params(model, include_embeddings=False)
    print(f"architecture        {spec}")
    print(f"vocabulary          {args.vocab_size}")
    for i, layer in enumerate(model.layers, start=1):
        label = _LAYER_LABELS.get(type(layer).__name__, type(layer).__name__)
        print(f"  layer {i:<2} {label:<12} {_layer_param_count(layer):>12,}")
    print(f"embedding and head  {total - inner:>12,}")
    print(f"non-embedding       {inner:>12,}")
    print(f"total               {total:>12,}")
    return 0


def cmd_schedule(args):
    total = args.total
    steps = list(range(0, total + 1, args.stride))
    if steps[-1] != total:
        steps.append(total)
    lines = ["step,lr"]
    for step in steps:
        lr = one_cycle_lr(step, total, args.start, args.peak, args.final)
        lines.append(f"{step},{lr:.10g}")
    text = "\n".join(lines) + "\n"
    if args.csv:
        Path(args.csv).write_text(text)
        print(f"wrote {len(steps)} schedule points to {args.csv}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def _config_key_help():
    lines = ["configuration keys (file sections, or --set SECTION.KEY=VALUE):"]
    for section in ("model", "data", "training"):
        for key in sorted(SCHEMA[section]):
            kind = SCHEMA[section][key]
            if key in DEFAULTS[section]:
                tail = f"default {format_value(DEFAULTS[section][key])}"
            else:
                tail = "no default"
            lines.append(f"  {section}.{key:<22} {kind:<9} {tail}")
    return "\n".join(lines)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hybridlm",
        description="Train and inspect hybrid recurrent/attention language models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "train", help="run a training loop from a preset or config file",
        epilog=_config_key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config", help="bundled preset name or config file path")
    p.add_argument("--out", required=True,
                   help="directory for checkpoint.bin, metrics.csv, config.echo")
    p.add_argument("--set", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--seed", type=int,
                   help="shorthand for --set training.seed=N")
    p.add_argument("--steps", type=int,
                   help="shorthand for --set training.total_steps=N")
    p.add_argument("--resume", metavar="CHECKPOINT",
                   help="continue a run from this checkpoint file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a corpus with a checkpoint")
    p.add_argument("checkpoint", help="checkpoint written by the train command")
    p.add_argument("dataset", nargs="?",
                   help="corpus file; defaults to the one stored in the checkpoint")
    p.add_argument("--kind", choices=DATA_KINDS,
                   help="corpus format; defaults to the checkpoint's")
    p.add_argument("--split", choices=("train", "valid", "test", "all"),
                   default="test", help="which split to score (default test)")
    p.add_argument("--vocab", help="symbol sidecar for id corpora")
    p.add_argument("--article-marker",
                   help="article delimiter line for word corpora")
    p.add_argument("--attn-len", type=int,
                   help="evaluation attention length; defaults to the model's")
    p.add_argument("--batch-size", type=int, default=1,
                   help="parallel scoring streams (default 1)")
    p.add_argument("--bptt", type=int,
                   help="scoring window length; defaults to the model's")
    p.add_argument("--token-nll", metavar="OUT.npy",
                   help="also dump per-token negative log-likelihoods")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "params", help="print the parameter table for an architecture",
        epilog=_config_key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("architecture", nargs="?",
                   help="named architecture or block string; defaults to the "
                        "config's model.architecture")
    p.add_argument("--config", help="preset name or config file for dimensions")
    p.add_argument("--set", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--vocab-size", type=int, default=257,
                   help="vocabulary size to count with (default 257)")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("schedule", help="emit a warmup/decay learning-rate curve")
    p.add_argument("total", type=int, help="total batch steps")
    p.add_argument("--start", type=float, default=1e-7,
                   help="starting learning rate (default 1e-7)")
    p.add_argument("--peak", type=float, required=True,
                   help="peak learning rate, reached a third of the way in")
    p.add_argument("--final", type=float, default=5e-6,
                   help="final learning rate (default 5e-6)")
    p.add_argument("--stride", type=int, default=1,
                   help="emit every Nth step (endpoints always included)")
    p.add_argument("--csv", metavar="PATH",
                   help="write the curve here instead of stdout")
    p.set_defaults(func=cmd_schedule)

    return parser


def entry(argv=None):
    """Parse arguments and run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ArchitectureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
