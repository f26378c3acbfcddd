"""Command-line surface tying corpus prep, training, and evaluation together.

Commands:
  prep          tokenize a raw corpus, build the vocabulary, encode the splits
  train         train a model from a flat key=value config file
  eval          perplexity of a checkpoint on an encoded split
  count-params  exact parameter count, rounded label, and closed form
  gradcheck     finite-difference check of the analytic gradients
  sweep         train one model per (policy, K) and emit a CSV

Exit codes: 0 success, 1 usage or config error, 2 numerical divergence,
3 I/O error.

Config files are flat `key = value` lines; `#` starts a comment. Unknown
keys are rejected and missing required keys are reported together.
"""

from __future__ import annotations

import argparse
import hashlib
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import (
    EncodedCorpus,
    EncodedSplit,
    Vocabulary,
    build_vocab,
    encode,
    read_sentences,
    sentence_token_stream,
    split_stream_bytes,
)
from .evaluation import (
    capacity_report,
    format_capacity_table,
    perplexity,
    run_k_sweep,
)
from .linalg import Rng
from .models import DivergenceError, InitScheme, ModelSpec, param_shapes
from .training import TrainConfig, fit, grad_check

_CKPT_MAGIC = b"RRNTCKPT"
_CKPT_VERSION = 1


class UsageError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Flat config files


_CONFIG_DEFAULTS = {
    "embed": None,
    "k": "1",
    "policy": "f",
    "factor": "100",
    "t_bptt": None,
    "batch": None,
    "lr0": None,
    "halving_ratio": "1.003",
    "patience": "5",
    "p_drop": "0.5",
    "clip_norm": None,
    "init": None,
    "init_stddev": "0.001",
    "init_lo": "-0.05",
    "init_hi": "0.05",
    "init_bias": "same",
    "max_epochs": "100",
    "timing": "off",
    "checkpoint_dtype": "f64",
}
_CONFIG_REQUIRED = ("corpus_dir", "out_dir", "family", "hidden", "regime", "seed")
_REGIME_DEFAULTS = {
    "simple": {"t_bptt": "20", "batch": "1", "lr0": "0.1", "clip_norm": "none",
               "init": "gaussian"},
    "gated": {"t_bptt": "35", "batch": "20", "lr0": "1.0", "clip_norm": "5",
              "init": "uniform"},
}


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    problems: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {raw!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            problems.append(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    if problems:
        raise ConfigError("; ".join(problems))
    return values


@dataclass
class RunConfig:
    """Validated flat configuration for train/sweep runs."""

    text: str
    values: dict[str, str]

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text(encoding="utf-8")
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = parse_config_text(text)
        problems = []
        known = set(_CONFIG_DEFAULTS) | set(_CONFIG_REQUIRED)
        for key in values:
            if key not in known:
                problems.append(f"unknown key {key!r}")
        for key in _CONFIG_REQUIRED:
            if key not in values:
                problems.append(f"missing required key {key!r}")
        if problems:
            raise ConfigError("; ".join(sorted(problems)))
        regime = values.get("regime", "simple")
        if regime not in _REGIME_DEFAULTS:
            raise ConfigError(f"unknown regime {regime!r}")
        merged = dict(_CONFIG_DEFAULTS)
        merged.update(_REGIME_DEFAULTS[regime])
        merged.update(values)
        return cls(text=text, values=merged)

    def _get(self, key: str, convert, describe: str):
        raw = self.values.get(key)
        if raw is None:
            raise ConfigError(f"missing key {key!r}")
        try:
            return convert(raw)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"key {key!r}: expected {describe}, got {raw!r}") from err

    def str_of(self, key: str) -> str:
        return self._get(key, str, "a string")

    def int_of(self, key: str) -> int:
        return self._get(key, int, "an integer")

    def float_of(self, key: str) -> float:
        return self._get(key, float, "a number")

    def optional_float(self, key: str) -> float | None:
        raw = self.values.get(key)
        if raw is None or raw.lower() == "none":
            return None
        return self.float_of(key)

    def model_spec(self, v: int) -> ModelSpec:
        family = self.str_of("family")
        embed = self.values.get("embed")
        try:
            return ModelSpec(
                family=family,
                v=v,
                h=self.int_of("hidden"),
                e=int(embed) if embed else None,
                k=self.int_of("k"),
                policy=self.str_of("policy"),
                factor=self.int_of("factor") if family == "mrnn" else 0,
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def train_config(self) -> TrainConfig:
        kind = self.str_of("init")
        try:
            init = InitScheme(kind=kind, stddev=self.float_of("init_stddev"),
                              lo=self.float_of("init_lo"), hi=self.float_of("init_hi"),
                              bias=self.str_of("init_bias"))
            return TrainConfig(
                regime=self.str_of("regime"),
                t_bptt=self.int_of("t_bptt"),
                batch=self.int_of("batch"),
                lr0=self.float_of("lr0"),
                init=init,
                seed=self.int_of("seed"),
                halving_ratio=self.float_of("halving_ratio"),
                patience=self.int_of("patience"),
                p_drop=self.float_of("p_drop"),
                clip_norm=self.optional_float("clip_norm"),
                max_epochs=self.int_of("max_epochs"),
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err


# ---------------------------------------------------------------------------
# Prepped-corpus files


def _write_ids(path: Path, ids: np.ndarray) -> None:
    path.write_bytes(ids.astype("<u4").tobytes())


def _read_ids(path: Path) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype="<u4").astype(np.int64)


def _boundaries_from_eos(ids: np.ndarray, eos_id: int) -> np.ndarray:
    ends = np.flatnonzero(ids == eos_id)
    starts = np.concatenate([[0], ends[:-1] + 1]) if ends.size else np.zeros(0, dtype=np.int64)
    return starts.astype(np.int64)


def load_corpus(corpus_dir) -> tuple[Vocabulary, EncodedCorpus]:
    corpus_dir = Path(corpus_dir)
    vocab = Vocabulary.load(corpus_dir / "vocab.tsv")
    splits = {}
    for name in ("train", "valid", "test"):
        ids = _read_ids(corpus_dir / f"{name}.ids")
        if vocab.eos_id is not None:
            boundaries = _boundaries_from_eos(ids, vocab.eos_id)
        else:
            boundaries = np.zeros(0, dtype=np.int64)
        splits[name] = EncodedSplit(ids=ids, boundaries=boundaries)
    return vocab, EncodedCorpus(**splits)


def vocab_sha256(corpus_dir) -> str:
    return hashlib.sha256((Path(corpus_dir) / "vocab.tsv").read_bytes()).hexdigest()


def _find_split_file(input_dir: Path, name: str) -> Path:
    for candidate in (f"{name}.txt", f"ptb.{name}.txt"):
        path = input_dir / candidate
        if path.exists():
            return path
    raise FileNotFoundError(f"no {name} split found under {input_dir}")


def cmd_prep(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.format == "ptb":
        input_dir = Path(args.input)
        sentences = {name: read_sentences(_find_split_file(input_dir, name))
                     for name in ("train", "valid", "test")}
        vocab = build_vocab(sentence_token_stream(sentences["train"]),
                            min_count=args.min_count, max_size=args.max_size)
        encoded = {name: encode(vocab, sents) for name, sents in sentences.items()}
    else:
        raw = Path(args.input).read_bytes()
        train, valid, test = split_stream_bytes(
            raw, args.train_bytes, args.valid_bytes, args.test_bytes)
        vocab = build_vocab(train, min_count=args.min_count, max_size=args.max_size)
        encoded = {"train": encode(vocab, train), "valid": encode(vocab, valid),
                   "test": encode(vocab, test)}
    vocab.save(out_dir / "vocab.tsv")
    for name, split in encoded.items():
        _write_ids(out_dir / f"{name}.ids", split.ids)
    print(f"V = {vocab.size}")
    for name, split in encoded.items():
        print(f"{name}: {len(split.ids)} tokens")
    return 0


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, params, spec: ModelSpec, config_text: str,
                    vocab_sha: str, epoch: int, dtype: str = "f64") -> None:
    np_dtype = {"f64": "<f8", "f32": "<f4"}[dtype]
    meta_lines = [
        f"family = {spec.family}",
        f"v = {spec.v}",
        f"e = {spec.e}",
        f"h = {spec.h}",
        f"k = {spec.k}",
        f"policy = {spec.policy}",
        f"factor = {spec.factor}",
        f"epoch = {epoch}",
        f"vocab_sha256 = {vocab_sha}",
        f"dtype = {dtype}",
    ]
    meta = "\n".join(meta_lines) + "\n"
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        for block in (config_text, meta):
            data = block.encode("utf-8")
            f.write(struct.pack("<I", len(data)))
            f.write(data)
        for name in param_shapes(spec):
            f.write(params[name].astype(np_dtype).tobytes())


@dataclass
class Checkpoint:
    params: dict
    spec: ModelSpec
    config_text: str
    meta: dict[str, str]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        blocks = []
        for _ in range(2):
            (length,) = struct.unpack("<I", f.read(4))
            blocks.append(f.read(length).decode("utf-8"))
        config_text, meta_text = blocks
        meta = parse_config_text(meta_text)
        spec = ModelSpec(
            family=meta["family"], v=int(meta["v"]), h=int(meta["h"]),
            e=int(meta["e"]), k=int(meta["k"]), policy=meta["policy"],
            factor=int(meta["factor"]),
        )
        np_dtype = {"f64": "<f8", "f32": "<f4"}[meta["dtype"]]
        itemsize = 8 if meta["dtype"] == "f64" else 4
        params = {}
        for name, shape in param_shapes(spec).items():
            n = int(np.prod(shape))
            buf = f.read(n * itemsize)
            params[name] = np.frombuffer(buf, dtype=np_dtype).astype(np.float64).reshape(shape)
    return Checkpoint(params=params, spec=spec, config_text=config_text, meta=meta)


# ---------------------------------------------------------------------------
# Commands


def _metrics_csv(history, timing: str) -> str:
    lines = ["epoch,lr,train_ppl,valid_ppl,seconds"]
    for m in history:
        seconds = f"{m.seconds:.3f}" if timing == "wall" else "0.000"
        lines.append(f"{m.epoch},{m.lr:.10g},{m.train_ppl:.6f},{m.valid_ppl:.6f},{seconds}")
    return "\n".join(lines) + "\n"


def _conventions(vocab: Vocabulary) -> str:
    eos = ("end-of-sentence token appended per line, ranked and scored"
           if vocab.eos_id is not None else "stream corpus, no sentence tokens")
    return (f"conventions: {eos}; input w_t predicts w_{{t+1}}; "
            f"gaussian init parameter read as stddev")


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    corpus_dir = cfg.str_of("corpus_dir")
    vocab, corpus = load_corpus(corpus_dir)
    spec = cfg.model_spec(vocab.size)
    train_cfg = cfg.train_config()
    out_dir = Path(cfg.str_of("out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)

    def log(metrics):
        print(f"epoch {metrics.epoch}: lr {metrics.lr:.6g} "
              f"train_ppl {metrics.train_ppl:.3f} valid_ppl {metrics.valid_ppl:.3f} "
              f"({metrics.seconds:.1f}s)")

    result = fit(spec, train_cfg, corpus, log=log)
    (out_dir / "metrics.csv").write_text(
        _metrics_csv(result.history, cfg.str_of("timing")), encoding="utf-8")
    best_epoch = result.best_epoch if result.best_epoch >= 0 else 0
    save_checkpoint(out_dir / "checkpoint.bin", result.params, spec, cfg.text,
                    vocab_sha256(corpus_dir), best_epoch,
                    dtype=cfg.str_of("checkpoint_dtype"))
    test_ppl = perplexity(result.params, spec, corpus.test, t_bptt=train_cfg.t_bptt)
    print(_conventions(vocab))
    print(f"test PPL = {test_ppl:.6f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_text(ckpt.config_text)
    corpus_dir = args.corpus_dir or cfg.str_of("corpus_dir")
    if vocab_sha256(corpus_dir) != ckpt.meta["vocab_sha256"]:
        raise ValueError(f"vocabulary hash mismatch: checkpoint was trained against a "
                         f"different vocab.tsv than {corpus_dir}")
    vocab, corpus = load_corpus(corpus_dir)
    split = getattr(corpus, args.split)
    ppl = perplexity(ckpt.params, ckpt.spec, split, t_bptt=cfg.int_of("t_bptt"))
    print(_conventions(vocab))
    print(f"{args.split} PPL = {ppl:.6f}")
    return 0


def cmd_count_params(args) -> int:
    spec = ModelSpec(family=args.family, v=args.v, h=args.hidden,
                     e=args.embed, k=args.k, policy=args.policy,
                     factor=args.factor if args.family == "mrnn" else 0)
    row = capacity_report([spec])[0]
    print(format_capacity_table([row]))
    return 0


def cmd_gradcheck(args) -> int:
    spec = ModelSpec(family=args.family, v=args.v, h=args.hidden,
                     e=args.embed, k=args.k, policy=args.policy,
                     factor=args.factor if args.family == "mrnn" else 0)
    report = grad_check(spec, Rng(args.seed), t_steps=args.t_steps)
    print(report.format())
    return 0 if report.passed else 2


def cmd_sweep(args) -> int:
    cfg = RunConfig.load(args.config)
    vocab, corpus = load_corpus(cfg.str_of("corpus_dir"))
    spec = cfg.model_spec(vocab.size)
    train_cfg = cfg.train_config()
    k_values = [int(part) for part in args.k.split(",")]
    policies = tuple(args.policies.split(","))
    out_dir = Path(cfg.str_of("out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)

    def log(row):
        shown = "diverged" if row.test_ppl is None else f"{row.test_ppl:.3f}"
        print(f"policy {row.policy} K {row.k}: test PPL {shown}")

    result = run_k_sweep(spec, k_values, train_cfg, corpus, policies=policies, log=log)
    csv_path = out_dir / "sweep.csv"
    csv_path.write_text(result.to_csv(), encoding="utf-8")
    print(f"wrote {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--family", required=True, choices=("rrntn", "mrnn", "gru", "lstm"))
    p.add_argument("--v", type=int, required=True, help="vocabulary size")
    p.add_argument("--hidden", type=int, required=True)
    p.add_argument("--embed", type=int, default=None)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--policy", default="f", choices=("f", "fmod", "identity"))
    p.add_argument("--factor", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rrntn", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="build vocabulary and encoded splits")
    p.add_argument("--format", required=True, choices=("ptb", "text8"))
    p.add_argument("--input", required=True,
                   help="directory of split files (ptb) or a single stream file (text8)")
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=1, dest="min_count")
    p.add_argument("--max-size", type=int, default=None, dest="max_size")
    p.add_argument("--train-bytes", type=int, default=90_000_000, dest="train_bytes")
    p.add_argument("--valid-bytes", type=int, default=5_000_000, dest="valid_bytes")
    p.add_argument("--test-bytes", type=int, default=5_000_000, dest="test_bytes")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--corpus-dir", default=None, dest="corpus_dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", help="parameter count, label, and closed form")
    _add_spec_flags(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_spec_flags(p)
    p.add_argument("--t-steps", type=int, default=5, dest="t_steps")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train across K values and emit a CSV")
    p.add_argument("config")
    p.add_argument("--k", required=True, help="comma-separated K values")
    p.add_argument("--policies", default="f,fmod")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except DivergenceError as err:
        where = f" (epoch {err.epoch})" if err.epoch is not None else ""
        print(f"numerical divergence{where}: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
