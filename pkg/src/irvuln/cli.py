"""``irvuln`` command line: corpus generation through training, evaluation and ablation.

Run configs are TOML files with these tables (all optional unless a command
needs them)::

    [paths]       dataset, vocab, checkpoint, reports   (relative to the config file)
    [corpus]      CorpusSpec fields, used when paths.dataset is absent
    [preprocess]  max_lines, strip_user_functions, normalize_locals
    [split]       train_fraction, seed
    [model]       preset plus any ModelConfig field except vocab_size
    [train]       TrainConfig fields
    [grad_check]  seed, batch_size, eps

Exit status: 0 on success, 1 for bad input data, 2 for usage or config
errors, 3 for internal failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import checkpoint
from .corpus import CorpusSpec, SplitSpec, class_counts, generate_synthetic, load_dataset, save_dataset, split
from .errors import ConfigError, DataError, IrVulnError
from .evaluation import DEFAULT_THRESHOLD, ablate, evaluate, predict
from .io import write_atomic, write_json
from .model import ModelConfig, TransformerModel, preset_config
from .preprocess import IrProgram, PreprocessConfig, preprocess, preprocess_one
from .tokenizer import N_SPECIAL, Vocabulary, build_vocab
from .training import Batch, TrainConfig, gradient_check, train

log = logging.getLogger("irvuln")

GRAD_TOLERANCE = 1e-4
EXIT_DATA, EXIT_USAGE, EXIT_INTERNAL = 1, 2, 3


class UsageError(Exception):
    pass


# -- config handling -----------------------------------------------------------

def _load_config(path: str) -> tuple[dict, Path]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh), p.parent
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _section(cfg: dict, name: str, cls, **fixed):
    raw = dict(cfg.get(name, {}))
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
    if "pattern_set" in raw:
        raw["pattern_set"] = tuple(raw["pattern_set"])
    return cls(**{**raw, **fixed})


def _preprocess_config(cfg: dict) -> PreprocessConfig:
    raw = dict(cfg.get("preprocess", {}))
    # TOML has no null; zero or a negative value switches the filter off
    if "max_lines" in raw and raw["max_lines"] <= 0:
        raw["max_lines"] = None
    return _section({"preprocess": raw}, "preprocess", PreprocessConfig)


def _model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    raw = dict(cfg.get("model", {}))
    raw.pop("vocab_size", None)
    preset = raw.pop("preset", None)
    unknown = set(raw) - {f.name for f in fields(ModelConfig)}
    if unknown:
        raise ConfigError(f"[model]: unknown keys {sorted(unknown)}")
    if preset is not None:
        return preset_config(preset, vocab_size, **raw)
    return ModelConfig(vocab_size=vocab_size, **raw)


def _path(cfg: dict, base: Path, key: str, required: bool = True) -> Path | None:
    value = cfg.get("paths", {}).get(key)
    if value is None:
        if required:
            raise ConfigError(f"[paths] {key} is required")
        return None
    return base / value


def _input(path: str | Path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return p


def _dataset(cfg: dict, base: Path) -> list[IrProgram]:
    path = _path(cfg, base, "dataset", required=False)
    if path is not None:
        return load_dataset(_input(path))
    if "corpus" not in cfg:
        raise ConfigError("config needs [paths] dataset or a [corpus] table")
    return generate_synthetic(_section(cfg, "corpus", CorpusSpec))


def _prepared(cfg: dict, base: Path):
    """Load, preprocess and split the dataset; load or build the vocabulary."""
    pre = _preprocess_config(cfg)
    programs = preprocess(_dataset(cfg, base), pre)
    train_set, test_set = split(programs, _section(cfg, "split", SplitSpec))
    vocab_path = _path(cfg, base, "vocab", required=False)
    vocab = Vocabulary.load(_input(vocab_path)) if vocab_path else build_vocab(train_set)
    log.info("%d train / %d test programs, %d tokens in vocabulary",
             len(train_set), len(test_set), len(vocab))
    return pre, train_set, test_set, vocab


def _parse_depths(text: str) -> list[int]:
    depths = []
    try:
        for part in text.split(","):
            lo, _, hi = part.strip().partition("-")
            depths.extend(range(int(lo), int(hi or lo) + 1))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad depth list {text!r}; use e.g. 1,2,3 or 1-5") from None
    if not depths or min(depths) < 1:
        raise argparse.ArgumentTypeError("depths must be positive integers")
    return depths


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        value = 0
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


# -- commands ------------------------------------------------------------------

def cmd_gen_corpus(spec_file: str, out_path: str) -> int:
    spec = CorpusSpec.from_file(_input(spec_file))
    programs = generate_synthetic(spec)
    save_dataset(programs, out_path)
    log.info("wrote %d programs %s to %s", len(programs), class_counts(programs), out_path)
    return 0


def cmd_preprocess(in_path: str, out_path: str, cfg: PreprocessConfig) -> int:
    programs = load_dataset(_input(in_path))
    out = preprocess(programs, cfg)
    save_dataset(out, out_path)
    log.info("kept %d of %d programs", len(out), len(programs))
    return 0


def cmd_build_vocab(in_path: str, vocab_out: str) -> int:
    vocab = build_vocab(load_dataset(_input(in_path)))
    vocab.save(vocab_out)
    log.info("vocabulary: %d non-special tokens", len(vocab) - N_SPECIAL)
    return 0


def cmd_train(config_file: str) -> int:
    cfg, base = _load_config(config_file)
    ckpt_path = _path(cfg, base, "checkpoint")
    reports = _path(cfg, base, "reports", required=False)
    train_cfg = _section(cfg, "train", TrainConfig)
    pre, train_set, test_set, vocab = _prepared(cfg, base)
    model = TransformerModel.init(_model_config(cfg, len(vocab)), seed=train_cfg.seed,
                                  precision=train_cfg.precision)
    model, report = train(model, train_set, train_cfg, vocab)
    checkpoint.save(ckpt_path, model, vocab, pre, extra={"train": asdict(train_cfg)})
    log.info("checkpoint written to %s", ckpt_path)
    if reports is not None:
        reports.mkdir(parents=True, exist_ok=True)
        write_json(reports / "train_report.json", report.to_dict())
        save_dataset(test_set, reports / "test.jsonl")
        log.info("train report and held-out split written to %s", reports)
    return 0


def cmd_evaluate(ckpt: str, test_path: str, report_out: str, threshold: float = DEFAULT_THRESHOLD) -> int:
    model, manifest = checkpoint.load(_input(ckpt))
    vocab = manifest["vocab"]
    if vocab is None:
        raise DataError(f"{ckpt}: checkpoint carries no vocabulary")
    programs = load_dataset(_input(test_path))
    if manifest["preprocess"] is not None:
        programs = preprocess(programs, manifest["preprocess"])
    report = evaluate(model, programs, vocab, threshold)
    write_json(report_out, report.to_dict())
    log.info("accuracy %.4f on %d programs", report.accuracy, report.n_samples)
    return 0


def _read_program(path: Path) -> IrProgram:
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            return IrProgram.from_record(json.loads(stripped.splitlines()[0] if path.suffix == ".jsonl" else stripped))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: {exc}") from exc
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty program")
    return IrProgram(path.stem, tuple(lines), 0, (0,) * len(lines))


def cmd_predict(ckpt: str, program_file: str) -> int:
    model, manifest = checkpoint.load(_input(ckpt))
    vocab = manifest["vocab"]
    if vocab is None:
        raise DataError(f"{ckpt}: checkpoint carries no vocabulary")
    program = _read_program(_input(program_file))
    if manifest["preprocess"] is not None:
        program = preprocess_one(program, manifest["preprocess"])
    label, prob = predict(model, program, vocab)
    print(json.dumps({"id": program.id, "label": label, "prob": prob}))
    return 0


def cmd_ablate(config_file: str, depths: list[int], repeats: int, out_path: str) -> int:
    cfg, base = _load_config(config_file)
    train_cfg = _section(cfg, "train", TrainConfig)
    _, train_set, test_set, vocab = _prepared(cfg, base)
    table = ablate(_model_config(cfg, len(vocab)), depths, repeats, train_set, test_set, vocab, train_cfg)
    write_json(out_path, table.to_dict())
    csv_path = Path(out_path).with_suffix(".csv")
    write_atomic(csv_path, table.to_csv())
    for row in table.rows:
        log.info("depth %d: %.4f +- %.4f", row.depth, row.mean, row.std)
    log.info("ablation table written to %s and %s", out_path, csv_path)
    return 0


def cmd_grad_check(config_file: str) -> int:
    cfg, base = _load_config(config_file)
    vocab_path = _path(cfg, base, "vocab", required=False)
    if vocab_path is not None:
        vocab_size = len(Vocabulary.load(_input(vocab_path)))
    elif "vocab_size" in cfg.get("model", {}):
        vocab_size = cfg["model"]["vocab_size"]
    else:
        raise ConfigError("grad-check needs [model] vocab_size or [paths] vocab")
    model_cfg = _model_config(cfg, vocab_size)
    opts = dict(cfg.get("grad_check", {}))
    seed, batch_size, eps = opts.pop("seed", 0), opts.pop("batch_size", 3), opts.pop("eps", 1e-5)
    if opts:
        raise ConfigError(f"[grad_check]: unknown keys {sorted(opts)}")
    model = TransformerModel.init(model_cfg, seed=seed, precision="double")
    errors = gradient_check(model, _probe_batch(model_cfg, batch_size, seed), eps)
    worst = max(errors, key=errors.get)
    print(f"{errors[worst]:.3e}")
    log.info("max relative error %.3e at %s over %d tensors", errors[worst], worst, len(errors))
    return 0 if errors[worst] <= GRAD_TOLERANCE else EXIT_DATA


def _probe_batch(cfg: ModelConfig, batch_size: int, seed: int) -> Batch:
    rng = np.random.default_rng(seed)
    t = min(cfg.max_len, 6)
    ids = rng.integers(N_SPECIAL, max(cfg.vocab_size, N_SPECIAL + 1), size=(batch_size, t))
    ids = np.minimum(ids, cfg.vocab_size - 1)
    ids[:, 0] = 3  # CLS
    lengths = rng.integers(min(2, t), t + 1, size=batch_size)
    mask = (np.arange(t)[None, :] < lengths[:, None]).astype(np.int64)
    ids = np.where(mask == 1, ids, 0)
    return Batch(ids, mask, rng.integers(0, 2, size=batch_size))


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irvuln", description="Transformer vulnerability detector for LLVM IR slices.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic labelled corpus")
    p.add_argument("--spec", required=True, help="corpus spec JSON")
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", help="strip wrappers, normalize locals, drop long programs")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-lines", type=_positive_int, default=PreprocessConfig().max_lines)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from a dataset")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)

    p = sub.add_parser("evaluate", help="score a checkpoint on a labelled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)

    p = sub.add_parser("predict", help="classify one program (JSON record or raw IR text)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--program", required=True)

    p = sub.add_parser("ablate", help="sweep classification-head depth with repeated runs")
    p.add_argument("--config", required=True)
    p.add_argument("--depths", type=_parse_depths, required=True, help="e.g. 1,2,3 or 1-5")
    p.add_argument("--repeats", type=_positive_int, required=True)
    p.add_argument("--out", required=True, help="JSON table; a CSV is written alongside")

    p = sub.add_parser("grad-check", help="compare backprop with finite differences")
    p.add_argument("--config", required=True)
    return parser


def _dispatch(args) -> int:
    match args.command:
        case "gen-corpus":
            return cmd_gen_corpus(args.spec, args.out)
        case "preprocess":
            return cmd_preprocess(args.in_path, args.out, PreprocessConfig(max_lines=args.max_lines))
        case "build-vocab":
            return cmd_build_vocab(args.in_path, args.out)
        case "train":
            return cmd_train(args.config)
        case "evaluate":
            return cmd_evaluate(args.checkpoint, args.test, args.out, args.threshold)
        case "predict":
            return cmd_predict(args.checkpoint, args.program)
        case "ablate":
            return cmd_ablate(args.config, args.depths, args.repeats, args.out)
        case "grad-check":
            return cmd_grad_check(args.config)
    raise AssertionError(args.command)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _dispatch(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        log.error("%s", exc)
        return EXIT_USAGE
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_USAGE
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except IrVulnError as exc:
        log.error("internal error: %s", exc)
        return EXIT_INTERNAL
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception:
        log.exception("unexpected failure")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
