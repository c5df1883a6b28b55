"""Prediction, full-test-set accuracy, and the classifier-head depth ablation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyTestSet, IrVulnError
from .model import ModelConfig, TransformerModel, forward, with_head_depth
from .preprocess import IrProgram
from .tokenizer import Vocabulary, encode, pad_or_truncate
from .training import TrainConfig, make_batch, train

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


def _check_threshold(threshold: float) -> None:
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")


@dataclass
class EvalReport:
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_samples: int
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_predictions(cls, labels, predicted, threshold: float) -> "EvalReport":
        labels = np.asarray(labels)
        predicted = np.asarray(predicted)
        tp = int(((predicted == 1) & (labels == 1)).sum())
        fp = int(((predicted == 1) & (labels == 0)).sum())
        tn = int(((predicted == 0) & (labels == 0)).sum())
        fn = int(((predicted == 0) & (labels == 1)).sum())
        n = len(labels)
        return cls(accuracy=(tp + tn) / n, tp=tp, fp=fp, tn=tn, fn=fn, n_samples=n, threshold=threshold)


def predict(model: TransformerModel, program: IrProgram, vocab: Vocabulary,
            threshold: float = DEFAULT_THRESHOLD) -> tuple[int, float]:
    """Label and p(vulnerable) for one program. Ties go to vulnerable."""
    _check_threshold(threshold)
    seq = encode(program, vocab)
    ids, mask = pad_or_truncate(seq, min(model.config.max_len, seq.length))
    _, prob = forward(ids[None], mask[None], model)
    p = float(prob[0])
    return int(p >= threshold), p


def predict_proba(model: TransformerModel, programs: Sequence[IrProgram], vocab: Vocabulary,
                  batch_size: int = 32) -> np.ndarray:
    """p(vulnerable) for each program, in input order.

    Batches are formed in a canonical (length, id, text) order so the result
    for a program does not depend on where it sits in the input.
    """
    seqs = [encode(p, vocab).ids for p in programs]
    order = sorted(range(len(programs)), key=lambda i: (len(seqs[i]), programs[i].id, programs[i].lines))
    probs = np.empty(len(programs), dtype=np.float64)
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        batch = make_batch([seqs[i] for i in idx], [0] * len(idx), model.config.max_len)
        _, prob = forward(batch.ids, batch.mask, model)
        probs[idx] = prob
    return probs


def evaluate(model: TransformerModel, test_set: Sequence[IrProgram], vocab: Vocabulary,
             threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    """Accuracy and confusion counts over every program in ``test_set``."""
    _check_threshold(threshold)
    if not test_set:
        raise EmptyTestSet("test set is empty")
    probs = predict_proba(model, test_set, vocab)
    predicted = (probs >= threshold).astype(np.int64)
    return EvalReport.from_predictions([p.label for p in test_set], predicted, threshold)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return mean, std


@dataclass
class AblationRow:
    depth: int
    accuracies: list[float]
    mean: float
    std: float
    seeds: list[int] = field(default_factory=list)

    @classmethod
    def from_runs(cls, depth: int, accuracies: Sequence[float], seeds: Sequence[int] = ()) -> "AblationRow":
        mean, std = mean_std(accuracies)
        return cls(depth, list(accuracies), mean, std, list(seeds))


@dataclass
class AblationTable:
    rows: list[AblationRow]
    repeats: int
    base_config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationTable":
        return cls([AblationRow(**r) for r in d["rows"]], d["repeats"], d.get("base_config", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["depth", "run", "accuracy"])
        for row in self.rows:
            for run, acc in enumerate(row.accuracies):
                writer.writerow([row.depth, run, repr(acc)])
        return buf.getvalue()

    def consistent(self, tol: float = 1e-12) -> bool:
        for row in self.rows:
            mean, std = mean_std(row.accuracies)
            if len(row.accuracies) != self.repeats:
                return False
            if abs(mean - row.mean) > tol or abs(std - row.std) > tol:
                return False
        return True


def ablate(
    base_config: ModelConfig,
    depths: Sequence[int],
    repeats: int,
    train_set: Sequence[IrProgram],
    test_set: Sequence[IrProgram],
    vocab: Vocabulary,
    train_cfg: TrainConfig,
    seeds: Sequence[int] | None = None,
) -> AblationTable:
    """Train and evaluate once per (depth, seed) and summarize per depth.

    Run ``r`` at every depth uses ``seeds[r]`` for weight init, balanced
    sampling, shuffling and dropout, so depths are compared on paired seeds.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if not depths:
        raise ConfigError("depths must be non-empty")
    if seeds is None:
        seeds = [train_cfg.seed + r for r in range(repeats)]
    seeds = list(seeds)
    if len(seeds) != repeats:
        raise ConfigError(f"{len(seeds)} seeds given for {repeats} repeats")
    rows = []
    for depth in depths:
        cfg = with_head_depth(base_config, depth)
        accs = []
        for run, seed in enumerate(seeds):
            try:
                model = TransformerModel.init(cfg, seed=seed, precision=train_cfg.precision)
                run_cfg = TrainConfig(**{**asdict(train_cfg), "seed": seed})
                model, _ = train(model, train_set, run_cfg, vocab)
                acc = evaluate(model, test_set, vocab).accuracy
            except IrVulnError as exc:
                raise type(exc)(f"depth {depth}, run {run}: {exc}") from exc
            log.info("depth %d run %d seed %d: accuracy %.4f", depth, run, seed, acc)
            accs.append(acc)
        rows.append(AblationRow.from_runs(depth, accs, seeds))
    return AblationTable(rows, repeats, base_config.to_dict())
