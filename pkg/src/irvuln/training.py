"""Cross-entropy loss, plain SGD and the balanced-subset training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyClass, NonFiniteGradient, ShapeMismatch
from .model import TransformerModel, dtype_for, backprop, forward, forward_cached, softmax
from .preprocess import IrProgram
from .tokenizer import Vocabulary, encode, pad_or_truncate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    per_class_samples: int = 1000
    precision: str = "double"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.per_class_samples < 1:
            raise ConfigError("batch_size and per_class_samples must be >= 1")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        dtype_for(self.precision)


@dataclass
class TrainReport:
    epoch_losses: list[float]
    train_accuracy: float
    wall_time: float
    seed: int
    n_train_samples: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Batch:
    ids: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T)
    labels: np.ndarray  # (B,)


def cross_entropy(logits, label) -> float:
    """-log softmax(logits)[label] via log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    return float(np.logaddexp(logits[0], logits[1]) - logits[int(label)])


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    return np.logaddexp(logits[:, 0], logits[:, 1]) - logits[np.arange(len(labels)), labels]


def loss_and_gradients(model: TransformerModel, batch: Batch, rng=None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch cross-entropy and its exact gradient for every parameter."""
    logits, _, cache = forward_cached(batch.ids, batch.mask, model, rng=rng)
    labels = np.asarray(batch.labels)
    losses = batch_cross_entropy(logits, labels)
    dlogits = softmax(logits.copy())
    dlogits[np.arange(len(labels)), labels] -= 1
    dlogits /= len(labels)
    grads = backprop(dlogits, model, cache)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    return float(losses.mean()), grads


def backward(model: TransformerModel, batch: Batch) -> dict[str, np.ndarray]:
    return loss_and_gradients(model, batch)[1]


def batch_loss(model: TransformerModel, batch: Batch) -> float:
    logits, _ = forward(batch.ids, batch.mask, model)
    return float(batch_cross_entropy(logits, batch.labels).mean())


def sgd_step(model: TransformerModel, gradients: dict[str, np.ndarray], learning_rate: float) -> TransformerModel:
    """In-place ``p -= lr * grad`` for every parameter. Returns the model."""
    if set(gradients) != set(model.params):
        raise ShapeMismatch("gradient names do not match model parameters")
    for name, p in model.params.items():
        g = gradients[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
    for name, p in model.params.items():
        p -= p.dtype.type(learning_rate) * gradients[name].astype(p.dtype, copy=False)
    return model


def balanced_sample(dataset: Sequence[IrProgram], per_class_samples: int, seed: int) -> list[IrProgram]:
    """Equal-size uniform draws (without replacement) from each class.

    Clamps to the minority class size. Selected programs keep dataset order.
    """
    by_class = {0: [], 1: []}
    for i, p in enumerate(dataset):
        by_class[p.label].append(i)
    for label, members in by_class.items():
        if not members:
            raise EmptyClass(f"no programs with label {label}")
    k = min(per_class_samples, len(by_class[0]), len(by_class[1]))
    rng = np.random.default_rng(seed)
    chosen = []
    for label in (0, 1):
        chosen.extend(rng.choice(by_class[label], size=k, replace=False).tolist())
    return [dataset[i] for i in sorted(chosen)]


def make_batch(seqs: Sequence[Sequence[int]], labels: Sequence[int], max_len: int) -> Batch:
    width = max(2, min(max_len, max(len(s) for s in seqs)))
    ids = np.empty((len(seqs), width), dtype=np.int64)
    mask = np.empty((len(seqs), width), dtype=np.int64)
    for row, s in enumerate(seqs):
        ids[row], mask[row] = pad_or_truncate(s, width)
    return Batch(ids, mask, np.asarray(labels, dtype=np.int64))


def _cast(model: TransformerModel, precision: str) -> TransformerModel:
    dtype = dtype_for(precision)
    return TransformerModel(model.config, {k: v.astype(dtype, copy=True) for k, v in model.params.items()})


def train(
    model: TransformerModel,
    dataset: Sequence[IrProgram],
    cfg: TrainConfig,
    vocab: Vocabulary,
) -> tuple[TransformerModel, TrainReport]:
    """Shuffled mini-batch SGD over a balanced subset drawn once from ``dataset``.

    The input model is not modified; a trained copy in ``cfg.precision`` is
    returned together with the per-epoch mean losses.
    """
    start = time.perf_counter()
    model = _cast(model, cfg.precision)
    subset = balanced_sample(dataset, cfg.per_class_samples, cfg.seed)
    seqs = [encode(p, vocab).ids for p in subset]
    labels = np.array([p.label for p in subset], dtype=np.int64)
    max_len = model.config.max_len
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2]) if model.config.dropout_rate > 0 else None

    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(seqs))
        total = 0.0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            batch = make_batch([seqs[i] for i in idx], labels[idx], max_len)
            try:
                loss, grads = loss_and_gradients(model, batch, rng=dropout_rng)
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(f"epoch {epoch}, batch {b}: {exc}", epoch=epoch, batch=b) from exc
            sgd_step(model, grads, cfg.learning_rate)
            total += loss * len(idx)
        epoch_losses.append(total / len(seqs))
        log.info("epoch %d/%d  loss %.5f", epoch + 1, cfg.epochs, epoch_losses[-1])

    acc = accuracy_on(model, seqs, labels, cfg.batch_size)
    report = TrainReport(
        epoch_losses=epoch_losses,
        train_accuracy=acc,
        wall_time=time.perf_counter() - start,
        seed=cfg.seed,
        n_train_samples=len(seqs),
        config={"train": asdict(cfg), "model": model.config.to_dict()},
    )
    return model, report


def accuracy_on(model: TransformerModel, seqs, labels, batch_size: int = 32) -> float:
    if not len(seqs):
        return float("nan")
    correct = 0
    for lo in range(0, len(seqs), batch_size):
        batch = make_batch(seqs[lo:lo + batch_size], labels[lo:lo + batch_size], model.config.max_len)
        _, prob = forward(batch.ids, batch.mask, model)
        correct += int(((prob >= 0.5).astype(np.int64) == batch.labels).sum())
    return correct / len(seqs)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Entrywise |a - n| / max(|a|, |n|, floor).

    The floor keeps entries whose true gradient is ~0 from turning
    finite-difference round-off into a huge ratio.
    """
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def finite_difference_gradients(model: TransformerModel, batch: Batch, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of the mean batch loss for every parameter entry."""
    grads = {}
    for name, p in model.params.items():
        g = np.zeros(p.shape, dtype=np.float64)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = batch_loss(model, batch)
            p[idx] = orig - eps
            down = batch_loss(model, batch)
            p[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


def gradient_check(model: TransformerModel, batch: Batch, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error between backprop and central differences, per parameter.

    Runs in double precision with dropout off, on a copy of ``model``.
    """
    model = _cast(model, "double")
    analytic = backward(model, batch)
    numeric = finite_difference_gradients(model, batch, eps)
    return {name: float(relative_error(analytic[name], numeric[name]).max()) for name in model.params}
