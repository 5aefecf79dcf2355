"""Paired-batch training loop with plain SGD.

Each step draws an anchor mini-batch and a companion batch: with
probability ``pair_same_prob`` a companion shares its anchor's class,
otherwise it comes from a uniformly chosen different class. The combined
defense loss is evaluated on the pair, parameters take one SGD step with
L2 weight decay, and a step-decay schedule lowers the learning rate at
fixed fractions of the run.

Optionally a fraction of each anchor batch is replaced by PGD
perturbations against the current parameters before the loss is built
(adversarial training).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attacks import pgd
from .autograd import CompGraph, backward
from .data import Dataset
from .losses import DefenseLossConfig, LossBreakdown, defense_loss
from .model import Network
from .tensor import Tensor

__all__ = [
    "SiameseBatch",
    "AdversarialTrainingConfig",
    "TrainConfig",
    "LogRecord",
    "TrainingDivergedError",
    "build_siamese_batch",
    "sgd_step",
    "adversarial_augment",
    "train",
    "write_training_csv",
    "TRAINING_CSV_HEADER",
]

TRAINING_CSV_HEADER = "epoch,batch,ce,siamese,rvl,jacobian,total,learning_rate"


@dataclass(frozen=True)
class SiameseBatch:
    """Anchor batch, companion batch, and their same-class indicator."""

    x1: np.ndarray
    x2: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    same: np.ndarray  # 1.0 where y1 == y2

    def __post_init__(self):
        if not np.array_equal(self.same, (self.y1 == self.y2).astype(np.float64)):
            raise ValueError("same-class indicator does not match labels")


@dataclass(frozen=True)
class AdversarialTrainingConfig:
    """PGD augmentation applied to part of each anchor batch."""

    epsilon: float = 0.1
    iterations: int = 10
    step: float | None = None
    ratio: float = 0.5  # fraction of the anchor batch replaced

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must lie in [0,1]")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.1
    weight_decay: float = 0.002
    pair_same_prob: float = 0.5
    loss: DefenseLossConfig = field(default_factory=DefenseLossConfig)
    adversarial: AdversarialTrainingConfig | None = None
    jacobian_samples: int | None = None  # per-branch cap for the sensitivity penalty
    decay_points: tuple[float, ...] = (0.5, 0.75)  # epoch fractions where lr drops
    decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.pair_same_prob <= 1.0:
            raise ValueError("pair_same_prob must lie in [0,1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for frac in self.decay_points:
            if self.epochs and epoch >= int(np.ceil(self.epochs * frac)):
                lr *= self.decay_factor
        return lr


@dataclass(frozen=True)
class LogRecord:
    epoch: int
    batch: int
    loss: LossBreakdown
    learning_rate: float


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the last finite network and its log."""

    def __init__(self, message: str, network: Network, log: list[LogRecord]):
        super().__init__(message)
        self.network = network
        self.log = log


def build_siamese_batch(
    dataset: Dataset,
    indices: Sequence[int],
    same_prob: float,
    rng: np.random.Generator,
) -> SiameseBatch:
    """Pair each anchor with a same-class or different-class companion.

    Companion classes are drawn uniformly over the *other* class ids;
    an empty companion class is an error naming that class.
    """
    idx = np.asarray(indices, dtype=np.int64)
    by_class = dataset.class_indices()
    x = dataset.inputs.array
    y = dataset.labels
    y1 = y[idx]
    pick = np.empty(len(idx), dtype=np.int64)
    q = rng.random(len(idx)) < same_prob
    for k, anchor_class in enumerate(y1):
        if q[k]:
            pool = by_class[int(anchor_class)]  # anchor itself is a legal companion
        else:
            others = [c for c in range(dataset.num_classes) if c != anchor_class]
            chosen = int(others[rng.integers(len(others))])
            pool = by_class[chosen]
            if pool.size == 0:
                raise ValueError(f"cannot pair against empty class {chosen}")
        pick[k] = pool[rng.integers(pool.size)]
    y2 = y[pick]
    return SiameseBatch(
        x1=x[idx], x2=x[pick], y1=y1, y2=y2, same=(y1 == y2).astype(np.float64)
    )


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    lr: float,
    weight_decay: float,
) -> list[Tensor]:
    """theta <- theta - lr * (grad + weight_decay * theta)."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    out = []
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        out.append(Tensor(p.array - lr * (g + weight_decay * p.array), validate=False))
    return out


def adversarial_augment(
    net: Network,
    x_batch: np.ndarray,
    y_batch: np.ndarray,
    cfg: AdversarialTrainingConfig,
    seed: int,
    sample_indices: Sequence[int],
) -> np.ndarray:
    """Replace a leading fraction of the batch by PGD perturbations."""
    count = int(round(cfg.ratio * len(y_batch)))
    if count == 0 or cfg.epsilon == 0.0:
        return x_batch
    res = pgd(
        net,
        x_batch[:count],
        y_batch[:count],
        cfg.epsilon,
        cfg.iterations,
        cfg.step,
        seed=seed,
        sample_indices=np.asarray(sample_indices)[:count],
    )
    out = np.array(net.prepare(x_batch))
    out[:count] = res.x_adv.array
    return out


def train(
    net: Network,
    dataset: Dataset,
    cfg: TrainConfig,
    callback: Callable[[LogRecord], None] | None = None,
) -> tuple[Network, list[LogRecord]]:
    """Run the paired-batch defense training loop.

    Deterministic for a given (network, dataset, config): all random
    choices flow from one generator seeded by ``cfg.seed``. A non-finite
    total loss aborts via :class:`TrainingDivergedError` carrying the
    last finite parameters and the log so far.
    """
    if dataset.num_classes < 2:
        raise ValueError("training needs at least 2 classes")
    rng = np.random.default_rng(cfg.seed)
    log: list[LogRecord] = []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        for bstart in range(0, n, cfg.batch_size):
            bidx = order[bstart : bstart + cfg.batch_size]
            batch = build_siamese_batch(dataset, bidx, cfg.pair_same_prob, rng)
            x1 = batch.x1
            if cfg.adversarial is not None:
                x1 = adversarial_augment(
                    net, x1, batch.y1, cfg.adversarial,
                    seed=cfg.seed + epoch + 1, sample_indices=bidx,
                )
            graph = CompGraph()
            param_nodes = net.bind(graph)
            breakdown, total = defense_loss(
                graph,
                net,
                param_nodes,
                graph.constant(net.prepare(x1)),
                graph.constant(net.prepare(batch.x2)),
                batch.y1,
                batch.y2,
                cfg.loss,
                jacobian_samples=cfg.jacobian_samples,
            )
            if not np.isfinite(breakdown.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {bstart // cfg.batch_size}",
                    net,
                    log,
                )
            grads = backward(graph, total, wrt=param_nodes)
            grad_arrays = [grads[pn].array for pn in param_nodes]
            net = net.with_params(sgd_step(net.params, grad_arrays, lr, cfg.weight_decay))
            record = LogRecord(epoch, bstart // cfg.batch_size, breakdown, lr)
            log.append(record)
            if callback is not None:
                callback(record)
    return net, log


def write_training_csv(path_or_file, log: Sequence[LogRecord]) -> None:
    """Emit the per-batch loss log with the fixed column layout."""
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh: io.TextIOBase = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        fh.write(TRAINING_CSV_HEADER + "\n")
        for r in log:
            fh.write(
                f"{r.epoch},{r.batch},{r.loss.ce:.17g},{r.loss.siamese:.17g},"
                f"{r.loss.variance:.17g},{r.loss.jacobian:.17g},{r.loss.total:.17g},"
                f"{r.learning_rate:.17g}\n"
            )
    finally:
        if own:
            fh.close()
