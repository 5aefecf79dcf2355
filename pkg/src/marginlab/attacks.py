"""White-box evasion attacks and robust-accuracy evaluation.

All attacks operate on [0,1]-valued inputs and respect an L-infinity
budget bit-exactly (projection then box clip). Gradient-based loops use
a sum-reduced cross-entropy so per-sample input gradients are exact and
independent of batch composition.

Evaluation follows the filtered protocol: only samples the model
classifies correctly *before* the attack enter the robust-accuracy
denominator. Work is split into fixed-size chunks handed to a thread
pool; chunk boundaries and per-sample noise streams depend only on
sample indices and the seed, never on the worker count, so results are
reproducible across any parallelism level.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autograd import CompGraph, backward, forward_op
from .losses import cross_entropy_node
from .model import Network
from .tensor import Tensor

__all__ = [
    "CWParams",
    "AttackConfig",
    "AdversarialResult",
    "AttackEvaluation",
    "fgsm",
    "bim",
    "pgd",
    "cw_l2",
    "run_attack",
    "evaluate_attack",
    "write_attack_csv",
    "ATTACK_FAMILIES",
]

ATTACK_FAMILIES = ("fgsm", "bim", "pgd", "cw")

# fixed work-unit size for parallel evaluation; results must not depend
# on worker count, so the partition is a function of the data alone
CHUNK_SIZE = 64


@dataclass(frozen=True)
class CWParams:
    """Inner-optimizer settings for the L2 attack."""

    constant: float = 1.0
    confidence: float = 0.0
    max_iterations: int = 1000
    binary_search_steps: int = 1
    learning_rate: float = 0.01


@dataclass(frozen=True)
class AttackConfig:
    family: str = "pgd"
    epsilon: float = 0.1
    iterations: int = 10
    step: float | None = None  # None: 2.5 * epsilon / iterations, capped at epsilon
    cw: CWParams = field(default_factory=CWParams)
    linf_cap: float | None = None  # CW post-projection budget
    smoothing: float = 1.0  # attack-loss label smoothing; 1.0 is plain one-hot CE
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.family not in ATTACK_FAMILIES:
            raise ValueError(f"unknown attack family '{self.family}'")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def resolved_step(self) -> float:
        if self.step is not None:
            return self.step
        return min(2.5 * self.epsilon / self.iterations, self.epsilon)


@dataclass(frozen=True)
class AdversarialResult:
    """Batch attack outcome; arrays are aligned with the attacked inputs."""

    x_adv: Tensor
    success: np.ndarray  # bool: adversarial prediction differs from the true label
    original_class: np.ndarray
    adversarial_class: np.ndarray
    l2: np.ndarray
    linf: np.ndarray
    iterations: np.ndarray


@dataclass(frozen=True)
class AttackEvaluation:
    """Filtered robust-accuracy evaluation over a sample set."""

    robust_accuracy: float
    result: AdversarialResult
    attacked_indices: np.ndarray  # dataset indices that passed the pre-attack filter
    skipped_indices: np.ndarray  # dataset indices misclassified before the attack
    true_labels: np.ndarray  # labels of the attacked subset, aligned with result
    config: AttackConfig


def _input_gradient(net: Network, x: np.ndarray, y: np.ndarray, smoothing: float) -> np.ndarray:
    graph = CompGraph()
    xn = graph.leaf(x)
    fp = net.forward_graph(graph, xn, net.bind_const(graph))
    loss = cross_entropy_node(graph, fp.logits, y, smoothing, reduction="sum")
    return backward(graph, loss, wrt=[xn])[xn].array


def _finish(net: Network, x: np.ndarray, x_adv: np.ndarray, y: np.ndarray,
            original_class: np.ndarray, iterations: np.ndarray) -> AdversarialResult:
    adv_class = net.predict(x_adv)
    delta = (x_adv - x).reshape(x.shape[0], -1)
    return AdversarialResult(
        x_adv=Tensor(x_adv, validate=False),
        success=adv_class != y,
        original_class=original_class,
        adversarial_class=adv_class,
        l2=np.linalg.norm(delta, axis=1),
        linf=np.abs(delta).max(axis=1) if delta.shape[1] else np.zeros(x.shape[0]),
        iterations=iterations,
    )


def _enforce_linf(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Walk values back by ulps until |x_adv - x| <= epsilon holds exactly.

    Adding epsilon in floating point can overshoot the budget by an ulp
    (e.g. (x + 0.07) - x > 0.07); the measured difference is what the
    budget contract is stated on.
    """
    over = np.abs(x_adv - x) > epsilon
    while over.any():
        x_adv = x_adv.copy()
        x_adv[over] = np.nextafter(x_adv[over], x[over])
        over = np.abs(x_adv - x) > epsilon
    return x_adv


def _iterate_signed(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    iterations: int,
    step: float,
    smoothing: float,
    x_start: np.ndarray,
) -> np.ndarray:
    """Shared ascent loop: signed gradient steps, ball projection, box clip."""
    xa = x_start
    lo = np.clip(x - epsilon, 0.0, 1.0)
    hi = np.clip(x + epsilon, 0.0, 1.0)
    for _ in range(iterations):
        g = _input_gradient(net, xa, y, smoothing)
        xa = xa + step * np.sign(g)
        xa = np.clip(xa, lo, hi)
    return _enforce_linf(xa, x, epsilon)


def fgsm(net: Network, x, y, epsilon: float, smoothing: float = 1.0) -> AdversarialResult:
    """Single signed-gradient step of size epsilon."""
    x = net.prepare(x)
    y = np.asarray(y, dtype=np.int64)
    orig = net.predict(x)
    x_adv = _iterate_signed(net, x, y, epsilon, 1, epsilon, smoothing, x)
    return _finish(net, x, x_adv, y, orig, np.ones(len(y), dtype=np.int64))


def bim(
    net: Network,
    x,
    y,
    epsilon: float,
    iterations: int = 10,
    step: float | None = None,
    smoothing: float = 1.0,
) -> AdversarialResult:
    """Iterated signed-gradient ascent from the clean input."""
    x = net.prepare(x)
    y = np.asarray(y, dtype=np.int64)
    orig = net.predict(x)
    if step is None:
        step = min(2.5 * epsilon / iterations, epsilon)
    x_adv = _iterate_signed(net, x, y, epsilon, iterations, step, smoothing, x)
    return _finish(net, x, x_adv, y, orig, np.full(len(y), iterations, dtype=np.int64))


def _pgd_start(x: np.ndarray, epsilon: float, seed: int, sample_indices: np.ndarray) -> np.ndarray:
    """Uniform start noise from per-sample streams keyed by (seed, index)."""
    noise = np.empty_like(x)
    for k, idx in enumerate(sample_indices):
        rng = np.random.default_rng([seed, int(idx)])
        noise[k] = rng.uniform(-epsilon, epsilon, size=x.shape[1:])
    return np.clip(x + noise, 0.0, 1.0)


def pgd(
    net: Network,
    x,
    y,
    epsilon: float,
    iterations: int = 10,
    step: float | None = None,
    smoothing: float = 1.0,
    seed: int = 0,
    sample_indices: Sequence[int] | None = None,
) -> AdversarialResult:
    """Signed-gradient ascent from a random point in the budget ball."""
    x = net.prepare(x)
    y = np.asarray(y, dtype=np.int64)
    orig = net.predict(x)
    if step is None:
        step = min(2.5 * epsilon / iterations, epsilon)
    idx = np.arange(len(y)) if sample_indices is None else np.asarray(sample_indices)
    start = _pgd_start(x, epsilon, seed, idx)
    # the start point already lies in the ball; the loop keeps it there
    x_adv = _iterate_signed(net, x, y, epsilon, iterations, step, smoothing, start)
    return _finish(net, x, x_adv, y, orig, np.full(len(y), iterations, dtype=np.int64))


# ---------------------------------------------------------------------------
# Carlini-Wagner L2 (untargeted, best-other-class objective)
# ---------------------------------------------------------------------------

def _cw_objective_grad(
    net: Network, x_adv: np.ndarray, y: np.ndarray, kappa: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient of sum_b max(Z_true - max_wrong Z, -kappa) w.r.t. the input.

    The max over wrong classes uses the subgradient of the class that
    achieves it at the current iterate.
    """
    graph = CompGraph()
    xn = graph.leaf(x_adv)
    fp = net.forward_graph(graph, xn, net.bind_const(graph))
    logits = graph.value(fp.logits)
    b, m = logits.shape
    onehot_true = np.zeros((b, m))
    onehot_true[np.arange(b), y] = 1.0
    wrong = logits.copy()
    wrong[np.arange(b), y] = -np.inf
    best_wrong = wrong.argmax(axis=1)
    onehot_wrong = np.zeros((b, m))
    onehot_wrong[np.arange(b), best_wrong] = 1.0

    z_true = forward_op(
        graph, "sum", [forward_op(graph, "mul", [fp.logits, graph.constant(onehot_true)])], axis=(1,)
    )
    z_wrong = forward_op(
        graph, "sum", [forward_op(graph, "mul", [fp.logits, graph.constant(onehot_wrong)])], axis=(1,)
    )
    gap = forward_op(graph, "sub", [z_true, z_wrong])
    f = forward_op(graph, "maximum_scalar", [gap], bound=-kappa)
    total = forward_op(graph, "sum", [f])
    grad = backward(graph, total, wrt=[xn])[xn].array
    preds = logits.argmax(axis=1)
    f_vals = np.maximum(logits[np.arange(b), y] - wrong[np.arange(b), best_wrong], -kappa)
    return grad, preds, f_vals


def cw_l2(
    net: Network,
    x,
    y,
    params: CWParams | None = None,
    linf_cap: float | None = None,
) -> AdversarialResult:
    """L2-minimizing attack via gradient descent in tanh space.

    Never fails outright: if no iterate misclassifies, the clean input is
    returned with ``success=False``. When ``linf_cap`` is set the best
    iterate is projected onto that budget and success is re-checked after
    projection.
    """
    p = params or CWParams()
    x = net.prepare(x)
    y = np.asarray(y, dtype=np.int64)
    b = x.shape[0]
    orig = net.predict(x)
    flatdim = x[0].size

    # tanh-space variable; slight shrink keeps arctanh finite at 0 and 1
    w = np.arctanh((x * 2.0 - 1.0) * 0.999999)

    best_adv = x.copy()
    best_l2 = np.full(b, np.inf)
    best_iter = np.zeros(b, dtype=np.int64)
    # the clean input counts as a zero-distortion candidate when already misclassified
    already = orig != y
    best_l2[already] = 0.0

    c = np.full(b, p.constant)
    lower = np.zeros(b)
    upper = np.full(b, np.inf)

    for search in range(p.binary_search_steps):
        wk = w.copy()
        succeeded = already.copy()
        for it in range(1, p.max_iterations + 1):
            th = np.tanh(wk)
            x_adv = (th + 1.0) / 2.0
            diff = (x_adv - x).reshape(b, -1)
            l2sq = np.sum(diff * diff, axis=1)
            obj_grad, preds, f_vals = _cw_objective_grad(net, x_adv, y, p.confidence)
            mis = preds != y
            better = mis & (np.sqrt(l2sq) < best_l2)
            if better.any():
                best_adv[better] = x_adv[better]
                best_l2[better] = np.sqrt(l2sq[better])
                best_iter[better] = it
                succeeded |= better
            # d(loss)/dx = 2(x_adv - x) + c * df/dx, mapped back through tanh
            dx = 2.0 * (x_adv - x) + (c.reshape((b,) + (1,) * (x.ndim - 1))) * obj_grad
            dw = dx * (1.0 - th * th) / 2.0
            wk = wk - p.learning_rate * dw
        upper[succeeded] = np.minimum(upper[succeeded], c[succeeded])
        lower[~succeeded] = np.maximum(lower[~succeeded], c[~succeeded])
        has_upper = np.isfinite(upper)
        c = np.where(has_upper, (lower + upper) / 2.0, c * 10.0)

    x_out = best_adv
    if linf_cap is not None:
        x_out = np.clip(x_out, np.clip(x - linf_cap, 0.0, 1.0), np.clip(x + linf_cap, 0.0, 1.0))
        x_out = _enforce_linf(x_out, x, linf_cap)
    result = _finish(net, x, x_out, y, orig, np.where(np.isfinite(best_l2), best_iter, p.max_iterations))
    return result


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------

def run_attack(
    net: Network,
    x,
    y,
    cfg: AttackConfig,
    sample_indices: Sequence[int] | None = None,
) -> AdversarialResult:
    """Dispatch one attack family on a batch."""
    if cfg.family == "fgsm":
        return fgsm(net, x, y, cfg.epsilon, cfg.smoothing)
    if cfg.family == "bim":
        return bim(net, x, y, cfg.epsilon, cfg.iterations, cfg.resolved_step(), cfg.smoothing)
    if cfg.family == "pgd":
        return pgd(
            net, x, y, cfg.epsilon, cfg.iterations, cfg.resolved_step(), cfg.smoothing,
            cfg.seed, sample_indices,
        )
    return cw_l2(net, x, y, cfg.cw, cfg.linf_cap)


def _concat_results(parts: Sequence[AdversarialResult]) -> AdversarialResult:
    return AdversarialResult(
        x_adv=Tensor(np.concatenate([p.x_adv.array for p in parts]), validate=False),
        success=np.concatenate([p.success for p in parts]),
        original_class=np.concatenate([p.original_class for p in parts]),
        adversarial_class=np.concatenate([p.adversarial_class for p in parts]),
        l2=np.concatenate([p.l2 for p in parts]),
        linf=np.concatenate([p.linf for p in parts]),
        iterations=np.concatenate([p.iterations for p in parts]),
    )


def evaluate_attack(
    net: Network,
    inputs,
    labels,
    cfg: AttackConfig,
    sample_indices: Sequence[int] | None = None,
) -> AttackEvaluation:
    """Attack the correctly classified subset and measure surviving accuracy.

    Samples the network misclassifies before any perturbation are
    excluded from the denominator. The batch is processed in fixed-size
    chunks (possibly by several threads); per-sample outputs depend only
    on the sample's own data, its index, and the seed.
    """
    x = net.prepare(inputs)
    y = np.asarray(labels, dtype=np.int64)
    idx = np.arange(len(y)) if sample_indices is None else np.asarray(sample_indices, dtype=np.int64)
    preds = net.predict(x)
    keep = preds == y
    attacked = idx[keep]
    skipped = idx[~keep]
    if not keep.any():
        raise ValueError("no correctly classified samples to attack")
    xk, yk = x[keep], y[keep]

    chunks = [
        (xk[i : i + CHUNK_SIZE], yk[i : i + CHUNK_SIZE], attacked[i : i + CHUNK_SIZE])
        for i in range(0, len(yk), CHUNK_SIZE)
    ]
    if cfg.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(lambda ch: run_attack(net, ch[0], ch[1], cfg, ch[2]), chunks))
    else:
        parts = [run_attack(net, cx, cy, cfg, ci) for cx, cy, ci in chunks]
    result = _concat_results(parts)
    robust = float(np.mean(result.adversarial_class == yk))
    return AttackEvaluation(
        robust_accuracy=robust,
        result=result,
        attacked_indices=attacked,
        skipped_indices=skipped,
        true_labels=yk,
        config=cfg,
    )


CSV_HEADER = "index,true,pre,post,l2,linf,success,iterations"


def write_attack_csv(path, evaluation: AttackEvaluation) -> None:
    """Per-sample outcome rows for the attacked subset."""
    r = evaluation.result
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for k, i in enumerate(evaluation.attacked_indices):
            fh.write(
                f"{int(i)},{evaluation.true_labels[k]},"
                f"{r.original_class[k]},{r.adversarial_class[k]},"
                f"{r.l2[k]:.17g},{r.linf[k]:.17g},{int(r.success[k])},{r.iterations[k]}\n"
            )
