"""Loss terms for margin-aware defended training.

Four ingredients, combined by :func:`defense_loss`:

  * smoothed cross-entropy on both branch inputs,
  * a paired cosine objective pushing same-class embeddings toward
    cosine 1 and different-class embeddings toward cosine 0,
  * a within-class variance term shrinking each class cluster around its
    centroid,
  * an input-sensitivity penalty: the mean Frobenius norm of the
    per-sample Jacobian of a chosen layer with respect to the input,
    built as graph nodes so one more backward pass reaches parameters.

Scalar helpers (``smoothed_cross_entropy``, ``cosine_similarity``,
``siamese_loss``, ``class_variance_loss``) compute plain float values;
``*_node`` builders emit differentiable graph nodes for training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import CompGraph, backward, forward_op
from .model import Network
from .tensor import Tensor

__all__ = [
    "DefenseLossConfig",
    "LossBreakdown",
    "smoothing_target",
    "smoothed_cross_entropy",
    "cross_entropy_node",
    "cosine_similarity",
    "siamese_loss",
    "siamese_loss_node",
    "class_variance_loss",
    "class_variance_node",
    "jacobian_penalty_node",
    "jacobian_penalty",
    "defense_loss",
]

# squared-norm floor used to keep sqrt differentiable at zero vectors;
# exact zeros are restored by a constant mask so values stay exact
_NORM_FLOOR = 1e-24


@dataclass(frozen=True)
class DefenseLossConfig:
    """Weights and knobs for the combined defense loss."""

    ce_weight: float = 1.0
    siamese_weight: float = 1.0
    variance_weight: float = 1.0
    jacobian_weight: float = 0.01
    smoothing: float = 0.8
    cosine_eps: float = 1e-12
    jacobian_target: str = "embedding"  # or "logits"

    def __post_init__(self):
        for name in ("ce_weight", "siamese_weight", "variance_weight", "jacobian_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.jacobian_target not in ("embedding", "logits"):
            raise ValueError("jacobian_target must be 'embedding' or 'logits'")
        if self.cosine_eps <= 0:
            raise ValueError("cosine_eps must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar values of the four terms and their weighted total."""

    ce: float
    siamese: float
    variance: float
    jacobian: float
    total: float


# ---------------------------------------------------------------------------
# smoothed cross-entropy
# ---------------------------------------------------------------------------

def smoothing_target(label: int, num_classes: int, smoothing: float) -> Tensor:
    """Soft target: ``smoothing`` at the label, remainder spread evenly."""
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} out of range for {num_classes} classes")
    if not (1.0 / num_classes) < smoothing <= 1.0:
        raise ValueError(
            f"smoothing must lie in (1/{num_classes}, 1], got {smoothing}"
        )
    t = np.full(num_classes, (1.0 - smoothing) / (num_classes - 1) if num_classes > 1 else 0.0)
    t[label] = smoothing
    return Tensor(t, validate=False)


def _target_matrix(labels: np.ndarray, num_classes: int, smoothing: float) -> np.ndarray:
    rows = [smoothing_target(int(y), num_classes, smoothing).array for y in labels]
    return np.stack(rows)


def smoothed_cross_entropy(logits: Tensor | np.ndarray, label: int, smoothing: float) -> float:
    """Cross-entropy of one logit vector against its smoothed target."""
    z = logits.array if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"expected a logit vector, got shape {z.shape}")
    target = smoothing_target(label, z.size, smoothing).array
    m = z.max()
    log_probs = (z - m) - np.log(np.sum(np.exp(z - m)))
    return float(-np.sum(target * log_probs))


def cross_entropy_node(
    graph: CompGraph,
    logits_node: int,
    labels: Sequence[int],
    smoothing: float,
    reduction: str = "mean",
) -> int:
    """Batch smoothed cross-entropy as a differentiable scalar node.

    ``reduction='sum'`` keeps per-sample gradients unscaled, which the
    attack loops rely on for exact single-sample gradient signs.
    """
    b, m = graph.shape(logits_node)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    targets = graph.constant(_target_matrix(labels, m, smoothing))
    log_probs = forward_op(graph, "log_softmax", [logits_node], axis=1)
    weighted = forward_op(graph, "mul", [targets, log_probs])
    per_sample = forward_op(graph, "neg", [forward_op(graph, "sum", [weighted], axis=(1,))])
    if reduction == "mean":
        return forward_op(graph, "mean", [per_sample])
    if reduction == "sum":
        return forward_op(graph, "sum", [per_sample])
    raise ValueError(f"unknown reduction '{reduction}'")


# ---------------------------------------------------------------------------
# paired cosine objective
# ---------------------------------------------------------------------------

def cosine_similarity(z1, z2, eps: float = 1e-12) -> float:
    a = np.asarray(z1.array if isinstance(z1, Tensor) else z1, dtype=np.float64).ravel()
    b = np.asarray(z2.array if isinstance(z2, Tensor) else z2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"vector shapes differ: {a.shape} vs {b.shape}")
    na = max(float(np.linalg.norm(a)), eps)
    nb = max(float(np.linalg.norm(b)), eps)
    return float(a @ b) / (na * nb)


def siamese_loss(z1, z2, same_class: int, eps: float = 1e-12) -> float:
    """Squared gap between pair cosine and its target (1 same, 0 different)."""
    return (float(same_class) - cosine_similarity(z1, z2, eps)) ** 2


def _row_norms_node(graph: CompGraph, z_node: int, floor: float) -> int:
    """Per-row L2 norms clamped below by sqrt(floor); shape (B, 1)."""
    sq = forward_op(graph, "mul", [z_node, z_node])
    sumsq = forward_op(graph, "sum", [sq], axis=(1,), keepdims=True)
    return forward_op(graph, "sqrt", [forward_op(graph, "maximum_scalar", [sumsq], bound=floor)])


def siamese_loss_node(
    graph: CompGraph,
    z1_node: int,
    z2_node: int,
    same_class: np.ndarray,
    eps: float = 1e-12,
) -> int:
    """Mean over pairs of squared (target - cosine); targets from the 0/1 vector."""
    b = graph.shape(z1_node)[0]
    same = np.asarray(same_class, dtype=np.float64).reshape(b, 1)
    dots = forward_op(
        graph, "sum", [forward_op(graph, "mul", [z1_node, z2_node])], axis=(1,), keepdims=True
    )
    n1 = _row_norms_node(graph, z1_node, eps * eps)
    n2 = _row_norms_node(graph, z2_node, eps * eps)
    cos = forward_op(graph, "div", [dots, forward_op(graph, "mul", [n1, n2])])
    gap = forward_op(graph, "sub", [graph.constant(same), cos])
    return forward_op(graph, "mean", [forward_op(graph, "mul", [gap, gap])])


# ---------------------------------------------------------------------------
# within-class variance
# ---------------------------------------------------------------------------

def class_variance_loss(z, labels) -> float:
    """Mean over classes present of the mean distance to the class centroid."""
    arr = np.asarray(z.array if isinstance(z, Tensor) else z, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"expected a nonempty (batch, dim) embedding array, got {arr.shape}")
    if y.shape != (arr.shape[0],):
        raise ValueError("labels do not align with embeddings")
    sigmas = []
    for c in np.unique(y):
        zc = arr[y == c]
        mu = zc.mean(axis=0)
        sigmas.append(float(np.linalg.norm(zc - mu, axis=1).mean()))
    return float(np.mean(sigmas))


def class_variance_node(graph: CompGraph, z_node: int, labels) -> int:
    """Graph version of :func:`class_variance_loss` (selection by constant matrices)."""
    b, _ = graph.shape(z_node)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (b,):
        raise ValueError("labels do not align with embeddings")
    sigma_nodes = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        sel = np.zeros((idx.size, b))
        sel[np.arange(idx.size), idx] = 1.0
        zc = forward_op(graph, "matmul", [graph.constant(sel), z_node])
        mu = forward_op(graph, "mean", [zc], axis=(0,), keepdims=True)
        diff = forward_op(graph, "sub", [zc, mu])
        sumsq = forward_op(
            graph, "sum", [forward_op(graph, "mul", [diff, diff])], axis=(1,), keepdims=True
        )
        dist = forward_op(
            graph, "sqrt", [forward_op(graph, "maximum_scalar", [sumsq], bound=_NORM_FLOOR)]
        )
        # exact zeros (sample == centroid, e.g. singleton classes) get value 0
        # and gradient 0 rather than the sqrt kink
        mask = graph.constant((graph.value(sumsq) > 0.0).astype(np.float64))
        sigma_nodes.append(forward_op(graph, "mean", [forward_op(graph, "mul", [dist, mask])]))
    total = sigma_nodes[0]
    for s in sigma_nodes[1:]:
        total = forward_op(graph, "add", [total, s])
    return forward_op(graph, "mul", [total, graph.constant(1.0 / len(sigma_nodes))])


# ---------------------------------------------------------------------------
# input-sensitivity penalty (double backprop)
# ---------------------------------------------------------------------------

def jacobian_penalty_node(
    graph: CompGraph,
    net: Network,
    param_nodes: Sequence[int],
    x_values: np.ndarray,
    target: str = "embedding",
) -> int:
    """Mean per-sample Frobenius norm of d(layer output)/d(input), on-graph.

    One reverse sweep per output component covers the whole batch at once
    because samples do not interact inside the forward pass. The sweeps
    emit ordinary graph nodes that reference ``param_nodes``, so a later
    backward pass from the returned node produces parameter gradients of
    the penalty itself.
    """
    x = net.prepare(x_values)
    batch = x.shape[0]
    x_node = graph.constant(x)
    fp = net.forward_graph(graph, x_node, list(param_nodes))
    out = fp.embedding if target == "embedding" else fp.logits
    out_shape = graph.shape(out)
    width = int(np.prod(out_shape[1:]))
    flat = forward_op(graph, "reshape", [out], shape=(batch, width))

    sumsq = None
    for j in range(width):
        sel = np.zeros((width, 1))
        sel[j, 0] = 1.0
        sj = forward_op(graph, "sum", [forward_op(graph, "matmul", [flat, graph.constant(sel)])])
        row = backward(graph, sj, wrt=[x_node]).node(x_node)  # (batch, *input)
        row2 = forward_op(graph, "reshape", [row], shape=(batch, x[0].size))
        sq = forward_op(
            graph, "sum", [forward_op(graph, "mul", [row2, row2])], axis=(1,), keepdims=True
        )
        sumsq = sq if sumsq is None else forward_op(graph, "add", [sumsq, sq])

    norms = forward_op(
        graph, "sqrt", [forward_op(graph, "maximum_scalar", [sumsq], bound=_NORM_FLOOR)]
    )
    mask = graph.constant((graph.value(sumsq) > 0.0).astype(np.float64))
    return forward_op(graph, "mean", [forward_op(graph, "mul", [norms, mask])])


def jacobian_penalty(net: Network, x_values, target: str = "embedding") -> float:
    """Value-level convenience wrapper around :func:`jacobian_penalty_node`."""
    graph = CompGraph()
    node = jacobian_penalty_node(graph, net, net.bind_const(graph), np.asarray(x_values), target)
    return float(graph.value(node))


# ---------------------------------------------------------------------------
# combined loss
# ---------------------------------------------------------------------------

def defense_loss(
    graph: CompGraph,
    net: Network,
    param_nodes: Sequence[int],
    x1_node: int,
    x2_node: int,
    y1: np.ndarray,
    y2: np.ndarray,
    cfg: DefenseLossConfig,
    jacobian_samples: int | None = None,
) -> tuple[LossBreakdown, int]:
    """Weighted sum of all defense terms over an aligned pair of batches.

    Returns the scalar values for logging and the total's node id for the
    parameter backward pass. ``jacobian_samples`` caps how many samples
    per branch feed the sensitivity penalty (it dominates runtime);
    ``None`` uses the full batch.
    """
    y1 = np.asarray(y1, dtype=np.int64)
    y2 = np.asarray(y2, dtype=np.int64)
    b1, b2 = graph.shape(x1_node)[0], graph.shape(x2_node)[0]
    if not (b1 == b2 == y1.shape[0] == y2.shape[0]):
        raise ValueError(f"branch batches misaligned: {b1}, {b2}, {y1.shape}, {y2.shape}")
    same = (y1 == y2).astype(np.float64)

    fp1 = net.forward_graph(graph, x1_node, list(param_nodes))
    fp2 = net.forward_graph(graph, x2_node, list(param_nodes))

    ce = forward_op(
        graph,
        "add",
        [
            cross_entropy_node(graph, fp1.logits, y1, cfg.smoothing),
            cross_entropy_node(graph, fp2.logits, y2, cfg.smoothing),
        ],
    )
    siam = siamese_loss_node(graph, fp1.embedding, fp2.embedding, same, cfg.cosine_eps)
    var = forward_op(
        graph,
        "add",
        [
            class_variance_node(graph, fp1.embedding, y1),
            class_variance_node(graph, fp2.embedding, y2),
        ],
    )

    terms = [
        forward_op(graph, "mul", [ce, graph.constant(cfg.ce_weight)]),
        forward_op(graph, "mul", [siam, graph.constant(cfg.siamese_weight)]),
        forward_op(graph, "mul", [var, graph.constant(cfg.variance_weight)]),
    ]

    jac_value = 0.0
    if cfg.jacobian_weight > 0.0:
        cap = b1 if jacobian_samples is None else max(1, min(jacobian_samples, b1))
        jac = forward_op(
            graph,
            "add",
            [
                jacobian_penalty_node(
                    graph, net, param_nodes, graph.value(x1_node)[:cap], cfg.jacobian_target
                ),
                jacobian_penalty_node(
                    graph, net, param_nodes, graph.value(x2_node)[:cap], cfg.jacobian_target
                ),
            ],
        )
        jac_value = float(graph.value(jac))
        terms.append(forward_op(graph, "mul", [jac, graph.constant(cfg.jacobian_weight)]))

    total = terms[0]
    for t in terms[1:]:
        total = forward_op(graph, "add", [total, t])

    breakdown = LossBreakdown(
        ce=float(graph.value(ce)),
        siamese=float(graph.value(siam)),
        variance=float(graph.value(var)),
        jacobian=jac_value,
        total=float(graph.value(total)),
    )
    return breakdown, total
