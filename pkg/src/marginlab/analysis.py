"""Embedding-space diagnostics and the black-box transfer protocol.

Quantities reported here drive the robustness story: the minimum
cross-class embedding distance (margin), per-sample input-Jacobian
norms and the first-order distortion lower bound margin / max-norm,
cluster separability (Davies-Bouldin index, centroid distances, a
deterministic 2-D principal-component projection), adversarial class
confusion, and proxy distillation through a query-counting interface
that exposes no gradients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, AttackEvaluation, run_attack
from .autograd import CompGraph, backward, forward_op
from .model import Network
from .tensor import Tensor

__all__ = [
    "MarginReport",
    "SeparabilityReport",
    "ConfusionReport",
    "QueryOnlyModel",
    "DistillConfig",
    "BlackBoxResult",
    "embedding_jacobian_norms",
    "embedding_margin",
    "distortion_lower_bound",
    "davies_bouldin",
    "centroid_distance_matrix",
    "class_spreads",
    "pca_projection",
    "adversarial_confusion",
    "distill_proxy",
    "blackbox_evaluate",
    "report_json",
    "REPORT_SCHEMA_VERSION",
]

REPORT_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Jacobian statistics
# ---------------------------------------------------------------------------

def embedding_jacobian_norms(
    net: Network,
    inputs,
    target: str = "embedding",
    chunk: int = 32,
) -> np.ndarray:
    """Frobenius norm of d(layer)/d(input) for every sample.

    Samples are independent in the forward pass, so one reverse sweep per
    output component covers a whole chunk; chunking bounds graph memory.
    """
    x = net.prepare(inputs)
    n = x.shape[0]
    out = np.empty(n)
    for start in range(0, n, chunk):
        xb = x[start : start + chunk]
        graph = CompGraph()
        xn = graph.leaf(xb)
        fp = net.forward_graph(graph, xn, net.bind_const(graph))
        node = fp.embedding if target == "embedding" else fp.logits
        width = int(np.prod(graph.shape(node)[1:]))
        flat = forward_op(graph, "reshape", [node], shape=(xb.shape[0], width))
        sumsq = np.zeros(xb.shape[0])
        for j in range(width):
            sel = np.zeros((width, 1))
            sel[j, 0] = 1.0
            sj = forward_op(
                graph, "sum", [forward_op(graph, "matmul", [flat, graph.constant(sel)])]
            )
            row = backward(graph, sj, wrt=[xn])[xn].array
            sumsq += (row.reshape(xb.shape[0], -1) ** 2).sum(axis=1)
        out[start : start + chunk] = np.sqrt(sumsq)
    return out


# ---------------------------------------------------------------------------
# margin and the distortion lower bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarginReport:
    margin: float
    pair_indices: tuple[int, int]  # positions within the analyzed subset
    pair_classes: tuple[int, int]
    max_jacobian_norm: float
    mean_jacobian_norm: float
    distortion_lower_bound: float
    unbounded: bool  # True when every Jacobian norm is zero

    def as_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "margin": self.margin,
            "pair_indices": list(self.pair_indices),
            "pair_classes": list(self.pair_classes),
            "max_jacobian_norm": self.max_jacobian_norm,
            "mean_jacobian_norm": self.mean_jacobian_norm,
            "distortion_lower_bound": self.distortion_lower_bound,
            "unbounded": self.unbounded,
        }


def _min_cross_class_pair(z: np.ndarray, y: np.ndarray) -> tuple[float, int, int]:
    """Exact minimum cross-class L2 distance; row-chunked to bound memory."""
    n = z.shape[0]
    best = np.inf
    bi = bj = -1
    step = max(1, min(n, 4_000_000 // max(1, n * z.shape[1])))
    for s in range(0, n, step):
        block = z[s : s + step]  # (b, d)
        diff = block[:, None, :] - z[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))  # (b, n)
        cross = y[s : s + step, None] != y[None, :]
        dist[~cross] = np.inf
        k = int(np.argmin(dist))
        i, j = divmod(k, n)
        if dist[i, j] < best:
            best = float(dist[i, j])
            bi, bj = s + i, j
    return best, bi, bj


def embedding_margin(
    net: Network,
    inputs,
    labels,
    cap: int = 1000,
    seed: int = 0,
    target: str = "embedding",
    jacobian_chunk: int = 32,
) -> MarginReport:
    """Minimum cross-class embedding distance over a capped random subset.

    Exact over the subset; the subset is drawn without replacement from a
    generator seeded by ``seed`` whenever the input exceeds ``cap``.
    """
    x = net.prepare(inputs)
    y = np.asarray(labels, dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("margin needs at least two classes present")
    if len(y) > cap:
        pick = np.random.default_rng(seed).choice(len(y), size=cap, replace=False)
        pick.sort()
        x, y = x[pick], y[pick]
    z = net.embed(x) if target == "embedding" else net.logits_array(x)
    margin, i, j = _min_cross_class_pair(np.asarray(z), y)
    norms = embedding_jacobian_norms(net, x, target=target, chunk=jacobian_chunk)
    max_norm = float(norms.max())
    unbounded = max_norm == 0.0
    bound = float("inf") if unbounded else margin / max_norm
    return MarginReport(
        margin=margin,
        pair_indices=(i, j),
        pair_classes=(int(y[i]), int(y[j])),
        max_jacobian_norm=max_norm,
        mean_jacobian_norm=float(norms.mean()),
        distortion_lower_bound=bound,
        unbounded=unbounded,
    )


def distortion_lower_bound(report: MarginReport) -> float:
    """margin / max Jacobian norm; infinite (flagged) when the norm is zero."""
    return report.distortion_lower_bound


# ---------------------------------------------------------------------------
# separability
# ---------------------------------------------------------------------------

def _centroids_and_spreads(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    classes = np.unique(y)
    mus = np.stack([z[y == c].mean(axis=0) for c in classes])
    sigmas = np.array([np.linalg.norm(z[y == c] - mus[k], axis=1).mean() for k, c in enumerate(classes)])
    return classes, mus, sigmas


def class_spreads(z, labels) -> dict[int, float]:
    """Mean L2 distance to the class centroid, per class present."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes, _, sigmas = _centroids_and_spreads(z, y)
    return {int(c): float(s) for c, s in zip(classes, sigmas)}


def davies_bouldin(z, labels) -> float:
    """Mean over classes of the worst (sigma_i + sigma_j) / centroid gap."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes, mus, sigmas = _centroids_and_spreads(z, y)
    m = classes.size
    if m < 2:
        raise ValueError("Davies-Bouldin needs at least two classes present")
    ratios = np.empty(m)
    for i in range(m):
        worst = -np.inf
        for j in range(m):
            if i == j:
                continue
            gap = float(np.linalg.norm(mus[i] - mus[j]))
            if gap == 0.0:
                raise ValueError(
                    f"classes {int(classes[i])} and {int(classes[j])} have coincident centroids"
                )
            worst = max(worst, (sigmas[i] + sigmas[j]) / gap)
        ratios[i] = worst
    return float(ratios.mean())


def centroid_distance_matrix(z, labels, num_classes: int) -> np.ndarray:
    """Symmetric (M, M) matrix of centroid L2 distances; all classes required."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    present = np.unique(y)
    missing = sorted(set(range(num_classes)) - set(int(c) for c in present))
    if missing:
        raise ValueError(f"classes missing from the batch: {missing}")
    mus = np.stack([z[y == c].mean(axis=0) for c in range(num_classes)])
    out = np.zeros((num_classes, num_classes))
    for i in range(num_classes):
        for j in range(i + 1, num_classes):
            d = float(np.linalg.norm(mus[i] - mus[j]))
            out[i, j] = out[j, i] = d
    return out


def pca_projection(z) -> np.ndarray:
    """Deterministic top-2 principal-component coordinates of the rows.

    Eigenvectors are sign-fixed by making each one's largest-magnitude
    entry positive, so reruns give identical output.
    """
    z = np.asarray(z, dtype=np.float64)
    centered = z - z.mean(axis=0)
    cov = centered.T @ centered / max(1, z.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:2]
    basis = vecs[:, order]
    for k in range(basis.shape[1]):
        lead = np.argmax(np.abs(basis[:, k]))
        if basis[lead, k] < 0:
            basis[:, k] = -basis[:, k]
    return centered @ basis


@dataclass(frozen=True)
class SeparabilityReport:
    dbi: float
    centroid_distances: np.ndarray
    spreads: dict[int, float]
    projection: np.ndarray

    def as_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "dbi": self.dbi,
            "centroid_distances": self.centroid_distances.tolist(),
            "spreads": {str(k): v for k, v in self.spreads.items()},
            "projection": self.projection.tolist(),
        }


def separability_report(z, labels, num_classes: int) -> SeparabilityReport:
    return SeparabilityReport(
        dbi=davies_bouldin(z, labels),
        centroid_distances=centroid_distance_matrix(z, labels, num_classes),
        spreads=class_spreads(z, labels),
        projection=pca_projection(z),
    )


# ---------------------------------------------------------------------------
# adversarial confusion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionReport:
    """Successful attack transitions: counts[i, j] = true class i now predicted j."""

    counts: np.ndarray
    top_destination: dict[int, int]  # per source class with >= 1 success
    nearest_centroid: dict[int, int] | None
    correspondence_fraction: float | None  # how often top destination == nearest centroid

    def as_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "counts": self.counts.astype(int).tolist(),
            "top_destination": {str(k): v for k, v in self.top_destination.items()},
            "nearest_centroid": None
            if self.nearest_centroid is None
            else {str(k): v for k, v in self.nearest_centroid.items()},
            "correspondence_fraction": self.correspondence_fraction,
        }


def adversarial_confusion(
    evaluation: AttackEvaluation,
    num_classes: int,
    centroid_distances: np.ndarray | None = None,
) -> ConfusionReport:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    r = evaluation.result
    for k in np.flatnonzero(r.success):
        counts[evaluation.true_labels[k], r.adversarial_class[k]] += 1
    top = {
        int(i): int(np.argmax(counts[i]))
        for i in range(num_classes)
        if counts[i].sum() > 0
    }
    nearest = None
    frac = None
    if centroid_distances is not None:
        gaps = centroid_distances.astype(np.float64).copy()
        np.fill_diagonal(gaps, np.inf)
        nearest = {int(i): int(np.argmin(gaps[i])) for i in range(num_classes)}
        if top:
            matches = [1.0 if nearest[i] == d else 0.0 for i, d in top.items()]
            frac = float(np.mean(matches))
    return ConfusionReport(counts, top, nearest, frac)


# ---------------------------------------------------------------------------
# black-box protocol
# ---------------------------------------------------------------------------

class QueryOnlyModel:
    """Label/probability query surface over a network; counts every call.

    The wrapped network is hidden: no parameters, no graph access, no
    gradients. ``gradient_queries`` exists so audits can assert it stays
    zero by construction.
    """

    def __init__(self, net: Network):
        self._net = net
        self.label_queries = 0
        self.probability_queries = 0

    @property
    def gradient_queries(self) -> int:
        return 0  # no gradient entry point exists on this interface

    @property
    def num_classes(self) -> int:
        return self._net.num_classes

    def query_labels(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self.label_queries += x.shape[0]
        return self._net.predict(x)

    def query_probabilities(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self.probability_queries += x.shape[0]
        return self._net.probabilities(x)

    @property
    def total_queries(self) -> int:
        return self.label_queries + self.probability_queries


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.1
    weight_decay: float = 0.0
    mode: str = "soft"  # 'soft': match output distributions; 'hard': match labels
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("soft", "hard"):
            raise ValueError("mode must be 'soft' or 'hard'")


def _soft_cross_entropy_node(graph: CompGraph, logits: int, targets: np.ndarray) -> int:
    log_probs = forward_op(graph, "log_softmax", [logits], axis=1)
    weighted = forward_op(graph, "mul", [graph.constant(targets), log_probs])
    per = forward_op(graph, "neg", [forward_op(graph, "sum", [weighted], axis=(1,))])
    return forward_op(graph, "mean", [per])


def distill_proxy(
    target: QueryOnlyModel,
    proxy: Network,
    probe_inputs,
    cfg: DistillConfig | None = None,
) -> tuple[Network, int]:
    """Train a proxy to imitate the target using only its query surface.

    Returns the trained proxy and the number of target queries spent.
    Probes are labeled once up front; training then never touches the
    target again.
    """
    cfg = cfg or DistillConfig()
    x = proxy.prepare(probe_inputs)
    n = x.shape[0]
    if cfg.mode == "soft":
        targets = target.query_probabilities(x)
    else:
        labels = target.query_labels(x)
        targets = np.zeros((n, target.num_classes))
        targets[np.arange(n), labels] = 1.0
    queries = target.total_queries

    from .train import sgd_step  # local import to avoid a module cycle

    rng = np.random.default_rng(cfg.seed)
    net = proxy
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            bidx = order[s : s + cfg.batch_size]
            graph = CompGraph()
            pn = net.bind(graph)
            fp = net.forward_graph(graph, graph.constant(x[bidx]), pn)
            loss = _soft_cross_entropy_node(graph, fp.logits, targets[bidx])
            grads = backward(graph, loss, wrt=pn)
            net = net.with_params(
                sgd_step(net.params, [grads[p].array for p in pn], cfg.learning_rate, cfg.weight_decay)
            )
    return net, queries


@dataclass(frozen=True)
class BlackBoxResult:
    robust_accuracy: float
    attacked_indices: np.ndarray
    skipped_indices: np.ndarray
    adversarial_class: np.ndarray  # target's predictions on the transferred examples
    success: np.ndarray
    config: AttackConfig

    def as_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "robust_accuracy": self.robust_accuracy,
            "attacked": int(self.attacked_indices.size),
            "skipped": int(self.skipped_indices.size),
            "family": self.config.family,
            "epsilon": self.config.epsilon,
        }


def blackbox_evaluate(
    target: Network,
    proxy: Network,
    inputs,
    labels,
    cfg: AttackConfig,
    sample_indices: Sequence[int] | None = None,
) -> BlackBoxResult:
    """White-box attack on the proxy, measured on the target.

    Filtering follows the standard protocol on the *target*: only samples
    the target classifies correctly pre-attack are counted.
    """
    x = target.prepare(inputs)
    y = np.asarray(labels, dtype=np.int64)
    idx = np.arange(len(y)) if sample_indices is None else np.asarray(sample_indices, dtype=np.int64)
    keep = target.predict(x) == y
    if not keep.any():
        raise ValueError("no correctly classified samples to attack")
    xk, yk = x[keep], y[keep]
    res = run_attack(proxy, proxy.prepare(xk), yk, cfg, idx[keep])
    preds_target = target.predict(target.prepare(res.x_adv.array))
    return BlackBoxResult(
        robust_accuracy=float(np.mean(preds_target == yk)),
        attacked_indices=idx[keep],
        skipped_indices=idx[~keep],
        adversarial_class=preds_target,
        success=preds_target != yk,
        config=cfg,
    )


def report_json(report) -> str:
    """Serialize any report object with an ``as_dict`` method."""
    return json.dumps(report.as_dict(), indent=2, sort_keys=True)
