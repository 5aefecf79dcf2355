"""Define-by-run computation graph with reverse-mode differentiation.

The graph is an append-only list of nodes, each holding an operation tag,
parent node ids (always smaller than the node's own id, so the list is
topologically ordered) and the cached forward value.

``backward`` walks the graph in reverse and *records the adjoint
computation as new graph nodes*: every vector-Jacobian product is built
out of the same primitive operations, so a gradient is itself a
differentiable node. That is what allows loss terms that contain a
gradient norm (the input-sensitivity penalty) to be minimized by a second
backward pass through the first one.

Graphs are rebuilt per forward pass and are single-owner during
construction; node values are treated as immutable once cached.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .tensor import Tensor

__all__ = [
    "CompGraph",
    "GraphError",
    "Gradients",
    "Var",
    "forward_op",
    "backward",
    "jacobian",
    "OP_TAGS",
]


class GraphError(ValueError):
    """Raised for invalid graph construction: bad shapes, bad ops, non-scalar backward roots."""


class _Node:
    __slots__ = ("op", "parents", "value", "meta")

    def __init__(self, op: str, parents: tuple[int, ...], value: np.ndarray, meta: dict | None):
        self.op = op
        self.parents = parents
        self.value = value
        self.meta = meta


class CompGraph:
    """Append-only operation tape; see module docstring."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, op: str, parents: tuple[int, ...], value: np.ndarray, meta: dict | None = None) -> int:
        self._nodes.append(_Node(op, parents, np.asarray(value, dtype=np.float64), meta if meta is not None else {}))
        return len(self._nodes) - 1

    def leaf(self, value: Tensor | np.ndarray) -> int:
        """Add an input node (differentiable endpoint)."""
        arr = value.array if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        return self._append("leaf", (), arr)

    def constant(self, value) -> int:
        """Add a constant node; gradients never flow into it."""
        return self._append("const", (), np.asarray(value, dtype=np.float64))

    def value(self, nid: int) -> np.ndarray:
        return self._nodes[nid].value

    def tensor(self, nid: int) -> Tensor:
        return Tensor._wrap(self._nodes[nid].value)

    def shape(self, nid: int) -> tuple[int, ...]:
        return self._nodes[nid].value.shape

    def op_tag(self, nid: int) -> str:
        return self._nodes[nid].op

    def parents(self, nid: int) -> tuple[int, ...]:
        return self._nodes[nid].parents

    def replay(self, nid: int) -> np.ndarray:
        """Recompute a node's value from the leaf/const caches.

        Exists to check that cached forward values are reproducible
        bit-for-bit; not used on any hot path.
        """
        memo: dict[int, np.ndarray] = {}

        def rec(k: int) -> np.ndarray:
            if k in memo:
                return memo[k]
            node = self._nodes[k]
            if node.op in ("leaf", "const"):
                out = node.value
            else:
                vals = [rec(p) for p in node.parents]
                meta = dict(node.meta) if node.meta else {}
                out = _PRIMITIVES[node.op].forward(vals, meta)
            memo[k] = out
            return out

        return rec(nid)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------
# Each primitive has a forward function on raw arrays and a vjp builder that
# emits graph nodes for the parent adjoints. ``needed[i]`` is False when the
# i-th parent's adjoint is not wanted; builders may skip work for it.

class _OpDef:
    __slots__ = ("forward", "vjp")

    def __init__(self, forward: Callable, vjp: Callable | None):
        self.forward = forward
        self.vjp = vjp


_PRIMITIVES: dict[str, _OpDef] = {}
_COMPOSITES: dict[str, Callable] = {}


def _primitive(name: str, forward: Callable, vjp: Callable | None) -> None:
    _PRIMITIVES[name] = _OpDef(forward, vjp)


def _shape_error(op: str, shapes: Sequence[tuple[int, ...]], detail: str = "") -> GraphError:
    listing = ", ".join(str(s) for s in shapes)
    msg = f"op '{op}': incompatible shapes {listing}"
    if detail:
        msg += f" ({detail})"
    return GraphError(msg)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, [a.shape, b.shape]) from None


def _sum_to(graph: CompGraph, gid: int, target: tuple[int, ...]) -> int:
    """Reduce a broadcast gradient back to the shape of its source operand."""
    gshape = graph.shape(gid)
    if gshape == target:
        return gid
    ndiff = len(gshape) - len(target)
    axes = list(range(ndiff))
    for i, dim in enumerate(target):
        if dim == 1 and gshape[ndiff + i] != 1:
            axes.append(ndiff + i)
    out = forward_op(graph, "sum", [gid], axis=tuple(axes), keepdims=True)
    return forward_op(graph, "reshape", [out], shape=target)


# --- elementwise arithmetic -------------------------------------------------

def _fw_add(vals, meta):
    _check_broadcast("add", vals[0], vals[1])
    return vals[0] + vals[1]


def _vjp_add(graph, nid, g, needed):
    pa, pb = graph.parents(nid)
    out = [None, None]
    if needed[0]:
        out[0] = _sum_to(graph, g, graph.shape(pa))
    if needed[1]:
        out[1] = _sum_to(graph, g, graph.shape(pb))
    return out


def _fw_sub(vals, meta):
    _check_broadcast("sub", vals[0], vals[1])
    return vals[0] - vals[1]


def _vjp_sub(graph, nid, g, needed):
    pa, pb = graph.parents(nid)
    out = [None, None]
    if needed[0]:
        out[0] = _sum_to(graph, g, graph.shape(pa))
    if needed[1]:
        out[1] = _sum_to(graph, forward_op(graph, "neg", [g]), graph.shape(pb))
    return out


def _vjp_neg(graph, nid, g, needed):
    return [forward_op(graph, "neg", [g]) if needed[0] else None]


def _fw_mul(vals, meta):
    _check_broadcast("mul", vals[0], vals[1])
    return vals[0] * vals[1]


def _vjp_mul(graph, nid, g, needed):
    pa, pb = graph.parents(nid)
    out = [None, None]
    if needed[0]:
        out[0] = _sum_to(graph, forward_op(graph, "mul", [g, pb]), graph.shape(pa))
    if needed[1]:
        out[1] = _sum_to(graph, forward_op(graph, "mul", [g, pa]), graph.shape(pb))
    return out


def _fw_div(vals, meta):
    _check_broadcast("div", vals[0], vals[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        return vals[0] / vals[1]


def _vjp_div(graph, nid, g, needed):
    pa, pb = graph.parents(nid)
    out = [None, None]
    if needed[0]:
        out[0] = _sum_to(graph, forward_op(graph, "div", [g, pb]), graph.shape(pa))
    if needed[1]:
        num = forward_op(graph, "mul", [g, pa])
        den = forward_op(graph, "mul", [pb, pb])
        out[1] = _sum_to(
            graph, forward_op(graph, "neg", [forward_op(graph, "div", [num, den])]), graph.shape(pb)
        )
    return out


# --- linear algebra ----------------------------------------------------------

def _fw_matmul(vals, meta):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", [a.shape, b.shape], "expects 2-D with matching inner dim")
    return a @ b


def _vjp_matmul(graph, nid, g, needed):
    pa, pb = graph.parents(nid)
    out = [None, None]
    if needed[0]:
        bt = forward_op(graph, "transpose", [pb])
        out[0] = forward_op(graph, "matmul", [g, bt])
    if needed[1]:
        at = forward_op(graph, "transpose", [pa])
        out[1] = forward_op(graph, "matmul", [at, g])
    return out


def _fw_transpose(vals, meta):
    axes = meta.get("axes")
    return np.transpose(vals[0], axes)


def _vjp_transpose(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    axes = graph._nodes[nid].meta.get("axes")
    if axes is None:
        return [forward_op(graph, "transpose", [g])]
    inverse = tuple(int(i) for i in np.argsort(axes))
    return [forward_op(graph, "transpose", [g], axes=inverse)]


def _fw_reshape(vals, meta):
    shape = tuple(meta["shape"])
    if int(np.prod(shape)) != vals[0].size:
        raise _shape_error("reshape", [vals[0].shape], f"target {shape}")
    return np.reshape(vals[0], shape)


def _vjp_reshape(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    src = graph.shape(graph.parents(nid)[0])
    return [forward_op(graph, "reshape", [g], shape=src)]


def _fw_broadcast_to(vals, meta):
    shape = tuple(meta["shape"])
    try:
        return np.broadcast_to(vals[0], shape)
    except ValueError:
        raise _shape_error("broadcast_to", [vals[0].shape], f"target {shape}") from None


def _vjp_broadcast_to(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    return [_sum_to(graph, g, graph.shape(graph.parents(nid)[0]))]


def _normalize_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _fw_sum(vals, meta):
    axis = _normalize_axis(meta.get("axis"), vals[0].ndim)
    meta["axis"] = axis
    return np.sum(vals[0], axis=axis, keepdims=bool(meta.get("keepdims", False)))


def _vjp_sum(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    node = graph._nodes[nid]
    src_shape = graph.shape(node.parents[0])
    axis = node.meta["axis"]
    if not node.meta.get("keepdims", False):
        kept = list(src_shape)
        for a in axis:
            kept[a] = 1
        g = forward_op(graph, "reshape", [g], shape=tuple(kept))
    return [forward_op(graph, "broadcast_to", [g], shape=src_shape)]


# --- scalar nonlinearities ----------------------------------------------------

def _vjp_exp(graph, nid, g, needed):
    return [forward_op(graph, "mul", [g, nid]) if needed[0] else None]


def _fw_log(vals, meta):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(vals[0])


def _vjp_log(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    return [forward_op(graph, "div", [g, graph.parents(nid)[0]])]


def _fw_sqrt(vals, meta):
    with np.errstate(invalid="ignore"):
        return np.sqrt(vals[0])


def _vjp_sqrt(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    two = graph.constant(2.0)
    return [forward_op(graph, "div", [g, forward_op(graph, "mul", [nid, two])])]


def _vjp_tanh(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    one = graph.constant(1.0)
    sq = forward_op(graph, "mul", [nid, nid])
    return [forward_op(graph, "mul", [g, forward_op(graph, "sub", [one, sq])])]


def _fw_leaky_relu(vals, meta):
    slope = float(meta.get("slope", 0.1))
    x = vals[0]
    return np.where(x >= 0.0, x, slope * x)


def _vjp_leaky_relu(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    node = graph._nodes[nid]
    x = graph.value(node.parents[0])
    slope = float(node.meta.get("slope", 0.1))
    # derivative at exactly 0 takes the positive-side slope 1
    mask = graph.constant(np.where(x >= 0.0, 1.0, slope))
    return [forward_op(graph, "mul", [g, mask])]


def _fw_maximum_scalar(vals, meta):
    return np.maximum(vals[0], float(meta["bound"]))


def _vjp_maximum_scalar(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    node = graph._nodes[nid]
    x = graph.value(node.parents[0])
    mask = graph.constant((x >= float(node.meta["bound"])).astype(np.float64))
    return [forward_op(graph, "mul", [g, mask])]


def _fw_softmax(vals, meta):
    axis = int(meta.get("axis", -1)) % vals[0].ndim
    meta["axis"] = axis
    shifted = vals[0] - np.max(vals[0], axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _vjp_softmax(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    axis = graph._nodes[nid].meta["axis"]
    gs = forward_op(graph, "mul", [g, nid])
    inner = forward_op(graph, "sum", [gs], axis=(axis,), keepdims=True)
    return [forward_op(graph, "mul", [nid, forward_op(graph, "sub", [g, inner])])]


# --- convolution building blocks ----------------------------------------------

def _conv_geometry(shape, kh, kw, stride, pad):
    b, c, h, w = shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0 or (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise _shape_error("im2col", [shape], f"kernel {(kh, kw)} stride {stride} pad {pad}")
    return b, c, h, w, oh, ow


def _fw_im2col(vals, meta):
    kh, kw = int(meta["kh"]), int(meta["kw"])
    stride, pad = int(meta.get("stride", 1)), int(meta.get("pad", 0))
    x = vals[0]
    if x.ndim != 4:
        raise _shape_error("im2col", [x.shape], "expects (batch, channels, height, width)")
    b, c, h, w, oh, ow = _conv_geometry(x.shape, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)


def _vjp_im2col(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    node = graph._nodes[nid]
    meta = node.meta
    src_shape = graph.shape(node.parents[0])
    return [
        forward_op(
            graph,
            "col2im",
            [g],
            kh=meta["kh"],
            kw=meta["kw"],
            stride=meta.get("stride", 1),
            pad=meta.get("pad", 0),
            out_shape=src_shape,
        )
    ]


def _fw_col2im(vals, meta):
    kh, kw = int(meta["kh"]), int(meta["kw"])
    stride, pad = int(meta.get("stride", 1)), int(meta.get("pad", 0))
    b, c, h, w = tuple(meta["out_shape"])
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = vals[0]
    if cols.shape != (b * oh * ow, c * kh * kw):
        raise _shape_error("col2im", [cols.shape], f"expected {(b * oh * ow, c * kh * kw)}")
    c6 = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += c6[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def _vjp_col2im(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    meta = graph._nodes[nid].meta
    return [
        forward_op(
            graph,
            "im2col",
            [g],
            kh=meta["kh"],
            kw=meta["kw"],
            stride=meta.get("stride", 1),
            pad=meta.get("pad", 0),
        )
    ]


def _fw_max_pool(vals, meta):
    k = int(meta.get("size", 2))
    x = vals[0]
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise _shape_error("max_pool", [x.shape], f"spatial dims must divide window {k}")
    b, c, h, w = x.shape
    oh, ow = h // k, w // k
    windows = x.reshape(b, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, k * k)
    idx = np.argmax(windows, axis=-1)  # ties: first (lowest) index
    onehot = np.zeros_like(windows)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    meta["mask"] = (
        onehot.reshape(b, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
    )
    return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]


def _vjp_max_pool(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    meta = graph._nodes[nid].meta
    up = forward_op(graph, "upsample", [g], size=meta.get("size", 2))
    return [forward_op(graph, "mul", [up, graph.constant(meta["mask"])])]


def _fw_upsample(vals, meta):
    k = int(meta.get("size", 2))
    return np.repeat(np.repeat(vals[0], k, axis=2), k, axis=3)


def _vjp_upsample(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    return [forward_op(graph, "window_sum", [g], size=graph._nodes[nid].meta.get("size", 2))]


def _fw_window_sum(vals, meta):
    k = int(meta.get("size", 2))
    x = vals[0]
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise _shape_error("window_sum", [x.shape], f"spatial dims must divide window {k}")
    b, c, h, w = x.shape
    return x.reshape(b, c, h // k, k, w // k, k).sum(axis=(3, 5))


def _vjp_window_sum(graph, nid, g, needed):
    if not needed[0]:
        return [None]
    return [forward_op(graph, "upsample", [g], size=graph._nodes[nid].meta.get("size", 2))]


_primitive("add", _fw_add, _vjp_add)
_primitive("sub", _fw_sub, _vjp_sub)
_primitive("neg", lambda v, m: -v[0], _vjp_neg)
_primitive("mul", _fw_mul, _vjp_mul)
_primitive("div", _fw_div, _vjp_div)
_primitive("matmul", _fw_matmul, _vjp_matmul)
_primitive("transpose", _fw_transpose, _vjp_transpose)
_primitive("reshape", _fw_reshape, _vjp_reshape)
_primitive("broadcast_to", _fw_broadcast_to, _vjp_broadcast_to)
_primitive("sum", _fw_sum, _vjp_sum)
_primitive("exp", lambda v, m: np.exp(v[0]), _vjp_exp)
_primitive("log", _fw_log, _vjp_log)
_primitive("sqrt", _fw_sqrt, _vjp_sqrt)
_primitive("tanh", lambda v, m: np.tanh(v[0]), _vjp_tanh)
_primitive("leaky_relu", _fw_leaky_relu, _vjp_leaky_relu)
_primitive("maximum_scalar", _fw_maximum_scalar, _vjp_maximum_scalar)
_primitive("softmax", _fw_softmax, _vjp_softmax)
_primitive("im2col", _fw_im2col, _vjp_im2col)
_primitive("col2im", _fw_col2im, _vjp_col2im)
_primitive("max_pool", _fw_max_pool, _vjp_max_pool)
_primitive("upsample", _fw_upsample, _vjp_upsample)
_primitive("window_sum", _fw_window_sum, _vjp_window_sum)


# ---------------------------------------------------------------------------
# composite operations
# ---------------------------------------------------------------------------

def _comp_mean(graph, inputs, axis=None, keepdims=False):
    (x,) = inputs
    shape = graph.shape(x)
    axes = _normalize_axis(axis, len(shape))
    count = 1
    for a in axes:
        count *= shape[a]
    s = forward_op(graph, "sum", [x], axis=axes, keepdims=keepdims)
    return forward_op(graph, "mul", [s, graph.constant(1.0 / count)])


def _comp_dot(graph, inputs):
    a, b = inputs
    if graph.shape(a) != graph.shape(b):
        raise _shape_error("dot", [graph.shape(a), graph.shape(b)])
    return forward_op(graph, "sum", [forward_op(graph, "mul", [a, b])])


def _comp_l2_norm(graph, inputs):
    (x,) = inputs
    sq = forward_op(graph, "mul", [x, x])
    return forward_op(graph, "sqrt", [forward_op(graph, "sum", [sq])])


def _comp_flatten(graph, inputs):
    (x,) = inputs
    shape = graph.shape(x)
    if len(shape) <= 1:
        return forward_op(graph, "reshape", [x], shape=(int(np.prod(shape)) if shape else 1,))
    lead = shape[0]
    rest = int(np.prod(shape[1:]))
    return forward_op(graph, "reshape", [x], shape=(lead, rest))


def _comp_conv2d(graph, inputs, stride=1, pad=0):
    x, w, b = inputs
    xs, ws = graph.shape(x), graph.shape(w)
    if len(xs) != 4 or len(ws) != 4 or xs[1] != ws[1]:
        raise _shape_error("conv2d", [xs, ws], "expects NCHW input and (out, in, kh, kw) weight")
    cout, cin, kh, kw = ws
    bsz, _, h, wd, oh, ow = _conv_geometry(xs, kh, kw, stride, pad)
    col = forward_op(graph, "im2col", [x], kh=kh, kw=kw, stride=stride, pad=pad)
    w2 = forward_op(graph, "reshape", [w], shape=(cout, cin * kh * kw))
    wt = forward_op(graph, "transpose", [w2])
    out = forward_op(graph, "matmul", [col, wt])
    out = forward_op(graph, "add", [out, b])
    out = forward_op(graph, "reshape", [out], shape=(bsz, oh, ow, cout))
    return forward_op(graph, "transpose", [out], axes=(0, 3, 1, 2))


def _comp_log_softmax(graph, inputs, axis=-1):
    (x,) = inputs
    ax = int(axis) % len(graph.shape(x))
    # detached per-row max: the identity logsumexp(x) = m + log(sum(exp(x - m)))
    # holds exactly for any constant m, so gradients stay correct
    m = graph.constant(np.max(graph.value(x), axis=ax, keepdims=True))
    shifted = forward_op(graph, "sub", [x, m])
    e = forward_op(graph, "exp", [shifted])
    lse = forward_op(graph, "log", [forward_op(graph, "sum", [e], axis=(ax,), keepdims=True)])
    return forward_op(graph, "sub", [shifted, lse])


_COMPOSITES["mean"] = _comp_mean
_COMPOSITES["dot"] = _comp_dot
_COMPOSITES["l2_norm"] = _comp_l2_norm
_COMPOSITES["flatten"] = _comp_flatten
_COMPOSITES["conv2d"] = _comp_conv2d
_COMPOSITES["log_softmax"] = _comp_log_softmax

OP_TAGS = tuple(sorted(set(_PRIMITIVES) | set(_COMPOSITES)))


def forward_op(graph: CompGraph, op: str, inputs: Sequence[int], **meta) -> int:
    """Apply ``op`` to existing nodes and return the id of the result node.

    Composite ops expand into primitives; the returned id is the final
    node of the expansion and its cached value is the mathematical result.
    """
    if op in _COMPOSITES:
        return _COMPOSITES[op](graph, list(inputs), **meta)
    if op not in _PRIMITIVES:
        raise GraphError(f"unknown op '{op}'")
    parents = tuple(int(i) for i in inputs)
    vals = [graph.value(p) for p in parents]
    value = _PRIMITIVES[op].forward(vals, meta)
    return graph._append(op, parents, value, meta)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class Gradients(Mapping):
    """Map from node id to its gradient.

    ``__getitem__`` returns the gradient as a :class:`Tensor` (zeros for
    nodes the output does not depend on); ``node`` returns the adjoint's
    graph node id so the gradient can be differentiated further.
    """

    def __init__(self, graph: CompGraph, table: dict[int, int]):
        self._graph = graph
        self._table = table

    def node(self, nid: int) -> int:
        if nid not in self._table:
            self._table[nid] = self._graph.constant(np.zeros(self._graph.shape(nid)))
        return self._table[nid]

    def __getitem__(self, nid: int) -> Tensor:
        if nid in self._table:
            return self._graph.tensor(self._table[nid])
        return Tensor.zeros(self._graph.shape(nid))

    def __iter__(self):
        return iter(self._table)

    def __len__(self):
        return len(self._table)


def _ancestors(graph: CompGraph, root: int) -> set[int]:
    seen: set[int] = set()
    stack = [root]
    while stack:
        k = stack.pop()
        if k in seen:
            continue
        seen.add(k)
        stack.extend(graph.parents(k))
    return seen


def _descendant_flags(graph: CompGraph, sources: Iterable[int], upto: int) -> np.ndarray:
    flags = np.zeros(upto + 1, dtype=bool)
    for s in sources:
        if s <= upto:
            flags[s] = True
    for k in range(upto + 1):
        if flags[k]:
            continue
        for p in graph.parents(k):
            if flags[p]:
                flags[k] = True
                break
    return flags


def backward(graph: CompGraph, output: int, wrt: Sequence[int] | None = None) -> Gradients:
    """Reverse-mode sweep from a scalar output node.

    Adjoints are recorded as new graph nodes, so every returned gradient
    is itself differentiable (the mechanism behind the double-backward
    sensitivity penalty). When ``wrt`` is given, adjoints are only built
    along paths connecting those nodes to the output, which skips dead
    branches such as weight gradients during an input-Jacobian sweep.
    """
    out_val = graph.value(output)
    if out_val.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {out_val.shape}")

    active = _ancestors(graph, output)
    if wrt is not None:
        reach = _descendant_flags(graph, wrt, output)
        active = {k for k in active if reach[k]}
        active.add(output)

    adjoint: dict[int, int] = {output: graph.constant(np.ones_like(out_val))}
    for k in sorted(active, reverse=True):
        if k not in adjoint:
            continue  # output does not depend on this node through active paths
        node = graph._nodes[k]
        if node.op in ("leaf", "const"):
            continue
        opdef = _PRIMITIVES[node.op]
        needed = tuple(p in active for p in node.parents)
        if not any(needed):
            continue
        contributions = opdef.vjp(graph, k, adjoint[k], needed)
        for parent, contrib in zip(node.parents, contributions):
            if contrib is None:
                continue
            if parent in adjoint:
                adjoint[parent] = forward_op(graph, "add", [adjoint[parent], contrib])
            else:
                adjoint[parent] = contrib

    if wrt is not None:
        table = {nid: adjoint[nid] for nid in wrt if nid in adjoint}
    else:
        table = dict(adjoint)
    return Gradients(graph, table)


def jacobian(fn: Callable[[CompGraph, int], int], x: Tensor) -> Tensor:
    """Exact Jacobian of a vector-valued map at ``x``.

    ``fn`` receives a fresh graph and the input node id and must return
    the output node id. One reverse sweep per output component; row ``i``
    is the gradient of output component ``i``.
    """
    graph = CompGraph()
    x_node = graph.leaf(x)
    out = fn(graph, x_node)
    out_val = graph.value(out)
    rows = []
    flat_out = forward_op(graph, "reshape", [out], shape=(out_val.size,))
    for i in range(out_val.size):
        sel = np.zeros(out_val.size)
        sel[i] = 1.0
        s = forward_op(graph, "dot", [flat_out, graph.constant(sel)])
        g = backward(graph, s, wrt=[x_node])
        rows.append(g[x_node].array.reshape(-1))
    return Tensor(np.stack(rows), validate=False)


# ---------------------------------------------------------------------------
# ergonomic handle
# ---------------------------------------------------------------------------

class Var:
    """Light handle pairing a graph with a node id, with operator sugar.

    Scalars and arrays on the right-hand side are lifted to constant
    nodes. Anything expressible here is also reachable through
    :func:`forward_op` directly; this is only for readability.
    """

    __slots__ = ("graph", "nid")

    def __init__(self, graph: CompGraph, nid: int):
        self.graph = graph
        self.nid = nid

    def _lift(self, other) -> int:
        if isinstance(other, Var):
            return other.nid
        return self.graph.constant(other)

    def _new(self, nid: int) -> "Var":
        return Var(self.graph, nid)

    @property
    def value(self) -> np.ndarray:
        return self.graph.value(self.nid)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.graph.shape(self.nid)

    def __add__(self, other):
        return self._new(forward_op(self.graph, "add", [self.nid, self._lift(other)]))

    def __radd__(self, other):
        return self._new(forward_op(self.graph, "add", [self._lift(other), self.nid]))

    def __sub__(self, other):
        return self._new(forward_op(self.graph, "sub", [self.nid, self._lift(other)]))

    def __rsub__(self, other):
        return self._new(forward_op(self.graph, "sub", [self._lift(other), self.nid]))

    def __mul__(self, other):
        return self._new(forward_op(self.graph, "mul", [self.nid, self._lift(other)]))

    def __rmul__(self, other):
        return self._new(forward_op(self.graph, "mul", [self._lift(other), self.nid]))

    def __truediv__(self, other):
        return self._new(forward_op(self.graph, "div", [self.nid, self._lift(other)]))

    def __neg__(self):
        return self._new(forward_op(self.graph, "neg", [self.nid]))

    def matmul(self, other):
        return self._new(forward_op(self.graph, "matmul", [self.nid, self._lift(other)]))

    def t(self, axes=None):
        return self._new(forward_op(self.graph, "transpose", [self.nid], axes=axes))

    def reshape(self, shape):
        return self._new(forward_op(self.graph, "reshape", [self.nid], shape=tuple(shape)))

    def sum(self, axis=None, keepdims=False):
        return self._new(forward_op(self.graph, "sum", [self.nid], axis=axis, keepdims=keepdims))

    def mean(self, axis=None, keepdims=False):
        return self._new(forward_op(self.graph, "mean", [self.nid], axis=axis, keepdims=keepdims))

    def sqrt(self):
        return self._new(forward_op(self.graph, "sqrt", [self.nid]))

    def exp(self):
        return self._new(forward_op(self.graph, "exp", [self.nid]))

    def log(self):
        return self._new(forward_op(self.graph, "log", [self.nid]))

    def tanh(self):
        return self._new(forward_op(self.graph, "tanh", [self.nid]))

    def clamp_min(self, bound: float):
        return self._new(forward_op(self.graph, "maximum_scalar", [self.nid], bound=bound))

    def __repr__(self):
        return f"Var(node={self.nid}, shape={self.shape})"
