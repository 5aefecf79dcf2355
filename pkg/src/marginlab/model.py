"""Feed-forward classifiers with a designated embedding layer.

A network is a flat sequence of layer specs plus a parallel list of
parameter tensors. One layer index is marked as the embedding output:
the activation the margin and separability machinery operates on, which
for the stock presets is the last hidden activation before the logits.

Checkpoints are a small self-describing binary container (see
``save_checkpoint``) that round-trips parameters bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Sequence

import numpy as np

from .autograd import CompGraph, GraphError, forward_op
from .tensor import Tensor

__all__ = [
    "LayerSpec",
    "Network",
    "ForwardPass",
    "CheckpointError",
    "CorruptCheckpointError",
    "CheckpointVersionError",
    "CheckpointShapeError",
    "init_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "mlp_classifier",
    "conv_classifier",
]

_KINDS = ("dense", "conv2d", "leaky_relu", "max_pool", "flatten")

CHECKPOINT_MAGIC = b"MADN"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint persistence failures."""


class CorruptCheckpointError(CheckpointError):
    """File is truncated, has a bad magic, or otherwise cannot be parsed."""


class CheckpointVersionError(CheckpointError):
    """File parses but declares an unsupported format version."""


class CheckpointShapeError(CheckpointError):
    """Stored parameters do not fit the stored layer structure."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feed-forward stack.

    Field usage by kind:
      dense       in_features, out_features
      conv2d      in_channels, out_channels, kernel, stride, pad
      leaky_relu  slope
      max_pool    size
      flatten     (none)
    """

    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    slope: float = 0.1
    size: int = 2

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind '{self.kind}'")
        if self.kind == "dense" and (self.in_features <= 0 or self.out_features <= 0):
            raise ValueError("dense layer needs positive in_features/out_features")
        if self.kind == "conv2d" and (
            self.in_channels <= 0 or self.out_channels <= 0 or self.kernel <= 0
        ):
            raise ValueError("conv2d layer needs positive channel counts and kernel")
        if self.kind == "max_pool" and self.size <= 0:
            raise ValueError("max_pool layer needs positive window size")

    def param_shapes(self) -> tuple[tuple[int, ...], ...]:
        if self.kind == "dense":
            return ((self.in_features, self.out_features), (self.out_features,))
        if self.kind == "conv2d":
            return (
                (self.out_channels, self.in_channels, self.kernel, self.kernel),
                (self.out_channels,),
            )
        return ()

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape given a per-sample input shape."""
        if self.kind == "dense":
            if in_shape != (self.in_features,):
                raise ValueError(f"dense expects {(self.in_features,)}, got {in_shape}")
            return (self.out_features,)
        if self.kind == "conv2d":
            if len(in_shape) != 3 or in_shape[0] != self.in_channels:
                raise ValueError(f"conv2d expects ({self.in_channels}, H, W), got {in_shape}")
            c, h, w = in_shape
            oh = (h + 2 * self.pad - self.kernel) // self.stride + 1
            ow = (w + 2 * self.pad - self.kernel) // self.stride + 1
            if oh <= 0 or ow <= 0:
                raise ValueError(f"conv2d kernel {self.kernel} too large for input {in_shape}")
            return (self.out_channels, oh, ow)
        if self.kind == "max_pool":
            if len(in_shape) != 3 or in_shape[1] % self.size or in_shape[2] % self.size:
                raise ValueError(f"max_pool window {self.size} must divide spatial dims {in_shape}")
            return (in_shape[0], in_shape[1] // self.size, in_shape[2] // self.size)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return in_shape  # leaky_relu


@dataclass(frozen=True)
class ForwardPass:
    """Node ids produced by one forward construction on a graph."""

    input: int
    activations: tuple[int, ...]
    embedding: int
    logits: int


@dataclass(frozen=True)
class Network:
    """Immutable classifier: layer structure plus parameter tensors.

    ``embedding_index`` picks the layer whose output is the embedding z;
    the final layer's output is the logits. Parameters are stored flat in
    layer order (weight then bias for layers that have them).
    """

    layers: tuple[LayerSpec, ...]
    params: tuple[Tensor, ...]
    embedding_index: int
    num_classes: int
    input_shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self._validate()

    def _validate(self) -> None:
        expected = [s for spec in self.layers for s in spec.param_shapes()]
        got = [p.shape for p in self.params]
        if expected != got:
            raise CheckpointShapeError(f"parameter shapes {got} do not match layers {expected}")
        if not (0 <= self.embedding_index < len(self.layers)):
            raise ValueError(f"embedding_index {self.embedding_index} out of range")
        shape = self.input_shape
        for spec in self.layers:
            shape = spec.output_shape(shape)
        if shape != (self.num_classes,):
            raise ValueError(f"final layer produces {shape}, expected ({self.num_classes},)")

    # -- graph construction -------------------------------------------------

    def bind(self, graph: CompGraph) -> list[int]:
        """Add parameters as differentiable leaves (training use)."""
        return [graph.leaf(p) for p in self.params]

    def bind_const(self, graph: CompGraph) -> list[int]:
        """Add parameters as constants (inference / input-only gradients)."""
        return [graph.constant(p.array) for p in self.params]

    def forward_graph(self, graph: CompGraph, x_node: int, param_nodes: Sequence[int]) -> ForwardPass:
        """Build the forward computation for a batch input node.

        ``x_node`` must hold a (batch, *input_shape) array.
        """
        shape = graph.shape(x_node)
        if shape[1:] != self.input_shape:
            raise GraphError(f"input shape {shape[1:]} does not match network {self.input_shape}")
        acts: list[int] = []
        h = x_node
        pi = 0
        for spec in self.layers:
            if spec.kind == "dense":
                h = forward_op(graph, "matmul", [h, param_nodes[pi]])
                h = forward_op(graph, "add", [h, param_nodes[pi + 1]])
                pi += 2
            elif spec.kind == "conv2d":
                h = forward_op(
                    graph,
                    "conv2d",
                    [h, param_nodes[pi], param_nodes[pi + 1]],
                    stride=spec.stride,
                    pad=spec.pad,
                )
                pi += 2
            elif spec.kind == "leaky_relu":
                h = forward_op(graph, "leaky_relu", [h], slope=spec.slope)
            elif spec.kind == "max_pool":
                h = forward_op(graph, "max_pool", [h], size=spec.size)
            else:  # flatten
                h = forward_op(graph, "flatten", [h])
            acts.append(h)
        return ForwardPass(
            input=x_node,
            activations=tuple(acts),
            embedding=acts[self.embedding_index],
            logits=acts[-1],
        )

    # -- array-level inference ----------------------------------------------

    def prepare(self, x) -> np.ndarray:
        """Coerce an array of samples to (batch, *input_shape)."""
        arr = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if arr.shape[1:] == self.input_shape:
            return arr
        per = int(np.prod(self.input_shape))
        if arr.ndim >= 1 and arr.size % per == 0 and arr.shape[0] * per == arr.size:
            return arr.reshape((arr.shape[0],) + self.input_shape)
        raise ValueError(f"cannot view {arr.shape} as (batch, {self.input_shape})")

    def _run(self, x) -> tuple[CompGraph, ForwardPass]:
        graph = CompGraph()
        node = graph.leaf(self.prepare(x))
        fp = self.forward_graph(graph, node, self.bind_const(graph))
        return graph, fp

    def logits_array(self, x) -> np.ndarray:
        graph, fp = self._run(x)
        return np.array(graph.value(fp.logits))

    def embed(self, x) -> np.ndarray:
        graph, fp = self._run(x)
        return np.array(graph.value(fp.embedding))

    def predict(self, x) -> np.ndarray:
        # np.argmax breaks ties toward the lowest class index
        return np.argmax(self.logits_array(x), axis=1)

    def probabilities(self, x) -> np.ndarray:
        logits = self.logits_array(x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def with_params(self, params: Sequence[Tensor]) -> "Network":
        return replace(self, params=tuple(params))

    @property
    def embedding_dim(self) -> int:
        shape = self.input_shape
        for spec in self.layers[: self.embedding_index + 1]:
            shape = spec.output_shape(shape)
        return int(np.prod(shape))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_parameters(layers: Sequence[LayerSpec], seed: int) -> list[Tensor]:
    """Fan-in-scaled uniform weights (variance 2/fan_in), zero biases.

    The 2/fan_in variance matches the gain commonly used under leaky-relu
    activations; uniform on [-sqrt(6/fan_in), sqrt(6/fan_in)] has exactly
    that variance.
    """
    rng = np.random.default_rng(seed)
    params: list[Tensor] = []
    for spec in layers:
        shapes = spec.param_shapes()
        if not shapes:
            continue
        w_shape, b_shape = shapes
        if spec.kind == "dense":
            fan_in = spec.in_features
        else:
            fan_in = spec.in_channels * spec.kernel * spec.kernel
        bound = np.sqrt(6.0 / fan_in)
        params.append(Tensor(rng.uniform(-bound, bound, size=w_shape), validate=False))
        params.append(Tensor.zeros(b_shape))
    return params


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def mlp_classifier(
    num_classes: int = 10,
    input_dim: int = 784,
    hidden: int = 256,
    embedding_dim: int = 64,
    slope: float = 0.1,
    seed: int = 0,
) -> Network:
    """Dense stack input->hidden->embedding->classes; embedding is the last hidden activation."""
    layers = (
        LayerSpec("dense", in_features=input_dim, out_features=hidden),
        LayerSpec("leaky_relu", slope=slope),
        LayerSpec("dense", in_features=hidden, out_features=embedding_dim),
        LayerSpec("leaky_relu", slope=slope),
        LayerSpec("dense", in_features=embedding_dim, out_features=num_classes),
    )
    return Network(
        layers=layers,
        params=tuple(init_parameters(layers, seed)),
        embedding_index=3,
        num_classes=num_classes,
        input_shape=(input_dim,),
    )


def conv_classifier(
    num_classes: int = 10,
    in_channels: int = 1,
    image_size: int = 28,
    channels: tuple[int, int] = (16, 32),
    embedding_dim: int = 64,
    slope: float = 0.1,
    seed: int = 0,
) -> Network:
    """Two conv/pool stages then a dense embedding; for square images divisible by 4."""
    if image_size % 4:
        raise ValueError("conv preset needs image_size divisible by 4")
    c1, c2 = channels
    final = image_size // 4
    layers = (
        LayerSpec("conv2d", in_channels=in_channels, out_channels=c1, kernel=3, stride=1, pad=1),
        LayerSpec("leaky_relu", slope=slope),
        LayerSpec("max_pool", size=2),
        LayerSpec("conv2d", in_channels=c1, out_channels=c2, kernel=3, stride=1, pad=1),
        LayerSpec("leaky_relu", slope=slope),
        LayerSpec("max_pool", size=2),
        LayerSpec("flatten"),
        LayerSpec("dense", in_features=c2 * final * final, out_features=embedding_dim),
        LayerSpec("leaky_relu", slope=slope),
        LayerSpec("dense", in_features=embedding_dim, out_features=num_classes),
    )
    return Network(
        layers=layers,
        params=tuple(init_parameters(layers, seed)),
        embedding_index=8,
        num_classes=num_classes,
        input_shape=(in_channels, image_size, image_size),
    )


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------
# Layout (little-endian): magic "MADN", version u32, layer count u32,
# then per layer: kind string (u8 length + ascii), six u32 structure
# fields, slope f64, parameter count u32, and per parameter its ndim u32,
# dims u32 each, and raw float64 data in row-major order. After the layer
# records: embedding_index u32, num_classes u32, input rank u32 + dims.

_STRUCT_FIELDS = ("in_features", "out_features", "in_channels", "out_channels", "kernel", "size")


def _write_layer(fh: BinaryIO, spec: LayerSpec, params: Sequence[Tensor]) -> None:
    kind = spec.kind.encode("ascii")
    fh.write(struct.pack("<B", len(kind)))
    fh.write(kind)
    fh.write(struct.pack("<6i", *(getattr(spec, f) for f in _STRUCT_FIELDS)))
    fh.write(struct.pack("<2i", spec.stride, spec.pad))
    fh.write(struct.pack("<d", spec.slope))
    fh.write(struct.pack("<I", len(params)))
    for p in params:
        fh.write(struct.pack("<I", p.ndim))
        fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
        fh.write(np.ascontiguousarray(p.array, dtype="<f8").tobytes())


def save_checkpoint(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(net.layers)))
        pi = 0
        for spec in net.layers:
            n = len(spec.param_shapes())
            _write_layer(fh, spec, net.params[pi : pi + n])
            pi += n
        fh.write(struct.pack("<I", net.embedding_index))
        fh.write(struct.pack("<I", net.num_classes))
        fh.write(struct.pack("<I", len(net.input_shape)))
        fh.write(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptCheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CorruptCheckpointError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version}")
        (layer_count,) = struct.unpack("<I", _read_exact(fh, 4))
        layers: list[LayerSpec] = []
        params: list[Tensor] = []
        for _ in range(layer_count):
            (klen,) = struct.unpack("<B", _read_exact(fh, 1))
            try:
                kind = _read_exact(fh, klen).decode("ascii")
            except UnicodeDecodeError as exc:
                raise CorruptCheckpointError("unreadable layer kind") from exc
            fields = struct.unpack("<6i", _read_exact(fh, 24))
            stride, pad = struct.unpack("<2i", _read_exact(fh, 8))
            (slope,) = struct.unpack("<d", _read_exact(fh, 8))
            try:
                spec = LayerSpec(
                    kind,
                    **dict(zip(_STRUCT_FIELDS, fields)),
                    stride=stride,
                    pad=pad,
                    slope=slope,
                )
            except ValueError as exc:
                raise CorruptCheckpointError(str(exc)) from exc
            (pcount,) = struct.unpack("<I", _read_exact(fh, 4))
            these: list[Tensor] = []
            for _ in range(pcount):
                (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
                if ndim > 8:
                    raise CorruptCheckpointError(f"implausible parameter rank {ndim}")
                dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
                count = int(np.prod(dims)) if dims else 1
                raw = _read_exact(fh, 8 * count)
                arr = np.frombuffer(raw, dtype="<f8").reshape(dims)
                these.append(Tensor(arr))
            expected = spec.param_shapes()
            got = tuple(t.shape for t in these)
            if got != expected:
                raise CheckpointShapeError(
                    f"layer '{kind}' stores parameter shapes {got}, structure needs {expected}"
                )
            layers.append(spec)
            params.extend(these)
        (embedding_index,) = struct.unpack("<I", _read_exact(fh, 4))
        (num_classes,) = struct.unpack("<I", _read_exact(fh, 4))
        (rank,) = struct.unpack("<I", _read_exact(fh, 4))
        if rank > 8:
            raise CorruptCheckpointError(f"implausible input rank {rank}")
        input_shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    try:
        return Network(
            layers=tuple(layers),
            params=tuple(params),
            embedding_index=embedding_index,
            num_classes=num_classes,
            input_shape=input_shape,
        )
    except CheckpointError:
        raise
    except ValueError as exc:
        raise CheckpointShapeError(str(exc)) from exc
