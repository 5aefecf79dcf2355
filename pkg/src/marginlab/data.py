"""Dataset container, file loaders, and synthetic dataset generators.

Inputs are always float64 in [0,1]. The rendered-digits generator
produces an offline, fully deterministic image classification task in
the same shape and value range as the classic 28x28 handwritten-digit
sets, so image experiments run with no downloads.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .tensor import Tensor

__all__ = [
    "Dataset",
    "DataError",
    "BadMagicError",
    "CountMismatchError",
    "TruncatedFileError",
    "load_idx",
    "load_csv",
    "make_toy_dataset",
    "make_digits_dataset",
]


class DataError(Exception):
    """Base class for dataset ingestion failures."""


class BadMagicError(DataError):
    """File does not begin with the expected format magic."""


class CountMismatchError(DataError):
    """Image and label files disagree on the number of records."""


class TruncatedFileError(DataError):
    """File ends before the declared record count."""


@dataclass(frozen=True)
class Dataset:
    """Immutable labeled sample collection.

    Invariants enforced at construction: labels lie in [0, num_classes),
    inputs lie in [0,1], and there are at least as many samples as
    classes.
    """

    inputs: Tensor
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if not isinstance(self.inputs, Tensor):
            object.__setattr__(self, "inputs", Tensor(self.inputs))
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        n = self.inputs.shape[0]
        if labels.shape != (n,):
            raise DataError(f"{n} inputs but {labels.shape} labels")
        if n < self.num_classes:
            raise DataError(f"need at least {self.num_classes} samples, got {n}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(
                f"labels must lie in [0, {self.num_classes}), found range "
                f"[{labels.min()}, {labels.max()}]"
            )
        arr = self.inputs.array
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise DataError(f"inputs must lie in [0,1], found [{arr.min()}, {arr.max()}]")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            inputs=Tensor(self.inputs.array[idx], validate=False),
            labels=self.labels[idx],
            name=name if name is not None else self.name,
        )

    def take(self, n: int, offset: int = 0) -> "Dataset":
        return self.subset(np.arange(offset, min(offset + n, len(self))))

    def class_indices(self) -> dict[int, np.ndarray]:
        return {int(c): np.flatnonzero(self.labels == c) for c in range(self.num_classes)}


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{what}: wanted {n} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    """Load the big-endian IDX image/label file pair; pixels scaled by /255."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != _IMAGE_MAGIC:
            raise BadMagicError(f"image file magic 0x{magic:08x}, expected 0x{_IMAGE_MAGIC:08x}")
        raw = _read_exact(fh, count * rows * cols, "image data")
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    images = images.reshape(count, 1, rows, cols)

    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != _LABEL_MAGIC:
            raise BadMagicError(f"label file magic 0x{magic:08x}, expected 0x{_LABEL_MAGIC:08x}")
        raw = _read_exact(fh, label_count, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise CountMismatchError(f"{count} images but {label_count} labels")
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(Tensor(images, validate=False), labels, num_classes, name)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def load_csv(path, normalize: bool = False, name: str = "csv") -> Dataset:
    """Header row, float feature columns, final integer label column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if len(rows) < 2:
        raise DataError("csv needs a header row and at least one data row")
    width = len(rows[0])
    feats: list[list[float]] = []
    labels: list[int] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise DataError(f"row {lineno}: expected {width} columns, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:-1]])
        except ValueError as exc:
            raise DataError(f"row {lineno}: non-numeric feature cell ({exc})") from None
        try:
            label = int(row[-1])
        except ValueError:
            raise DataError(f"row {lineno}: non-integer label {row[-1]!r}") from None
        if label < 0:
            raise DataError(f"row {lineno}: negative label {label}")
        labels.append(label)
    x = np.asarray(feats, dtype=np.float64)
    if normalize:
        lo, hi = x.min(axis=0), x.max(axis=0)
        span = hi - lo
        flat = span == 0  # constant column maps to 0 by convention
        span[flat] = 1.0
        x = (x - lo) / span
        x[:, flat] = 0.0
    y = np.asarray(labels, dtype=np.int64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise DataError("features outside [0,1]; pass normalize=True to rescale")
    return Dataset(Tensor(x, validate=False), y, int(y.max()) + 1, name)


# ---------------------------------------------------------------------------
# toy 2-D datasets
# ---------------------------------------------------------------------------

def make_toy_dataset(kind: str, n: int, noise: float = 0.05, seed: int = 0) -> Dataset:
    """Two-class 2-D sets: Gaussian 'blobs' or interleaved 'moons', in the unit square."""
    if n < 2:
        raise DataError("toy datasets need n >= 2")
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    if kind == "blobs":
        a = rng.normal(loc=(0.25, 0.25), scale=noise, size=(n0, 2))
        b = rng.normal(loc=(0.75, 0.75), scale=noise, size=(n1, 2))
        x = np.vstack([a, b])
    elif kind == "moons":
        t0 = rng.uniform(0.0, np.pi, size=n0)
        t1 = rng.uniform(0.0, np.pi, size=n1)
        outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        inner = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
        x = np.vstack([outer, inner]) + rng.normal(scale=noise, size=(n, 2))
        # fixed affine into the unit square; noise outliers clipped below
        x[:, 0] = (x[:, 0] + 1.0) / 3.0
        x[:, 1] = (x[:, 1] + 0.75) / 2.5
    else:
        raise DataError(f"unknown toy dataset kind '{kind}'")
    x = np.clip(x, 0.0, 1.0)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    order = rng.permutation(n)
    return Dataset(Tensor(x[order], validate=False), y[order], 2, kind)


# ---------------------------------------------------------------------------
# rendered digits
# ---------------------------------------------------------------------------
# 5x7 dot-matrix glyphs, upscaled and randomly shifted/rotated/blurred.
# Serves as an offline stand-in for scanned-digit data: same shape,
# value range, and class structure, fully reproducible from the seed.

_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph_image(digit: int, size: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    bitmap = np.array([[float(ch) for ch in row] for row in rows])
    scale = size // 7  # glyph is 7 rows tall
    up = np.kron(bitmap, np.ones((scale, scale)))
    canvas = np.zeros((size, size))
    r0 = (size - up.shape[0]) // 2
    c0 = (size - up.shape[1]) // 2
    canvas[r0 : r0 + up.shape[0], c0 : c0 + up.shape[1]] = up
    return canvas


def _affine_warp(img: np.ndarray, angle: float, shift: tuple[float, float], squeeze: float) -> np.ndarray:
    """Bilinear inverse-mapped rotation + shift + mild anisotropic scale."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    cos, sin = np.cos(angle), np.sin(angle)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ry = (rr - cy - shift[0]) * squeeze
    rx = cc - cx - shift[1]
    src_r = cos * ry + sin * rx + cy
    src_c = -sin * ry + cos * rx + cx
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0

    def gather(r, c):
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        out = np.zeros_like(img)
        out[inside] = img[r[inside], c[inside]]
        return out

    return (
        gather(r0, c0) * (1 - fr) * (1 - fc)
        + gather(r0, c0 + 1) * (1 - fr) * fc
        + gather(r0 + 1, c0) * fr * (1 - fc)
        + gather(r0 + 1, c0 + 1) * fr * fc
    )


def _blur3(img: np.ndarray) -> np.ndarray:
    k = np.array([1.0, 2.0, 1.0]) / 4.0
    pad = np.pad(img, 1, mode="edge")
    rows = k[0] * pad[:-2, 1:-1] + k[1] * pad[1:-1, 1:-1] + k[2] * pad[2:, 1:-1]
    pad2 = np.pad(rows, ((0, 0), (1, 1)), mode="edge")
    return k[0] * pad2[:, :-2] + k[1] * pad2[:, 1:-1] + k[2] * pad2[:, 2:]


def make_digits_dataset(
    n: int,
    seed: int = 0,
    image_size: int = 28,
    noise: float = 0.05,
    name: str = "digits",
) -> Dataset:
    """Rendered 10-class digit images, shape (n, 1, size, size), in [0,1]."""
    if image_size % 7:
        raise DataError("image_size must be a multiple of 7")
    if n < 10:
        raise DataError("digits dataset needs n >= 10")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    base = {d: _glyph_image(d, image_size) for d in range(10)}
    margin = image_size / 14.0  # keep glyphs inside the frame after shifting
    images = np.empty((n, 1, image_size, image_size))
    for i in range(n):
        angle = rng.uniform(-0.25, 0.25)  # radians, ~14 degrees
        shift = rng.uniform(-margin, margin, size=2)
        squeeze = rng.uniform(0.85, 1.15)
        img = _affine_warp(base[int(labels[i])], angle, (shift[0], shift[1]), squeeze)
        img = _blur3(img)
        img = img + rng.normal(scale=noise, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(Tensor(images, validate=False), labels, 10, name)
