"""Dense float64 tensor values.

A Tensor is an immutable value: a numpy float64 array plus its shape. All
numeric state in the library (inputs, parameters, embeddings, gradients)
is carried as Tensors; computation on them happens through the graph in
:mod:`marginlab.autograd` or through plain numpy for value-only paths.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = ["Tensor", "TensorError", "frobenius_norm"]


class TensorError(ValueError):
    """Raised for malformed tensor construction or non-finite values."""


class Tensor:
    """Immutable dense array of 64-bit floats.

    The backing numpy array is marked read-only; ``array`` exposes it
    without copying. Construction validates finiteness so that NaN/Inf
    never enters through a public boundary.
    """

    __slots__ = ("_array",)

    def __init__(self, data, shape: Sequence[int] | None = None, *, validate: bool = True):
        arr = np.array(data, dtype=np.float64)  # copies: caller keeps ownership
        if shape is not None:
            expected = int(np.prod(shape)) if len(tuple(shape)) else 1
            if arr.size != expected:
                raise TensorError(
                    f"data length {arr.size} does not match shape {tuple(shape)}"
                )
            arr = arr.reshape(tuple(shape))
        if validate and not np.all(np.isfinite(arr)):
            raise TensorError("tensor contains non-finite values")
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Internal constructor: trusts ``arr``, skips validation and copy."""
        t = object.__new__(cls)
        a = np.asarray(arr, dtype=np.float64)
        a.setflags(write=False)
        t._array = a
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape), dtype=np.float64))

    @classmethod
    def full(cls, shape: Sequence[int], value: float) -> "Tensor":
        return cls(np.full(tuple(shape), value, dtype=np.float64))

    @classmethod
    def from_flat(cls, shape: Sequence[int], data: Iterable[float]) -> "Tensor":
        """Build from row-major flat data, validating the element count."""
        return cls(np.asarray(list(data), dtype=np.float64), shape=tuple(shape))

    @property
    def array(self) -> np.ndarray:
        """Read-only numpy view of the values."""
        return self._array

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self._array.reshape(-1)

    def item(self) -> float:
        if self._array.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self._array.reshape(-1)[0])

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor._wrap(self._array.reshape(tuple(shape)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self._array)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(
            np.array_equal(self._array, other._array)
        )

    def __hash__(self):
        raise TypeError("Tensor is not hashable")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def frobenius_norm(t: Tensor | np.ndarray) -> float:
    """Square root of the sum of squared elements, for any shape."""
    arr = t.array if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return float(np.sqrt(np.sum(arr * arr)))
