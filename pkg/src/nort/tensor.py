"""Tensor containers and the mode-d fold/unfold index arithmetic.

All public indices (modes, multi-indices, unfolding rows/columns) are 1-based.
Internally everything is stored 0-based in numpy arrays.

The mode-d unfolding places entry ``(i_1, ..., i_M)`` at row ``i_d`` and column

    j = 1 + sum_{l != d} (i_l - 1) * prod_{m < l, m != d} I^m

i.e. the remaining modes are enumerated with the lowest mode varying fastest
(column-major / Fortran order).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "check_shape",
    "check_mode",
    "unfold_index",
    "fold_index",
    "unfold_columns",
    "dense_unfold",
    "dense_fold",
    "SparseTensorCoo",
    "FactorPair",
    "FactoredTensor",
    "factored_element",
    "factored_values",
]

# Entries per chunk when evaluating factored tensors on large index sets.
_CHUNK = 1 << 15


def check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if len(dims) < 2:
        raise ValueError(f"a tensor needs at least 2 modes, got shape {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dimensions must be >= 1, got {dims}")
    total = 1
    for d in dims:
        total *= d
    if total > np.iinfo(np.int64).max:
        raise OverflowError(f"shape {dims} overflows the int64 index range")
    return dims


def check_mode(mode: int, shape: Sequence[int]) -> int:
    if not 1 <= mode <= len(shape):
        raise IndexError(f"mode {mode} out of range 1..{len(shape)}")
    return int(mode)


def _strides_without(shape: Sequence[int], mode: int) -> np.ndarray:
    """Column strides of the mode-`mode` unfolding (0 at the unfolded mode)."""
    strides = np.zeros(len(shape), dtype=np.int64)
    acc = 1
    for l, dim in enumerate(shape):
        if l == mode - 1:
            continue
        strides[l] = acc
        acc *= dim
    return strides


def unfold_index(mode: int, idx: Sequence[int], shape: Sequence[int]) -> tuple[int, int]:
    """Map a 1-based multi-index to its 1-based (row, col) in the mode unfolding."""
    shape = check_shape(shape)
    check_mode(mode, shape)
    if len(idx) != len(shape):
        raise IndexError(f"index {tuple(idx)} has wrong length for shape {shape}")
    for i, dim in zip(idx, shape):
        if not 1 <= i <= dim:
            raise IndexError(f"index {tuple(idx)} out of bounds for shape {shape}")
    col = 1
    stride = 1
    for l, (i, dim) in enumerate(zip(idx, shape)):
        if l == mode - 1:
            continue
        col += (int(i) - 1) * stride
        stride *= dim
    return int(idx[mode - 1]), col


def fold_index(mode: int, row: int, col: int, shape: Sequence[int]) -> tuple[int, ...]:
    """Inverse of :func:`unfold_index`."""
    shape = check_shape(shape)
    check_mode(mode, shape)
    ncols = int(np.prod(shape, dtype=np.int64)) // shape[mode - 1]
    if not 1 <= row <= shape[mode - 1] or not 1 <= col <= ncols:
        raise IndexError(f"(row {row}, col {col}) out of bounds for mode {mode} of {shape}")
    rest = col - 1
    out = []
    for l, dim in enumerate(shape):
        if l == mode - 1:
            out.append(int(row))
        else:
            out.append(rest % dim + 1)
            rest //= dim
    return tuple(out)


def unfold_columns(mode: int, indices: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Vectorised 0-based unfolding columns for 0-based index rows."""
    strides = _strides_without(shape, mode)
    return np.asarray(indices, dtype=np.int64) @ strides


def dense_unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode unfolding of a dense tensor, an ``I^d x (I^pi / I^d)`` matrix."""
    check_mode(mode, t.shape)
    moved = np.moveaxis(t, mode - 1, 0)
    return moved.reshape(t.shape[mode - 1], -1, order="F")


def dense_fold(m: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`dense_unfold`."""
    shape = check_shape(shape)
    check_mode(mode, shape)
    rest = tuple(d for l, d in enumerate(shape) if l != mode - 1)
    m = np.asarray(m, dtype=float)
    if m.shape != (shape[mode - 1], int(np.prod(rest, dtype=np.int64))):
        raise ValueError(f"matrix of shape {m.shape} cannot fold to {shape} along mode {mode}")
    t = m.reshape((shape[mode - 1],) + rest, order="F")
    return np.moveaxis(t, 0, mode - 1)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class SparseTensorCoo:
    """Order-M sparse tensor in canonical coordinate format.

    Entries are sorted lexicographically by multi-index and duplicates are
    rejected. ``indices`` is an ``(nnz, M)`` array of 0-based coordinates.
    Instances are treated as immutable; :meth:`with_values` shares the index
    arrays (and the per-mode unfolding caches) with the parent.
    """

    def __init__(self, shape, indices, values, *, _canonical: bool = False, _cache=None):
        self.shape = check_shape(shape)
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        if indices.size == 0:
            indices = indices.reshape(0, len(self.shape))
        if indices.ndim != 2 or indices.shape[1] != len(self.shape):
            raise ValueError(f"indices must have shape (nnz, {len(self.shape)})")
        if values.shape != (indices.shape[0],):
            raise ValueError("values and indices disagree on the number of entries")
        if not _canonical:
            if indices.shape[0]:
                if indices.min() < 0 or np.any(indices >= np.asarray(self.shape)):
                    raise IndexError("sparse tensor index out of bounds")
            order = np.lexsort(indices.T[::-1])
            indices = indices[order]
            values = values[order]
            if indices.shape[0] > 1:
                dup = np.all(indices[1:] == indices[:-1], axis=1)
                if dup.any():
                    first = int(np.flatnonzero(dup)[0])
                    raise ValueError(f"duplicate index {tuple(indices[first] + 1)}")
            indices = np.ascontiguousarray(indices)
            values = np.ascontiguousarray(values)
        self.indices = _readonly(indices)
        self.values = _readonly(values)
        self._cols = {} if _cache is None else _cache

    @classmethod
    def from_entries(cls, shape, entries: Iterable[tuple[Sequence[int], float]]) -> "SparseTensorCoo":
        """Build from ``(multi_index, value)`` pairs with 1-based indices."""
        shape = check_shape(shape)
        idx, vals = [], []
        for multi, value in entries:
            if len(multi) != len(shape):
                raise IndexError(f"index {tuple(multi)} has wrong length for shape {shape}")
            idx.append([int(i) - 1 for i in multi])
            vals.append(float(value))
        return cls(shape, np.array(idx, dtype=np.int64).reshape(-1, len(shape)), np.array(vals))

    @classmethod
    def from_dense(cls, t: np.ndarray, mask: np.ndarray | None = None) -> "SparseTensorCoo":
        if mask is None:
            mask = t != 0
        idx = np.argwhere(mask)
        return cls(t.shape, idx, t[tuple(idx.T)])

    @classmethod
    def empty(cls, shape) -> "SparseTensorCoo":
        shape = check_shape(shape)
        return cls(shape, np.zeros((0, len(shape)), dtype=np.int64), np.zeros(0), _canonical=True)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def order(self) -> int:
        return len(self.shape)

    def __len__(self) -> int:
        return self.nnz

    def entries(self):
        """Iterate ``(multi_index, value)`` with 1-based indices."""
        for row, v in zip(self.indices, self.values):
            yield tuple(int(i) + 1 for i in row), float(v)

    def rows(self, mode: int) -> np.ndarray:
        """0-based unfolding rows (a view of the index column)."""
        return self.indices[:, mode - 1]

    def cols(self, mode: int) -> np.ndarray:
        """0-based unfolding columns, cached per mode."""
        check_mode(mode, self.shape)
        c = self._cols.get(mode)
        if c is None:
            c = _readonly(unfold_columns(mode, self.indices, self.shape))
            self._cols[mode] = c
        return c

    def with_values(self, values) -> "SparseTensorCoo":
        values = np.asarray(values, dtype=float)
        if values.shape != self.values.shape:
            raise ValueError("replacement values must match the support size")
        return SparseTensorCoo(self.shape, self.indices, values, _canonical=True, _cache=self._cols)

    def subset(self, selector) -> "SparseTensorCoo":
        """Entries picked by a boolean mask or sorted integer positions."""
        return SparseTensorCoo(
            self.shape, self.indices[selector], self.values[selector], _canonical=True
        )

    def to_dense(self) -> np.ndarray:
        t = np.zeros(self.shape)
        t[tuple(self.indices.T)] = self.values
        return t

    def linear_index(self) -> np.ndarray:
        """Column-major linear positions, handy for set operations on supports."""
        return np.ravel_multi_index(tuple(self.indices.T), self.shape, order="F")

    def same_support(self, other: "SparseTensorCoo") -> bool:
        return (
            self.shape == other.shape
            and self.nnz == other.nnz
            and (self.indices is other.indices or np.array_equal(self.indices, other.indices))
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseTensorCoo):
            return NotImplemented
        return self.same_support(other) and np.array_equal(self.values, other.values)

    __hash__ = None

    def __repr__(self) -> str:
        return f"SparseTensorCoo(shape={self.shape}, nnz={self.nnz})"


@dataclass(frozen=True, eq=False)
class FactorPair:
    """Low-rank factorisation of one mode unfolding.

    Represents ``left @ diag(singvals) @ right.T`` when ``singvals`` is given
    (columns then orthonormal), otherwise ``left @ right.T``.
    """

    mode: int
    left: np.ndarray
    right: np.ndarray
    singvals: np.ndarray | None = None

    def __post_init__(self):
        left = np.asarray(self.left, dtype=float)
        right = np.asfortranarray(self.right, dtype=float)
        if left.ndim != 2 or right.ndim != 2 or left.shape[1] != right.shape[1]:
            raise ValueError(f"factor shapes {left.shape} and {right.shape} do not pair up")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        if self.singvals is not None:
            s = np.asarray(self.singvals, dtype=float).reshape(-1)
            if s.shape[0] != left.shape[1]:
                raise ValueError("need one singular value per factor column")
            object.__setattr__(self, "singvals", s)

    @classmethod
    def zero(cls, mode: int, shape: Sequence[int]) -> "FactorPair":
        rows = shape[mode - 1]
        cols = int(np.prod(shape, dtype=np.int64)) // rows
        return cls(mode, np.zeros((rows, 0)), np.zeros((cols, 0)), np.zeros(0))

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    @property
    def weights(self) -> np.ndarray:
        if self.singvals is None:
            return np.ones(self.rank)
        return self.singvals

    def weighted_left(self) -> np.ndarray:
        return self.left * self.weights

    def check(self, shape: Sequence[int]) -> None:
        check_mode(self.mode, shape)
        rows = shape[self.mode - 1]
        cols = int(np.prod(shape, dtype=np.int64)) // rows
        if self.left.shape[0] != rows or self.right.shape[0] != cols:
            raise ValueError(
                f"factor for mode {self.mode} has shapes {self.left.shape}/{self.right.shape}, "
                f"expected ({rows}, k)/({cols}, k) for tensor shape {tuple(shape)}"
            )

    def to_matrix(self) -> np.ndarray:
        return self.weighted_left() @ self.right.T

    def to_dense(self, shape: Sequence[int]) -> np.ndarray:
        return dense_fold(self.to_matrix(), self.mode, shape)

    def norm_sq(self) -> float:
        """Squared Frobenius norm."""
        if self.singvals is not None:
            return float(self.singvals @ self.singvals)
        g = (self.left.T @ self.left) * (self.right.T @ self.right)
        return float(g.sum())


@dataclass(frozen=True, eq=False)
class FactoredTensor:
    """Implicit tensor ``sum_t coeff_t * fold_{mode_t}(factor_t)``."""

    shape: tuple[int, ...]
    terms: tuple[tuple[float, FactorPair], ...] = field(default_factory=tuple)

    def __post_init__(self):
        shape = check_shape(self.shape)
        object.__setattr__(self, "shape", shape)
        terms = tuple((float(c), f) for c, f in self.terms)
        for _, f in terms:
            f.check(shape)
        object.__setattr__(self, "terms", terms)

    def scaled(self, c: float) -> "FactoredTensor":
        return FactoredTensor(self.shape, tuple((c * a, f) for a, f in self.terms))

    def __add__(self, other: "FactoredTensor") -> "FactoredTensor":
        if self.shape != other.shape:
            raise ValueError("shape mismatch")
        return FactoredTensor(self.shape, self.terms + other.terms)

    def __sub__(self, other: "FactoredTensor") -> "FactoredTensor":
        return self + other.scaled(-1.0)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for c, f in self.terms:
            out += c * f.to_dense(self.shape)
        return out


def factored_values(x: FactoredTensor, indices: np.ndarray, cols: dict | None = None) -> np.ndarray:
    """Values of a factored tensor at 0-based ``(n, M)`` indices.

    ``cols`` may map mode -> precomputed 0-based unfolding columns for the
    same indices (e.g. the cache of a :class:`SparseTensorCoo`).
    """
    indices = np.asarray(indices, dtype=np.int64)
    n = indices.shape[0]
    out = np.zeros(n)
    col_cache = {} if cols is None else cols
    for mode in {f.mode for _, f in x.terms}:
        if mode not in col_cache:
            col_cache[mode] = unfold_columns(mode, indices, x.shape)
    for c, f in x.terms:
        if f.rank == 0 or c == 0.0:
            continue
        left = f.weighted_left() * c
        rows = indices[:, f.mode - 1]
        col = col_cache[f.mode]
        for start in range(0, n, _CHUNK):
            stop = min(start + _CHUNK, n)
            out[start:stop] += np.einsum(
                "ij,ij->i", left[rows[start:stop]], f.right[col[start:stop]]
            )
    return out


def factored_element(x: FactoredTensor, idx: Sequence[int]) -> float:
    """Single entry of a factored tensor at a 1-based multi-index."""
    total = 0.0
    for c, f in x.terms:
        row, col = unfold_index(f.mode, idx, x.shape)
        if f.rank:
            total += c * float(f.weighted_left()[row - 1] @ f.right[col - 1])
    if not x.terms:
        unfold_index(1, idx, x.shape)
    return total
