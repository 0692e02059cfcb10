"""Text formats: COO tensors, dense matrices, and factor archives.

COO tensor file::

    tensor <M> <I1> ... <IM>
    <i1> ... <iM> <value>      # 1-based indices, one entry per line

Dense matrix file::

    matrix <n> <m>
    <row of m values>          # n rows

Lines starting with ``#`` and blank lines are ignored in both formats.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensor import FactorPair, SparseTensorCoo, check_shape

__all__ = [
    "ParseError",
    "coo_read",
    "coo_write",
    "matrix_read",
    "matrix_write",
    "factors_save",
    "factors_load",
]


class ParseError(ValueError):
    """Malformed input file; ``line`` is the 1-based offending line number."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


def _content_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            yield lineno, text


def coo_read(path) -> SparseTensorCoo:
    lines = _content_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise ParseError(path, 1, "missing 'tensor' header") from None
    parts = header.split()
    if parts[0] != "tensor" or len(parts) < 2:
        raise ParseError(path, lineno, "expected 'tensor <M> <I1> ... <IM>'")
    try:
        order = int(parts[1])
        dims = [int(p) for p in parts[2:]]
    except ValueError:
        raise ParseError(path, lineno, "non-integer in header") from None
    if len(dims) != order:
        raise ParseError(path, lineno, f"header declares order {order} but lists {len(dims)} dims")
    try:
        shape = check_shape(dims)
    except ValueError as exc:
        raise ParseError(path, lineno, str(exc)) from None

    idx, vals, where = [], [], []
    for lineno, text in lines:
        parts = text.split()
        if len(parts) != order + 1:
            raise ParseError(path, lineno, f"expected {order} indices and a value")
        try:
            multi = [int(p) for p in parts[:order]]
            value = float(parts[order])
        except ValueError:
            raise ParseError(path, lineno, "malformed index or value") from None
        for i, dim in zip(multi, shape):
            if not 1 <= i <= dim:
                raise ParseError(path, lineno, f"index {tuple(multi)} out of range for {shape}")
        idx.append(multi)
        vals.append(value)
        where.append(lineno)

    indices = np.array(idx, dtype=np.int64).reshape(-1, order) - 1
    if len(idx) > 1:
        order_ = np.lexsort(indices.T[::-1])
        srt = indices[order_]
        dup = np.flatnonzero(np.all(srt[1:] == srt[:-1], axis=1))
        if dup.size:
            # report the later of the two clashing lines
            a, b = order_[dup[0]], order_[dup[0] + 1]
            line = max(where[a], where[b])
            raise ParseError(path, line, f"duplicate index {tuple(srt[dup[0]] + 1)}")
    return SparseTensorCoo(shape, indices, np.array(vals, dtype=float))


def coo_write(tensor: SparseTensorCoo, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("tensor %d %s\n" % (tensor.order, " ".join(str(d) for d in tensor.shape)))
        for row, v in zip(tensor.indices, tensor.values):
            # repr() of a Python float is the shortest round-trip decimal
            fh.write(" ".join(str(int(i) + 1) for i in row) + " " + repr(float(v)) + "\n")


def matrix_read(path) -> np.ndarray:
    lines = _content_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise ParseError(path, 1, "missing 'matrix' header") from None
    parts = header.split()
    if len(parts) != 3 or parts[0] != "matrix":
        raise ParseError(path, lineno, "expected 'matrix <n> <m>'")
    try:
        n, m = int(parts[1]), int(parts[2])
    except ValueError:
        raise ParseError(path, lineno, "non-integer in header") from None
    rows = []
    for lineno, text in lines:
        try:
            row = [float(p) for p in text.split()]
        except ValueError:
            raise ParseError(path, lineno, "malformed value") from None
        if len(row) != m:
            raise ParseError(path, lineno, f"expected {m} values, got {len(row)}")
        rows.append(row)
    if len(rows) != n:
        raise ParseError(path, lineno, f"expected {n} rows, got {len(rows)}")
    return np.array(rows, dtype=float).reshape(n, m)


def matrix_write(a: np.ndarray, path) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"matrix {a.shape[0]} {a.shape[1]}\n")
        for row in a:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def factors_save(path, shape, factors: list[FactorPair], coeffs=None) -> None:
    """Store per-mode factor pairs (and their term coefficients) as ``.npz``."""
    arrays = {"shape": np.asarray(shape, dtype=np.int64)}
    if coeffs is None:
        coeffs = [1.0] * len(factors)
    arrays["coeffs"] = np.asarray(coeffs, dtype=float)
    arrays["modes"] = np.asarray([f.mode for f in factors], dtype=np.int64)
    for n, f in enumerate(factors):
        arrays[f"left_{n}"] = f.left
        arrays[f"right_{n}"] = f.right
        arrays[f"singvals_{n}"] = f.weights
    np.savez(Path(path), **arrays)


def factors_load(path):
    """Inverse of :func:`factors_save`; returns ``(shape, factors, coeffs)``."""
    with np.load(Path(path)) as data:
        shape = tuple(int(d) for d in data["shape"])
        coeffs = [float(c) for c in data["coeffs"]]
        factors = [
            FactorPair(int(m), data[f"left_{n}"], data[f"right_{n}"], data[f"singvals_{n}"])
            for n, m in enumerate(data["modes"])
        ]
    return shape, factors, coeffs
