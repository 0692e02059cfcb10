"""Implicit "sparse plus low-rank" unfoldings and a Lanczos partial SVD.

A :class:`SplrOperator` stands for the mode-i unfolding of

    Z = P( sum_t c_t * fold_{j_t}(U_t V_t^T) ) + c_s * S

where ``S`` is a sparse COO tensor and ``P`` optionally applies
``(I - mu G)`` along mode 1. Only products ``a^T Z_<i>`` and ``Z_<i> b``
are ever formed, so no buffer of size ``prod(shape)`` is allocated.

Products with a factor folded along a different mode ``j != i`` reshape the
right factor's columns to the remaining modes and contract, which is the
reshape-multiply-Kronecker scheme

    a^T [fold_j(U V^T)]_<i> = sum_p u_p^T (x) (a^T mat(v_p))
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import FactoredTensor, FactorPair, SparseTensorCoo, check_mode, check_shape

__all__ = [
    "kron_unfold_left",
    "kron_unfold_right",
    "sparse_unfold_left",
    "sparse_unfold_right",
    "SplrOperator",
    "PartialSvd",
    "lanczos_svd",
    "power_svd",
    "pair_inner",
    "factored_inner",
    "factored_norm",
    "mode1_apply",
]

def _unfold_dims(shape, mode):
    return tuple(d for l, d in enumerate(shape) if l != mode - 1)


def _columns(v, length):
    v = np.asarray(v, dtype=float)
    if v.shape[0] != length:
        raise ValueError(f"vector of length {v.shape[0]} does not match unfolding size {length}")
    return v


def _split_dims(shape, i, j):
    """Products of the modes other than ``i`` and ``j``, grouped around them.

    Returns ``(P, Q, lo, hi)``: ``P``/``Q`` are the modes before/after ``i``
    (excluding ``j``) and ``lo``/``hi`` split the group that contains ``j``
    into the modes below and above it.
    """
    others = [l for l in range(1, len(shape) + 1) if l not in (i, j)]
    p = math.prod(shape[l - 1] for l in others if l < i)
    q = math.prod(shape[l - 1] for l in others if l > i)
    if j < i:
        lo = math.prod(shape[l - 1] for l in others if l < j)
        return p, q, lo, p // lo
    lo = math.prod(shape[l - 1] for l in others if i < l < j)
    return p, q, lo, q // lo


def _right_view(right, p, di):
    # (P, I^i, Q*k) view of the mode-j right factor, no copy when F-ordered
    return right.reshape((p, di, -1), order="F")


def _kron_left(shape, i, j, right, wleft, a):
    """Unchecked core of :func:`kron_unfold_left` (``a`` is 1-D or 2-D)."""
    k = right.shape[1]
    di, dj = shape[i - 1], shape[j - 1]
    p, q, lo, hi = _split_dims(shape, i, j)
    tail = a.shape[1:]
    w = _right_view(right, p, di)
    # contract mode i: u[q', p] with q' = q + Q r
    if p == 1:
        u = (a.T @ w[0]).T
    else:
        u = np.matmul(w.transpose(2, 0, 1), a)
    v = wleft @ u.reshape((k, -1))
    if j < i:
        v = v.reshape((dj, q, hi, lo) + tail).transpose((1, 2, 0, 3) + tuple(range(4, 4 + len(tail))))
    else:
        v = v.reshape((dj, hi, lo, p) + tail).transpose((1, 0, 2, 3) + tuple(range(4, 4 + len(tail))))
    return v.reshape((-1,) + tail)


def _kron_right(shape, i, j, right, wleft, b):
    """Unchecked core of :func:`kron_unfold_right`."""
    k = right.shape[1]
    di, dj = shape[i - 1], shape[j - 1]
    p, q, lo, hi = _split_dims(shape, i, j)
    tail = b.shape[1:]
    if j < i:
        c = np.tensordot(wleft, b.reshape((q, hi, dj, lo) + tail), axes=([0], [2]))
    else:
        c = np.tensordot(wleft, b.reshape((hi, dj, lo, p) + tail), axes=([0], [1]))
    c = c.reshape((k * q, p) + tail)
    w = _right_view(right, p, di)
    if p == 1:
        return w[0] @ c[:, 0]
    if tail:
        return np.matmul(w.transpose(2, 1, 0), c).sum(axis=0)
    return np.matmul(w.transpose(2, 1, 0), c[:, :, None]).sum(axis=0)[:, 0]


def kron_unfold_left(factor: FactorPair, i: int, a: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """``a^T [fold_j(factor)]_<i>`` for ``j = factor.mode != i``.

    ``a`` may be a vector of length ``I^i`` or an ``(I^i, q)`` block.
    """
    shape = check_shape(shape)
    check_mode(i, shape)
    j = factor.mode
    if i == j:
        raise ValueError("kron_unfold_left needs i != j; use the direct product instead")
    a = _columns(a, shape[i - 1])
    ncols = int(np.prod(shape, dtype=np.int64)) // shape[i - 1]
    if factor.rank == 0:
        return np.zeros((ncols,) + a.shape[1:])
    return _kron_left(shape, i, j, factor.right, factor.weighted_left(), a)


def kron_unfold_right(factor: FactorPair, i: int, b: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """``[fold_j(factor)]_<i> b`` for ``j = factor.mode != i``."""
    shape = check_shape(shape)
    check_mode(i, shape)
    j = factor.mode
    if i == j:
        raise ValueError("kron_unfold_right needs i != j; use the direct product instead")
    ncols = int(np.prod(shape, dtype=np.int64)) // shape[i - 1]
    b = _columns(b, ncols)
    if factor.rank == 0:
        return np.zeros((shape[i - 1],) + b.shape[1:])
    return _kron_right(shape, i, j, factor.right, factor.weighted_left(), b)


def _direct_left(factor: FactorPair, a):
    return factor.right @ (factor.weighted_left().T @ a)


def _direct_right(factor: FactorPair, b):
    return factor.weighted_left() @ (factor.right.T @ b)


_SPARSE_CHUNK = 1 << 16


def _scatter(target, source, weights, vec, length):
    """``bincount(target, weights * vec[source])`` in bounded-size chunks."""
    n = target.shape[0]
    if n <= _SPARSE_CHUNK:
        return np.bincount(target, weights=weights * vec[source], minlength=length)
    out = np.zeros(length)
    for start in range(0, n, _SPARSE_CHUNK):
        sl = slice(start, start + _SPARSE_CHUNK)
        out += np.bincount(target[sl], weights=weights[sl] * vec[source[sl]], minlength=length)
    return out


def _scatter_block(target, source, weights, block, length):
    out = np.empty((length, block.shape[1]))
    for c in range(block.shape[1]):
        out[:, c] = _scatter(target, source, weights, block[:, c], length)
    return out


def sparse_unfold_left(s: SparseTensorCoo, i: int, a: np.ndarray) -> np.ndarray:
    """``a^T [s]_<i>`` by scattering each entry to its unfolding column."""
    ncols = int(np.prod(s.shape, dtype=np.int64)) // s.shape[i - 1]
    a = _columns(a, s.shape[i - 1])
    rows, cols = s.rows(i), s.cols(i)
    if a.ndim == 1:
        return _scatter(cols, rows, s.values, a, ncols)
    return _scatter_block(cols, rows, s.values, a, ncols)


def sparse_unfold_right(s: SparseTensorCoo, i: int, b: np.ndarray) -> np.ndarray:
    """``[s]_<i> b``."""
    ncols = int(np.prod(s.shape, dtype=np.int64)) // s.shape[i - 1]
    b = _columns(b, ncols)
    rows, cols = s.rows(i), s.cols(i)
    if b.ndim == 1:
        return _scatter(rows, cols, s.values, b, s.shape[i - 1])
    return _scatter_block(rows, cols, s.values, b, s.shape[i - 1])


def mode1_apply(mat, v: np.ndarray, i: int, shape: Sequence[int], transpose: bool = False):
    """Apply an ``I^1 x I^1`` matrix along mode 1 of a mode-i unfolding vector.

    For ``i == 1`` the vector indexes rows, otherwise it indexes columns and
    mode 1 is the fastest-varying column coordinate.
    """
    m = mat.T if transpose else mat
    if i == 1:
        return m @ v
    n1 = shape[0]
    tail = v.shape[1:]
    blk = v.reshape((n1, -1) + tail, order="F")
    if sp.issparse(m):
        flat = blk.reshape(n1, -1, order="F")
        res = np.asarray(m @ flat).reshape(blk.shape, order="F")
    else:
        res = np.tensordot(m, blk, axes=([1], [0]))
    return res.reshape(v.shape, order="F")


@dataclass(frozen=True, eq=False)
class SplrOperator:
    """Mode-``target_mode`` unfolding of a sparse-plus-low-rank tensor.

    ``laplacian = (mu, G)`` premultiplies the low-rank part by ``(I - mu G)``
    along mode 1; the sparse part is left untouched.
    """

    shape: tuple[int, ...]
    target_mode: int
    lowrank_terms: tuple[tuple[float, FactorPair], ...] = ()
    sparse_term: tuple[float, SparseTensorCoo] | None = None
    laplacian: tuple[float, object] | None = None

    def __post_init__(self):
        shape = check_shape(self.shape)
        object.__setattr__(self, "shape", shape)
        check_mode(self.target_mode, shape)
        terms = tuple((float(c), f) for c, f in self.lowrank_terms)
        for _, f in terms:
            f.check(shape)
        object.__setattr__(self, "lowrank_terms", terms)
        if self.sparse_term is not None and self.sparse_term[1].shape != shape:
            raise ValueError("sparse term shape does not match the operator")
        if self.laplacian is not None:
            mu, g = self.laplacian
            if g.shape != (shape[0], shape[0]):
                raise ValueError(f"Laplacian must be {shape[0]}x{shape[0]}")
            if mu == 0.0:
                object.__setattr__(self, "laplacian", None)

    @classmethod
    def from_factored(cls, x: FactoredTensor, target_mode: int, sparse=None, laplacian=None):
        return cls(x.shape, target_mode, x.terms, sparse, laplacian)

    @property
    def matrix_shape(self) -> tuple[int, int]:
        rows = self.shape[self.target_mode - 1]
        return rows, int(np.prod(self.shape, dtype=np.int64)) // rows

    def _premultiplier(self):
        mu, g = self.laplacian
        return mu, g

    def _prepared(self):
        """Nonzero terms as ``(coeff, mode, right, weighted left)``, built once."""
        cached = self.__dict__.get("_prep")
        if cached is None:
            cached = [(c, f.mode, f.right, f.weighted_left())
                      for c, f in self.lowrank_terms if c != 0.0 and f.rank]
            object.__setattr__(self, "_prep", cached)
        return cached

    def _lowrank_left(self, a):
        i, shape = self.target_mode, self.shape
        out = None
        for c, j, right, wleft in self._prepared():
            part = right @ (wleft.T @ a) if j == i else _kron_left(shape, i, j, right, wleft, a)
            out = c * part if out is None else out + c * part
        return out

    def _lowrank_right(self, b):
        i, shape = self.target_mode, self.shape
        out = None
        for c, j, right, wleft in self._prepared():
            part = wleft @ (right.T @ b) if j == i else _kron_right(shape, i, j, right, wleft, b)
            out = c * part if out is None else out + c * part
        return out

    def left(self, a: np.ndarray) -> np.ndarray:
        """``a^T Z_<i>`` returned as a (column) vector of length ``I^pi / I^i``."""
        rows, cols = self.matrix_shape
        a = _columns(a, rows)
        i = self.target_mode
        if self.laplacian is not None and i == 1:
            mu, g = self.laplacian
            a_hat = a - mu * mode1_apply(g, a, 1, self.shape, transpose=True)
            out = self._lowrank_left(a_hat)
        else:
            out = self._lowrank_left(a)
            if out is not None and self.laplacian is not None:
                mu, g = self.laplacian
                out = out - mu * mode1_apply(g, out, i, self.shape)
        if out is None:
            out = np.zeros((cols,) + a.shape[1:])
        if self.sparse_term is not None and self.sparse_term[0] != 0.0:
            c, s = self.sparse_term
            out = out + c * sparse_unfold_left(s, i, a)
        return out

    def right(self, b: np.ndarray) -> np.ndarray:
        """``Z_<i> b``."""
        rows, cols = self.matrix_shape
        b = _columns(b, cols)
        i = self.target_mode
        if self.laplacian is not None and i != 1:
            mu, g = self.laplacian
            b_hat = b - mu * mode1_apply(g, b, i, self.shape, transpose=True)
            out = self._lowrank_right(b_hat)
        else:
            out = self._lowrank_right(b)
            if out is not None and self.laplacian is not None:
                mu, g = self.laplacian
                out = out - mu * mode1_apply(g, out, 1, self.shape)
        if out is None:
            out = np.zeros((rows,) + b.shape[1:])
        if self.sparse_term is not None and self.sparse_term[0] != 0.0:
            c, s = self.sparse_term
            out = out + c * sparse_unfold_right(s, i, b)
        return out

    def to_dense(self) -> np.ndarray:
        """Materialised unfolding; test oracle only."""
        from .tensor import dense_fold, dense_unfold

        t = np.zeros(self.shape)
        for c, f in self.lowrank_terms:
            t += c * f.to_dense(self.shape)
        if self.laplacian is not None:
            mu, g = self.laplacian
            g = g.toarray() if sp.issparse(g) else np.asarray(g)
            p = np.eye(self.shape[0]) - mu * g
            t = dense_fold(p @ dense_unfold(t, 1), 1, self.shape)
        if self.sparse_term is not None:
            c, s = self.sparse_term
            t += c * s.to_dense()
        return dense_unfold(t, self.target_mode)


@dataclass(frozen=True, eq=False)
class PartialSvd:
    left: np.ndarray
    singvals: np.ndarray
    right: np.ndarray
    converged: bool = True
    steps: int = 0

    @property
    def k(self) -> int:
        return self.singvals.shape[0]


def _orthogonalize(x, basis, count):
    """Two rounds of classical Gram-Schmidt against ``basis[:, :count]``."""
    if count:
        q = basis[:, :count]
        for _ in range(2):
            x = x - q @ (q.T @ x)
    return x


def _fresh_direction(rng, basis, count, length):
    for _ in range(8):
        x = _orthogonalize(rng.standard_normal(length), basis, count)
        nx = np.linalg.norm(x)
        if nx > 1e-8:
            return x / nx
    return None


def lanczos_svd(op, k_request: int, tol: float = 1e-10, max_inner: int | None = None,
                seed=0, basis_size: int | None = None) -> PartialSvd:
    """Top singular triplets of ``op`` by Golub-Kahan-Lanczos bidiagonalisation.

    Uses full reorthogonalisation and thick restarts: the Krylov basis holds
    at most ``basis_size`` vectors (default ``max(k + 10, 2k)``) and is
    compressed onto the leading Ritz vectors whenever it fills, so memory is
    ``O((m + n) * basis_size)`` whatever the spectrum.  Iteration stops once
    every requested triplet has residual ``||op^T u - s v|| <= tol * s_1`` or
    after ``max_inner`` matrix-vector pairs.  ``op`` needs ``left``,
    ``right`` and ``matrix_shape``.
    """
    m, n = op.matrix_shape
    kmax = min(m, n)
    if not 1 <= k_request <= kmax:
        raise ValueError(f"k_request must lie in 1..{kmax}")
    if basis_size is None:
        basis_size = max(k_request + 10, 2 * k_request)
    depth = min(kmax, max(basis_size, k_request + 1))
    if max_inner is None:
        max_inner = max(kmax, 50 * depth)
    max_inner = max(max_inner, depth)
    rng = np.random.default_rng(seed)

    us = np.empty((m, depth))
    vs = np.empty((n, depth + 1))
    # small projected matrix: bidiagonal, or an arrowhead after a restart
    b = np.zeros((depth, depth + 1))
    vs[:, 0] = _fresh_direction(rng, vs, 0, n)
    steps = 0
    total = 0
    restarted = False
    converged = False
    scale = 0.0
    while True:
        while steps < depth:
            u = op.right(vs[:, steps])
            if steps and not restarted:
                u = u - b[steps - 1, steps] * us[:, steps - 1]
            if restarted:
                # Z v_next has components rho_i along the kept Ritz vectors
                b[:steps, steps] = us[:, :steps].T @ u
            restarted = False
            u = _orthogonalize(u, us, steps)
            alpha = np.linalg.norm(u)
            scale = max(scale, alpha)
            if alpha <= 1e-13 * max(scale, 1.0):
                alpha = 0.0
                u = _fresh_direction(rng, us, steps, m)
                if u is None:
                    u = np.zeros(m)
            else:
                u = u / alpha
            us[:, steps] = u
            b[steps, steps] = alpha

            w = op.left(u) - alpha * vs[:, steps]
            w = _orthogonalize(w, vs, steps + 1)
            beta = np.linalg.norm(w)
            scale = max(scale, beta)
            if beta <= 1e-13 * max(scale, 1.0) or steps + 1 >= n:
                beta = 0.0
                w = _fresh_direction(rng, vs, steps + 1, n) if steps + 1 < n else None
                if w is None:
                    w = np.zeros(n)
            else:
                w = w / beta
            vs[:, steps + 1] = w
            b[steps, steps + 1] = beta
            steps += 1
            total += 1

        beta = b[steps - 1, steps]
        if steps >= m:
            # the left basis spans R^m, so U^T Z [V, v_next] is exact
            p, s, qt = np.linalg.svd(b[:steps, : steps + 1], full_matrices=False)
            converged = True
            break
        p, s, qt = np.linalg.svd(b[:steps, :steps])
        kk = min(k_request, steps)
        resid = np.abs(beta * p[steps - 1, :kk])
        bound = tol * s[0] if s[0] > 0 else 0.0
        if np.all(resid <= bound) or s[0] == 0.0:
            converged = True
            break
        if total >= max_inner or steps < depth:
            break
        # thick restart onto the leading Ritz vectors plus the next v
        keep = min(steps - 1, k_request + (depth - k_request) // 2)
        keep = max(keep, kk)
        us[:, :keep] = us[:, :steps] @ p[:, :keep]
        vs[:, :keep] = vs[:, :steps] @ qt[:keep].T
        vs[:, keep] = vs[:, steps]
        b[:] = 0.0
        b[np.arange(keep), np.arange(keep)] = s[:keep]
        steps = keep
        restarted = True

    kk = min(k_request, steps)
    ncols = qt.shape[1]
    left = us[:, :steps] @ p[:, :kk]
    # built transposed so the result is Fortran-ordered, as FactorPair stores it
    right = (qt[:kk] @ vs[:, :ncols].T).T
    return PartialSvd(left, s[:kk].copy(), right, converged, total)


def power_svd(op, k: int, iters: int = 200, seed=0) -> PartialSvd:
    """Block power (subspace) iteration; a slow but simple cross-check."""
    m, n = op.matrix_shape
    rng = np.random.default_rng(seed)
    v = np.linalg.qr(rng.standard_normal((n, k)))[0]
    for _ in range(iters):
        u = np.linalg.qr(op.right(v))[0]
        v = np.linalg.qr(op.left(u))[0]
    zv = op.right(v)
    pu, s, qt = np.linalg.svd(zv, full_matrices=False)
    return PartialSvd(pu, s, v @ qt.T, True, iters)


def pair_inner(a: FactorPair, b: FactorPair, shape) -> float:
    """``<fold(a), fold(b)>`` without materialising either tensor."""
    if a.rank == 0 or b.rank == 0:
        return 0.0
    if a.mode == b.mode:
        g = (a.weighted_left().T @ b.weighted_left()) * (a.right.T @ b.right)
        return float(g.sum())
    # [fold_b]_<a.mode> applied to a's right factor, then paired with a's left
    if a.rank <= b.rank:
        zb = kron_unfold_right(b, a.mode, a.right, shape)
        return float(np.sum(a.weighted_left() * zb))
    za = kron_unfold_right(a, b.mode, b.right, shape)
    return float(np.sum(b.weighted_left() * za))


def factored_inner(x: FactoredTensor, y: FactoredTensor) -> float:
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    total = 0.0
    for cx, fx in x.terms:
        for cy, fy in y.terms:
            if cx and cy:
                total += cx * cy * pair_inner(fx, fy, x.shape)
    return total


def factored_norm(x: FactoredTensor) -> float:
    """Frobenius norm, clipped at zero against cancellation."""
    terms = x.terms
    total = 0.0
    for n, (c1, f1) in enumerate(terms):
        if not c1:
            continue
        total += c1 * c1 * f1.norm_sq()
        for c2, f2 in terms[n + 1:]:
            if c2:
                total += 2.0 * c1 * c2 * pair_inner(f1, f2, x.shape)
    return float(np.sqrt(max(total, 0.0)))
