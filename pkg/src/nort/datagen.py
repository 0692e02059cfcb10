"""Synthetic problems, observation splits, outliers, graphs and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import FactoredTensor, SparseTensorCoo, check_shape, dense_unfold, factored_values

__all__ = [
    "SyntheticProblem",
    "Split",
    "default_nobs",
    "cp_values",
    "synth_lowrank",
    "synth_smooth_mode1",
    "split",
    "add_outliers",
    "rmse",
    "mrr_hits",
    "relation_scores",
    "spikiness",
    "rank_measure",
    "laplacian_from_affinity",
    "affinity_from_distance",
    "haversine",
]


def default_nobs(shape: Sequence[int], rank: int) -> int:
    """``(I_min / r) * sum_i I^i * log(I^pi)``, capped at the number of cells."""
    shape = check_shape(shape)
    total = math.prod(shape)
    n = (min(shape) / rank) * sum(shape) * math.log(total)
    return int(min(round(n), total))


def cp_values(weights, factors, indices0) -> np.ndarray:
    """Entries of ``sum_r w_r a_r^(1) o ... o a_r^(M)`` at 0-based indices."""
    indices0 = np.asarray(indices0, dtype=np.int64)
    prod = np.broadcast_to(np.asarray(weights, dtype=float), (indices0.shape[0], len(weights))).copy()
    for m, f in enumerate(factors):
        prod *= f[indices0[:, m]]
    return prod.sum(axis=1)


def _linear_to_multi(lin, shape):
    return np.stack(np.unravel_index(lin, shape, order="F"), axis=1).astype(np.int64)


def _sample_cells(total: int, n: int, rng, exclude=None) -> np.ndarray:
    """``n`` distinct sorted linear indices in ``[0, total)`` avoiding ``exclude``.

    Uses rejection sampling so no array of size ``total`` is ever built.
    """
    excl = np.zeros(0, dtype=np.int64) if exclude is None else np.unique(np.asarray(exclude, dtype=np.int64))
    if n > total - excl.size:
        raise ValueError(f"cannot draw {n} cells from {total - excl.size} available")
    if n > total // 4:
        # dense regime: a permutation is cheap relative to the output
        pool = np.setdiff1d(np.arange(total, dtype=np.int64), excl, assume_unique=True)
        return np.sort(rng.choice(pool, size=n, replace=False))
    got = np.zeros(0, dtype=np.int64)
    while got.size < n:
        draw = rng.integers(0, total, size=int((n - got.size) * 1.2) + 16)
        got = np.union1d(got, draw)
        if excl.size:
            got = np.setdiff1d(got, excl, assume_unique=True)
    # drop a random surplus, not the largest indices
    if got.size > n:
        got = np.sort(rng.choice(got, size=n, replace=False))
    return got


@dataclass
class SyntheticProblem:
    """A CP ground truth together with its sampled observations.

    ``observed`` holds the (possibly noisy) training entries and ``test``
    held-out entries outside the observed support.
    """

    shape: tuple
    weights: np.ndarray
    factors: list
    observed: SparseTensorCoo
    test: SparseTensorCoo
    noise_sigma: float
    seed: int
    extras: dict | None = None

    def values_at(self, indices0) -> np.ndarray:
        return cp_values(self.weights, self.factors, indices0)

    def to_dense(self) -> np.ndarray:
        lin = np.arange(math.prod(self.shape))
        return self.values_at(_linear_to_multi(lin, self.shape)).reshape(self.shape, order="F")


def synth_lowrank(shape, rank: int, noise_sigma: float = 0.0, n_obs="paper-default", seed=0,
                  n_test=None, noisy_heldout: bool = False, factors=None) -> SyntheticProblem:
    """CP tensor with standard normal weights and factors, sampled uniformly.

    Observations are drawn without replacement and corrupted by
    ``N(0, noise_sigma^2)``; ``n_test`` further cells (default: as many as
    observed, capped by what is left) form a disjoint held-out set that is
    clean unless ``noisy_heldout``.
    """
    shape = check_shape(shape)
    if rank < 1 or rank > min(shape):
        raise ValueError("rank must lie in 1..min(shape)")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    total = math.prod(shape)
    if n_obs in (None, "paper-default", "paper_default"):
        n_obs = default_nobs(shape, rank)
    n_obs = int(n_obs)
    if not 0 < n_obs <= total:
        raise ValueError(f"n_obs must lie in 1..{total}")
    rng = np.random.default_rng(seed)
    if factors is None:
        weights = rng.standard_normal(rank)
        factors = [rng.standard_normal((d, rank)) for d in shape]
    else:
        weights, factors = factors
    lin = _sample_cells(total, n_obs, rng)
    idx = _linear_to_multi(lin, shape)
    vals = cp_values(weights, factors, idx) + noise_sigma * rng.standard_normal(n_obs)
    observed = SparseTensorCoo(shape, idx, vals)

    if n_test is None:
        n_test = n_obs
    n_test = int(min(n_test, total - n_obs))
    tlin = _sample_cells(total, n_test, rng, exclude=lin) if n_test else np.zeros(0, dtype=np.int64)
    tidx = _linear_to_multi(tlin, shape)
    tvals = cp_values(weights, factors, tidx)
    if noisy_heldout:
        tvals = tvals + noise_sigma * rng.standard_normal(n_test)
    test = SparseTensorCoo(shape, tidx, tvals)
    return SyntheticProblem(shape, weights, factors, observed, test, noise_sigma, seed)


def synth_smooth_mode1(shape, rank: int, noise_sigma: float = 0.0, n_obs="paper-default",
                       missing_slices: float = 0.2, seed=0, length_scale: float = 0.15):
    """CP tensor whose mode-1 factors vary smoothly over points on a line.

    Mode-1 index ``i`` sits at position ``x_i`` in [0, 1]; its factor rows
    are a Gaussian-process draw with squared-exponential kernel, so
    neighbouring slices are similar.  A fraction ``missing_slices`` of mode-1
    slices receives no observations and the held-out set covers exactly those
    slices.  ``extras`` carries ``positions``, ``distances`` and ``missing``.
    """
    shape = check_shape(shape)
    rng = np.random.default_rng(seed)
    n1 = shape[0]
    x = np.sort(rng.uniform(0.0, 1.0, n1))
    dist = np.abs(x[:, None] - x[None, :])
    cov = np.exp(-0.5 * (dist / length_scale) ** 2) + 1e-8 * np.eye(n1)
    chol = np.linalg.cholesky(cov)
    weights = rng.standard_normal(rank)
    factors = [chol @ rng.standard_normal((n1, rank))]
    factors += [rng.standard_normal((d, rank)) for d in shape[1:]]

    n_missing = int(round(missing_slices * n1))
    missing = np.sort(rng.choice(n1, size=n_missing, replace=False))
    total = math.prod(shape)
    if n_obs in (None, "paper-default", "paper_default"):
        n_obs = default_nobs(shape, rank)
    observed_rows = n1 - n_missing
    n_obs = int(min(n_obs, total // n1 * observed_rows))

    # sample within the kept slices via the mode-1 unfolding layout
    keep = np.setdiff1d(np.arange(n1), missing)
    rest = total // n1
    cell = _sample_cells(observed_rows * rest, n_obs, rng)
    rows, cols = keep[cell % observed_rows], cell // observed_rows
    lin = rows + n1 * cols
    idx = _linear_to_multi(lin, shape)
    vals = cp_values(weights, factors, idx) + noise_sigma * rng.standard_normal(n_obs)
    observed = SparseTensorCoo(shape, idx, vals)

    n_test = min(n_obs, n_missing * rest)
    tcell = _sample_cells(n_missing * rest, n_test, rng) if n_test else np.zeros(0, dtype=np.int64)
    tlin = missing[tcell % max(n_missing, 1)] + n1 * (tcell // max(n_missing, 1))
    tidx = _linear_to_multi(tlin, shape)
    test = SparseTensorCoo(shape, tidx, cp_values(weights, factors, tidx))
    extras = {"positions": x, "distances": dist, "missing": missing}
    return SyntheticProblem(shape, weights, factors, observed, test, noise_sigma, seed, extras)


@dataclass
class Split:
    train: SparseTensorCoo
    validation: SparseTensorCoo
    test: SparseTensorCoo


def split(obs: SparseTensorCoo, fractions=(0.5, 0.5), seed=0) -> Split:
    """Random disjoint partition of the observed entries.

    ``fractions`` has two or three entries; counts are floored and the
    remainder goes to the last part.  With two fractions the test part is empty.
    """
    fr = list(fractions)
    if len(fr) not in (2, 3) or any(f < 0 for f in fr) or sum(fr) > 1 + 1e-12:
        raise ValueError("fractions must be 2 or 3 nonnegative numbers summing to <= 1")
    n = obs.nnz
    counts = [int(math.floor(f * n)) for f in fr]
    counts[-1] = n - sum(counts[:-1])
    perm = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for c in counts:
        sel = np.zeros(n, dtype=bool)
        sel[perm[start:start + c]] = True
        parts.append(obs.subset(sel))
        start += c
    if len(parts) == 2:
        parts.append(SparseTensorCoo.empty(obs.shape))
    return Split(*parts)


def add_outliers(obs: SparseTensorCoo, fraction: float, magnitude_scale: float = 5.0, seed=0,
                 return_mask: bool = False):
    """Add ``U[0,1] * magnitude_scale * max|O|`` to a Bernoulli(fraction) subset of entries."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    mask = rng.random(obs.nnz) < fraction
    peak = float(np.max(np.abs(obs.values))) if obs.nnz else 0.0
    vals = obs.values.copy()
    vals[mask] += rng.random(int(mask.sum())) * magnitude_scale * peak
    out = obs.with_values(vals)
    return (out, mask) if return_mask else out


def _values_on(x, heldout: SparseTensorCoo) -> np.ndarray:
    if isinstance(x, FactoredTensor):
        return factored_values(x, heldout.indices)
    if isinstance(x, SyntheticProblem):
        return x.values_at(heldout.indices)
    if isinstance(x, SparseTensorCoo):
        if not x.same_support(heldout):
            raise ValueError("prediction support differs from held-out support")
        return x.values
    x = np.asarray(x, dtype=float)
    if x.shape != heldout.shape:
        raise ValueError("dense prediction shape does not match")
    return x[tuple(heldout.indices.T)]


def rmse(x, heldout: SparseTensorCoo) -> float:
    """Root mean squared error of ``x`` on the held-out entries."""
    if heldout.nnz == 0:
        raise ValueError("empty held-out set")
    diff = _values_on(x, heldout) - heldout.values
    return float(np.sqrt(np.mean(diff * diff)))


def mrr_hits(scores, targets, ks=(1, 3)):
    """Mean reciprocal rank and Hits@k.

    ``scores[n, j]`` scores relation ``j + 1`` for test pair ``n``;
    ``targets`` are 1-based true relations.  Ranks count strictly higher
    scores plus equal scores at lower relation index.
    """
    scores = np.asarray(scores, dtype=float)
    targets = np.asarray(targets, dtype=np.int64) - 1
    n, r = scores.shape
    if np.any((targets < 0) | (targets >= r)):
        raise ValueError("target relation out of range")
    own = scores[np.arange(n), targets]
    higher = (scores > own[:, None]).sum(axis=1)
    lower_idx = np.arange(r)[None, :] < targets[:, None]
    ties = ((scores == own[:, None]) & lower_idx).sum(axis=1)
    ranks = 1 + higher + ties
    mrr = float(np.mean(1.0 / ranks))
    return (mrr,) + tuple(float(np.mean(ranks <= k)) for k in ks)


def relation_scores(x: FactoredTensor, pairs0, mode: int = 3) -> np.ndarray:
    """Scores of every index along ``mode`` for each 0-based partial index in ``pairs0``."""
    pairs0 = np.asarray(pairs0, dtype=np.int64)
    r = x.shape[mode - 1]
    n = pairs0.shape[0]
    out = np.empty((n, r))
    for j in range(r):
        idx = np.insert(pairs0, mode - 1, j, axis=1)
        out[:, j] = factored_values(x, idx)
    return out


def _dense(x) -> np.ndarray:
    if isinstance(x, (FactoredTensor, SyntheticProblem)):
        return x.to_dense()
    return np.asarray(x, dtype=float)


def spikiness(x) -> float:
    """``sqrt(I^pi) * max|x| / ||x||_F``."""
    t = _dense(x)
    fro = np.linalg.norm(t)
    if fro == 0:
        raise ValueError("spikiness of the zero tensor is undefined")
    return float(math.sqrt(t.size) * np.max(np.abs(t)) / fro)


def rank_measure(x, alphas) -> float:
    """``sum_i alpha_i ||X_<i>||_* / ||X||_F``."""
    t = _dense(x)
    fro = np.linalg.norm(t)
    if fro == 0:
        raise ValueError("rank measure of the zero tensor is undefined")
    total = 0.0
    for i, a in enumerate(alphas, start=1):
        if a:
            total += a * np.linalg.svd(dense_unfold(t, i), compute_uv=False).sum()
    return float(total / fro)


def laplacian_from_affinity(a) -> np.ndarray:
    """``G = diag(A 1) - A`` for a symmetric nonnegative affinity ``A``."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("affinity must be square")
    if not np.array_equal(a, a.T) or np.any(a < 0):
        raise ValueError("affinity must be symmetric and nonnegative")
    g = -a.copy()
    np.fill_diagonal(g, 0.0)
    # off-diagonal row sums give the degrees, so G @ 1 cancels exactly up to rounding
    np.fill_diagonal(g, -g.sum(axis=1))
    return g


def affinity_from_distance(b, scale: float = 2.0) -> np.ndarray:
    """``exp(-scale * b_ij)`` off the diagonal, zero on it."""
    b = np.asarray(b, dtype=float)
    a = np.exp(-scale * b)
    np.fill_diagonal(a, 0.0)
    return 0.5 * (a + a.T)


def haversine(latlon_deg) -> np.ndarray:
    """Pairwise great-circle distances between ``(lat, lon)`` rows, as central angles.

    Multiply by a planetary radius to get a length.
    """
    ll = np.radians(np.asarray(latlon_deg, dtype=float))
    lat, lon = ll[:, 0][:, None], ll[:, 1][:, None]
    dlat = lat - lat.T
    dlon = lon - lon.T
    h = np.sin(dlat / 2) ** 2 + np.cos(lat) * np.cos(lat.T) * np.sin(dlon / 2) ** 2
    return 2.0 * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
