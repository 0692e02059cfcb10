"""NORT: proximal-average tensor completion with adaptive momentum.

Each iteration forms, for every regularised mode ``d``, the implicit
unfolding of ``Z = V - xi(V) / tau`` (sparse plus low-rank), takes a partial
SVD with Lanczos and applies the generalised singular value threshold

    Y^d = Prox_{D lam_d phi / tau}(Z_<d>),        X = (1/D) sum_d Y^d.

The recorded objective is the proximal-average value of the iterate

    F = sum_Omega loss(X) + sum_d lam_d sum_p kappa(s_p(Y^d), p)
        + tau/2 * ((1/D) sum_d ||Y^d||^2 - ||X||^2)   [+ mu tau/2 tr(X_<1>^T G X_<1>)]

which is exact at every iterate and at the extrapolated point (evaluated on
the decomposition ``Y-bar^d = (1+g) Y_t^d - g Y_{t-1}^d``).  A proximal step
from ``V`` lowers it by at least ``(tau - rho)/2 ||X_{t+1} - V||^2``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .losses import RobustSmoothed, Square, check_observations
from .penalties import PenaltySpec, gsvt
from .splr import SplrOperator, factored_norm, lanczos_svd, mode1_apply, pair_inner
from .tensor import FactoredTensor, FactorPair, SparseTensorCoo, check_shape, factored_values

__all__ = [
    "SolverConfig",
    "SolverState",
    "SolveResult",
    "Trace",
    "objective",
    "extrapolation_singvals",
    "random_init",
    "nort_step",
    "nort_solve",
    "smoothing_nort",
    "laplacian_lambda_max",
]


@dataclass(frozen=True)
class SolverConfig:
    """Problem and algorithm parameters.

    ``penalties[d-1]`` regularises the mode-``d`` unfolding, so ``D`` is
    ``len(penalties)``.  ``laplacian`` is ``(mu, G)`` with ``G`` an
    ``I^1 x I^1`` Laplacian; ``smoothing`` is ``(delta0, outer_iters)``.
    """

    penalties: tuple[PenaltySpec, ...]
    loss: object = field(default_factory=Square)
    tau_multiplier: float = 1.01
    gamma1: float = 0.1
    p: float = 0.5
    max_iter: int = 2000
    rel_tol: float = 1e-4
    laplacian: tuple | None = None
    smoothing: tuple | None = None
    seed: int = 0
    svd_tol: float = 1e-9
    rank_step: int = 5

    def __post_init__(self):
        object.__setattr__(self, "penalties", tuple(self.penalties))
        if not self.penalties:
            raise ValueError("at least one regularised mode is required")
        if not self.tau_multiplier > 1.0:
            raise ValueError("tau_multiplier must exceed 1")
        if not 0.0 < self.gamma1 <= 1.0 or not 0.0 < self.p <= 1.0:
            raise ValueError("gamma1 and p must lie in (0, 1]")
        if self.max_iter < 0 or self.rel_tol < 0:
            raise ValueError("max_iter and rel_tol must be nonnegative")
        if self.smoothing is not None:
            delta0, outer = self.smoothing
            if not 0.0 < delta0 < 1.0 or int(outer) < 1:
                raise ValueError("smoothing needs delta0 in (0,1) and outer_iters >= 1")

    @property
    def n_modes(self) -> int:
        return len(self.penalties)

    @property
    def rho(self) -> float:
        return float(self.loss.rho())

    @property
    def tau(self) -> float:
        k0 = sum(spec.kind.kappa0() for spec in self.penalties)
        return self.tau_multiplier * (self.rho + k0)

    @property
    def mu(self) -> float:
        return 0.0 if self.laplacian is None else float(self.laplacian[0])


def laplacian_lambda_max(g) -> float:
    if sp.issparse(g):
        g = g.toarray()
    return float(np.linalg.eigvalsh(np.asarray(g, dtype=float))[-1])


def _validate(shape, obs: SparseTensorCoo, config: SolverConfig):
    shape = check_shape(shape)
    if obs.shape != shape:
        raise ValueError(f"observations have shape {obs.shape}, expected {shape}")
    if obs.nnz == 0:
        raise ValueError("no observed entries")
    if config.n_modes > len(shape):
        raise ValueError("more penalties than tensor modes")
    for d in range(1, config.n_modes + 1):
        if shape[d - 1] == 1:
            raise ValueError(f"mode {d} has size 1 and cannot be regularised")
    check_observations(obs, config.loss)
    if config.laplacian is not None:
        mu, g = config.laplacian
        if g.shape != (shape[0], shape[0]):
            raise ValueError(f"Laplacian must be {shape[0]}x{shape[0]}")
        if mu < 0:
            raise ValueError("mu must be nonnegative")
        # the extra smooth term mu*tau/2 tr(X^T G X) must keep tau above its curvature
        if mu * laplacian_lambda_max(g) >= 1.0 - config.rho / config.tau:
            raise ValueError("mu * lambda_max(G) must be below 1 - rho/tau")
    return shape


# ---------------------------------------------------------------------------
# objective pieces


def objective(x: FactoredTensor, singvals: Sequence[np.ndarray], obs: SparseTensorCoo,
              config: SolverConfig) -> float:
    """Observed loss at ``x`` plus the spectral penalties of the given singular values."""
    vals = factored_values(x, obs.indices, _col_cache(obs, x))
    return _loss_sum(config.loss, vals, obs) + _penalty_sum(config, singvals)


def _loss_sum(loss, vals, obs) -> float:
    return float(np.sum(loss.value(vals, obs.values)))


def _penalty_sum(config, singvals) -> float:
    return sum(spec.total(s) for spec, s in zip(config.penalties, singvals))


def _col_cache(obs: SparseTensorCoo, x: FactoredTensor) -> dict:
    return {f.mode: obs.cols(f.mode) for _, f in x.terms}


def _laplace_pair(g, f: FactorPair, shape) -> FactorPair:
    """The pair representing ``G`` applied along mode 1 of ``fold(f)``."""
    if f.mode == 1:
        return FactorPair(1, mode1_apply(g, f.weighted_left(), 1, shape), f.right)
    return FactorPair(f.mode, f.weighted_left(), mode1_apply(g, f.right, f.mode, shape))


def _gram(shape, terms) -> float:
    return factored_norm(FactoredTensor(shape, terms)) ** 2


def _laplace_quad(shape, terms, g) -> float:
    gterms = [(c, _laplace_pair(g, f, shape)) for c, f in terms if c and f.rank]
    total = 0.0
    for c1, f1 in terms:
        if not c1 or not f1.rank:
            continue
        for c2, f2 in gterms:
            total += c1 * c2 * pair_inner(f1, f2, shape)
    return total


def _surrogate(shape, config, tau, x_terms, singvals, vals, obs) -> float:
    d = config.n_modes
    val = _loss_sum(config.loss, vals, obs) + _penalty_sum(config, singvals)
    if d > 1:
        ysq = sum(float(s @ s) for s in singvals) / d
        val += 0.5 * tau * max(ysq - _gram(shape, x_terms), 0.0)
    if config.laplacian is not None and config.mu > 0:
        val += 0.5 * config.mu * tau * _laplace_quad(shape, x_terms, config.laplacian[1])
    return val


def extrapolation_singvals(cur: FactorPair, prev: FactorPair, gamma: float, with_factors: bool = True):
    """SVD of ``(1 + gamma) cur - gamma prev`` from the concatenated factors.

    Only small matrices are decomposed: a QR of the stacked left factors and
    an eigendecomposition of the right factors' Gram matrix.

    Returns the combined :class:`FactorPair` (orthonormal columns, singular
    values attached) and its singular values; with ``with_factors=False``
    the pair is ``None`` and no long arrays are allocated.
    """
    if cur.mode != prev.mode:
        raise ValueError("extrapolation needs factors of the same mode")
    if gamma == 0.0 or prev.rank == 0 and cur.rank == 0:
        s = cur.weights.copy() if cur.singvals is not None else None
        if s is not None:
            return cur, s
    left = np.concatenate([(1.0 + gamma) * cur.weighted_left(), -gamma * prev.weighted_left()], axis=1)
    if left.shape[1] == 0:
        return FactorPair(cur.mode, left, np.zeros((cur.right.shape[0], 0)), np.zeros(0)), np.zeros(0)
    # the right factors are long, so work with their Gram matrix instead of a QR
    a, b = cur.right, prev.right
    gram = np.block([[a.T @ a, a.T @ b], [b.T @ a, b.T @ b]])
    evals, evecs = np.linalg.eigh(gram)
    good = evals > evals[-1] * 1e-24 if evals[-1] > 0 else np.zeros(evals.size, dtype=bool)
    root = np.sqrt(evals[good])
    ql, rl = np.linalg.qr(left)
    p, s, wt = np.linalg.svd(rl @ (evecs[:, good] * root), full_matrices=False)
    keep = s > s[0] * 1e-13 if s.size and s[0] > 0 else np.zeros(s.size, dtype=bool)
    if not with_factors:
        return None, s[keep]
    # orthonormal right basis: [a, b] W Lambda^{-1/2}
    coef = (evecs[:, good] / root) @ wt[keep].T
    k = a.shape[1]
    right = a @ coef[:k] + b @ coef[k:]
    pair = FactorPair(cur.mode, ql @ p[:, keep], right, s[keep])
    return pair, s[keep]


def random_init(shape, n_modes: int, rank: int, scale: float = 1.0, seed=0) -> list[FactorPair]:
    """Random orthonormal factors with singular values ``scale``; for critical-point studies."""
    shape = check_shape(shape)
    rng = np.random.default_rng(seed)
    out = []
    total = int(np.prod(shape, dtype=np.int64))
    for d in range(1, n_modes + 1):
        rows = shape[d - 1]
        k = min(rank, rows, total // rows)
        u = np.linalg.qr(rng.standard_normal((rows, k)))[0]
        v = np.linalg.qr(rng.standard_normal((total // rows, k)))[0]
        out.append(FactorPair(d, u, v, np.full(k, float(scale))))
    return out


# ---------------------------------------------------------------------------
# state and results


@dataclass
class Trace:
    iteration: list = field(default_factory=list)
    time_s: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    ranks: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    stage: list = field(default_factory=list)

    def append(self, **row):
        for key, value in row.items():
            getattr(self, key).append(value)

    def extend(self, other: "Trace", offset: int = 0):
        for name in self.__dataclass_fields__:
            vals = getattr(other, name)
            if name == "iteration":
                vals = [v + offset for v in vals]
            getattr(self, name).extend(vals)

    def __len__(self):
        return len(self.iteration)


@dataclass
class SolverState:
    """Mutable iteration state; ``current``/``previous`` hold ``Y_t^d`` and ``Y_{t-1}^d``."""

    shape: tuple
    current: list
    previous: list
    gamma_t: float
    t: int
    tau: float
    values_cur: np.ndarray
    values_prev: np.ndarray
    objective_cur: float
    trace: Trace
    svd_converged: bool = True
    started: float = field(default_factory=time.perf_counter)

    @property
    def objective_trace(self):
        return self.trace.objective

    @property
    def residual_trace(self):
        return self.trace.residual

    @property
    def rank_trace(self):
        return self.trace.ranks

    def iterate(self) -> FactoredTensor:
        d = len(self.current)
        return FactoredTensor(self.shape, [(1.0 / d, f) for f in self.current])


@dataclass
class SolveResult:
    shape: tuple
    factors: list
    trace: Trace
    converged: bool
    final_objective: float
    tau: float
    rho: float
    svd_converged: bool = True
    deltas: list = field(default_factory=list)

    @property
    def tensor(self) -> FactoredTensor:
        d = len(self.factors)
        return FactoredTensor(self.shape, [(1.0 / d, f) for f in self.factors])

    @property
    def coeffs(self) -> list[float]:
        return [1.0 / len(self.factors)] * len(self.factors)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(f.rank for f in self.factors)


def _initial_state(obs, shape, config, init) -> SolverState:
    d = config.n_modes
    if init is None:
        cur = [FactorPair.zero(m, shape) for m in range(1, d + 1)]
    else:
        cur = list(init)
        if len(cur) != d or any(f.mode != m for m, f in zip(range(1, d + 1), cur)):
            raise ValueError("initial factors must list modes 1..D in order")
        for f in cur:
            f.check(shape)
            if f.singvals is None:
                raise ValueError("initial factors need singular values")
    tau = config.tau
    x_terms = [(1.0 / d, f) for f in cur]
    vals = factored_values(FactoredTensor(shape, x_terms), obs.indices,
                           {f.mode: obs.cols(f.mode) for f in cur})
    obj = _surrogate(shape, config, tau, x_terms, [f.weights for f in cur], vals, obs)
    trace = Trace()
    trace.append(iteration=0, time_s=0.0, objective=obj, residual=math.nan,
                 ranks=tuple(f.rank for f in cur), gamma=config.gamma1, accepted=False, stage=1)
    return SolverState(shape, cur, list(cur), config.gamma1, 1, tau, vals, vals, obj, trace)


def _prox_mode(op: SplrOperator, spec: PenaltySpec, k_prev: int, stepscale: float, config,
               rng_seed) -> tuple[FactorPair, bool]:
    rows, cols = op.matrix_shape
    cap = min(rows, cols)
    k_req = min(cap, k_prev + config.rank_step)
    while True:
        svd = lanczos_svd(op, k_req, tol=config.svd_tol, seed=rng_seed)
        y = gsvt((svd.left, svd.singvals, svd.right), spec, stepscale, mode=op.target_mode)
        # prox maps are monotone, so a full-rank result means the tail may survive too
        if y.rank < svd.k or k_req >= cap:
            return y, svd.converged
        k_req = min(2 * k_req, cap)


def nort_step(state: SolverState, obs: SparseTensorCoo, config: SolverConfig) -> SolverState:
    """One NORT iteration (extrapolate, accept or reject, gradient, per-mode prox)."""
    shape, tau, d = state.shape, state.tau, config.n_modes
    gamma = state.gamma_t

    # extrapolated point and its objective
    bar_sv = [extrapolation_singvals(c, p, gamma, with_factors=False)[1] for c, p in zip(state.current, state.previous)]
    bar_terms = [((1.0 + gamma) / d, c) for c in state.current]
    bar_terms += [(-gamma / d, p) for p in state.previous]
    vals_bar = (1.0 + gamma) * state.values_cur
    vals_bar -= gamma * state.values_prev
    obj_bar = _surrogate(shape, config, tau, bar_terms, bar_sv, vals_bar, obs)
    del bar_sv

    accepted = obj_bar <= state.objective_cur
    if accepted:
        v_terms, vals_v = bar_terms, vals_bar
        gamma_next = min(gamma / config.p, 1.0)
    else:
        v_terms, vals_v = [(1.0 / d, c) for c in state.current], state.values_cur
        gamma_next = config.p * gamma

    xi = obs.with_values(config.loss.deriv(vals_v, obs.values))
    # only X_t's values are needed from here on
    del vals_bar, vals_v
    state.values_prev = None
    lap = config.laplacian if config.mu > 0 else None
    new = []
    for m, spec in enumerate(config.penalties, start=1):
        op = SplrOperator(shape, m, v_terms, (-1.0 / tau, xi), lap)
        seed = np.random.SeedSequence([config.seed, state.t, m])
        y, ok = _prox_mode(op, spec, state.current[m - 1].rank, d / tau, config, seed)
        state.svd_converged &= ok
        new.append(y)
    del xi

    x_terms = [(1.0 / d, f) for f in new]
    vals_new = factored_values(FactoredTensor(shape, x_terms), obs.indices,
                               {f.mode: obs.cols(f.mode) for f in new})
    obj_new = _surrogate(shape, config, tau, x_terms, [f.weights for f in new], vals_new, obs)
    diff_terms = x_terms + [(-c, f) for c, f in v_terms]
    residual = factored_norm(FactoredTensor(shape, diff_terms))

    state.previous, state.current = state.current, new
    state.values_prev, state.values_cur = state.values_cur, vals_new
    state.objective_cur = obj_new
    state.gamma_t = gamma_next
    state.trace.append(iteration=state.t, time_s=time.perf_counter() - state.started,
                       objective=obj_new, residual=residual,
                       ranks=tuple(f.rank for f in new), gamma=gamma_next,
                       accepted=bool(accepted), stage=1)
    state.t += 1
    return state


def nort_solve(obs: SparseTensorCoo, shape, config: SolverConfig, init=None,
               callback=None) -> SolveResult:
    """Run NORT until the relative objective change drops below ``rel_tol``.

    ``init`` optionally gives starting factors (one per regularised mode, in
    mode order); the default starts from zero.  ``callback(state)`` is
    invoked after every iteration.
    """
    shape = _validate(shape, obs, config)
    state = _initial_state(obs, shape, config, init)
    converged = False
    while state.t <= config.max_iter:
        before = state.objective_cur
        nort_step(state, obs, config)
        if callback is not None:
            callback(state)
        after = state.objective_cur
        if not math.isfinite(after):
            break
        if abs(before - after) <= config.rel_tol * max(abs(before), 1e-300):
            converged = True
            break
    return SolveResult(shape, state.current, state.trace, converged, state.objective_cur,
                       state.tau, config.rho, state.svd_converged)


def smoothing_nort(obs: SparseTensorCoo, shape, config: SolverConfig, init=None,
                   callback=None) -> SolveResult:
    """Smoothed robust completion: NORT with ``delta = delta0**s`` for ``s = 1..S``.

    Each stage is warm-started from the previous stage's factors and uses its
    own ``rho`` and ``tau``.
    """
    if not isinstance(config.loss, RobustSmoothed):
        raise ValueError("smoothing_nort needs a robust smoothed loss")
    if config.smoothing is None:
        raise ValueError("config.smoothing must be set")
    delta0, outer = config.smoothing
    trace = Trace()
    factors = init
    deltas = []
    result = None
    offset = 0
    for s in range(1, int(outer) + 1):
        delta = delta0 ** s
        deltas.append(delta)
        stage_cfg = replace(config, loss=config.loss.with_delta(delta))
        result = nort_solve(obs, shape, stage_cfg, init=factors, callback=callback)
        stage_trace = result.trace
        stage_trace.stage = [s] * len(stage_trace)
        trace.extend(stage_trace, offset)
        offset += len(stage_trace) - 1
        factors = result.factors
    result.trace = trace
    result.deltas = deltas
    return result
