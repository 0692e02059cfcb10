"""Element-wise losses, their derivatives, and the sparse gradient tensor."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .penalties import Lsp, Mcp, Scad
from .tensor import FactoredTensor, SparseTensorCoo, factored_values

__all__ = [
    "Square",
    "Logistic",
    "RobustSmoothed",
    "loss_value",
    "loss_deriv",
    "lipschitz_rho",
    "sparse_gradient",
    "check_observations",
    "huber",
]


@dataclass(frozen=True)
class Square:
    name = "square"

    def value(self, x, o):
        return 0.5 * (np.asarray(x) - o) ** 2

    def deriv(self, x, o):
        return np.asarray(x, dtype=float) - o

    def rho(self) -> float:
        return 1.0


@dataclass(frozen=True)
class Logistic:
    """``log(1 + exp(-x o))`` for labels ``o`` in {-1, +1}."""

    name = "logistic"

    @staticmethod
    def _check(o):
        o = np.asarray(o, dtype=float)
        if not np.all((o == 1.0) | (o == -1.0)):
            raise ValueError("logistic loss needs labels in {-1, +1}")
        return o

    def value(self, x, o):
        o = self._check(o)
        return np.logaddexp(0.0, -np.asarray(x, dtype=float) * o)

    def deriv(self, x, o):
        o = self._check(o)
        # -o * exp(-xo) / (1 + exp(-xo)) == -o * sigmoid(-xo)
        z = -np.asarray(x, dtype=float) * o
        return -o * np.exp(z - np.logaddexp(0.0, z))

    def rho(self) -> float:
        return 0.25


def huber(a, delta):
    a = np.abs(np.asarray(a, dtype=float))
    return np.where(a >= delta, a, a * a / (2.0 * delta) + 0.5 * delta)


_ROBUST_BASES = (Lsp, Scad, Mcp)


def _smooth_part_constant(base, lo=-10.0, hi=10.0, n=200001) -> float:
    """Max |second difference| of kappa(|a|) - kappa0 |a| on a fine grid."""
    a = np.linspace(lo, hi, n)
    h = a[1] - a[0]
    k0 = base.kappa0()
    g = base.value(np.abs(a), 1) - k0 * np.abs(a)
    second = np.abs(g[2:] - 2.0 * g[1:-1] + g[:-2]) / (h * h)
    # SCAD/MCP kinks make the discrete estimate exceed the true bound; keep it
    return float(second.max()) * 1.05


@dataclass(frozen=True)
class RobustSmoothed:
    """Smoothed robust loss on the residual ``a = x - o``.

    ``kappa0 * huber(|a|; delta) + (kappa(|a|) - kappa0 |a|)`` for a smooth
    concave base penalty ``kappa`` (LSP, SCAD or MCP).
    """

    base: object
    delta: float
    smooth_constant: float = field(default=-1.0, compare=False)
    name = "robust"

    def __post_init__(self):
        if not isinstance(self.base, _ROBUST_BASES):
            raise ValueError("robust loss base must be LSP, SCAD or MCP")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.smooth_constant < 0:
            object.__setattr__(self, "smooth_constant", _smooth_part_constant(self.base))

    def with_delta(self, delta: float) -> "RobustSmoothed":
        return RobustSmoothed(self.base, delta, self.smooth_constant)

    def value(self, x, o):
        a = np.abs(np.asarray(x, dtype=float) - o)
        k0 = self.base.kappa0()
        return k0 * huber(a, self.delta) + (self.base.value(a, 1) - k0 * a)

    def deriv(self, x, o):
        a = np.asarray(x, dtype=float) - o
        k0 = self.base.kappa0()
        absa = np.abs(a)
        sign = np.sign(a)
        hub = np.where(absa < self.delta, a / self.delta, sign)
        return k0 * hub + sign * (self.base.derivative(absa) - k0)

    def rho(self) -> float:
        return self.base.kappa0() / self.delta + self.smooth_constant


LossKind = Square | Logistic | RobustSmoothed


def loss_value(kind, x, o):
    return kind.value(x, o)


def loss_deriv(kind, x, o):
    return kind.deriv(x, o)


def lipschitz_rho(kind) -> float:
    return kind.rho()


def check_observations(obs: SparseTensorCoo, kind) -> SparseTensorCoo:
    """Validate observed values for ``kind`` (labels for the logistic loss)."""
    if isinstance(kind, Logistic):
        Logistic._check(obs.values)
    return obs


def sparse_gradient(v: FactoredTensor, obs: SparseTensorCoo, kind) -> SparseTensorCoo:
    """Loss derivative at every observed entry, on exactly the observed support."""
    if v.shape != obs.shape:
        raise ValueError("shape mismatch between iterate and observations")
    x = factored_values(v, obs.indices, _col_cache(obs, v))
    return obs.with_values(kind.deriv(x, obs.values))


def _col_cache(obs: SparseTensorCoo, x: FactoredTensor) -> dict:
    return {f.mode: obs.cols(f.mode) for _, f in x.terms}
