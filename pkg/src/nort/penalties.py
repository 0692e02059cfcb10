"""Spectral penalties kappa, their scalar proximal maps, and GSVT.

Each penalty acts on one singular value ``alpha >= 0`` (and, for the
truncated nuclear norm, on its 1-based position in descending order).
The scalar prox

    y* = argmin_{y >= 0} 0.5 * (y - sigma)**2 + lam * kappa(y)

is solved in closed form by enumerating the stationary points and breakpoints
of each smooth piece; ties go to the larger ``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import FactorPair

__all__ = [
    "NuclearNorm",
    "CappedL1",
    "Lsp",
    "Tnn",
    "Scad",
    "Mcp",
    "PenaltyKind",
    "PenaltySpec",
    "kappa",
    "kappa0",
    "scalar_prox",
    "gsvt",
    "penalty_from_name",
]


class _Penalty:
    """Common interface; subclasses are frozen dataclasses."""

    name = "?"
    theta: float = 0.0

    def value(self, alpha: np.ndarray, position: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def kappa0(self) -> float:
        return 1.0

    def candidates(self, sigma: float, lam: float, position: int) -> list[float]:
        raise NotImplementedError

    def derivative(self, alpha: np.ndarray) -> np.ndarray:
        """d kappa / d alpha for alpha > 0 (position-free kinds only)."""
        raise NotImplementedError


@dataclass(frozen=True)
class NuclearNorm(_Penalty):
    name = "nuclear"

    def value(self, alpha, position):
        return np.asarray(alpha, dtype=float)

    def derivative(self, alpha):
        return np.ones_like(np.asarray(alpha, dtype=float))

    def candidates(self, sigma, lam, position):
        return [max(sigma - lam, 0.0)]


@dataclass(frozen=True)
class CappedL1(_Penalty):
    theta: float = 1.0
    name = "capped_l1"

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("capped-l1 needs theta > 0")

    def value(self, alpha, position):
        return np.minimum(alpha, self.theta)

    def candidates(self, sigma, lam, position):
        return [min(max(sigma - lam, 0.0), self.theta), max(sigma, self.theta)]


@dataclass(frozen=True)
class Lsp(_Penalty):
    theta: float = 1.0
    name = "lsp"

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("LSP needs theta > 0")

    def value(self, alpha, position):
        return np.log1p(np.asarray(alpha, dtype=float) / self.theta)

    def derivative(self, alpha):
        return 1.0 / (self.theta + np.asarray(alpha, dtype=float))

    def kappa0(self):
        return 1.0 / self.theta

    def candidates(self, sigma, lam, position):
        # stationary points solve y^2 + (theta - sigma) y + lam - sigma theta = 0;
        # only the larger root can be a local minimum
        out = [0.0]
        disc = (sigma + self.theta) ** 2 - 4.0 * lam
        if disc >= 0.0:
            y = 0.5 * ((sigma - self.theta) + math.sqrt(disc))
            if y > 0.0:
                out.append(y)
        return out


@dataclass(frozen=True)
class Tnn(_Penalty):
    theta: int = 1
    name = "tnn"

    def __post_init__(self):
        if int(self.theta) != self.theta or self.theta < 0:
            raise ValueError("TNN needs a nonnegative integer theta")
        object.__setattr__(self, "theta", int(self.theta))

    def value(self, alpha, position):
        alpha = np.asarray(alpha, dtype=float)
        return np.where(np.asarray(position) > self.theta, alpha, 0.0)

    def candidates(self, sigma, lam, position):
        if position <= self.theta:
            return [sigma]
        return [max(sigma - lam, 0.0)]


@dataclass(frozen=True)
class Scad(_Penalty):
    """SCAD with breakpoints at 1 and theta on the raw singular value."""

    theta: float = 3.7
    name = "scad"

    def __post_init__(self):
        if not self.theta > 2:
            raise ValueError("SCAD needs theta > 2")

    def value(self, alpha, position):
        a = np.asarray(alpha, dtype=float)
        t = self.theta
        mid = (2.0 * t * a - a * a - 1.0) / (2.0 * (t - 1.0))
        return np.where(a <= 1.0, a, np.where(a <= t, mid, (t + 1.0) / 2.0))

    def derivative(self, alpha):
        a = np.asarray(alpha, dtype=float)
        t = self.theta
        return np.where(a <= 1.0, 1.0, np.where(a <= t, (t - a) / (t - 1.0), 0.0))

    def candidates(self, sigma, lam, position):
        t = self.theta
        out = [0.0, min(max(sigma - lam, 0.0), 1.0), 1.0, t, max(sigma, t)]
        denom = (t - 1.0) - lam
        if denom != 0.0:
            y = (sigma * (t - 1.0) - lam * t) / denom
            out.append(min(max(y, 1.0), t))
        return out


@dataclass(frozen=True)
class Mcp(_Penalty):
    theta: float = 2.0
    name = "mcp"

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("MCP needs theta > 0")

    def value(self, alpha, position):
        a = np.asarray(alpha, dtype=float)
        t = self.theta
        return np.where(a <= t, a - a * a / (2.0 * t), t / 2.0)

    def derivative(self, alpha):
        a = np.asarray(alpha, dtype=float)
        return np.where(a <= self.theta, 1.0 - a / self.theta, 0.0)

    def candidates(self, sigma, lam, position):
        t = self.theta
        out = [0.0, t, max(sigma, t)]
        denom = 1.0 - lam / t
        if denom != 0.0:
            out.append(min(max((sigma - lam) / denom, 0.0), t))
        return out


PenaltyKind = NuclearNorm | CappedL1 | Lsp | Tnn | Scad | Mcp

_BY_NAME = {
    "nuclear": NuclearNorm,
    "capped_l1": CappedL1,
    "lsp": Lsp,
    "tnn": Tnn,
    "scad": Scad,
    "mcp": Mcp,
}


def penalty_from_name(name: str, theta: float | None = None) -> _Penalty:
    key = name.lower().replace("-", "_")
    if key not in _BY_NAME:
        raise ValueError(f"unknown penalty {name!r}; choose from {sorted(_BY_NAME)}")
    cls = _BY_NAME[key]
    if cls is NuclearNorm:
        return cls()
    if theta is None:
        return cls()
    return cls(int(theta)) if cls is Tnn else cls(float(theta))


@dataclass(frozen=True)
class PenaltySpec:
    """A penalty kind with its weight lambda for one regularised mode."""

    kind: _Penalty
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    def total(self, singvals: np.ndarray) -> float:
        """``lam * sum_p kappa(s_p, p)`` over descending singular values."""
        s = np.asarray(singvals, dtype=float)
        if s.size == 0:
            return 0.0
        return self.lam * float(np.sum(self.kind.value(s, np.arange(1, s.size + 1))))


def kappa(kind: _Penalty, alpha: float, position: int = 1) -> float:
    if alpha < 0:
        raise ValueError("kappa is defined for alpha >= 0")
    return float(kind.value(np.asarray(alpha, dtype=float), np.asarray(position)))


def kappa0(kind: _Penalty) -> float:
    return kind.kappa0()


def _objective(kind, y, sigma, lam, position):
    return 0.5 * (y - sigma) ** 2 + lam * float(kind.value(np.asarray(y), np.asarray(position)))


def scalar_prox(kind: _Penalty, sigma: float, lam: float, position: int = 1) -> float:
    if sigma < 0 or lam < 0:
        raise ValueError("sigma and lambda must be nonnegative")
    if lam == 0.0:
        return float(sigma)
    best_y, best_f = None, math.inf
    for y in kind.candidates(float(sigma), float(lam), int(position)):
        # kappa is nondecreasing, so no minimiser lies above sigma
        if y < 0.0 or y > sigma:
            continue
        f = _objective(kind, y, sigma, lam, position)
        if f < best_f or (f == best_f and y > best_y):
            best_y, best_f = y, f
    if best_y is None:
        best_y = 0.0
    return float(best_y)


def gsvt(svd, spec: PenaltySpec, stepscale: float = 1.0, mode: int = 1) -> FactorPair:
    """Generalized singular value thresholding of ``left @ diag(s) @ right.T``.

    ``svd`` is ``(left, singvals, right)`` with singular values in descending
    order; each singular value is replaced by its scalar prox with weight
    ``spec.lam * stepscale`` and only strictly positive results are kept.
    """
    left, s, right = svd
    s = np.asarray(s, dtype=float)
    lam = spec.lam * stepscale
    y = np.array([scalar_prox(spec.kind, float(v), lam, p + 1) for p, v in enumerate(s)])
    keep = y > 0.0
    r = int(keep.sum())
    if keep[:r].all():
        # survivors form a prefix; copy only when columns are dropped so the
        # discarded tail is not kept alive by a view
        if r < right.shape[1]:
            right = np.array(right[:, :r], order="F")
        return FactorPair(mode, left[:, :r], right[:, :r], y[:r])
    return FactorPair(mode, left[:, keep], right[:, keep], y[keep])
