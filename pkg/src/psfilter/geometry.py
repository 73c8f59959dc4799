"""Constraint sets in normalized form, tightening schedules and set utilities."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np


class ScheduleError(ValueError):
    """The tightening schedule empties a constraint set."""


@dataclass(frozen=True)
class Polytope:
    """``{z | A z <= 1}``; build general ``A z <= b`` sets with :meth:`from_inequalities`."""

    A: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if np.any(np.all(A == 0.0, axis=1)):
            raise ValueError("polytope rows must be nonzero")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @classmethod
    def from_inequalities(cls, A, b) -> "Polytope":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float).ravel()
        if np.any(b <= 0):
            raise ValueError("normalization needs b > 0 (the origin must be strictly inside)")
        return cls(A / b[:, None])

    @classmethod
    def box(cls, lower, upper) -> "Polytope":
        """Box with finite bounds; infinite bounds produce no row."""
        lower = np.asarray(lower, dtype=float).ravel()
        upper = np.asarray(upper, dtype=float).ravel()
        d = lower.size
        rows, rhs = [], []
        for j in range(d):
            if np.isfinite(upper[j]):
                r = np.zeros(d)
                r[j] = 1.0
                rows.append(r)
                rhs.append(upper[j])
            if np.isfinite(lower[j]):
                r = np.zeros(d)
                r[j] = -1.0
                rows.append(r)
                rhs.append(-lower[j])
        return cls.from_inequalities(np.array(rows), np.array(rhs))

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def norm_inf(self) -> float:
        return float(np.max(np.sum(np.abs(self.A), axis=1)))

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant of ``z -> A z`` per row under the 2-norm."""
        return float(np.max(np.linalg.norm(self.A, axis=1)))

    def evaluate(self, z) -> np.ndarray:
        return self.A @ np.asarray(z, dtype=float)

    def contains(self, z, eps: float = 0.0) -> bool:
        return bool(np.all(self.evaluate(z) <= 1.0 - eps))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounds of a box-shaped polytope (inf where unbounded)."""
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        for row in self.A:
            nz = np.flatnonzero(row)
            if nz.size != 1:
                raise ValueError("bounds() only applies to axis-aligned rows")
            j = nz[0]
            if row[j] > 0:
                hi[j] = min(hi[j], 1.0 / row[j])
            else:
                lo[j] = max(lo[j], 1.0 / row[j])
        return lo, hi


def zero_policy(k, x, u_l):
    return np.zeros_like(np.atleast_1d(np.asarray(u_l, dtype=float)))


@dataclass(frozen=True)
class TerminalSet:
    """Terminal safe set ``{x | a_S(x) <= 1}`` with affine ``a_S`` and its safe policy.

    The policy is called as ``policy(k, x, u_l)``.
    """

    polytope: Polytope
    policy: Callable = zero_policy
    lipschitz: float | None = None

    def __post_init__(self):
        if self.lipschitz is None:
            object.__setattr__(self, "lipschitz", self.polytope.lipschitz)

    @property
    def n_rows(self) -> int:
        return self.polytope.n_rows

    def evaluate(self, x) -> np.ndarray:
        return self.polytope.evaluate(x)

    def contains(self, x, eps: float = 0.0) -> bool:
        return self.polytope.contains(x, eps)


@dataclass(frozen=True)
class TighteningSchedule:
    """``eps_0 = 0``, ``eps_{i+1} = eps_i + sqrt(rho)^i * eps``."""

    rho: float
    eps: float
    horizon: int

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ScheduleError(f"rho must lie in (0, 1), got {self.rho}")
        if not self.eps > 0.0:
            raise ScheduleError(f"eps must be positive, got {self.eps}")
        if self.horizon < 1:
            raise ScheduleError("horizon must be at least 1")
        if self.epsilon_at(self.horizon) >= 1.0:
            raise ScheduleError(
                f"eps_N = {self.epsilon_at(self.horizon):.4f} >= 1 empties the tightened sets"
            )

    def epsilon_at(self, i: int) -> float:
        if not 0 <= i <= self.horizon:
            raise IndexError(f"index {i} outside [0, {self.horizon}]")
        s = np.sqrt(self.rho)
        return float(self.eps * (1.0 - s ** i) / (1.0 - s))

    def epsilons(self) -> np.ndarray:
        s = np.sqrt(self.rho)
        i = np.arange(self.horizon + 1)
        return self.eps * (1.0 - s ** i) / (1.0 - s)

    def recursion(self) -> np.ndarray:
        out = np.zeros(self.horizon + 1)
        s = np.sqrt(self.rho)
        for i in range(self.horizon):
            out[i + 1] = out[i] + s ** i * self.eps
        return out

    @property
    def limit(self) -> float:
        return self.eps / (1.0 - np.sqrt(self.rho))


@dataclass(frozen=True)
class ErrorBall:
    """1-norm ball ``{e | a_E(e) <= level}`` with ``a_E(e) = |e|_1 / radius``.

    ``level`` is 1 for the nominal ball; :func:`inflate` raises it.
    """

    radius: float
    dim: int
    level: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("error ball radius must be positive")

    n_rows = 1

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant of ``a_E`` under the 2-norm."""
        return float(np.sqrt(self.dim) / self.radius)

    @property
    def effective_radius(self) -> float:
        return self.radius * self.level

    def evaluate(self, e) -> np.ndarray:
        return np.array([np.sum(np.abs(e)) / self.radius])

    def contains(self, e, eps: float = 0.0) -> bool:
        return bool(self.evaluate(e)[0] <= self.level - eps)

    @property
    def max_norm2(self) -> float:
        return self.effective_radius


def tightened_contains(region, z, i: int, schedule: TighteningSchedule) -> tuple[bool, float]:
    """Membership in the set tightened by ``eps_i``; returns ``(inside, min slack)``."""
    e_i = schedule.epsilon_at(i)
    if e_i >= 1.0:
        raise ScheduleError(f"eps_{i} = {e_i} >= 1")
    level = getattr(region, "level", 1.0)
    vals = region.evaluate(np.asarray(z, dtype=float))
    margin = float(np.min((level - e_i) - vals))
    return margin >= 0.0, margin


def inflate(ball: ErrorBall, dz_norm: float, l_ae: float, l_sigma: float) -> ErrorBall:
    """Raise the right-hand side by ``l_ae * l_sigma * dz_norm``."""
    if dz_norm < 0:
        raise ValueError("dz_norm must be non-negative")
    return replace(ball, level=ball.level + l_ae * l_sigma * dz_norm)


@dataclass(frozen=True)
class ErrorBudget:
    e_hat: float
    components: tuple[float, float, float, float, float]

    @property
    def binding(self) -> int:
        """1-based index of the smallest component."""
        return int(np.argmin(self.components)) + 1


def error_budget(cert, schedule: TighteningSchedule, l_s: float, l_e: float,
                 ax_norm: float, au_norm: float) -> ErrorBudget:
    """Admissible model-error magnitude for recursive feasibility.

    ``cert`` provides ``c_l, c_u, delta, pi_max``; ``l_e`` is the Lipschitz
    constant that scales the confidence-constraint inflation.
    """
    vals = dict(c_l=cert.c_l, c_u=cert.c_u, delta=cert.delta, pi_max=cert.pi_max,
                l_s=l_s, l_e=l_e, ax_norm=ax_norm, au_norm=au_norm)
    bad = [k for k, v in vals.items() if not v > 0]
    if bad:
        raise ValueError(f"error_budget needs positive constants, got nonpositive {bad}")
    eps = schedule.eps
    ratio = np.sqrt(cert.c_l / cert.c_u)
    comps = (
        float(np.sqrt(cert.delta / cert.c_u)),
        float(ratio * eps / ax_norm),
        float(ratio * eps / l_s),
        float(ratio * eps / (au_norm * cert.pi_max)),
        float(ratio * eps / (l_e * (1.0 + cert.pi_max))),
    )
    return ErrorBudget(min(comps), comps)


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("box bounds must have equal shape")
        if np.any(lo > hi):
            raise ValueError("empty box (lower > upper)")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def centered(cls, half_widths) -> "Box":
        h = np.asarray(half_widths, dtype=float)
        return cls(-h, h)


def _directed(a: Box, b: Box) -> float:
    # sup over a of dist(a, b) separates per axis; the sup sits at a corner of a
    gap = np.maximum(np.maximum(b.lower - a.lower, a.upper - b.upper), 0.0)
    return float(np.linalg.norm(gap))


def hausdorff(a: Box, b: Box) -> float:
    """Symmetric Hausdorff distance between boxes under the 2-norm."""
    if a.lower.shape != b.lower.shape:
        raise ValueError("boxes must have the same dimension")
    return max(_directed(a, b), _directed(b, a))
