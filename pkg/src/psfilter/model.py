"""Bayesian linear-regression dynamics belief.

The next state is modelled as ``x+ = theta^T phi(x, u)`` with one independent
Gaussian regression per output dimension, all sharing the same feature vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .geometry import ErrorBall, TighteningSchedule

CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class BeliefError(ArithmeticError):
    """Raised on numerically invalid posterior states (improper, non-PSD)."""


@dataclass(frozen=True)
class FeatureMap:
    """Monomial features of the stacked vector ``z = (x, u)``.

    Each row of ``exponents`` declares one feature as the product
    ``prod_j z_j ** exponents[k, j]``. The declaration is what the analytic
    Jacobians are derived from.
    """

    n_state: int
    n_input: int
    exponents: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.exponents, dtype=int)
        if e.ndim != 2 or e.shape[1] != self.n_state + self.n_input:
            raise ContractError(
                f"exponents must have shape (p, {self.n_state + self.n_input}), got {e.shape}"
            )
        if np.any(e < 0):
            raise ContractError("negative exponents are not allowed")
        if np.any(e.sum(axis=1) == 0):
            raise ContractError("constant features are not supported")
        e.setflags(write=False)
        object.__setattr__(self, "exponents", e)

    @classmethod
    def separable(cls, n_state: int, n_input: int, degrees: Sequence[int] = (1, 3, 5)):
        """Per-variable powers, e.g. ``[a, a^3, a^5, b, b^3, b^5, u, u^3, u^5]``."""
        d = n_state + n_input
        rows = []
        for j in range(d):
            for deg in degrees:
                r = [0] * d
                r[j] = deg
                rows.append(r)
        return cls(n_state, n_input, np.array(rows))

    @classmethod
    def linear(cls, n_state: int, n_input: int):
        return cls.separable(n_state, n_input, degrees=(1,))

    @property
    def n_features(self) -> int:
        return self.exponents.shape[0]

    @property
    def dim(self) -> int:
        return self.n_state + self.n_input

    def terms(self) -> list[str]:
        """Human-readable term list, e.g. ``['x0', 'x0^3', 'u0']``."""
        names = [f"x{i}" for i in range(self.n_state)] + [f"u{i}" for i in range(self.n_input)]
        out = []
        for row in self.exponents:
            parts = []
            for name, e in zip(names, row):
                if e == 1:
                    parts.append(name)
                elif e > 1:
                    parts.append(f"{name}^{e}")
            out.append("*".join(parts))
        return out

    def stack(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1] != self.n_state or u.shape[-1] != self.n_input:
            raise ContractError(
                f"expected x of dim {self.n_state} and u of dim {self.n_input}, "
                f"got {x.shape} and {u.shape}"
            )
        return np.concatenate([x, u], axis=-1)

    def evaluate_z(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.prod(z[..., None, :] ** self.exponents, axis=-1)

    def __call__(self, x, u) -> np.ndarray:
        return self.evaluate_z(self.stack(x, u))

    def jacobian_z(self, z) -> np.ndarray:
        """d phi / d z for a single point, shape ``(p, n + m)``."""
        z = np.asarray(z, dtype=float)
        e = self.exponents
        pw = z ** e
        lowered = np.where(e > 0, e * z ** np.maximum(e - 1, 0), 0.0)
        d = self.dim
        jac = np.empty((e.shape[0], d))
        for j in range(d):
            cols = pw.copy()
            cols[:, j] = lowered[:, j]
            jac[:, j] = np.prod(cols, axis=1)
        return jac

    def to_dict(self) -> dict:
        return {
            "n_state": self.n_state,
            "n_input": self.n_input,
            "exponents": self.exponents.tolist(),
            "terms": self.terms(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureMap":
        return cls(int(d["n_state"]), int(d["n_input"]), np.array(d["exponents"], dtype=int))


@dataclass(frozen=True)
class ConfidenceBox:
    """Zero-centred axis-aligned box bounding the one-step model error."""

    half_widths: np.ndarray
    p_s: float
    beta: float

    @property
    def center(self) -> np.ndarray:
        return np.zeros_like(self.half_widths)

    def contains(self, e) -> bool:
        return bool(np.all(np.abs(np.asarray(e)) <= self.half_widths))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return -self.half_widths, self.half_widths


@dataclass(frozen=True)
class DynamicsBelief:
    """Gaussian posterior over the regression weights ``theta`` (p x n).

    Stored in information form (precision and information vector per output)
    so that batch and sequential updates agree up to round-off.
    """

    features: FeatureMap
    prior_var: float
    noise_var: np.ndarray
    precision: np.ndarray  # (n, p, p)
    info: np.ndarray  # (n, p)
    n_obs: int = 0
    _mean: np.ndarray | None = field(default=None, repr=False, compare=False)
    _cov: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def prior(cls, features: FeatureMap, prior_var: float = 10.0, noise_var=1e-4):
        n, p = features.n_state, features.n_features
        noise = np.broadcast_to(np.asarray(noise_var, dtype=float), (n,)).copy()
        if np.any(noise <= 0):
            raise ContractError("noise variance must be positive")
        if not prior_var > 0:
            raise ContractError("prior variance must be positive (use inf for an improper prior)")
        lam = 0.0 if np.isinf(prior_var) else 1.0 / prior_var
        precision = np.repeat((lam * np.eye(p))[None], n, axis=0)
        return cls(features, float(prior_var), noise, precision, np.zeros((n, p)), 0)

    @property
    def n_state(self) -> int:
        return self.features.n_state

    @property
    def n_input(self) -> int:
        return self.features.n_input

    @property
    def is_proper(self) -> bool:
        return not np.isinf(self.prior_var) or self.n_obs > 0

    def _ensure_posterior(self):
        if self._mean is not None:
            return
        n, p = self.info.shape
        mean = np.empty((p, n))
        cov = np.empty((n, p, p))
        for i in range(n):
            try:
                c, low = _cho_factor(self.precision[i])
            except np.linalg.LinAlgError:
                raise BeliefError(
                    f"posterior precision of output {i} is singular; an improper prior "
                    f"needs at least {p} informative samples (have {self.n_obs})"
                ) from None
            mean[:, i] = _cho_solve(c, self.info[i])
            cov_i = _cho_solve(c, np.eye(p))
            cov[i] = 0.5 * (cov_i + cov_i.T)
        object.__setattr__(self, "_mean", mean)
        object.__setattr__(self, "_cov", cov)

    @property
    def mean(self) -> np.ndarray:
        """Posterior mean ``theta_bar`` with shape ``(p, n)``."""
        self._ensure_posterior()
        return self._mean

    @property
    def cov(self) -> np.ndarray:
        """Per-output posterior covariances, shape ``(n, p, p)``."""
        self._ensure_posterior()
        return self._cov

    def with_mean(self, theta: np.ndarray, cov: np.ndarray | float = 0.0) -> "DynamicsBelief":
        """Belief with a prescribed mean and covariance (used for synthetic setups).

        ``cov`` is a scalar (isotropic), a ``(p, p)`` matrix shared by all outputs,
        or a stack ``(n, p, p)``. A zero covariance is allowed.
        """
        n, p = self.n_state, self.features.n_features
        theta = np.asarray(theta, dtype=float).reshape(p, n)
        c = np.asarray(cov, dtype=float)
        if c.ndim == 0:
            c = np.repeat((float(c) * np.eye(p))[None], n, axis=0)
        elif c.ndim == 2:
            c = np.repeat(c[None], n, axis=0)
        return DynamicsBelief(self.features, self.prior_var, self.noise_var.copy(),
                              np.full((n, p, p), np.nan), np.full((n, p), np.nan),
                              self.n_obs, theta.copy(), c.copy())


def _cho_factor(a):
    low = np.linalg.cholesky(a)
    return low, True


def _cho_solve(low, b):
    from scipy.linalg import solve_triangular

    y = solve_triangular(low, b, lower=True)
    return solve_triangular(low.T, y, lower=False)


def _check_dims(belief: DynamicsBelief, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (belief.n_state,) or u.shape != (belief.n_input,):
        raise ContractError(
            f"state/input must have shapes ({belief.n_state},)/({belief.n_input},), "
            f"got {x.shape}/{u.shape}"
        )
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ContractError("state and input must be finite")
    return x, u


def predict_mean(belief: DynamicsBelief, x, u) -> np.ndarray:
    x, u = _check_dims(belief, x, u)
    return belief.features(x, u) @ belief.mean


def predict_std(belief: DynamicsBelief, x, u) -> np.ndarray:
    """Per-output predictive standard deviation ``sqrt(phi' C_i phi + s_i^2)``."""
    x, u = _check_dims(belief, x, u)
    if not belief.is_proper:
        raise BeliefError("improper prior without data: predictive variance is unbounded")
    phi = belief.features(x, u)
    quad = np.einsum("p,ipq,q->i", phi, belief.cov, phi)
    scale = max(1.0, float(np.max(np.abs(belief.cov))) * float(phi @ phi))
    if np.any(quad < -1e-10 * scale):
        raise BeliefError(f"posterior covariance is not PSD: phi' C phi = {quad}")
    return np.sqrt(np.maximum(quad, 0.0) + belief.noise_var)


def update(belief: DynamicsBelief, batch: Iterable[tuple]) -> DynamicsBelief:
    """Conjugate update with transitions ``(x, u, x_next)``."""
    batch = list(batch)
    if not batch:
        return belief
    if np.isnan(belief.precision).any():
        raise ContractError("cannot update a belief built with with_mean()")
    feats = belief.features
    X = np.array([np.asarray(b[0], dtype=float) for b in batch])
    U = np.array([np.atleast_1d(np.asarray(b[1], dtype=float)) for b in batch])
    Y = np.array([np.asarray(b[2], dtype=float) for b in batch])
    if X.shape[1:] != (feats.n_state,) or U.shape[1:] != (feats.n_input,) or Y.shape != X.shape:
        raise ContractError("transition dimensions do not match the feature map")
    Phi = feats.evaluate_z(np.concatenate([X, U], axis=1))
    gram = Phi.T @ Phi
    precision = belief.precision + gram[None] / belief.noise_var[:, None, None]
    info = belief.info + (Phi.T @ Y).T / belief.noise_var[:, None]
    return DynamicsBelief(feats, belief.prior_var, belief.noise_var.copy(), precision, info,
                          belief.n_obs + len(batch))


def gaussian_beta(p_s: float, n_dims: int = 1, joint: bool = True) -> float:
    """Half-width multiplier for a zero-mean Gaussian box at probability ``p_s``.

    With ``joint`` the per-dimension level is ``p_s ** (1 / n_dims)`` so the
    box over independent outputs holds with probability ``p_s``.
    """
    if not 0.0 < p_s < 1.0:
        raise ContractError("p_s must lie in (0, 1)")
    level = p_s ** (1.0 / n_dims) if joint else p_s
    return float(norm.ppf(0.5 * (1.0 + level)))


def confidence_map(belief: DynamicsBelief, x, u, p_s: float, beta: float | None = None,
                   joint: bool = True) -> ConfidenceBox:
    if not 0.0 < p_s < 1.0:
        raise ContractError("p_s must lie in (0, 1)")
    if beta is None:
        beta = gaussian_beta(p_s, belief.n_state, joint)
    return ConfidenceBox(beta * predict_std(belief, x, u), float(p_s), float(beta))


def subset_check(box: ConfidenceBox, budget: ErrorBall, i: int,
                 schedule: TighteningSchedule) -> tuple[bool, float]:
    """Containment of the confidence box in the tightened 1-norm error ball.

    A zero-centred box sits inside ``{e : |e|_1 <= R}`` iff the sum of its
    half-widths is at most ``R``; the margin is ``R - sum``.
    """
    if not 0 <= i <= schedule.horizon:
        raise ContractError(f"horizon index {i} outside [0, {schedule.horizon}]")
    margin = (1.0 - schedule.epsilon_at(i)) * budget.radius - float(np.sum(box.half_widths))
    return margin >= 0.0, margin


def save_checkpoint(belief: DynamicsBelief, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_checkpoint(belief))


def _fmt(a) -> list:
    return np.vectorize(lambda v: format(v, ".17g"), otypes=[object])(np.asarray(a)).tolist()


def dumps_checkpoint(belief: DynamicsBelief) -> str:
    """Text checkpoint; every float is written with 17 significant digits."""
    doc = {
        "format": "psfilter-belief",
        "version": CHECKPOINT_VERSION,
        "features": belief.features.to_dict(),
        "prior_var": format(belief.prior_var, ".17g"),
        "noise_var": _fmt(belief.noise_var),
        "n_obs": belief.n_obs,
        "precision": _fmt(belief.precision),
        "info": _fmt(belief.info),
        "mean": _fmt(belief.mean),
        "cov": _fmt(belief.cov),
    }
    return json.dumps(doc, indent=1)


def loads_checkpoint(text: str) -> DynamicsBelief:
    doc = json.loads(text)
    if doc.get("format") != "psfilter-belief":
        raise ValueError("not a belief checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")

    def arr(key):
        return np.array(doc[key], dtype=object).astype(float)

    feats = FeatureMap.from_dict(doc["features"])
    return DynamicsBelief(feats, float(doc["prior_var"]), arr("noise_var"), arr("precision"),
                          arr("info"), int(doc["n_obs"]), arr("mean"), arr("cov"))


def load_checkpoint(path) -> DynamicsBelief:
    with open(path) as fh:
        return loads_checkpoint(fh.read())
