"""Incremental-stabilizability certificates from LQR value functions.

Each reference ``r = (z, v)`` is linearized under the posterior mean, a
discrete Riccati equation gives ``(K_r, P_r)`` and ``V(x, z) = (x-z)' P_r (x-z)``
is tested for contraction by nonlinear rollouts of ``u = v + K_r (x - z)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .model import DynamicsBelief, predict_mean

DARE_TOL = 1e-10
DARE_MAX_ITER = 10_000
DELTA_GRID = tuple(np.logspace(-3, 0, 13))


class NotStabilizableError(RuntimeError):
    pass


class CertificateError(RuntimeError):
    pass


@dataclass(frozen=True)
class Linearization:
    A: np.ndarray
    B: np.ndarray
    z: np.ndarray
    v: np.ndarray


def linearize(belief: DynamicsBelief, z, v, method: str = "analytic", step: float = 1e-6) -> Linearization:
    """Jacobians of the mean dynamics at ``(z, v)``; ``method="fd"`` uses central differences."""
    z = np.asarray(z, dtype=float).ravel()
    v = np.atleast_1d(np.asarray(v, dtype=float)).ravel()
    n = z.size
    if method == "analytic":
        jac = belief.mean.T @ belief.features.jacobian_z(np.concatenate([z, v]))
    elif method == "fd":
        r = np.concatenate([z, v])
        jac = np.empty((n, r.size))
        for j in range(r.size):
            d = np.zeros_like(r)
            d[j] = step
            hi, lo = r + d, r - d
            jac[:, j] = (predict_mean(belief, hi[:n], hi[n:]) - predict_mean(belief, lo[:n], lo[n:])) / (2 * step)
    else:
        raise ValueError(f"unknown linearization method {method!r}")
    return Linearization(jac[:, :n].copy(), jac[:, n:].copy(), z, v)


def _riccati_map(A, B, Q, R, P):
    BtP = B.T @ P
    S = R + BtP @ B
    K = -np.linalg.solve(S, BtP @ A)
    return Q + A.T @ P @ A + A.T @ P @ B @ K, K


def dare_residual(A, B, Q, R, P) -> float:
    nxt, _ = _riccati_map(A, B, Q, R, P)
    return float(np.linalg.norm(nxt - P, "fro"))


def dare_solve(A, B, Qw, Rw, tol: float = DARE_TOL, max_iter: int = DARE_MAX_ITER):
    """Stabilizing solution ``(K, P)`` of the discrete Riccati equation, ``u = K x``.

    The fixed point is iterated from ``P = Qw`` (warm-started from scipy's
    Schur solver when it succeeds) until ``|P+ - P|_F < tol``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Qw, dtype=float))
    R = np.atleast_2d(np.asarray(Rw, dtype=float))
    if np.any(np.linalg.eigvalsh(0.5 * (Q + Q.T)) <= 0) or np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
        raise ValueError("Qw and Rw must be positive definite")
    P = Q.copy()
    try:
        Ps = scipy.linalg.solve_discrete_are(A, B, Q, R)
        if np.all(np.isfinite(Ps)):
            P = 0.5 * (Ps + Ps.T)
    except (np.linalg.LinAlgError, ValueError):
        pass
    for _ in range(max_iter):
        with np.errstate(over="ignore", invalid="ignore"):
            nxt, K = _riccati_map(A, B, Q, R, P)
        nxt = 0.5 * (nxt + nxt.T)
        if not np.all(np.isfinite(nxt)):
            break
        delta = np.linalg.norm(nxt - P, "fro")
        P = nxt
        if delta < tol * max(1.0, np.linalg.norm(P, "fro")):
            _, K = _riccati_map(A, B, Q, R, P)
            if np.max(np.abs(np.linalg.eigvals(A + B @ K))) >= 1.0 - 1e-9:
                break
            return K, P
    raise NotStabilizableError(f"Riccati iteration did not converge for A={A.tolist()}, B={B.tolist()}")


@dataclass(frozen=True)
class StabilityCertificate:
    rho: float
    c_l: float
    c_u: float
    delta: float
    pi_max: float
    margin_c: float
    n_references: int
    n_pairs: int
    max_dare_residual: float
    weights: tuple = field(default=((), ()), repr=False)

    def __post_init__(self):
        if not (0 < self.rho < 1 and 0 < self.c_l <= self.c_u and self.delta > 0 and self.pi_max > 0):
            raise CertificateError(f"inconsistent certificate constants: {self}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("rho", "c_l", "c_u", "delta", "pi_max", "margin_c",
                                              "n_references", "n_pairs", "max_dare_residual")}


def decrease_margin(P_r, P_next, Q_r) -> float:
    """Smallest eigenvalue of ``lam Q_r - (lam - 1) P_r`` with ``lam = lam_max(P_r^-1 P_next)``."""
    lam = float(np.max(scipy.linalg.eigh(P_next, P_r, eigvals_only=True)))
    M = lam * Q_r - (lam - 1.0) * P_r
    return float(np.min(np.linalg.eigvalsh(0.5 * (M + M.T))))


def _lqr(belief, z, v, Qw, Rw):
    lin = linearize(belief, z, v)
    K, P = dare_solve(lin.A, lin.B, Qw, Rw)
    return lin, K, P


def estimate_certificate(belief: DynamicsBelief, references, Qw=None, Rw=None, *,
                         successor_inputs=None, n_pairs: int = 20, deltas=DELTA_GRID,
                         rng: np.random.Generator | None = None, state_set=None,
                         input_set=None) -> StabilityCertificate:
    """Estimate ``(rho, c_l, c_u, delta, pi_max)`` over a sample of references.

    ``references`` is a sequence of ``(z, v)``. For every reference the
    successor reference ``(f(z, v), v+)`` is formed with each ``v+`` in
    ``successor_inputs`` (default: ``v`` itself) to evaluate the
    rate-of-change condition. ``rho`` is the worst contraction ratio of
    ``V`` over ``n_pairs`` random perturbations per reference and level; the
    reported ``delta`` is the largest level in ``deltas`` with ratio < 1.
    """
    refs = [(np.asarray(z, dtype=float).ravel(), np.atleast_1d(np.asarray(v, dtype=float)).ravel())
            for z, v in references]
    if not refs:
        raise ValueError("need at least one reference point")
    n, m = belief.n_state, belief.n_input
    Qw = np.eye(n) if Qw is None else np.atleast_2d(np.asarray(Qw, dtype=float))
    Rw = np.eye(m) if Rw is None else np.atleast_2d(np.asarray(Rw, dtype=float))
    rng = np.random.default_rng(0) if rng is None else rng

    data = []
    c_l, c_u, pi_max, res_max = np.inf, 0.0, 0.0, 0.0
    for z, v in refs:
        try:
            lin, K, P = _lqr(belief, z, v, Qw, Rw)
        except NotStabilizableError as exc:
            raise CertificateError(f"no stabilizing LQR at reference z={z.tolist()}, v={v.tolist()}") from exc
        eig = np.linalg.eigvalsh(P)
        c_l, c_u = min(c_l, eig[0]), max(c_u, eig[-1])
        pi_max = max(pi_max, float(np.linalg.norm(K, 2)))
        res_max = max(res_max, dare_residual(lin.A, lin.B, Qw, Rw, P))
        z_next = predict_mean(belief, z, v)
        try:
            _, _, P_next = _lqr(belief, z_next, v, Qw, Rw)
        except NotStabilizableError as exc:
            raise CertificateError(f"successor reference z+={z_next.tolist()} not stabilizable") from exc
        data.append((z, v, K, P, z_next, P_next))

    margin = np.inf
    for z, v, K, P, z_next, P_own in data:
        Q_r = Qw + K.T @ Rw @ K
        if successor_inputs is None:
            margin = min(margin, decrease_margin(P, P_own, Q_r))
            continue
        for v_next in successor_inputs:
            v_next = np.atleast_1d(np.asarray(v_next, dtype=float))
            try:
                _, _, P_next = _lqr(belief, z_next, v_next, Qw, Rw)
            except NotStabilizableError as exc:
                raise CertificateError(f"successor reference z+={z_next.tolist()} not stabilizable") from exc
            margin = min(margin, decrease_margin(P, P_next, Q_r))

    # directions are shared across levels so ratios are comparable between them
    dirs = rng.standard_normal((len(data), n_pairs, n))
    scales = rng.uniform(0.0, 1.0, (len(data), n_pairs)) ** (1.0 / n)
    best = None
    worst_ref = None
    for delta in sorted(deltas):
        ratio_max, worst = 0.0, None
        for idx, (z, v, K, P, z_next, P_next) in enumerate(data):
            for d, s in zip(dirs[idx], scales[idx]):
                # scale so that V(x, z) = s^2 * delta < delta
                e = d * s * np.sqrt(delta / float(d @ P @ d))
                x = z + e
                u = v + K @ e
                if state_set is not None and not state_set.contains(x):
                    continue
                if input_set is not None and not input_set.contains(u):
                    continue
                V0 = float(e @ P @ e)
                if V0 <= 0:
                    continue
                de = predict_mean(belief, x, u) - z_next
                ratio = float(de @ P_next @ de) / V0
                if ratio > ratio_max:
                    ratio_max, worst = ratio, (z, v, x)
        if ratio_max < 1.0:
            best = (delta, ratio_max)
        else:
            worst_ref = worst
            break
    if best is None:
        z, v, x = worst_ref
        raise CertificateError(
            f"no contraction at any tested level; worst reference z={z.tolist()}, v={v.tolist()}, x={x.tolist()}"
        )
    delta, rho = best
    return StabilityCertificate(rho=max(rho, 1e-12), c_l=float(c_l), c_u=float(c_u), delta=float(delta),
                                pi_max=max(pi_max, 1e-12), margin_c=float(margin), n_references=len(data),
                                n_pairs=n_pairs, max_dare_residual=res_max,
                                weights=(Qw.tolist(), Rw.tolist()))
