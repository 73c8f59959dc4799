"""Dense dual active-set QP solver (Goldfarb-Idnani).

Solves ``min 1/2 x'Gx + a'x  s.t.  C x <= b`` for positive definite ``G``.
The dual method starts at the unconstrained minimizer and adds violated
constraints one at a time, so no feasible starting point is needed and
infeasibility is detected when no primal or dual step exists.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

DEP_TOL = 1e-9


@dataclass
class QPResult:
    x: np.ndarray
    lam: np.ndarray  # multipliers of C x <= b, >= 0
    status: str  # "optimal" | "infeasible" | "max_iter" | "numerical"
    active: list
    iterations: int

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class _Factor:
    __slots__ = ("J", "R")

    def __init__(self, linv_t, normals, active):
        n = linv_t.shape[0]
        if active:
            B = linv_t.T @ normals[active].T
            Q, R = np.linalg.qr(B, mode="complete")
            self.R = R[: len(active), : len(active)]
        else:
            Q = np.eye(n)
            self.R = np.zeros((0, 0))
        self.J = linv_t @ Q


def solve_qp(G, a, C, b, feas_tol: float = 1e-11, max_iter: int | None = None) -> QPResult:
    G = np.asarray(G, dtype=float)
    a = np.asarray(a, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float)).reshape(-1, a.size)
    b = np.asarray(b, dtype=float).ravel()
    n, m = a.size, b.size
    if max_iter is None:
        max_iter = 10 * (n + m) + 50

    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return QPResult(np.full(n, np.nan), np.zeros(m), "numerical", [], 0)
    linv_t = solve_triangular(L, np.eye(n), lower=True).T  # L^{-T}
    x = -(linv_t @ (linv_t.T @ a))

    normals = -C  # GI works with n_i' x >= r_i
    rhs = -b
    row_scale = 1.0 + np.linalg.norm(C, axis=1)

    active: list[int] = []
    u = np.zeros(0)
    fac = _Factor(linv_t, normals, active)
    lam = np.zeros(m)

    it = 0
    while True:
        if m == 0:
            break
        s = normals @ x - rhs
        scaled = s / row_scale
        if active:
            scaled[active] = np.inf
        p = int(np.argmin(scaled))
        if scaled[p] >= -feas_tol:
            break
        n_p = normals[p]
        u_plus = np.append(u, 0.0)
        while True:
            it += 1
            if it > max_iter:
                lam[:] = 0.0
                lam[active] = u
                return QPResult(x, lam, "max_iter", list(active), it)
            q = len(active)
            d = fac.J.T @ n_p
            d2 = d[q:]
            # a normal (numerically) in the span of the active ones gives no primal step
            if np.linalg.norm(d2) > DEP_TOL * max(np.linalg.norm(d), 1e-300):
                z = fac.J[:, q:] @ d2
                t2 = -(n_p @ x - rhs[p]) / (z @ n_p)
            else:
                z = None
                t2 = np.inf
            if q:
                try:
                    r = solve_triangular(fac.R, d[:q], lower=False)
                except np.linalg.LinAlgError:
                    return QPResult(x, lam * 0.0, "numerical", list(active), it)
            else:
                r = np.zeros(0)
            t1 = np.inf
            drop = -1
            for j in range(q):
                if r[j] > 1e-14:
                    ratio = u_plus[j] / r[j]
                    if ratio < t1:
                        t1, drop = ratio, j
            t = min(t1, t2)
            if not np.isfinite(t):
                lam[:] = 0.0
                return QPResult(x, lam, "infeasible", list(active), it)
            if z is None:
                u_plus[:q] -= t * r
                u_plus[q] += t
                u_plus = np.delete(u_plus, drop)
                active.pop(drop)
                fac = _Factor(linv_t, normals, active)
                continue
            x = x + t * z
            u_plus[:q] -= t * r
            u_plus[q] += t
            if t2 <= t1:
                active.append(p)
                u = u_plus
                fac = _Factor(linv_t, normals, active)
                break
            u_plus = np.delete(u_plus, drop)
            active.pop(drop)
            fac = _Factor(linv_t, normals, active)

    lam[:] = 0.0
    if active:
        lam[active] = np.maximum(u, 0.0)
    return QPResult(x, lam, "optimal", list(active), it)
