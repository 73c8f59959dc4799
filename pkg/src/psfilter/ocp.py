"""Backup-plan optimal control problems: single-shooting transcription and SQP.

The decision vector stacks the planned inputs ``v_0..v_{N'-1}``; states are
eliminated with the mean dynamics so dynamic consistency holds by construction.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .geometry import ErrorBall, Polytope, TerminalSet, TighteningSchedule
from .model import ContractError, DynamicsBelief
from .qp import solve_qp

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6
KKT_TOL = 1e-6
STEP_TOL = 1e-8
# a feasible iterate with a KKT residual this small counts as converged once the
# line search stalls or the level has held for ACCEPT_ITER iterations
ACCEPT_KKT = 1e-4
ACCEPT_ITER = 5
ELASTIC_TOL = 1e-6
MAX_SQP_ITER = 100
HESS_REG = 1e-8
# proximal weight on inputs the objective does not see; without it the QP
# steps jump between input bounds and SQP zigzags
PROX_WEIGHT = 1e-2
# weight of the max-violation term in the elastic QP; small constraint gradients
# would otherwise lose to the proximal term and the violation shrinks only slowly
ELASTIC_WEIGHT = 1e4


@dataclass(frozen=True)
class OcpSpec:
    """One instance of the backup-planning problem.

    ``mode="robust"`` tightens every set with the schedule and imposes the
    confidence constraint against ``error_ball``; ``mode="nominal"`` keeps the
    sets untightened and restricts ``(x_i, u_i)`` to ``confident_region``
    (a polytope over the stacked ``(x, u)``; ``None`` means all of X x U).
    """

    belief: DynamicsBelief
    state_set: Polytope
    input_set: Polytope
    terminal: TerminalSet
    schedule: TighteningSchedule
    horizon: int
    x0: np.ndarray
    u_l: np.ndarray
    mode: Literal["robust", "nominal"] = "robust"
    error_ball: ErrorBall | None = None
    beta: float = 1.0
    confident_region: Polytope | None = None

    def __post_init__(self):
        if not 1 <= self.horizon <= self.schedule.horizon:
            raise ContractError(f"horizon {self.horizon} outside [1, {self.schedule.horizon}]")
        x0 = np.asarray(self.x0, dtype=float).ravel()
        u_l = np.atleast_1d(np.asarray(self.u_l, dtype=float)).ravel()
        if x0.shape != (self.belief.n_state,) or not np.all(np.isfinite(x0)):
            raise ContractError("x0 must be a finite state vector")
        if u_l.shape != (self.belief.n_input,):
            raise ContractError(f"u_l must have dimension {self.belief.n_input}")
        if self.mode not in ("robust", "nominal"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.mode == "robust" and self.error_ball is None:
            raise ContractError("robust mode needs an error ball")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "u_l", u_l)


@dataclass
class BackupPlan:
    inputs: np.ndarray  # (N', m)
    states: np.ndarray  # (N'+1, n)
    horizon: int
    objective: float
    status: str  # optimal | feasible | infeasible | max-iter | numerical-failure
    max_violation: float
    violations: dict
    iterations: int
    wall_time: float
    slack: float = 0.0
    trace: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")

    @property
    def first_input(self) -> np.ndarray:
        return self.inputs[0]


class Program:
    """Smooth NLP ``min |u_l - v_0|^2  s.t.  g(v) <= 0`` built from an :class:`OcpSpec`.

    Constraint order: tightened state rows for ``i = 1..N'-1``, input rows for
    ``i = 0..N'-1``, confidence (robust) or confident-region (nominal) rows for
    ``i = 0..N'-1``, terminal rows on ``mu_N'``.

    With ``fixed_v0`` the first input is pinned to ``u_l`` and removed from
    the decision vector (used for certification queries).
    """

    def __init__(self, spec: OcpSpec, fixed_v0: bool = False):
        self.spec = spec
        self.fixed_v0 = fixed_v0
        b = spec.belief
        self.n, self.m = b.n_state, b.n_input
        self.N = spec.horizon
        self.theta = b.mean
        self.feats = b.features
        self._exp = self.feats.exponents
        if spec.mode == "robust":
            eps = spec.schedule.epsilons()[: self.N + 1]
        else:
            eps = np.zeros(self.N + 1)
        self.eps = eps
        self.cov = b.cov if spec.mode == "robust" else None
        self.noise = b.noise_var

        n_x, n_u = spec.state_set.n_rows, spec.input_set.n_rows
        n_c = 1 if spec.mode == "robust" else (
            spec.confident_region.n_rows if spec.confident_region is not None else 0)
        n_t = spec.terminal.n_rows
        self.blocks = {
            "state": (0, n_x * (self.N - 1)),
        }
        o = n_x * (self.N - 1)
        self.blocks["input"] = (o, o + n_u * self.N)
        o += n_u * self.N
        self.blocks["confidence"] = (o, o + n_c * self.N)
        o += n_c * self.N
        self.blocks["terminal"] = (o, o + n_t)
        self.n_con = o + n_t
        self.n_full = self.m * self.N
        self.n_var = self.n_full - (self.m if fixed_v0 else 0)
        # x(k) itself is not constrained by the problem; kept for diagnostics
        self.initial_violation = float(max(0.0, np.max(spec.state_set.evaluate(spec.x0) - 1.0)))

    # -- helpers -----------------------------------------------------------
    def full_inputs(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float).ravel()
        if self.fixed_v0:
            v = np.concatenate([self.spec.u_l, v])
        return v.reshape(self.N, self.m)

    def decision_from_inputs(self, inputs) -> np.ndarray:
        flat = np.asarray(inputs, dtype=float).reshape(self.N, self.m).ravel()
        return flat[self.m:] if self.fixed_v0 else flat

    def initial_guess(self, warm=None) -> np.ndarray:
        inputs = np.zeros((self.N, self.m))
        inputs[0] = self.spec.u_l
        if warm is not None:
            # the shifted plan is (nearly) feasible as is, so its own first input is kept
            w = np.asarray(warm, dtype=float).reshape(-1, self.m)[: self.N]
            inputs[: len(w)] = w
            if 0 < len(w) < self.N:
                inputs[len(w):] = w[-1]
        return self.decision_from_inputs(inputs)

    def rollout(self, v) -> np.ndarray:
        inputs = self.full_inputs(v)
        mu = np.empty((self.N + 1, self.n))
        mu[0] = self.spec.x0
        # trial steps can send the polynomial model to inf/nan; the merit test rejects those
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(self.N):
                z = np.concatenate([mu[i], inputs[i]])
                mu[i + 1] = np.prod(z ** self._exp, axis=1) @ self.theta
        return mu

    def _phi_jac(self, Z):
        """Feature values and Jacobians for a batch of stacked points ``Z (k, d)``."""
        e = self._exp
        pw = Z[:, None, :] ** e  # (k, p, d)
        lowered = np.where(e > 0, e * Z[:, None, :] ** np.maximum(e - 1, 0), 0.0)
        phi = np.prod(pw, axis=2)
        d = Z.shape[1]
        jac = np.empty(pw.shape)
        for j in range(d):
            cols = pw.copy()
            cols[:, :, j] = lowered[:, :, j]
            jac[:, :, j] = np.prod(cols, axis=2)
        return phi, jac

    # -- evaluation --------------------------------------------------------
    def objective(self, v) -> tuple[float, np.ndarray]:
        grad = np.zeros(self.n_var)
        if self.fixed_v0:
            return 0.0, grad
        v = np.asarray(v, dtype=float)
        diff = v[: self.m] - self.spec.u_l
        grad[: self.m] = 2.0 * diff
        return float(diff @ diff), grad

    def constraints(self, v, jacobian: bool = True):
        """Return ``(g, J, mu)``; ``J`` is ``None`` when ``jacobian`` is False."""
        with np.errstate(over="ignore", invalid="ignore"):
            return self._constraints(v, jacobian)

    def _constraints(self, v, jacobian):
        spec = self.spec
        N, n, m = self.N, self.n, self.m
        inputs = self.full_inputs(v)
        mu = self.rollout(v)
        Z = np.concatenate([mu[:N], inputs], axis=1)
        g = np.empty(self.n_con)
        J = np.zeros((self.n_con, self.n_full)) if jacobian else None

        if jacobian:
            phi, jphi = self._phi_jac(Z)
            jf = np.einsum("pn,kpd->knd", self.theta, jphi)  # (N, n, n+m)
            S = np.zeros((N + 1, n, self.n_full))
            for i in range(N):
                S[i + 1] = jf[i, :, :n] @ S[i]
                S[i + 1][:, i * m:(i + 1) * m] += jf[i, :, n:]
        else:
            phi = np.prod(Z[:, None, :] ** self._exp, axis=2)

        # state rows, i = 1..N-1
        Ax = spec.state_set.A
        s0, s1 = self.blocks["state"]
        if s1 > s0:
            vals = mu[1:N] @ Ax.T - (1.0 - self.eps[1:N])[:, None]
            g[s0:s1] = vals.ravel()
            if jacobian:
                J[s0:s1] = np.einsum("rn,inv->irv", Ax, S[1:N]).reshape(-1, self.n_full)

        # input rows, i = 0..N-1
        Au = spec.input_set.A
        s0, s1 = self.blocks["input"]
        g[s0:s1] = (inputs @ Au.T - (1.0 - self.eps[:N])[:, None]).ravel()
        if jacobian:
            nu = Au.shape[0]
            for i in range(N):
                J[s0 + i * nu:s0 + (i + 1) * nu, i * m:(i + 1) * m] = Au

        s0, s1 = self.blocks["confidence"]
        if s1 > s0:
            if spec.mode == "robust":
                cphi = np.einsum("ipq,kq->kip", self.cov, phi)  # (N, n, p)
                var = np.einsum("kip,kp->ki", cphi, phi) + self.noise
                sig = np.sqrt(np.maximum(var, 0.0))
                r = spec.error_ball.effective_radius
                g[s0:s1] = spec.beta * sig.sum(axis=1) - (1.0 - self.eps[:N]) * r
                if jacobian:
                    dsig = np.einsum("kip,kpd->kid", cphi, jphi) / np.maximum(sig, 1e-300)[:, :, None]
                    dz = spec.beta * dsig.sum(axis=1)  # (N, n+m)
                    for i in range(N):
                        J[s0 + i] = dz[i, :n] @ S[i]
                        J[s0 + i, i * m:(i + 1) * m] += dz[i, n:]
            else:
                Az = spec.confident_region.A
                nz = Az.shape[0]
                g[s0:s1] = (Z @ Az.T - 1.0).ravel()
                if jacobian:
                    for i in range(N):
                        rows = slice(s0 + i * nz, s0 + (i + 1) * nz)
                        J[rows] = Az[:, :n] @ S[i]
                        J[rows, i * m:(i + 1) * m] += Az[:, n:]

        s0, s1 = self.blocks["terminal"]
        At = spec.terminal.polytope.A
        g[s0:s1] = At @ mu[N] - (1.0 - self.eps[N])
        if jacobian:
            J[s0:s1] = At @ S[N]
            if self.fixed_v0:
                J = J[:, m:]
        return g, J, mu

    def constraints_fd(self, v, step: float = 1e-6) -> np.ndarray:
        """Central finite-difference constraint Jacobian (fallback and test oracle)."""
        v = np.asarray(v, dtype=float)
        J = np.empty((self.n_con, self.n_var))
        for j in range(self.n_var):
            e = np.zeros_like(v)
            e[j] = step
            J[:, j] = (self.constraints(v + e, False)[0] - self.constraints(v - e, False)[0]) / (2 * step)
        return J

    def violations(self, g) -> dict:
        out = {}
        for name, (a, b) in self.blocks.items():
            out[name] = float(max(0.0, np.max(g[a:b]))) if b > a else 0.0
        return out


def transcribe(spec: OcpSpec, fixed_v0: bool = False) -> Program:
    return Program(spec, fixed_v0=fixed_v0)


def _bfgs(B, s, y):
    """Powell-damped BFGS update; keeps ``B`` positive definite."""
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(y))):
        return B
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 1e-16:
        return B
    sy = float(s @ y)
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * Bs
        sy = float(s @ y)
    Bn = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
    Bn = 0.5 * (Bn + Bn.T)
    try:
        np.linalg.cholesky(Bn)
    except np.linalg.LinAlgError:
        return B
    if np.linalg.cond(Bn) > 1e12:
        return B
    return Bn


def _elastic(prog: Program, v, max_iter: int = MAX_SQP_ITER, trace=None):
    """Drive ``max(g)`` to zero: ``min w/2 t^2  s.t.  g(v) <= t, t >= 0``.

    Returns ``(v, total_slack, iterations)`` where total slack is the summed
    positive constraint violation at the returned point.
    """
    nv = prog.n_var
    g, J, _ = prog.constraints(v)
    t = max(0.0, float(np.max(g))) if g.size else 0.0
    H = np.full(nv + 1, HESS_REG + PROX_WEIGHT)
    H[-1] = ELASTIC_WEIGHT
    H = np.diag(H)
    it = 0
    prev = None
    for it in range(1, max_iter + 1):
        # nothing to move when the only input is pinned
        if t <= 1e-10 or nv == 0:
            break
        if prev is not None:
            v_old, J_old, lam_old = prev
            s = v - v_old
            y = J.T @ lam_old - J_old.T @ lam_old
            Hv = _bfgs(H[:nv, :nv], s, y)
            H[:nv, :nv] = Hv
        C = np.zeros((g.size + 1, nv + 1))
        C[:-1, :nv] = J
        C[:-1, -1] = -1.0
        C[-1, -1] = -1.0
        rhs = np.concatenate([t - g, [t]])
        grad = np.zeros(nv + 1)
        grad[-1] = ELASTIC_WEIGHT * t
        qp = solve_qp(H, grad, C, rhs)
        if not qp.ok:
            break
        d = qp.x[:nv]
        predicted = max(0.0, t + qp.x[-1])
        psi0 = 0.5 * t * t
        decrease = psi0 - 0.5 * predicted ** 2
        if decrease <= 1e-16 * max(1.0, psi0) or np.max(np.abs(d)) < 1e-14:
            break
        alpha = 1.0
        accepted = False
        while alpha > 1e-8:
            vn = v + alpha * d
            gn, Jn, _ = prog.constraints(vn)
            tn = max(0.0, float(np.max(gn)))
            if 0.5 * tn * tn <= psi0 - 1e-4 * alpha * decrease:
                accepted = True
                break
            alpha *= 0.5
        if trace is not None:
            trace.append({"phase": "elastic", "iter": it, "max_violation": t, "alpha": alpha})
        if not accepted:
            break
        prev = (v, J, qp.lam[:-1])
        v, g, J, t = vn, gn, Jn, tn
    slack = float(np.sum(np.maximum(g, 0.0)))
    return v, slack, it


def solve(prog: Program, warm_start=None, trace: list | None = None,
          max_iter: int = MAX_SQP_ITER) -> BackupPlan:
    """SQP with a damped-BFGS Lagrangian Hessian, dense QP subproblems and an l1 merit.

    When a QP subproblem is infeasible the elastic phase minimizes the
    constraint violation; the problem is declared infeasible if the minimized
    total slack exceeds ``ELASTIC_TOL``.
    """
    t0 = time.perf_counter()
    m = prog.m
    v = prog.initial_guess(warm_start)
    nv = prog.n_var
    H = (HESS_REG + PROX_WEIGHT) * np.eye(nv)
    if not prog.fixed_v0:
        H[:m, :m] = (2.0 + HESS_REG) * np.eye(m)

    if prog.fixed_v0:
        v, slack, its = _elastic(prog, v, max_iter=max_iter, trace=trace)
        status = "optimal" if slack <= ELASTIC_TOL else "infeasible"
        return _make_plan(prog, v, status, its, t0, trace, slack=slack)

    penalty = 10.0
    iters = 0
    acceptable = 0
    status = "max-iter"
    prev = None
    for iters in range(1, max_iter + 1):
        f, gf = prog.objective(v)
        g, J, _ = prog.constraints(v)
        if prev is not None:
            v_old, gf_old, J_old, lam_old = prev
            H = _bfgs(H, v - v_old, (gf + J.T @ lam_old) - (gf_old + J_old.T @ lam_old))
        qp = solve_qp(H, gf, J, -g)
        if qp.status != "optimal":
            v, slack, eits = _elastic(prog, v, trace=trace)
            if slack > ELASTIC_TOL:
                return _make_plan(prog, v, "infeasible", iters + eits, t0, trace, slack=slack)
            f, gf = prog.objective(v)
            g, J, _ = prog.constraints(v)
            qp = solve_qp(H, gf, J, -g)
            if qp.status != "optimal":
                return _make_plan(prog, v, "numerical-failure", iters, t0, trace)
        d, lam = qp.x, qp.lam
        viol = float(max(0.0, np.max(g))) if g.size else 0.0
        kkt = float(np.max(np.abs(gf + J.T @ lam))) if nv else 0.0
        compl = float(np.max(np.abs(lam * g))) if g.size else 0.0
        step = float(np.max(np.abs(d))) if nv else 0.0
        if trace is not None:
            trace.append({"phase": "sqp", "iter": iters, "objective": f, "max_violation": viol,
                          "kkt": kkt, "complementarity": compl, "step": step})
        if viol <= FEAS_TOL and (max(kkt, compl) <= KKT_TOL or step < STEP_TOL):
            status = "optimal"
            break
        acceptable = acceptable + 1 if viol <= FEAS_TOL and max(kkt, compl) <= ACCEPT_KKT else 0
        if acceptable >= ACCEPT_ITER:
            status = "optimal"
            break
        if lam.size:
            penalty = max(penalty, 2.0 * float(np.max(lam)) + 1.0)

        def merit(fv, gv):
            return fv + penalty * float(np.sum(np.maximum(gv, 0.0)))

        m0 = merit(f, g)
        slope = float(gf @ d) - penalty * float(np.sum(np.maximum(g, 0.0)))
        alpha = 1.0
        accepted = False
        vn = v + d
        fn, _ = prog.objective(vn)
        gn, _, _ = prog.constraints(vn, jacobian=False)
        if merit(fn, gn) <= m0 + 1e-4 * min(slope, 0.0):
            accepted = True
        else:
            # second-order correction: re-solve with the constraint curvature along d
            qp2 = solve_qp(H, gf, J, -g - (gn - g - J @ d))
            if qp2.ok:
                vs = v + qp2.x
                fs, _ = prog.objective(vs)
                gs, _, _ = prog.constraints(vs, jacobian=False)
                if merit(fs, gs) <= m0 + 1e-4 * min(slope, 0.0):
                    vn, accepted = vs, True
            alpha = 0.5
        while not accepted and alpha >= 1e-10:
            vn = v + alpha * d
            fn, _ = prog.objective(vn)
            gn, _, _ = prog.constraints(vn, jacobian=False)
            if merit(fn, gn) <= m0 + 1e-4 * alpha * min(slope, 0.0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if acceptable:
                status = "optimal"
                break
            # merit stalls (round-off or Maratos); take a short step and keep iterating
            vn = v + 1e-3 * d
        prev = (v, gf, J, lam)
        v = vn
    else:
        g, _, _ = prog.constraints(v, jacobian=False)
        if g.size == 0 or np.max(g) <= FEAS_TOL:
            status = "feasible"
    return _make_plan(prog, v, status, iters, t0, trace)


def _make_plan(prog: Program, v, status, iters, t0, trace, slack: float = 0.0) -> BackupPlan:
    g, _, mu = prog.constraints(v, jacobian=False)
    inputs = prog.full_inputs(v).copy()
    viol = prog.violations(g)
    maxv = max(viol.values())
    obj = float(np.sum((inputs[0] - prog.spec.u_l) ** 2))
    if status in ("optimal", "feasible") and maxv > FEAS_TOL:
        status = "max-iter"
    return BackupPlan(inputs, mu, prog.N, obj, status, maxv, viol, iters,
                      time.perf_counter() - t0, slack, trace if trace is not None else [])


def shift_warm_start(previous: BackupPlan, x_new=None) -> np.ndarray:
    """Drop the applied first input; the tail seeds the next solve."""
    if previous.horizon < 2:
        raise ContractError("cannot shift a plan with horizon < 2")
    return previous.inputs[1:].copy()
