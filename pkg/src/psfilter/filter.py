"""Predictive safety filter: full-horizon solve, horizon shrinking, terminal handoff."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Literal

import numpy as np

from .geometry import ErrorBall, Polytope, TerminalSet, TighteningSchedule
from .model import ContractError, DynamicsBelief
from .ocp import BackupPlan, OcpSpec, solve, transcribe

log = logging.getLogger(__name__)

INTERVENTION_TOL = 1e-6
# iteration budget for certifying u_L as is; failing within it only means the
# full problem is solved instead
CERTIFY_ITER = 10


class InfeasibleStartError(RuntimeError):
    """The full-horizon problem is infeasible at the initial state."""


@dataclass(frozen=True)
class FilterDecision:
    k: int
    u: np.ndarray
    u_l: np.ndarray
    intervened: bool
    magnitude: float
    horizon: int
    status: str
    mode: str
    solve_time: float = 0.0


@dataclass(frozen=True)
class FilterState:
    """Bookkeeping between calls.

    ``k_bar`` is the last time the full-horizon problem was feasible; ``plan``
    is the most recent feasible backup plan, computed at time ``plan_k``.
    """

    k_bar: int
    plan: BackupPlan
    plan_k: int
    mode: Literal["full", "shrinking", "terminal"] = "full"
    log: tuple = ()


@dataclass
class PredictiveSafetyFilter:
    belief: DynamicsBelief
    state_set: Polytope
    input_set: Polytope
    terminal: TerminalSet
    schedule: TighteningSchedule
    error_ball: ErrorBall | None = None
    beta: float = 1.0
    mode: Literal["robust", "nominal"] = "robust"
    confident_region: Polytope | None = None
    certify_first: bool = True
    trace: list | None = None  # receives per-iteration solver records when set

    @property
    def horizon(self) -> int:
        return self.schedule.horizon

    def spec(self, horizon: int, x, u_l) -> OcpSpec:
        return OcpSpec(self.belief, self.state_set, self.input_set, self.terminal, self.schedule,
                       horizon, np.asarray(x, dtype=float), np.atleast_1d(u_l), self.mode,
                       self.error_ball, self.beta, self.confident_region)

    def solve_backup(self, horizon: int, x, u_l, warm=None, trace=None) -> BackupPlan:
        """Solve the planning problem.

        A plan whose first input is exactly ``u_l`` has zero cost, so finding
        any feasible completion with ``v_0 = u_l`` solves the problem. That is
        tried first from the warm start, and again from the optimizer's
        solution when it modifies ``u_l``: SQP may stop at a local solution
        next to a feasible ``u_l``.
        """
        spec = self.spec(horizon, x, u_l)
        trace = self.trace if trace is None else trace
        if not self.certify_first:
            return solve(transcribe(spec), warm, trace=trace)
        pinned_prog = transcribe(spec, fixed_v0=True)
        pinned = solve(pinned_prog, warm, trace=trace, max_iter=CERTIFY_ITER)
        if pinned.ok:
            return pinned
        plan = solve(transcribe(spec), warm, trace=trace)
        if plan.ok and np.linalg.norm(plan.first_input - spec.u_l) > 0.0:
            again = solve(pinned_prog, plan.inputs, trace=trace, max_iter=CERTIFY_ITER)
            if again.ok:
                return again
        return plan

    def _warm(self, state: FilterState, k: int, horizon: int, x) -> np.ndarray | None:
        offset = k - state.plan_k
        tail = state.plan.inputs[offset:]
        if len(tail) == 0:
            return None
        if len(tail) < horizon:
            mu_end = state.plan.states[-1]
            pad = np.asarray(self.terminal.policy(k, mu_end, tail[-1]), dtype=float).reshape(1, -1)
            tail = np.concatenate([tail, np.repeat(pad, horizon - len(tail), axis=0)])
        return tail[:horizon]

    def start(self, x0, u_l=None, k: int = 0) -> FilterState:
        """Initial state; the full-horizon problem must be feasible at ``x0``."""
        x0 = self._check_x(x0)
        if u_l is None:
            u_l = np.zeros(self.belief.n_input)
        plan = self.solve_backup(self.horizon, x0, u_l)
        if not plan.ok:
            raise InfeasibleStartError(
                f"backup problem infeasible at x0={x0.tolist()} (status {plan.status}, "
                f"slack {plan.slack:.3g}); recursive feasibility needs an initially feasible problem"
            )
        return FilterState(k_bar=k, plan=plan, plan_k=k, mode="full")

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.shape != (self.belief.n_state,):
            raise ContractError(f"state must have dimension {self.belief.n_state}")
        return x

    def filter_input(self, state: FilterState, k: int, x, u_l):
        x = self._check_x(x)
        u_l = np.atleast_1d(np.asarray(u_l, dtype=float)).ravel()
        if u_l.shape != (self.belief.n_input,):
            raise ContractError(f"input must have dimension {self.belief.n_input}")
        t0 = time.perf_counter()
        N = self.horizon
        warm = self._warm(state, k, N, x) if k > state.plan_k else state.plan.inputs
        full = self.solve_backup(N, x, u_l, warm)
        if full.ok:
            new = FilterState(k_bar=k, plan=full, plan_k=k, mode="full", log=state.log)
            return self._decide(new, k, full.first_input, u_l, N, full.status, t0)

        if k < N + state.k_bar:
            h = N - (k - state.k_bar)
            warm = self._warm(state, k, h, x)
            plan = self.solve_backup(h, x, u_l, warm)
            if plan.ok:
                new = FilterState(state.k_bar, plan, k, "shrinking", state.log)
                return self._decide(new, k, plan.first_input, u_l, h, plan.status, t0)
            offset = k - state.plan_k
            log.warning("shrinking-horizon solve failed at k=%d (status %s); replaying stored plan",
                        k, plan.status)
            if offset < state.plan.horizon:
                u = state.plan.inputs[offset]
            else:
                u = np.asarray(self.terminal.policy(k, x, u_l), dtype=float)
            new = replace(state, mode="shrinking")
            return self._decide(new, k, u, u_l, h, f"fallback:{plan.status}", t0)

        u = np.atleast_1d(np.asarray(self.terminal.policy(k, x, u_l), dtype=float))
        new = replace(state, mode="terminal")
        return self._decide(new, k, u, u_l, 0, "terminal", t0)

    def _decide(self, new: FilterState, k, u, u_l, horizon, status, t0):
        u = np.array(u, dtype=float).ravel()
        mag = float(np.linalg.norm(u - u_l))
        dec = FilterDecision(k, u, u_l.copy(), mag > INTERVENTION_TOL, mag, horizon, status,
                             new.mode, time.perf_counter() - t0)
        new = replace(new, log=new.log + (dec,))
        return u, dec, new

    def certify(self, state: FilterState, k: int, x, u_l) -> bool:
        """Would ``filter_input`` pass ``u_l`` through unchanged? (no state change)"""
        u, dec, _ = self.filter_input(state, k, x, u_l)
        return not dec.intervened

    def safe_step(self, state: FilterState, k: int, x, u_l, plant: Callable):
        u, dec, new = self.filter_input(state, k, x, u_l)
        x_next = np.asarray(plant(np.asarray(x, dtype=float), u), dtype=float)
        return x_next, dec, new
