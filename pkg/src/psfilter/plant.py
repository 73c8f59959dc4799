"""Ground-truth simulators, the bang-bang learning policy and episode objectives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

EPISODE_LENGTH = 70


@dataclass(frozen=True)
class PendulumParams:
    h: float = 0.05
    g: float = 9.81
    l: float = 0.5
    m: float = 0.15
    eta: float = 0.1
    u_max: float = 0.6

    def __post_init__(self):
        for name in ("h", "g", "l", "m", "eta", "u_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"pendulum parameter {name} must be positive")

    @property
    def inertia(self) -> float:
        return self.m * self.l ** 2


def true_step(params: PendulumParams, x, u) -> np.ndarray:
    """Explicit-Euler pendulum; ``x = (angle rad, rate rad/s)``, input clipped to ``u_max``."""
    x = np.asarray(x, dtype=float)
    u = float(np.clip(np.ravel(u)[0], -params.u_max, params.u_max))
    ml2 = params.inertia
    acc = -(params.g / params.l) * np.sin(x[0]) - (params.eta / ml2) * x[1] + u / ml2
    return np.array([x[0] + params.h * x[1], x[1] + params.h * acc])


def energy(params: PendulumParams, x) -> float:
    """Mechanical energy with zero at the downward rest position."""
    x = np.asarray(x, dtype=float)
    ml2 = params.inertia
    return 0.5 * ml2 * x[1] ** 2 + params.m * params.g * params.l * (1.0 - np.cos(x[0]))


@dataclass(frozen=True)
class Pendulum:
    """Plant handle: ``plant(x, u) -> x_next``."""

    params: PendulumParams = PendulumParams()
    n_state = 2
    n_input = 1

    def __call__(self, x, u) -> np.ndarray:
        return true_step(self.params, x, u)


@dataclass(frozen=True)
class CallbackPlant:
    """Custom plant from a dynamics callback with declared dimensions."""

    fn: Callable
    n_state: int
    n_input: int

    def __call__(self, x, u) -> np.ndarray:
        out = np.asarray(self.fn(np.asarray(x, dtype=float), np.atleast_1d(np.asarray(u, dtype=float))),
                         dtype=float)
        if out.shape != (self.n_state,):
            raise ValueError(f"plant callback returned shape {out.shape}, expected ({self.n_state},)")
        return out


@dataclass(frozen=True)
class BangBangPolicy:
    k_s: int
    u_max: float = 0.6

    def __call__(self, k: int, x=None) -> np.ndarray:
        return bang_bang(self, k, x)


def bang_bang(policy: BangBangPolicy, k: int, x=None) -> np.ndarray:
    return np.array([-policy.u_max if k <= policy.k_s else policy.u_max])


def episode_objective(states) -> float:
    """``|alpha_70 - pi|`` for an episode of exactly 70 steps.

    ``states`` holds either the 70 visited successor states or all 71 states
    including the initial one; the last angle is scored either way.
    """
    states = np.asarray(states, dtype=float)
    if states.shape[0] not in (EPISODE_LENGTH, EPISODE_LENGTH + 1):
        raise ValueError(f"an episode has {EPISODE_LENGTH} steps, got {states.shape[0]} states")
    return float(abs(states[-1, 0] - np.pi))


def policy_search_step(history, rng: np.random.Generator, std: float = 5.0,
                       first_range=(5, 40), k_max: int = EPISODE_LENGTH - 1) -> int:
    """Next switching time for the stochastic hill-climbing search.

    ``history`` is a list of ``(k_s, objective)``. The first proposal is
    uniform on ``first_range``; later ones perturb the best ``k_s`` so far by a
    rounded Gaussian step, clamped to ``[0, k_max]``.
    """
    if not history:
        return int(rng.integers(first_range[0], first_range[1] + 1))
    best_k, _ = min(history, key=lambda kv: kv[1])
    tried = {k for k, _ in history}
    for _ in range(20):
        step = int(np.rint(rng.normal(0.0, std)))
        cand = int(np.clip(best_k + step, 0, k_max))
        if cand not in tried:
            return cand
    return cand
