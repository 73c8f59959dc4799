"""Monte Carlo tuning of the error-ball radius and sampled Lipschitz estimates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .filter import InfeasibleStartError, PredictiveSafetyFilter
from .geometry import Box, hausdorff
from .model import DynamicsBelief, predict_std
from .plant import EPISODE_LENGTH, BangBangPolicy

log = logging.getLogger(__name__)

LIPSCHITZ_FACTOR = 1.5
MIN_SEPARATION = 1e-4


class TuningError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class RolloutOutcome:
    sample: int
    x0: np.ndarray
    violated: bool
    reason: str = ""
    step: int = -1
    fallbacks: int = 0


@dataclass
class TuningReport:
    radius: float | None
    samples: int
    tried: list = field(default_factory=list)  # (radius, first failing outcome or None)
    hoeffding_eps: float = float("nan")
    confidence: float = 0.95
    worst: RolloutOutcome | None = None

    def lines(self) -> list[str]:
        out = []
        for r, fail in self.tried:
            if fail is None:
                out.append(f"radius {r:.6g}: all {self.samples} rollouts clean")
            else:
                out.append(f"radius {r:.6g}: sample {fail.sample} failed at k={fail.step} ({fail.reason})")
        if self.radius is not None:
            out.append(f"accepted radius {self.radius:.6g}; with {self.samples} clean samples the per-rollout "
                       f"failure rate is below {self.hoeffding_eps:.3f} at confidence {self.confidence:.2f}")
        return out

    def to_dict(self) -> dict:
        return {"radius": self.radius, "samples": self.samples, "hoeffding_eps": self.hoeffding_eps,
                "confidence": self.confidence,
                "tried": [{"radius": r, "failed_sample": None if f is None else f.sample,
                           "reason": None if f is None else f.reason} for r, f in self.tried]}


def hoeffding_epsilon(samples: int, confidence: float = 0.95) -> float:
    """Deviation bound ``sqrt(ln(1/(1-confidence)) / (2 S))`` on an empirical failure rate."""
    return math.sqrt(math.log(1.0 / (1.0 - confidence)) / (2.0 * samples))


def posterior_plant(belief: DynamicsBelief, theta: np.ndarray, rng: np.random.Generator | None,
                    u_max: float | None = None) -> Callable:
    """Dynamics ``theta' phi(x, u)`` plus optional Gaussian noise at the belief's noise level."""
    feats = belief.features
    std = np.sqrt(belief.noise_var)

    def step(x, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u_max is not None:
            u = np.clip(u, -u_max, u_max)
        nxt = feats(np.asarray(x, dtype=float), u) @ theta
        if rng is not None:
            nxt = nxt + std * rng.standard_normal(nxt.shape)
        return nxt

    return step


def sample_theta(belief: DynamicsBelief, rng: np.random.Generator) -> np.ndarray:
    mean, cov = belief.mean, belief.cov
    out = np.empty_like(mean)
    for i in range(belief.n_state):
        L = np.linalg.cholesky(cov[i] + 1e-300 * np.eye(cov.shape[1]))
        out[:, i] = mean[:, i] + L @ rng.standard_normal(mean.shape[0])
    return out


def sample_feasible_states(filt: PredictiveSafetyFilter, count: int, rng: np.random.Generator,
                           lower, upper, max_attempts: int | None = None) -> list[np.ndarray]:
    """Rejection sampling of start states where the full-horizon problem is feasible.

    Candidates are uniform on the box ``[lower, upper]``; a cheap necessary
    test (confidence constraint at the first step with zero input) runs before
    the solve.
    """
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    max_attempts = 200 * count if max_attempts is None else max_attempts
    zero_u = np.zeros(filt.belief.n_input)
    found = []
    for _ in range(max_attempts):
        if len(found) == count:
            break
        x = rng.uniform(lower, upper)
        if not filt.state_set.contains(x):
            continue
        if filt.mode == "robust":
            if filt.beta * predict_std(filt.belief, x, zero_u).sum() > filt.error_ball.effective_radius:
                continue
        try:
            filt.start(x)
        except InfeasibleStartError:
            continue
        found.append(x)
    return found


def closed_loop_rollout(filt: PredictiveSafetyFilter, plant: Callable, x0, policy: Callable,
                        length: int = EPISODE_LENGTH, sample: int = -1,
                        strict: bool = False) -> RolloutOutcome:
    """Run the filter for ``length`` steps and report the first safety failure.

    A failure is a state outside X or an input outside U. With ``strict`` a
    shrinking-horizon solve that fails (the filter replays its stored plan)
    also counts.
    """
    state = filt.start(x0)
    x = np.asarray(x0, dtype=float)
    x0 = x.copy()
    fallbacks = 0
    for k in range(length):
        u, dec, state = filt.filter_input(state, k, x, policy(k, x))
        if dec.status.startswith("fallback"):
            fallbacks += 1
            if strict:
                return RolloutOutcome(sample, x0, True, f"recursive feasibility lost ({dec.status})", k, fallbacks)
        if not filt.input_set.contains(u, -1e-9):
            return RolloutOutcome(sample, x0, True, "input constraint", k, fallbacks)
        x = plant(x, u)
        if not filt.state_set.contains(x):
            return RolloutOutcome(sample, x0, True, f"state constraint at x={np.round(x, 4).tolist()}", k + 1,
                                  fallbacks)
    return RolloutOutcome(sample, x0, False, fallbacks=fallbacks)


def tune_error_radius(make_filter: Callable[[float], PredictiveSafetyFilter], belief: DynamicsBelief,
                      samples: int = 100, r0: float = 0.1, shrink: float = 0.8, r_min: float = 1e-4,
                      seed: int = 0, state_box=None, length: int = EPISODE_LENGTH,
                      sample_model: bool = True, process_noise: bool = True,
                      policy_factory: Callable | None = None, u_max: float | None = None,
                      strict: bool = False) -> TuningReport:
    """Shrink the error-ball radius until every sampled closed loop stays safe.

    ``make_filter(r)`` builds the filter for radius ``r``. Each sample draws
    a start state from the feasible set, a parameter ``theta~`` from the
    posterior (the simulated truth) and a bang-bang switching time. The same
    samples are reused across radii where still feasible, so the result is
    reproducible for a fixed ``seed``.
    """
    if not 0 < shrink < 1:
        raise ValueError("shrink factor must lie in (0, 1)")
    if policy_factory is None:
        def policy_factory(rng):
            return BangBangPolicy(int(rng.integers(0, length)), u_max if u_max is not None else 0.6)
    r = float(r0)
    report = TuningReport(None, samples)
    worst = None
    while r >= r_min:
        filt = make_filter(r)
        if state_box is None:
            lo, hi = filt.state_set.bounds()
        else:
            lo, hi = state_box
        rng = np.random.default_rng(seed)
        state_rng, theta_rng, policy_rng, noise_rng = rng.spawn(4)
        starts = sample_feasible_states(filt, samples, state_rng, lo, hi)
        failure = None
        if not starts:
            failure = RolloutOutcome(-1, np.full(belief.n_state, np.nan), True, "no feasible start state")
        for s, x0 in enumerate(starts):
            theta = sample_theta(belief, theta_rng) if sample_model else belief.mean
            plant = posterior_plant(belief, theta, noise_rng if process_noise else None, u_max)
            out = closed_loop_rollout(filt, plant, x0, policy_factory(policy_rng), length, s, strict)
            if out.violated:
                failure = out
                break
        report.tried.append((r, failure))
        log.info("radius %.5g: %s", r, "clean" if failure is None else failure.reason)
        if failure is None:
            report.radius = r
            report.samples = len(starts)
            report.hoeffding_eps = hoeffding_epsilon(len(starts), report.confidence)
            return report
        worst = failure
        r *= shrink
    report.worst = worst
    raise TuningError(
        f"no admissible radius above r_min={r_min}; last failure: sample {worst.sample} "
        f"from x0={np.round(worst.x0, 4).tolist()} ({worst.reason})", report)


def belief_box_map(belief: DynamicsBelief, beta: float = 1.0) -> Callable:
    """Confidence map ``z = (x, u) -> Box`` of the belief."""
    n = belief.n_state

    def conf(z):
        z = np.asarray(z, dtype=float)
        return Box.centered(beta * predict_std(belief, z[:n], z[n:]))

    return conf


def estimate_lipschitz(conf_map: Callable, pairs, factor: float = LIPSCHITZ_FACTOR) -> float:
    """Largest sampled ratio ``H(S(z), S(z')) / |z - z'|``, times a safety factor.

    ``conf_map`` maps a point to a :class:`Box`; ``pairs`` is a sequence of
    ``(z, z')`` with separation of at least 1e-4.
    """
    best = 0.0
    for z, zp in pairs:
        z, zp = np.asarray(z, dtype=float), np.asarray(zp, dtype=float)
        dist = float(np.linalg.norm(z - zp))
        if dist < MIN_SEPARATION:
            raise ValueError(f"pair separation {dist:.3g} below {MIN_SEPARATION}")
        best = max(best, hausdorff(conf_map(z), conf_map(zp)) / dist)
    return factor * best
