"""Run configuration, the learning loop and episode logs."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .filter import PredictiveSafetyFilter
from .geometry import ErrorBall, Polytope, TerminalSet, TighteningSchedule, ScheduleError
from .model import DynamicsBelief, FeatureMap, update
from .plant import (EPISODE_LENGTH, BangBangPolicy, Pendulum, PendulumParams, episode_objective,
                    policy_search_step)

log = logging.getLogger(__name__)

MODES = ("robust", "nominal", "unfiltered")


class ConfigError(ValueError):
    pass


def parse_angle(value) -> float:
    """Number (radians) or string with a ``deg``/``rad`` suffix."""
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        s = value.strip().lower()
        for suffix, scale in (("deg", math.pi / 180.0), ("rad", 1.0)):
            if s.endswith(suffix):
                try:
                    return float(s[: -len(suffix)]) * scale
                except ValueError:
                    break
        try:
            return float(s)
        except ValueError:
            pass
    raise ConfigError(f"cannot parse quantity {value!r}; use a number or e.g. '185deg'")


def _vec(values, name, n=None) -> np.ndarray:
    if not isinstance(values, (list, tuple)):
        raise ConfigError(f"{name} must be a list")
    out = np.array([parse_angle(v) for v in values], dtype=float)
    if n is not None and out.size != n:
        raise ConfigError(f"{name} must have {n} entries, got {out.size}")
    return out


DEFAULT_CONFIG: dict[str, Any] = {
    "plant": {"kind": "pendulum", "h": 0.05, "g": 9.81, "l": 0.5, "m": 0.15, "eta": 0.1, "u_max": 0.6},
    "features": {"degrees": [1, 3, 5]},
    "prior": {"prior_var": 10.0, "noise_var": 1e-6},
    "initial_data": {"count": 100, "state_lower": ["-10deg", "-30deg"], "state_upper": ["10deg", "30deg"],
                     "input_lower": [-0.6], "input_upper": [0.6]},
    "constraints": {
        "state_lower": ["-60deg", -10.0], "state_upper": ["185deg", 10.0],
        "input_lower": [-0.6], "input_upper": [0.6],
        "terminal_lower": ["-30deg", "-30deg"], "terminal_upper": ["30deg", "30deg"],
    },
    "schedule": {"rho": 0.99, "eps": 0.02, "horizon": 20},
    "confidence": {"p_s": 0.95, "beta": 1.0, "radius": 0.02},
    "episodes": {"count": 15, "length": EPISODE_LENGTH, "x0": [0.0, 0.0], "success_threshold": 0.15},
    "policy_search": {"std": 5.0, "first_range": [5, 40]},
    "stabilizability": {"Qw": [[10.0, 0.0], [0.0, 1.0]], "Rw": [[1.0]],
                        "angles": ["-60deg", "185deg", 15], "rates": [-4.0, 4.0, 5],
                        "inputs": [-0.6, 0.6, 3]},
    "tuning": {"samples": 100, "r0": 0.1, "shrink": 0.8, "r_min": 1e-4, "episode_length": EPISODE_LENGTH},
    "seed": 0,
    "mode": "robust",
    "output": {"log_dir": None},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict
    params: PendulumParams
    features: FeatureMap
    prior_var: float
    noise_var: float
    state_set: Polytope
    input_set: Polytope
    terminal: TerminalSet
    schedule: TighteningSchedule
    p_s: float
    beta: float
    radius: float
    episodes: int
    length: int
    x0: np.ndarray
    success_threshold: float
    seed: int
    mode: str

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "RunConfig":
        raw = _merge(DEFAULT_CONFIG, d or {})
        try:
            pl = raw["plant"]
            if pl.get("kind", "pendulum") != "pendulum":
                raise ConfigError(f"unknown plant kind {pl.get('kind')!r}; custom plants use CallbackPlant")
            params = PendulumParams(**{k: float(pl[k]) for k in ("h", "g", "l", "m", "eta", "u_max")})
            n, m = 2, 1
            features = FeatureMap.separable(n, m, tuple(int(x) for x in raw["features"]["degrees"]))
            c = raw["constraints"]
            state_set = Polytope.box(_vec(c["state_lower"], "state_lower", n), _vec(c["state_upper"], "state_upper", n))
            input_set = Polytope.box(_vec(c["input_lower"], "input_lower", m), _vec(c["input_upper"], "input_upper", m))
            terminal = TerminalSet(Polytope.box(_vec(c["terminal_lower"], "terminal_lower", n),
                                                _vec(c["terminal_upper"], "terminal_upper", n)))
            s = raw["schedule"]
            schedule = TighteningSchedule(float(s["rho"]), float(s["eps"]), int(s["horizon"]))
            conf = raw["confidence"]
            ep = raw["episodes"]
            mode = raw["mode"]
            if mode not in MODES:
                raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
            cfg = cls(raw, params, features, float(raw["prior"]["prior_var"]), float(raw["prior"]["noise_var"]),
                      state_set, input_set, terminal, schedule, float(conf["p_s"]), float(conf["beta"]),
                      float(conf["radius"]), int(ep["count"]), int(ep["length"]), _vec(ep["x0"], "x0", n),
                      float(ep["success_threshold"]), int(raw["seed"]), mode)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError, ScheduleError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def validate(self):
        if not 0 < self.p_s < 1:
            raise ConfigError("p_s must lie in (0, 1)")
        if self.radius <= 0 or self.beta <= 0:
            raise ConfigError("radius and beta must be positive")
        if self.prior_var <= 0 or self.noise_var <= 0:
            raise ConfigError("prior_var and noise_var must be positive")
        if self.episodes < 0 or self.length < 1:
            raise ConfigError("episode count must be >= 0 and length >= 1")
        if not self.state_set.contains(self.x0):
            raise ConfigError(f"x0 {self.x0.tolist()} violates the state constraints")
        if self.raw["episodes"]["length"] != EPISODE_LENGTH:
            log.warning("episode length %d differs from the benchmark's %d; the objective needs %d",
                        self.length, EPISODE_LENGTH, EPISODE_LENGTH)

    def replace(self, **overrides) -> "RunConfig":
        """New config with top-level ``seed``/``mode`` or nested dict blocks overridden."""
        return RunConfig.from_dict(_merge(self.raw, overrides))

    @property
    def plant(self) -> Pendulum:
        return Pendulum(self.params)

    def prior(self) -> DynamicsBelief:
        return DynamicsBelief.prior(self.features, self.prior_var, self.noise_var)

    def error_ball(self, radius: float | None = None) -> ErrorBall:
        return ErrorBall(self.radius if radius is None else radius, self.features.n_state)

    def make_filter(self, belief: DynamicsBelief, mode: str | None = None,
                    radius: float | None = None) -> PredictiveSafetyFilter:
        mode = mode or self.mode
        if mode == "unfiltered":
            raise ConfigError("unfiltered mode has no filter")
        return PredictiveSafetyFilter(belief, self.state_set, self.input_set, self.terminal, self.schedule,
                                      self.error_ball(radius) if mode == "robust" else None,
                                      self.beta, mode)


def initial_dataset(cfg: RunConfig, rng: np.random.Generator) -> list[tuple]:
    """Transitions sampled uniformly from a small box around the start state."""
    d = cfg.raw["initial_data"]
    count = int(d["count"])
    lo, hi = _vec(d["state_lower"], "state_lower", 2), _vec(d["state_upper"], "state_upper", 2)
    ulo, uhi = _vec(d["input_lower"], "input_lower", 1), _vec(d["input_upper"], "input_upper", 1)
    X = rng.uniform(lo, hi, (count, 2))
    U = rng.uniform(ulo, uhi, (count, 1))
    plant = cfg.plant
    return [(x, u, plant(x, u)) for x, u in zip(X, U)]


ROW_FIELDS = ("episode", "k", "alpha", "alpha_dot", "u_l", "u", "intervened", "magnitude",
              "horizon", "status", "solve_ms")


@dataclass
class EpisodeLog:
    episode: int
    k_s: int
    rows: list = field(default_factory=list)
    final_state: np.ndarray | None = None
    objective: float = float("nan")
    violations: int = 0
    interventions: int = 0

    def summary(self) -> dict:
        return {"episode": self.episode, "k_s": self.k_s, "objective": self.objective,
                "violations": self.violations, "interventions": self.interventions}

    def states(self) -> np.ndarray:
        xs = [(r["alpha"], r["alpha_dot"]) for r in self.rows]
        return np.array(xs + [tuple(self.final_state)])

    def canonical(self) -> list:
        """Rows without wall-clock timing, for determinism comparisons."""
        return [{k: v for k, v in r.items() if k != "solve_ms"} for r in self.rows]


@dataclass
class BenchmarkResult:
    logs: list
    beliefs: list  # belief used in each episode, then the final one
    history: list  # (k_s, objective)
    mode: str
    threshold: float = 0.15

    @property
    def success_episode(self) -> int | None:
        for lg in self.logs:
            if lg.objective < self.threshold:
                return lg.episode
        return None

    def summary(self) -> dict:
        return {"mode": self.mode, "episodes": [lg.summary() for lg in self.logs],
                "success_episode": self.success_episode,
                "total_violations": int(sum(lg.violations for lg in self.logs)),
                "best_objective": min((lg.objective for lg in self.logs), default=float("nan"))}


class EpisodeRunner:
    """Steps one episode; shared by the batch loop and the HTTP service."""

    def __init__(self, cfg: RunConfig, belief: DynamicsBelief, mode: str, episode: int = 0,
                 k_s: int = -1, trace: list | None = None):
        self.cfg = cfg
        self.mode = mode
        self.plant = cfg.plant
        self.filter = None if mode == "unfiltered" else cfg.make_filter(belief, mode)
        self._solver_trace: list | None = [] if trace is not None else None
        if self.filter is not None:
            self.filter.trace = self._solver_trace
        self.state = None
        self.k = 0
        self.x = None
        self.log = EpisodeLog(episode, k_s)
        self.trace = trace
        self.transitions: list[tuple] = []

    def reset(self, x0) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float).ravel()
        if self.filter is not None:
            self.state = self.filter.start(x0)
        self.x = x0
        self.k = 0
        return x0

    def step(self, u_l):
        u_l = np.atleast_1d(np.asarray(u_l, dtype=float)).ravel()
        if self.filter is None:
            u = np.clip(u_l, -self.cfg.params.u_max, self.cfg.params.u_max)
            horizon, status, solve_ms, mag = 0, "unfiltered", 0.0, float(np.linalg.norm(u - u_l))
            intervened = mag > 1e-6
        else:
            u, dec, self.state = self.filter.filter_input(self.state, self.k, self.x, u_l)
            horizon, status, solve_ms = dec.horizon, dec.status, dec.solve_time * 1e3
            mag, intervened = dec.magnitude, dec.intervened
            if self.trace is not None:
                for rec in self._solver_trace:
                    self.trace.append({"episode": self.log.episode, "k": self.k, **rec})
                self._solver_trace.clear()
        x_next = self.plant(self.x, u)
        self.log.rows.append({
            "episode": self.log.episode, "k": self.k, "alpha": float(self.x[0]), "alpha_dot": float(self.x[1]),
            "u_l": float(u_l[0]), "u": float(u[0]), "intervened": bool(intervened), "magnitude": mag,
            "horizon": int(horizon), "status": status, "solve_ms": solve_ms,
        })
        self.transitions.append((self.x.copy(), u.copy(), x_next.copy()))
        self.x = x_next
        self.k += 1
        self.log.final_state = x_next
        return x_next, u, intervened, horizon, status

    def finish(self) -> EpisodeLog:
        lg = self.log
        states = lg.states()
        lg.violations = int(sum(not self.cfg.state_set.contains(s) for s in states))
        lg.interventions = int(sum(r["intervened"] for r in lg.rows))
        if len(lg.rows) == EPISODE_LENGTH:
            lg.objective = episode_objective(states)
        return lg


def run_benchmark(cfg: RunConfig, mode: str | None = None, seed: int | None = None,
                  episodes: int | None = None, trace: list | None = None,
                  stop_on_success: bool = False) -> BenchmarkResult:
    """Policy search over bang-bang switching times with belief updates between episodes."""
    mode = mode or cfg.mode
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    seed = cfg.seed if seed is None else seed
    episodes = cfg.episodes if episodes is None else episodes
    rng = np.random.default_rng(seed)
    data_rng, search_rng = rng.spawn(2)
    belief = update(cfg.prior(), initial_dataset(cfg, data_rng))
    ps = cfg.raw["policy_search"]
    history, logs, beliefs = [], [], []
    for ep in range(episodes):
        k_s = policy_search_step(history, search_rng, float(ps["std"]), tuple(ps["first_range"]),
                                 cfg.length - 1)
        policy = BangBangPolicy(k_s, cfg.params.u_max)
        runner = EpisodeRunner(cfg, belief, mode, ep, k_s, trace)
        runner.reset(cfg.x0)
        for k in range(cfg.length):
            runner.step(policy(k, runner.x))
        lg = runner.finish()
        logs.append(lg)
        beliefs.append(belief)
        history.append((k_s, lg.objective))
        belief = update(belief, runner.transitions)
        log.info("episode %d k_s=%d objective=%.4f violations=%d interventions=%d",
                 ep, k_s, lg.objective, lg.violations, lg.interventions)
        if stop_on_success and lg.objective < cfg.success_threshold:
            break
    beliefs.append(belief)
    return BenchmarkResult(logs, beliefs, history, mode, cfg.success_threshold)


def emit_plot_data(logs, path) -> Path:
    """One CSV with a row per applied input across all episodes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for lg in logs:
            for r in lg.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path
