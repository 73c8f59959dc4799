"""JSON-over-HTTP safe environment: a filtered plant behind reset/step/learn."""
from __future__ import annotations

import threading

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .benchmark import EpisodeRunner, RunConfig, initial_dataset
from .filter import InfeasibleStartError
from .model import update


class ResetBody(BaseModel):
    x0: list[float]


class StepBody(BaseModel):
    u_l: list[float]


class Session:
    """Single session; requests are serialized by a lock."""

    def __init__(self, cfg: RunConfig, seed: int | None = None, mode: str | None = None):
        self.cfg = cfg
        self.mode = mode or cfg.mode
        seed = cfg.seed if seed is None else seed
        data_rng, _ = np.random.default_rng(seed).spawn(2)
        self.belief = update(cfg.prior(), initial_dataset(cfg, data_rng))
        self.runner: EpisodeRunner | None = None
        self.episode = -1
        self.buffer: list[tuple] = []
        self.lock = threading.Lock()

    def _close_episode(self):
        if self.runner is not None:
            self.buffer.extend(self.runner.transitions)
            self.runner.transitions = []

    def reset(self, x0) -> dict:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (self.cfg.features.n_state,):
            raise HTTPException(400, f"x0 must have {self.cfg.features.n_state} entries")
        if not np.all(np.isfinite(x0)):
            raise HTTPException(400, "x0 must be finite")
        self._close_episode()
        runner = EpisodeRunner(self.cfg, self.belief, self.mode, self.episode + 1)
        try:
            runner.reset(x0)
        except InfeasibleStartError as exc:
            raise HTTPException(422, str(exc)) from exc
        self.runner = runner
        self.episode += 1
        return {"x": x0.tolist()}

    def step(self, u_l) -> dict:
        if self.runner is None:
            raise HTTPException(409, "call /reset before /step")
        u_l = np.asarray(u_l, dtype=float)
        if u_l.shape != (self.cfg.features.n_input,):
            raise HTTPException(400, f"u_l must have {self.cfg.features.n_input} entries, got {u_l.size}")
        if not np.all(np.isfinite(u_l)):
            raise HTTPException(400, "u_l must be finite")
        x, u, intervened, horizon, status = self.runner.step(u_l)
        return {"x": x.tolist(), "u_applied": u.tolist(), "intervened": bool(intervened),
                "horizon": int(horizon), "status": status}

    def state(self) -> dict:
        if self.runner is None:
            return {"x": None, "mode": None, "k": 0, "episode": self.episode}
        fmode = None if self.runner.state is None else self.runner.state.mode
        return {"x": self.runner.x.tolist(), "mode": fmode, "k": self.runner.k, "episode": self.episode}

    def learn(self) -> dict:
        self._close_episode()
        n = len(self.buffer)
        self.belief = update(self.belief, self.buffer)
        self.buffer = []
        return {"transitions": n, "n_obs": int(self.belief.n_obs)}

    def log_rows(self) -> dict:
        if self.runner is None:
            return {"rows": []}
        return {"rows": [{k: v for k, v in r.items() if k != "solve_ms"} for r in self.runner.log.rows]}


def create_app(cfg: RunConfig, seed: int | None = None, mode: str | None = None) -> FastAPI:
    app = FastAPI(title="psfilter safe environment")
    session = Session(cfg, seed, mode)
    app.state.session = session

    @app.exception_handler(RequestValidationError)
    async def bad_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": f"malformed request body: {exc.errors()}"})

    @app.post("/reset")
    def reset(body: ResetBody):
        with session.lock:
            return session.reset(body.x0)

    @app.post("/step")
    def step(body: StepBody):
        with session.lock:
            return session.step(body.u_l)

    @app.get("/state")
    def state():
        with session.lock:
            return session.state()

    @app.post("/learn")
    def learn():
        with session.lock:
            return session.learn()

    @app.get("/log")
    def episode_log():
        with session.lock:
            return session.log_rows()

    return app
