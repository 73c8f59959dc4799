import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from psfilter.benchmark import RunConfig, run_benchmark
from psfilter.plant import BangBangPolicy, episode_objective, policy_search_step
from psfilter.service import create_app


@pytest.fixture()
def client():
    return TestClient(create_app(RunConfig.from_dict({})))


def test_reset_and_rest_at_equilibrium(client):
    assert client.post("/reset", json={"x0": [0.0, 0.0]}).json() == {"x": [0.0, 0.0]}
    r = client.post("/step", json={"u_l": [0.0]}).json()
    assert r["x"] == [0.0, 0.0] and r["intervened"] is False and r["horizon"] == 20
    state = client.get("/state").json()
    assert state["k"] == 1 and state["mode"] == "full"


def test_error_codes(client):
    assert client.post("/step", json={"u_l": [0.0]}).status_code == 409
    assert client.post("/reset", json={"x0": [0.0]}).status_code == 400
    assert client.post("/reset", json={"x0": "up"}).status_code == 400
    assert client.post("/reset", content=b"{").status_code == 400
    client.post("/reset", json={"x0": [0.0, 0.0]})
    assert client.post("/step", json={"u_l": [0.0, 0.1, 0.2]}).status_code == 400
    assert client.post("/step", json={}).status_code == 400


def test_infeasible_start_is_422():
    c = TestClient(create_app(RunConfig.from_dict({"confidence": {"radius": 1e-5}})))
    assert c.post("/reset", json={"x0": [0.0, 0.0]}).status_code == 422


def test_replay_matches_batch_run():
    cfg = RunConfig.from_dict({})
    episodes = 2
    batch = run_benchmark(cfg, episodes=episodes)
    client = TestClient(create_app(cfg))
    _, search_rng = np.random.default_rng(cfg.seed).spawn(2)
    ps = cfg.raw["policy_search"]
    history = []
    for ep in range(episodes):
        k_s = policy_search_step(history, search_rng, float(ps["std"]), tuple(ps["first_range"]), cfg.length - 1)
        policy = BangBangPolicy(k_s, cfg.params.u_max)
        x = np.array(client.post("/reset", json={"x0": cfg.x0.tolist()}).json()["x"])
        states = [x]
        for k in range(cfg.length):
            x = np.array(client.post("/step", json={"u_l": policy(k, x).tolist()}).json()["x"])
            states.append(x)
        rows = client.get("/log").json()["rows"]
        assert json.dumps(rows) == json.dumps(batch.logs[ep].canonical())
        history.append((k_s, episode_objective(np.array(states))))
        assert client.post("/learn").json()["transitions"] == cfg.length
