"""Drive the filter over HTTP, the way an external RL loop would.

Uses an in-process test client so no server needs to be started; against a
running ``psfilter serve`` the same requests work with ``httpx.Client``.
"""
import numpy as np
from fastapi.testclient import TestClient

from psfilter.benchmark import RunConfig
from psfilter.service import create_app

client = TestClient(create_app(RunConfig.from_dict({})))

for episode in range(3):
    x = client.post("/reset", json={"x0": [0.0, 0.0]}).json()["x"]
    pushed = 0
    for k in range(70):
        # naive learner: always push hard in the direction of motion
        u_l = 0.6 if x[1] >= 0 else -0.6
        r = client.post("/step", json={"u_l": [u_l]}).json()
        x = r["x"]
        pushed += r["intervened"]
    print(f"episode {episode}: final angle {np.rad2deg(x[0]):7.1f} deg, {pushed} interventions")
    print("  learned from", client.post("/learn").json()["transitions"], "transitions")

print(client.get("/state").json())
