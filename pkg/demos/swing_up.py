"""Safe swing-up with learning: filtered vs. unfiltered policy search.

Runs the pendulum benchmark twice with the same seed, prints per-episode
objective, interventions and angle-constraint violations, then writes the
filtered trajectory as CSV for plotting.

    python demos/swing_up.py [--episodes 15] [--out swing_up.csv]
"""
import argparse

import numpy as np

from psfilter.benchmark import RunConfig, emit_plot_data, run_benchmark


def table(result):
    for lg in result.logs:
        peak = np.rad2deg(lg.states()[:, 0].max())
        print(f"  ep {lg.episode:2d}  k_s={lg.k_s:2d}  objective={lg.objective:7.3f}  "
              f"interventions={lg.interventions:2d}  violations={lg.violations:2d}  max angle={peak:6.1f} deg")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=15)
    ap.add_argument("--out", default="swing_up.csv")
    args = ap.parse_args()

    cfg = RunConfig.from_dict({})
    print("unfiltered:")
    table(run_benchmark(cfg, mode="unfiltered", episodes=args.episodes))
    print("robust filter:")
    filtered = run_benchmark(cfg, episodes=args.episodes)
    table(filtered)
    print(f"first success at episode {filtered.success_episode}")
    print(f"trajectory written to {emit_plot_data(filtered.logs, args.out)}")


if __name__ == "__main__":
    main()
