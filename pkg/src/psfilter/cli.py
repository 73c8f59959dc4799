"""Command-line entry point: ``psfilter run|tune|verify-stab|serve|emit-plots``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .benchmark import ConfigError, RunConfig, emit_plot_data, run_benchmark, EpisodeLog
from .filter import InfeasibleStartError
from .model import DynamicsBelief, load_checkpoint, save_checkpoint, update
from .stabilizability import CertificateError, estimate_certificate
from .tuning import TuningError, tune_error_radius

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("psfilter")


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        over["mode"] = args.mode
    return cfg.replace(**over) if over else cfg


def _write_logs(logs, path: Path):
    data = [{"summary": lg.summary(), "rows": lg.rows, "final_state": np.asarray(lg.final_state).tolist()}
            for lg in logs]
    path.write_text(json.dumps(data, indent=1))


def _read_logs(path) -> list[EpisodeLog]:
    data = json.loads(Path(path).read_text())
    out = []
    for d in data:
        s = d["summary"]
        out.append(EpisodeLog(s["episode"], s["k_s"], d["rows"], np.array(d["final_state"]),
                              s["objective"], s["violations"], s["interventions"]))
    return out


def cmd_run(args) -> int:
    cfg = _load(args)
    trace = [] if args.trace else None
    result = run_benchmark(cfg, episodes=args.episodes, trace=trace)
    summary = result.summary()
    out = Path(args.out or cfg.raw["output"].get("log_dir") or "psfilter-out")
    out.mkdir(parents=True, exist_ok=True)
    _write_logs(result.logs, out / "episodes.json")
    emit_plot_data(result.logs, out / "trajectory.csv")
    save_checkpoint(result.beliefs[-1], out / "belief.json")
    if trace is not None:
        with open(out / "trace.jsonl", "w") as fh:
            for rec in trace:
                fh.write(json.dumps(rec) + "\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    for ep in summary["episodes"]:
        print(f"episode {ep['episode']:2d}  k_s={ep['k_s']:2d}  objective={ep['objective']:.4f}  "
              f"violations={ep['violations']}  interventions={ep['interventions']}")
    print(f"success episode: {summary['success_episode']}  total violations: {summary['total_violations']}")
    print(f"logs written to {out}")
    return EXIT_OK


def fitted_belief(cfg: RunConfig, count: int, seed: int) -> DynamicsBelief:
    """Belief fitted to transitions sampled uniformly over X x U (for offline analysis)."""
    rng = np.random.default_rng(seed)
    lo, hi = cfg.state_set.bounds()
    ulo, uhi = cfg.input_set.bounds()
    X = rng.uniform(lo, hi, (count, lo.size))
    U = rng.uniform(ulo, uhi, (count, ulo.size))
    plant = cfg.plant
    return update(cfg.prior(), [(x, u, plant(x, u)) for x, u in zip(X, U)])


def _grid(spec):
    lo, hi, n = spec
    from .benchmark import parse_angle
    return np.linspace(parse_angle(lo), parse_angle(hi), int(n))


def certificate_for(cfg: RunConfig, belief: DynamicsBelief):
    st = cfg.raw["stabilizability"]
    refs = [((a, w), (v,)) for a in _grid(st["angles"]) for w in _grid(st["rates"]) for v in _grid(st["inputs"])]
    return estimate_certificate(belief, refs, np.array(st["Qw"], dtype=float), np.array(st["Rw"], dtype=float),
                                successor_inputs=_grid(st["inputs"]), rng=np.random.default_rng(cfg.seed))


def cmd_verify_stab(args) -> int:
    cfg = _load(args)
    belief = load_checkpoint(args.belief) if args.belief else fitted_belief(cfg, args.samples, cfg.seed)
    try:
        cert = certificate_for(cfg, belief)
    except CertificateError as exc:
        print(f"certificate failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    d = cert.to_dict()
    print(f"rho      {cert.rho:.6f}  (schedule uses {cfg.schedule.rho})")
    print(f"c_l/c_u  {cert.c_l:.6g} / {cert.c_u:.6g}")
    print(f"delta    {cert.delta:.6g}")
    print(f"pi_max   {cert.pi_max:.6g}")
    print(f"rate-of-change margin c = {cert.margin_c:.6g}")
    print(f"max Riccati residual {cert.max_dare_residual:.3g} over {cert.n_references} references")
    print("--- certificate (json) ---")
    print(json.dumps(d))
    return EXIT_OK if cert.rho <= cfg.schedule.rho and cert.margin_c > 0 else EXIT_RUNTIME


def tuning_belief(cfg: RunConfig, source: str, checkpoint=None) -> DynamicsBelief:
    if checkpoint:
        return load_checkpoint(checkpoint)
    if source == "benchmark":
        return run_benchmark(cfg).beliefs[-1]
    data_rng, _ = np.random.default_rng(cfg.seed).spawn(2)
    from .benchmark import initial_dataset
    return update(cfg.prior(), initial_dataset(cfg, data_rng))


def cmd_tune(args) -> int:
    cfg = _load(args)
    t = cfg.raw["tuning"]
    belief = tuning_belief(cfg, t.get("belief", "initial"), args.belief)
    samples = args.samples if args.samples is not None else int(t["samples"])
    try:
        report = tune_error_radius(lambda r: cfg.make_filter(belief, "robust", r), belief, samples=samples,
                                   r0=float(t["r0"]), shrink=float(t["shrink"]), r_min=float(t["r_min"]),
                                   seed=cfg.seed, length=int(t["episode_length"]), u_max=cfg.params.u_max)
    except TuningError as exc:
        for line in (exc.report.lines() if exc.report else []):
            print(line)
        print(f"tuning failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for line in report.lines():
        print(line)
    print("--- report (json) ---")
    print(json.dumps({"confidence": {"radius": report.radius}, "tuning_report": report.to_dict()}))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    cfg = _load(args)
    app = create_app(cfg)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def cmd_emit_plots(args) -> int:
    if args.logs:
        logs = _read_logs(args.logs)
    else:
        logs = run_benchmark(_load(args), episodes=args.episodes).logs
    path = emit_plot_data(logs, args.out)
    print(f"wrote {sum(len(lg.rows) for lg in logs)} rows to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psfilter", description="Predictive safety filter toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mode=True):
        sp.add_argument("--config", help="JSON run configuration (defaults: pendulum benchmark)")
        sp.add_argument("--seed", type=int)
        if mode:
            sp.add_argument("--mode", choices=("nominal", "robust", "unfiltered"))

    sp = sub.add_parser("run", help="learning loop with the safety filter")
    common(sp)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--trace", action="store_true", help="write per-iteration solver records")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("tune", help="Monte Carlo tuning of the error-ball radius")
    common(sp, mode=False)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--belief", help="belief checkpoint to tune against")
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("verify-stab", help="estimate the incremental-stabilizability certificate")
    common(sp, mode=False)
    sp.add_argument("--belief", help="belief checkpoint (default: fit on uniform samples)")
    sp.add_argument("--samples", type=int, default=3000)
    sp.set_defaults(func=cmd_verify_stab)

    sp = sub.add_parser("serve", help="HTTP safe-environment service")
    common(sp)
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--host", default="127.0.0.1")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("emit-plots", help="write trajectory CSV for plotting")
    common(sp)
    sp.add_argument("--logs", help="episodes.json from a previous run (otherwise runs the benchmark)")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--out", default="trajectory.csv")
    sp.set_defaults(func=cmd_emit_plots)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleStartError as exc:
        print(f"infeasible start: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
