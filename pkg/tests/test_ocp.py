import numpy as np
import pytest

from oracles import GridOracle, random_toy
from psfilter.benchmark import RunConfig, initial_dataset
from psfilter.geometry import ErrorBall, Polytope, TerminalSet, TighteningSchedule
from psfilter.model import ContractError, DynamicsBelief, FeatureMap, update
from psfilter.ocp import FEAS_TOL, OcpSpec, shift_warm_start, solve, transcribe


@pytest.fixture(scope="module")
def pendulum():
    cfg = RunConfig.from_dict({})
    belief = update(cfg.prior(), initial_dataset(cfg, np.random.default_rng(3)))
    return cfg, belief


def scalar_spec(x0, u_l, horizon=1, u_bound=1.0, term=0.1, mode="nominal"):
    """x+ = x + u on X = [-1, 1]."""
    belief = DynamicsBelief.prior(FeatureMap.linear(1, 1), noise_var=1e-8).with_mean(np.array([[1.0], [1.0]]))
    extra = {"error_ball": ErrorBall(0.05, 1)} if mode == "robust" else {}
    return OcpSpec(belief, Polytope.box([-1.0], [1.0]), Polytope.box([-u_bound], [u_bound]),
                   TerminalSet(Polytope.box([-term], [term])), TighteningSchedule(0.99, 0.02, 5),
                   horizon, np.array([x0]), np.array([u_l]), mode, **extra)


def test_scalar_example_projects_onto_terminal_band():
    plan = solve(transcribe(scalar_spec(0.5, 0.0)))
    assert plan.ok
    assert plan.first_input[0] == pytest.approx(-0.4, abs=1e-6)
    assert plan.objective == pytest.approx(0.16, abs=1e-6)


def test_scalar_example_longer_horizon_keeps_proposal():
    plan = solve(transcribe(scalar_spec(0.5, 0.0, horizon=2)))
    assert plan.ok and plan.objective < 1e-10
    assert abs(plan.states[-1, 0]) <= 0.1 + 1e-6


def test_infeasible_instance_reports_slack():
    plan = solve(transcribe(scalar_spec(0.5, 0.0, u_bound=0.2)))
    assert plan.status == "infeasible"
    # min-max violation balances the normalized rows 4 + 10 v and -1 - 5 v at v = -1/3
    assert plan.first_input[0] == pytest.approx(-1 / 3, abs=1e-6)
    assert plan.slack == pytest.approx(4 / 3, rel=1e-6)


def test_robust_scalar_tightening_applies():
    # terminal band shrinks by eps_1 = 0.02 at horizon 1
    plan = solve(transcribe(scalar_spec(0.5, 0.0, mode="robust")))
    assert plan.ok
    assert plan.first_input[0] == pytest.approx(-0.5 + 0.1 * 0.98, abs=1e-6)


def test_constraint_row_counts(pendulum):
    cfg, belief = pendulum
    filt = cfg.make_filter(belief)
    for N in (1, 2, 7, 20):
        prog = transcribe(filt.spec(N, [0.0, 0.0], [0.3]))
        n_x, n_u, n_t = cfg.state_set.n_rows, cfg.input_set.n_rows, cfg.terminal.n_rows
        assert prog.n_con == n_x * (N - 1) + n_u * N + N + n_t
        assert prog.n_var == N
        assert transcribe(filt.spec(N, [0.0, 0.0], [0.3]), fixed_v0=True).n_var == N - 1


@pytest.mark.parametrize("mode", ["robust", "nominal"])
def test_jacobian_matches_central_differences(pendulum, mode):
    cfg, belief = pendulum
    rng = np.random.default_rng(11 if mode == "robust" else 12)
    lo, hi = cfg.state_set.bounds()
    region = Polytope.box([-2.0, -6.0, -0.6], [2.0, 6.0, 0.6])
    errors = []
    while len(errors) < 100:
        N = int(rng.integers(1, 21))
        x0 = rng.uniform(lo, [3.2, 4.0])
        spec = OcpSpec(belief, cfg.state_set, cfg.input_set, cfg.terminal, cfg.schedule, N, x0,
                       rng.uniform(-0.6, 0.6, 1), mode, cfg.error_ball() if mode == "robust" else None,
                       confident_region=None if mode == "robust" else region)
        prog = transcribe(spec, fixed_v0=bool(rng.integers(0, 2)) and N > 1)
        v = rng.uniform(-0.6, 0.6, prog.n_var)
        # random inputs can drive the polynomial model off to overflow; those points say nothing
        if not np.all(np.abs(prog.rollout(v)) < 20.0):
            continue
        _, J, _ = prog.constraints(v)
        J_fd = prog.constraints_fd(v)
        errors.append(np.linalg.norm(J - J_fd) / max(np.linalg.norm(J_fd), 1e-12))
    assert np.all(np.isfinite(errors))
    assert max(errors) < 1e-4


def test_solver_agrees_with_grid_oracle():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 50:
        spec = random_toy(rng)
        feasible, objective, hmin = GridOracle(spec).solve()
        # instances whose feasibility hinges on the oracle's grid resolution are redrawn
        if abs(hmin) < 1e-3:
            continue
        plan = solve(transcribe(spec))
        assert plan.ok == feasible, (spec, plan.status, hmin)
        if feasible:
            assert abs(plan.objective - objective) <= 1e-3
        checked += 1


def test_solutions_are_sound_and_dynamically_consistent():
    rng = np.random.default_rng(5)
    solved = 0
    for _ in range(40):
        spec = random_toy(rng)
        plan = solve(transcribe(spec))
        if not plan.ok:
            continue
        solved += 1
        oracle = GridOracle(spec)
        assert oracle.max_violation(plan.inputs.reshape(1, -1))[0] <= FEAS_TOL
        mu = spec.x0.copy()
        for i in range(plan.horizon):
            np.testing.assert_allclose(plan.states[i], mu, atol=1e-12)
            mu = np.concatenate([mu, plan.inputs[i]]) @ spec.belief.mean
        np.testing.assert_allclose(plan.states[-1], mu, atol=1e-12)
    assert solved >= 10


def test_trace_records(pendulum):
    cfg, belief = pendulum
    trace = []
    solve(transcribe(cfg.make_filter(belief).spec(20, [0.1, 0.0], [0.6])), trace=trace)
    assert trace and {"iter", "objective", "max_violation"} <= set(trace[0])


def test_shift_warm_start(pendulum):
    cfg, belief = pendulum
    plan = solve(transcribe(cfg.make_filter(belief).spec(5, [0.0, 0.0], [0.2])))
    np.testing.assert_array_equal(shift_warm_start(plan), plan.inputs[1:])
    one = solve(transcribe(cfg.make_filter(belief).spec(1, [0.0, 0.0], [0.0])))
    with pytest.raises(ContractError):
        shift_warm_start(one)


def test_spec_contract(pendulum):
    cfg, belief = pendulum
    filt = cfg.make_filter(belief)
    with pytest.raises(ContractError):
        filt.spec(0, [0.0, 0.0], [0.0])
    with pytest.raises(ContractError):
        filt.spec(21, [0.0, 0.0], [0.0])
    with pytest.raises(ContractError):
        filt.spec(5, [0.0], [0.0])
    with pytest.raises(ContractError):
        OcpSpec(belief, cfg.state_set, cfg.input_set, cfg.terminal, cfg.schedule, 5, np.zeros(2), [0.0])
