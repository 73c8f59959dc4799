import numpy as np
import pytest

from psfilter.benchmark import RunConfig
from psfilter.cli import certificate_for, fitted_belief
from psfilter.model import DynamicsBelief, FeatureMap
from psfilter.plant import PendulumParams
from psfilter.stabilizability import (CertificateError, NotStabilizableError, dare_residual, dare_solve,
                                      decrease_margin, estimate_certificate, linearize)

P_SCALAR = (0.25 + np.sqrt(0.25 ** 2 + 4)) / 2  # root of P^2 - 0.25 P - 1 = 0


def scalar_belief(a=0.5, b=1.0):
    return DynamicsBelief.prior(FeatureMap.linear(1, 1), noise_var=1e-8).with_mean(np.array([[a], [b]]))


def test_dare_trivial_and_scalar():
    K, P = dare_solve([[0.0]], [[1.0]], [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(1.0, abs=1e-12) and K[0, 0] == pytest.approx(0.0, abs=1e-12)
    K, P = dare_solve([[0.5]], [[1.0]], [[1.0]], [[1.0]])
    assert P[0, 0] == pytest.approx(P_SCALAR, abs=1e-10)
    assert P_SCALAR == pytest.approx(1.13278, abs=1e-5)
    assert abs(0.5 + K[0, 0]) < 1


def test_dare_lyapunov_case():
    rng = np.random.default_rng(4)
    for _ in range(20):
        A = rng.normal(size=(3, 3))
        A *= rng.uniform(0.1, 0.95) / np.max(np.abs(np.linalg.eigvals(A)))
        Q = np.diag(rng.uniform(0.5, 2.0, 3))
        K, P = dare_solve(A, np.zeros((3, 1)), Q, [[1.0]])
        # oracle: truncated series sum_k (A')^k Q A^k
        ref, term = np.zeros((3, 3)), Q.copy()
        for _ in range(2000):
            ref += term
            term = A.T @ term @ A
        np.testing.assert_allclose(P, ref, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(K, 0.0, atol=1e-12)
        assert dare_residual(A, np.zeros((3, 1)), Q, [[1.0]], P) < 1e-8


def test_dare_random_stabilizable_pairs():
    rng = np.random.default_rng(5)
    for _ in range(50):
        A, B = rng.normal(size=(2, 2)), rng.normal(size=(2, 1))
        K, P = dare_solve(A, B, np.eye(2), [[1.0]])
        assert dare_residual(A, B, np.eye(2), [[1.0]], P) < 1e-8
        assert np.max(np.abs(np.linalg.eigvals(A + B @ K))) < 1 - 1e-9


def test_dare_rejects_unstabilizable_and_bad_weights():
    with pytest.raises(NotStabilizableError):
        dare_solve([[2.0]], [[0.0]], [[1.0]], [[1.0]])
    with pytest.raises(ValueError):
        dare_solve([[0.5]], [[1.0]], [[0.0]], [[1.0]])


def test_linearize_linear_model():
    lin = linearize(scalar_belief(), [0.3], [0.7])
    assert lin.A[0, 0] == pytest.approx(0.5) and lin.B[0, 0] == pytest.approx(1.0)


def test_cubic_feature_jacobian():
    fm = FeatureMap.separable(1, 1)
    jac = fm.jacobian_z(np.array([0.0, 0.2]))
    col = [t for t in fm.terms()].index("u0^3")
    assert jac[col, 1] == pytest.approx(3 * 0.04)
    coef = np.zeros((fm.n_features, 1))
    coef[col] = 2.5
    belief = DynamicsBelief.prior(fm, noise_var=1e-8).with_mean(coef)
    assert linearize(belief, [0.0], [0.2]).B[0, 0] == pytest.approx(3 * 0.04 * 2.5)


@pytest.fixture(scope="module")
def pendulum_setup():
    cfg = RunConfig.from_dict({})
    belief = fitted_belief(cfg, 3000, cfg.seed)
    return cfg, belief


def test_linearize_pendulum_fit(pendulum_setup):
    _, belief = pendulum_setup
    p = PendulumParams()
    lin = linearize(belief, [0.0, 0.0], [0.0])
    fd = linearize(belief, [0.0, 0.0], [0.0], method="fd")
    np.testing.assert_allclose(lin.A, fd.A, rtol=1e-4, atol=1e-9)
    np.testing.assert_allclose(lin.B, fd.B, rtol=1e-4, atol=1e-9)
    # the position update is exact in the feature class
    np.testing.assert_allclose(lin.A[0], [1.0, p.h], atol=1e-4)
    # damping and input terms are too, up to leakage of the sine fit residual over a finite sample
    assert lin.A[1, 1] == pytest.approx(1 - p.h * p.eta / p.inertia, rel=1e-2)
    assert lin.B[1, 0] == pytest.approx(p.h / p.inertia, rel=1e-2)
    # only the sine is approximated; its slope at the origin is close to -h g / l
    assert lin.A[1, 0] == pytest.approx(-p.h * p.g / p.l, rel=0.05)


def test_linearize_unknown_method():
    with pytest.raises(ValueError):
        linearize(scalar_belief(), [0.0], [0.0], method="complex-step")


def test_linear_model_certificate_matches_closed_form():
    K = -0.5 * P_SCALAR / (1 + P_SCALAR)
    refs = [([z], [v]) for z in np.linspace(-1, 1, 5) for v in (-0.5, 0.0, 0.5)]
    cert = estimate_certificate(scalar_belief(), refs)
    assert cert.rho == pytest.approx((0.5 + K) ** 2, rel=1e-9)
    assert cert.c_l == pytest.approx(P_SCALAR) and cert.c_u == pytest.approx(P_SCALAR)
    assert cert.pi_max == pytest.approx(abs(K))
    # constant P gives lam = 1, so the margin is Q_r = Qw + K' Rw K
    assert cert.margin_c == pytest.approx(1 + K ** 2)
    assert cert.delta == pytest.approx(1.0)


def test_unstabilizable_certificate_fails():
    with pytest.raises(CertificateError):
        estimate_certificate(scalar_belief(2.0, 0.0), [([0.0], [0.0])])


def test_decrease_margin_examples():
    P = np.eye(2)
    assert decrease_margin(P, P, 3 * np.eye(2)) == pytest.approx(3.0)
    # lam = 2: 2 Q - P
    assert decrease_margin(P, 2 * P, np.eye(2)) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def pendulum_certificate(pendulum_setup):
    cfg, belief = pendulum_setup
    return certificate_for(cfg, belief)


def test_pendulum_certificate(pendulum_setup, pendulum_certificate):
    cfg, _ = pendulum_setup
    cert = pendulum_certificate
    assert cert.rho <= cfg.schedule.rho
    assert cert.margin_c > 0
    assert cert.max_dare_residual < 1e-8
    assert cert.c_l <= cert.c_u


def test_pendulum_certificate_resampling(pendulum_setup, pendulum_certificate):
    cfg, belief = pendulum_setup
    cert = pendulum_certificate
    st = cfg.raw["stabilizability"]
    from psfilter.cli import _grid
    refs = [((a, w), (v,)) for a in _grid(st["angles"]) for w in _grid(st["rates"]) for v in _grid(st["inputs"])]
    again = estimate_certificate(belief, refs, np.array(st["Qw"]), np.array(st["Rw"]),
                                 n_pairs=10 * cert.n_pairs, deltas=(cert.delta,),
                                 rng=np.random.default_rng(123))
    assert again.rho <= cert.rho + 0.01
