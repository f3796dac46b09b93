import math

import numpy as np
import pytest

import qtrack as q
from qtrack import filtering as F
from qtrack import operators as ops
from qtrack.errors import DegenerateUpdateError

import oracle
from conftest import DT, TRUTH, truth_tuple


def random_tangent(rng, scale=0.1):
    a = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    h = a + a.conj().T
    return scale * (h - 0.5 * np.trace(h) * np.eye(2))


def random_state(model, rng):
    return F.FilterState(oracle.random_density(rng), np.array([random_tangent(rng) for _ in range(model.p)]))


def mock_absent_parameter(dt=DT):
    """Two-level model plus a parameter ``g`` that enters nothing."""
    base = q.two_level_example(1.0, 0.2, 0.7, 0.1, dt, estimate=("omega",))
    spec = q.ParamSpec(("omega", "g"))
    return q.DiffusiveModel(spec, dt, base.h0, np.stack([base.h_coef[0], np.zeros((2, 2))]),
                            base.l0, np.zeros((2, 2, 2)), base.sqrt_eta0, np.zeros(2))


def final_filter(model, theta, dys):
    est = q.OnlineEstimator(model, theta, q.LearningRate(0.0))
    est.feed(dys)
    return est.state().fs


def test_filter_step_matches_dense_reference(model, theta_true):
    fs = F.FilterState.initial(model)
    out = F.filter_step(model, theta_true, fs, 0.05)
    k = oracle.kraus(truth_tuple(), DT, 0.05, 0.5 * oracle.I2)
    np.testing.assert_allclose(out.rho, k / np.trace(k).real, atol=1e-15)
    assert out.step == 1
    np.testing.assert_array_equal(out.xi, fs.xi)


def test_long_filter_matches_dense_reference(model, theta_true, record_factory):
    dys = record_factory(31, 20_000)[:3000]
    theta = q.working_point(model, omega=1.2, eta=0.5, delta=0.1, kappa=0.2)
    rho_ref, ll_ref = oracle.filter_run((1.2, 0.5, 0.1, 0.2), DT, dys)
    fs = final_filter(model, theta, dys)
    np.testing.assert_allclose(fs.rho, rho_ref, atol=1e-12)
    assert fs.loglik == pytest.approx(ll_ref, rel=1e-10, abs=1e-12)
    assert q.loglik_total(model, theta, dys) == pytest.approx(ll_ref, rel=1e-10, abs=1e-12)


def test_compiled_recursion_matches_single_step_functions(model, record_factory, rng):
    dys = record_factory(32, 20_000)[:200]
    theta = q.working_point(model, omega=1.3, eta=0.6, delta=0.3, kappa=0.15)
    fs = F.FilterState.initial(model)
    gsum = np.zeros(4)
    for dy in dys:
        fs, g, _ = F.advance(model, theta, fs, dy)
        gsum += g
    ref = final_filter(model, theta, dys)
    np.testing.assert_allclose(ref.rho, fs.rho, atol=1e-14)
    np.testing.assert_allclose(ref.xi, fs.xi, atol=1e-12)
    assert ref.loglik == pytest.approx(fs.loglik, abs=1e-12)
    np.testing.assert_allclose(q.grad_total(model, theta, dys), gsum, rtol=1e-11, atol=1e-12)


def test_sensitivity_fd_replay(model, record_factory):
    dys = record_factory(33)
    theta = q.working_point(model, **TRUTH)
    fs = final_filter(model, theta, dys)
    eps = 1e-5
    for j, name in enumerate(model.params.names):
        e = np.zeros(4)
        e[j] = eps
        fd = (final_filter(model, theta + e, dys).rho - final_filter(model, theta - e, dys).rho) / (2 * eps)
        # relative to the largest entry: individual entries may sit near zero
        err = np.max(np.abs(fs.xi[j] - fd)) / np.max(np.abs(fd))
        assert err <= 1e-4, name


def test_sensitivity_is_traceless_and_hermitian(model, rng):
    theta = model.params.to_working([1.1, 0.5, 0.3, 0.2])
    for _ in range(50):
        fs = random_state(model, rng)
        dy = rng.normal() * 0.2
        for j in range(4):
            assert ops.validate_tangent(F.sensitivity_step(model, theta, fs, dy, j), trace_tol=1e-13) == []


def test_sensitivity_is_affine_in_xi(model, rng):
    theta = model.params.to_working([1.1, 0.5, 0.3, 0.2])
    rho = oracle.random_density(rng)
    x1, x2 = random_tangent(rng), random_tangent(rng)
    a, b = 0.7, -1.9
    dy = 0.04

    def step(x):
        xi = np.zeros((4, 2, 2), dtype=complex)
        xi[2] = x
        return F.sensitivity_step(model, theta, F.FilterState(rho, xi), dy, 2)

    base = step(np.zeros((2, 2)))
    lhs = step(a * x1 + b * x2) - base
    rhs = a * (step(x1) - base) + b * (step(x2) - base)
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_absent_parameter_has_zero_sensitivity_and_gradient(rng):
    m = mock_absent_parameter()
    theta = np.array([1.0, 0.3])
    fs = F.FilterState(oracle.random_density(rng), np.zeros((2, 2, 2), dtype=complex))
    np.testing.assert_array_equal(F.sensitivity_step(m, theta, fs, 0.02, 1), np.zeros((2, 2)))
    assert F.grad_increment(m, theta, fs, 0.02, 1) == 0.0


def test_innovation(model, theta_true, rng):
    assert F.innovation(model, theta_true, ops.maximally_mixed(2), 0.031) == 0.031
    m0 = q.two_level_example(1.0, 0.2, 0.0, 0.1, DT)
    assert F.innovation(m0, q.working_point(m0, **{**TRUTH, "eta": 0.0}), oracle.random_density(rng), 0.031) == 0.031
    rho = oracle.random_density(rng)
    assert F.innovation(model, theta_true, rho, 0.02) == pytest.approx(
        0.02 - oracle.signal_mean(truth_tuple(), rho) * DT, abs=1e-16)


def test_loglik_increment_special_cases(model, theta_true, rng):
    m0 = q.two_level_example(1.0, 0.2, 0.0, 0.1, DT)
    th0 = q.working_point(m0, **{**TRUTH, "eta": 0.0})
    rho = oracle.random_density(rng)
    assert F.loglik_increment(m0, th0, rho, 0.3) == pytest.approx(0.0, abs=1e-15)
    assert F.loglik_increment(m0, th0, rho, 0.3, form="ito") == 0.0
    assert F.loglik_increment(model, theta_true, ops.maximally_mixed(2), 0.3, form="ito") == 0.0
    k = oracle.kraus(truth_tuple(), DT, 0.05, rho)
    assert F.loglik_increment(model, theta_true, rho, 0.05) == pytest.approx(math.log(np.trace(k).real), abs=1e-15)


def _ito_gap(dt, rng, n=2000):
    m = q.two_level_example(1.0, 0.2, 0.7, 0.1, dt)
    th = q.working_point(m, **TRUTH)
    gaps = []
    for _ in range(n):
        rho = oracle.random_density(rng)
        dy = oracle.signal_mean(truth_tuple(), rho) * dt + rng.normal() * math.sqrt(dt)
        gaps.append(F.loglik_increment(m, th, rho, dy) - F.loglik_increment(m, th, rho, dy, form="ito"))
    return np.array(gaps)


def test_ito_and_exact_loglik_agree_to_first_order(rng):
    g2, g3 = _ito_gap(1e-2, rng), _ito_gap(1e-3, rng)
    # pointwise gap is O(dt): one decade of dt buys about one decade of gap
    assert 5 < np.max(np.abs(g2)) / np.max(np.abs(g3)) < 20
    assert np.max(np.abs(g3)) < 2e-3
    # the O(dt) part is driven by (dy^2 - dt) and averages out
    assert abs(g2.mean()) < 4 * g2.std() / math.sqrt(len(g2))


@pytest.mark.xfail(strict=True, reason="pointwise gap is O(dt), about 6e-3 at dt=1e-2")
def test_ito_and_exact_loglik_literal_threshold(rng):
    assert np.max(np.abs(_ito_gap(1e-2, rng, n=10_000))) <= 1e-4


def _continuous_gap(dt, rng, n=1000):
    m = q.two_level_example(1.0, 0.2, 0.7, 0.1, dt)
    th = q.working_point(m, **TRUTH)
    gaps = []
    for _ in range(n):
        fs = random_state(m, rng)
        dy = oracle.signal_mean(truth_tuple(), fs.rho) * dt + rng.normal() * math.sqrt(dt)
        gaps.append([F.grad_increment(m, th, fs, dy, j) - F.continuous_grad_increment(m, th, fs, dy, j)
                     for j in range(4)])
    return np.abs(np.array(gaps))


def test_grad_increment_continuous_limit(rng):
    g2, g3 = _continuous_gap(1e-2, rng), _continuous_gap(1e-3, rng)
    ratio = g2.max(axis=0) / g3.max(axis=0)
    assert np.all(ratio > 4) and np.all(ratio < 25)
    assert np.all(g3.max(axis=0) < 1e-2)


@pytest.mark.xfail(strict=True, reason="gap is O(dt) with an O(1) constant, about 1e-2 at dt=1e-2")
def test_grad_increment_continuous_literal_threshold(rng):
    assert np.all(_continuous_gap(1e-2, rng).max(axis=0) <= 1e-3)


def test_degenerate_update_raises():
    kappa = 0.1
    m = q.two_level_example(0.0, 0.0, 1.0, kappa, DT, trace_preserving=False)
    theta = q.working_point(m, omega=0.0, eta=1.0, delta=0.0, kappa=kappa)
    dy = (1 - 0.5 * kappa * DT) / math.sqrt(kappa)  # annihilates |1>
    fs = F.FilterState(ops.ket_projector(1), np.zeros((4, 2, 2), dtype=complex), step=17)
    with pytest.raises(DegenerateUpdateError):
        F.filter_step(m, theta, fs, dy)
    with pytest.raises(DegenerateUpdateError) as info:
        F.advance(m, theta, fs, dy)
    assert info.value.step == 17


def test_audit_of_mismatched_filter(model, record_factory):
    theta = q.working_point(model, omega=1.3, eta=0.6, delta=0.3, kappa=0.15)
    audit = q.audit_filter(model, theta, record_factory(34, 100_000))
    assert audit.steps == 100_000
    assert audit.problems() == []
