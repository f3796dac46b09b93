import math

import numpy as np
import pytest

import qtrack as q
from qtrack.errors import UsageError
from qtrack.offline import default_tol, relative_error

import oracle
from conftest import DT, INIT_1A, TRUTH, truth_tuple
from test_filtering import mock_absent_parameter


@pytest.fixture(scope="module")
def long_record(model):
    return q.simulate(model, q.TruthSchedule.static(truth_tuple()), 200_000, seed=1, decimation=200_000).dy_all


def test_zero_efficiency_loglik_is_zero(rng):
    m = q.two_level_example(1.0, 0.2, 0.0, 0.1, DT, estimate=("omega", "delta", "kappa"))
    dys = rng.normal(size=5000) * math.sqrt(DT)
    for nat in ([1.0, 0.2, 0.1], [2.5, -0.4, 0.9]):
        assert q.loglik_total(m, m.params.to_working(nat), dys) == 0.0


def test_single_step_loglik(model, theta_true):
    k = oracle.kraus(truth_tuple(), DT, 0.05, 0.5 * oracle.I2)
    assert q.loglik_total(model, theta_true, [0.05]) == pytest.approx(math.log(np.trace(k).real), abs=1e-15)


def test_true_omega_beats_perturbed(model, theta_true, record_factory):
    wins = 0
    for seed in range(1, 11):
        dys = record_factory(seed)
        l0 = q.loglik_total(model, theta_true, dys)
        worse = [q.loglik_total(model, q.working_point(model, **{**TRUTH, "omega": w}), dys) for w in (0.7, 1.3)]
        wins += l0 > max(worse)
    assert wins >= 9


def test_gradient_matches_finite_differences_at_random_points(model, record_factory, rng):
    dys = record_factory(61)
    for _ in range(5):
        theta = model.params.to_working(rng.uniform([0.5, 0.3, -0.5, 0.05], [1.5, 0.95, 0.5, 0.3]))
        g = q.grad_total(model, theta, dys)
        fd = q.finite_diff_grad(model, theta, dys, eps=1e-5)
        assert np.all(relative_error(g, fd) <= 1e-4), (theta, g, fd)


def test_absent_parameter_gradient_is_zero(record_factory):
    m = mock_absent_parameter()
    g = q.grad_total(m, np.array([1.1, 0.4]), record_factory(62)[:5000])
    assert g[1] == 0.0 and g[0] != 0.0


def test_score_at_truth_is_centred(model, theta_true, record_factory):
    g = np.array([q.grad_total(model, theta_true, record_factory(s)) for s in range(1, 21)])
    se = g.std(axis=0, ddof=1) / math.sqrt(len(g))
    assert np.all(np.abs(g.mean(axis=0)) <= 2 * se)


def test_eps_robustness(model, theta_true, record_factory):
    dys = record_factory(63)
    fds = [q.finite_diff_grad(model, theta_true, dys, eps=e) for e in (1e-4, 1e-5, 1e-6)]
    for a in fds[1:]:
        assert np.all(relative_error(a, fds[0]) <= 1e-4)


def test_finite_diff_on_linear_mock(model):
    a = np.array([0.3, -1.7, 2.5, 1e-3])

    def linear(_model, theta, _dys, _rho0):
        return float(a @ theta + 4.0)

    fd = q.finite_diff_grad(model, np.array([1.0, 0.5, 0.0, 0.5]), [0.0], eps=1e-5, loglik=linear)
    np.testing.assert_allclose(fd, a, rtol=0, atol=1e-10)


def test_finite_diff_rejects_bound_violation(model):
    with pytest.raises(UsageError):
        q.finite_diff_grad(model, model.params.to_working([1.0, 0.0, 0.2, 0.1]), [0.0], eps=1e-5)
    with pytest.raises(UsageError):
        q.finite_diff_grad(model, model.params.to_working([1.0, 0.5, 0.2, 0.1]), [0.0], eps=0.0)


def test_record_is_not_modified(model, theta_true, record_factory):
    dys = record_factory(64).copy()
    before = dys.copy()
    q.loglik_total(model, theta_true, dys)
    q.grad_total(model, theta_true, dys)
    q.offline_ascent(model, theta_true, dys, max_iter=2)
    np.testing.assert_array_equal(dys, before)
    assert dys.flags.writeable
    frozen = before.copy()
    frozen.setflags(write=False)
    assert q.loglik_total(model, theta_true, frozen) == q.loglik_total(model, theta_true, before)


def test_empty_record_rejected(model, theta_true):
    with pytest.raises(UsageError):
        q.loglik_total(model, theta_true, [])


def test_ascent_at_stationary_point_returns_immediately(model, theta_true, record_factory):
    res = q.offline_ascent(model, theta_true, record_factory(65), tol=1e6)
    assert res.converged and res.iterations == 0
    np.testing.assert_array_equal(res.theta_final, theta_true)


def test_zero_schedule_keeps_theta(model, record_factory):
    theta0 = q.working_point(model, **INIT_1A)
    res = q.offline_ascent(model, theta0, record_factory(66)[:2000], q.LearningRate(0.0), max_iter=5,
                           backtrack=False)
    assert res.iterations == 5
    for th in res.theta:
        np.testing.assert_array_equal(th, theta0)


def test_default_tolerance():
    assert default_tol(-2000.0, 1000) == pytest.approx(3e-3)


@pytest.fixture(scope="module")
def long_ascent(model, long_record):
    theta0 = q.working_point(model, **INIT_1A)
    return q.offline_ascent(model, theta0, long_record, q.LearningRate(1e-3), max_iter=100)


def test_ascent_on_long_record(model, long_ascent):
    res = long_ascent
    assert np.all(np.diff(res.loglik) >= 0)
    assert res.grad_norm[-1] < 0.05 * res.grad_norm[0]
    omega = model.params.to_natural(res.theta_final)[0]
    assert omega == pytest.approx(1.0, rel=0.05)


@pytest.mark.xfail(strict=True, reason="delta's spread at 2e5 steps is ~60% of its value; this record's MLE is ~0.24")
def test_ascent_on_long_record_delta_within_five_percent(model, long_ascent):
    assert model.params.to_natural(long_ascent.theta_final)[2] == pytest.approx(0.2, rel=0.05)
