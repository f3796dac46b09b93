import math

import numpy as np
import pytest

import qtrack as q
from qtrack import filtering as F
from qtrack import operators as ops
from qtrack.errors import UsageError

from conftest import DT, INIT_1A, TRUTH
from test_filtering import mock_absent_parameter


def test_learning_rate_schedules():
    assert q.learning_rate_at(q.LearningRate(1e-4), 0.0) == 1e-4
    assert q.learning_rate_at(q.LearningRate(1e-4), 3e7) == 1e-4
    assert q.learning_rate_at(q.LearningRate(2e-3, "power-decay", t0=5.0, alpha=0.0), 123.0) == 2e-3
    lr = q.LearningRate(1e-4, "power-decay", t0=1e4, alpha=1.0)
    assert lr.at(1e4) == pytest.approx(5e-5, rel=1e-15)
    pw = q.LearningRate(kind="piecewise", times=(0.0, 10.0, 20.0), values=(1e-3, 5e-4, 1e-4))
    assert [pw.at(t) for t in (0.0, 9.99, 10.0, 25.0)] == [1e-3, 1e-3, 5e-4, 1e-4]
    assert pw.reference == 1e-3


def test_learning_rate_validation():
    with pytest.raises(UsageError):
        q.LearningRate(1e-4, kind="adam")
    with pytest.raises(UsageError):
        q.LearningRate(-1.0)
    with pytest.raises(UsageError):
        q.LearningRate(kind="piecewise", times=(1.0,), values=(1e-4,))
    with pytest.raises(UsageError):
        q.learning_rate_at(q.LearningRate(), -1.0)


def init_theta(model):
    return q.working_point(model, **INIT_1A)


def test_estimator_step_decomposition(model, record_factory):
    dys = record_factory(41)[:50]
    lr = q.LearningRate(1e-2)
    theta = init_theta(model)
    es = q.EstimatorState.initial(model, theta, lr)
    fs = F.FilterState.initial(model)
    for dy in dys:
        es = q.estimator_step(model, es, dy)
        # documented order: everything from the pre-step state at theta_k
        xis = [F.sensitivity_step(model, theta, fs, dy, j) for j in range(4)]
        grads = np.array([F.grad_increment(model, theta, fs, dy, j) for j in range(4)])
        fs = F.filter_step(model, theta, fs, dy)
        fs.xi = np.array(xis)
        theta = model.params.clamp(theta + 1e-2 * grads)
        np.testing.assert_allclose(es.theta, theta, rtol=1e-14)
        np.testing.assert_allclose(es.fs.rho, fs.rho, atol=1e-15)
        np.testing.assert_allclose(es.fs.xi, fs.xi, atol=1e-14)


def test_compiled_estimator_matches_reference(model, record_factory):
    dys = record_factory(42)[:400]
    lr = q.LearningRate(1e-2)
    es = q.EstimatorState.initial(model, init_theta(model), lr)
    thetas, logliks = [], []
    for dy in dys:
        thetas.append(es.theta)
        logliks.append(es.fs.loglik)
        es = q.estimator_step(model, es, dy)
    log = q.run_online(model, dys, init_theta(model), lr, decimation=1)
    np.testing.assert_allclose(log.theta, thetas, rtol=1e-12)
    np.testing.assert_allclose(log.final.theta, es.theta, rtol=1e-12)
    np.testing.assert_allclose(log.final.fs.rho, es.fs.rho, atol=1e-13)


def test_zero_learning_rate_freezes_estimate(model, record_factory):
    theta0 = init_theta(model)
    log = q.run_online(model, record_factory(43), theta0, q.LearningRate(0.0), decimation=100)
    assert np.all(log.theta == theta0)
    np.testing.assert_allclose(log.theta_natural, np.tile([1.3, 0.6, 0.3, 0.15], (len(log), 1)), rtol=1e-15)


def test_absent_parameter_stays_put(record_factory):
    m = mock_absent_parameter()
    log = q.run_online(m, record_factory(44)[:5000], np.array([1.3, 0.25]), q.LearningRate(1e-2))
    assert np.all(log.theta[:, 1] == 0.25)
    assert np.ptp(log.theta[:, 0]) > 0


def test_free_mask(model, record_factory):
    free = np.array([True, False, True, False])
    log = q.run_online(model, record_factory(45)[:5000], init_theta(model), q.LearningRate(1e-2), free=free)
    assert np.all(log.theta[:, ~free] == init_theta(model)[~free])
    assert np.all(np.ptp(log.theta[:, free], axis=0) > 0)


def test_zero_information_freeze():
    m_true = q.two_level_example(1.0, 0.2, 0.0, 0.1, DT)
    dys = q.simulate(m_true, q.TruthSchedule.static((1.0, 0.0, 0.2, 0.1)), 100_000, seed=46,
                     decimation=100_000).dy_all
    m = q.two_level_example(1.0, 0.2, 0.0, 0.1, DT, estimate=("omega", "delta", "kappa"))
    theta0 = q.working_point(m, omega=1.3, delta=0.3, kappa=0.15)
    log = q.run_online(m, dys, theta0, q.LearningRate(1e-4), decimation=1000)
    assert np.all(log.theta == theta0) and np.all(log.final.theta == theta0)
    assert np.all(log.loglik == 0.0) and log.final.fs.loglik == 0.0


def test_bound_safety_with_aggressive_rate(model, record_factory):
    dys = record_factory(47, 1_000_000)
    log = q.run_online(model, dys, init_theta(model), q.LearningRate(0.05), decimation=1)
    eta, kappa = log.column("eta"), log.column("kappa")
    assert np.all((eta >= 0) & (eta <= 1)) and np.all(kappa >= 0)
    # the rate is large enough that the bounds are actually hit
    assert eta.max() == 1.0 or eta.min() == 0.0 or kappa.min() == 0.0


@pytest.mark.parametrize("steps,d", [(10, 1), (1000, 100), (1001, 100), (999, 7)])
def test_log_rows_and_time_axis(model, record_factory, steps, d):
    log = q.run_online(model, record_factory(48)[:steps], init_theta(model), q.LearningRate(1e-4), decimation=d)
    assert len(log) == math.ceil(steps / d)
    np.testing.assert_array_equal(log.step, np.arange(0, steps, d))
    np.testing.assert_allclose(log.gamma_t, 1e-4 * log.step * DT, rtol=1e-15)
    np.testing.assert_allclose(log.t, log.step * DT)


def test_decimated_rows_equal_full_rows(model, record_factory):
    dys = record_factory(49)
    full = q.run_online(model, dys, init_theta(model), q.LearningRate(1e-3), decimation=1)
    dec = q.run_online(model, dys, init_theta(model), q.LearningRate(1e-3), decimation=100)
    idx = dec.step
    for name in ("dy", "innovation", "gamma", "loglik", "theta", "rho"):
        np.testing.assert_array_equal(getattr(dec, name), getattr(full, name)[idx], err_msg=name)


def test_chunked_feed_is_identical(model, record_factory):
    dys = record_factory(50)
    whole = q.run_online(model, dys, init_theta(model), q.LearningRate(1e-3), decimation=9)
    est = q.OnlineEstimator(model, init_theta(model), q.LearningRate(1e-3), decimation=9)
    for piece in np.array_split(dys, [1, 2, 700, 701, 9000]):
        est.feed(piece)
    part = est.result()
    np.testing.assert_array_equal(part.theta, whole.theta)
    np.testing.assert_array_equal(part.step, whole.step)
    assert part.final.fs.loglik == whole.final.fs.loglik


def test_logged_innovation_and_prestep_values(model, record_factory):
    dys = record_factory(51)[:100]
    log = q.run_online(model, dys, init_theta(model), q.LearningRate(1e-3), decimation=1)
    assert log.loglik[0] == 0.0
    np.testing.assert_allclose(log.rho[0], ops.maximally_mixed(2))
    for k in (0, 10, 99):
        inn = F.innovation(model, log.theta[k], log.rho[k], dys[k])
        assert log.innovation[k] == pytest.approx(inn, abs=1e-15)
    np.testing.assert_array_equal(log.dy, dys)


def test_empty_record_rejected(model):
    with pytest.raises(UsageError):
        q.run_online(model, np.array([]), init_theta(model), q.LearningRate())


def _degenerate_setup():
    kappa = 0.1
    m = q.two_level_example(0.0, 0.0, 1.0, kappa, DT, estimate=("omega",), trace_preserving=False)
    bad = (1 - 0.5 * kappa * DT) / math.sqrt(kappa)
    dys = np.array([0.0] * 5 + [bad] + [0.0] * 4)
    return m, dys, ops.ket_projector(1)


def test_degenerate_update_keeps_partial_log():
    m, dys, rho0 = _degenerate_setup()
    with pytest.raises(q.EstimationError) as info:
        q.run_online(m, dys, np.array([0.0]), q.LearningRate(0.0), rho0=rho0)
    assert info.value.step == 5
    assert len(info.value.partial) == 6
    assert isinstance(info.value.cause, q.DegenerateUpdateError)


def test_restart_on_degenerate():
    m, dys, rho0 = _degenerate_setup()
    est = q.OnlineEstimator(m, np.array([0.0]), q.LearningRate(0.0), rho0=rho0, restart_on_degenerate=True)
    est.feed(dys)
    assert est.restarts == [5]
    assert est.step == 10
    np.testing.assert_allclose(est.rho, ops.maximally_mixed(2), atol=1e-12)


def test_initial_estimate_outside_bounds(model):
    with pytest.raises(UsageError):
        q.run_online(model, np.zeros(3), np.array([1.0, 1.5, 0.0, 0.1]), q.LearningRate())


def test_true_parameter_is_near_stationary(model, record_factory):
    # started at the truth with a small rate, the estimate stays close
    log = q.run_online(model, record_factory(52, 200_000), q.working_point(model, **TRUTH),
                       q.LearningRate(1e-4), decimation=1000)
    np.testing.assert_allclose(log.theta_natural[-1], [1.0, 0.7, 0.2, 0.1], atol=0.05)
