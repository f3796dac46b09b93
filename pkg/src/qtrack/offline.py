"""Batch maximum likelihood over a fixed measurement record.

Every parameter evaluation re-propagates the filter from the initial state;
nothing is cached across parameter points.  The record is never modified.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import operators as ops
from .errors import DegenerateUpdateError, PositivityError, QTrackError, UsageError
from .estimator import LearningRate, learning_rate_at
from .model import DiffusiveModel

log = logging.getLogger(__name__)


class AscentError(QTrackError, ArithmeticError):
    """Non-finite likelihood or gradient during offline ascent."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


def _record(dys):
    dys = np.asarray(dys, dtype=float)
    if dys.ndim != 1 or dys.size == 0:
        raise UsageError("measurement record must be a non-empty 1-d array")
    # a read-only view: the kernels never write to it, and neither may callers
    view = dys.view()
    view.setflags(write=False)
    return view


def _propagate(model, theta, dys, rho0, want_grad, strict=False):
    theta = model.params.check(np.array(theta, dtype=float))
    dys = _record(dys)
    n = model.dim
    rho = ops.maximally_mixed(n) if rho0 is None else ops.renormalize(rho0)
    rho = np.ascontiguousarray(rho, dtype=np.complex128)
    xi = np.zeros((model.p, n, n), dtype=np.complex128)
    state = np.zeros(2)
    gsum = np.zeros(model.p)
    status, k = _kernels.fixed_chunk(
        (0,) * n, dys, 0, theta, rho, xi, state, want_grad, gsum, *model.kernel_arrays(), strict,
    )
    if status == _kernels.DEGENERATE:
        raise DegenerateUpdateError(f"degenerate filter update at step {k}", step=k, trace=state[1])
    if status == _kernels.NOT_PSD:
        raise PositivityError(f"filter lost positivity at step {k}", step=k, min_eigenvalue=state[1])
    return state[0], gsum


def loglik_total(model: DiffusiveModel, theta, dys, rho0=None) -> float:
    """Total log-likelihood ``sum_k log Tr K_{dy_k}(rho_k)`` at fixed ``theta``."""
    return float(_propagate(model, theta, dys, rho0, False)[0])


def grad_total(model: DiffusiveModel, theta, dys, rho0=None, return_loglik: bool = False):
    """Exact gradient of :func:`loglik_total` by forward sensitivity propagation."""
    ll, g = _propagate(model, theta, dys, rho0, True)
    return (g, float(ll)) if return_loglik else g


def finite_diff_grad(model: DiffusiveModel, theta, dys, eps: float = 1e-5, rho0=None,
                     loglik=loglik_total) -> np.ndarray:
    """Central differences of ``loglik`` on the same record.

    ``loglik(model, theta, dys, rho0)`` may be replaced, e.g. by an analytic
    test function.
    """
    if not eps > 0:
        raise UsageError("eps must be positive")
    theta = np.array(theta, dtype=float)
    model.params.check(theta)
    lo, hi = model.params.working_bounds()
    if np.any(theta - eps < lo) or np.any(theta + eps > hi):
        raise UsageError(f"theta +/- {eps} leaves the parameter bounds")
    g = np.zeros(model.p)
    for j in range(model.p):
        e = np.zeros(model.p)
        e[j] = eps
        g[j] = (loglik(model, theta + e, dys, rho0) - loglik(model, theta - e, dys, rho0)) / (2 * eps)
    return g


def relative_error(a, b) -> np.ndarray:
    """Componentwise ``|a - b| / |b|`` (absolute error where ``b == 0``)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    den = np.where(b != 0, np.abs(b), 1.0)
    return np.abs(a - b) / den


def default_tol(loglik: float, steps: int) -> float:
    return 1e-3 * (1.0 + abs(loglik) / steps)


@dataclass
class BatchResult:
    """Iterates of an offline ascent."""

    theta: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    step_size: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    @property
    def theta_final(self) -> np.ndarray:
        return self.theta[-1]

    def rows(self):
        for i, (th, ll, gn, gs) in enumerate(zip(self.theta, self.loglik, self.grad_norm, self.step_size)):
            yield i, th, ll, gn, gs


def offline_ascent(model: DiffusiveModel, theta0, dys, schedule: LearningRate = None, max_iter: int = 100,
                   tol: float = None, backtrack: bool = True, max_halvings: int = 30,
                   rho0=None) -> BatchResult:
    """Full-record gradient ascent ``theta_{i+1} = theta_i + gamma_i grad l_T``.

    ``schedule`` is evaluated at the iteration index.  With ``backtrack``,
    a step that lowers the likelihood is retried with half the step size;
    the reduction carries over to later iterations and is relaxed by a
    factor 2 after each accepted step, never exceeding the schedule.
    Without ``backtrack`` the plain fixed-schedule rule is used.  Stops once the gradient infinity-norm is
    at most ``tol`` (default ``1e-3 (1 + |l_T| / T)``).
    """
    dys = _record(dys)
    schedule = schedule or LearningRate(1e-3)
    theta = model.params.check(np.array(theta0, dtype=float)).copy()
    res = BatchResult()
    g, ll = grad_total(model, theta, dys, rho0, return_loglik=True)
    scale = 1.0
    for i in range(max_iter + 1):
        if not (np.isfinite(ll) and np.all(np.isfinite(g))):
            raise AscentError(f"non-finite likelihood/gradient at iteration {i}: l={ll}, g={g}", res)
        gnorm = float(np.max(np.abs(g)))
        res.theta.append(theta.copy())
        res.loglik.append(ll)
        res.grad_norm.append(gnorm)
        res.iterations = i
        thr = default_tol(ll, len(dys)) if tol is None else tol
        if gnorm <= thr:
            res.converged = True
            res.step_size.append(0.0)
            break
        if i == max_iter:
            res.step_size.append(0.0)
            break
        gamma = learning_rate_at(schedule, float(i)) * scale
        for _ in range(max_halvings + 1):
            cand = model.params.clamp(theta + gamma * g)
            try:
                g_new, ll_new = grad_total(model, cand, dys, rho0, return_loglik=True)
                ok = np.isfinite(ll_new)
            except (DegenerateUpdateError, PositivityError):
                ok, ll_new = False, -np.inf
            if not backtrack:
                if not ok:
                    raise AscentError(f"update failed at iteration {i}", res)
                break
            if ok and ll_new >= ll:
                break
            gamma *= 0.5
            scale *= 0.5
        else:
            log.info("backtracking exhausted at iteration %d", i)
            res.step_size.append(0.0)
            break
        res.step_size.append(gamma)
        theta, g, ll = cand, g_new, ll_new
        scale = min(1.0, 2.0 * scale)
    return res
