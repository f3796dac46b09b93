"""Quantum filter, filter sensitivities and likelihood increments.

These are the readable single-step versions of the recursions; long runs
go through the compiled loops in :mod:`qtrack.estimator` and
:mod:`qtrack.offline`, which are tested against the functions here.

All quantities on the right-hand side of an update are taken at the
pre-update step: ``rho_k``, ``xi_{j,k}`` and the current parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import operators as ops
from .errors import DegenerateUpdateError, UsageError
from .model import DiffusiveModel, apply_partial_kraus, apply_partial_kraus_deriv


@dataclass
class FilterState:
    """Filter ``rho``, sensitivities ``xi[j]``, log-likelihood and step count."""

    rho: np.ndarray
    xi: np.ndarray
    loglik: float = 0.0
    step: int = 0
    meta: dict = field(default_factory=dict, repr=False)

    @classmethod
    def initial(cls, model: DiffusiveModel, rho0=None) -> "FilterState":
        """Maximally mixed filter (unless ``rho0`` given) and zero sensitivities."""
        n = model.dim
        rho = ops.maximally_mixed(n) if rho0 is None else ops.renormalize(rho0)
        if rho.shape != (n, n):
            raise UsageError(f"initial state shape {rho.shape} does not match model dimension {n}")
        return cls(rho, np.zeros((model.p, n, n), dtype=np.complex128))

    def copy(self) -> "FilterState":
        return FilterState(self.rho.copy(), self.xi.copy(), self.loglik, self.step)


def _trace_k(model, theta, rho, dy):
    k = apply_partial_kraus(model, theta, dy, rho)
    tr = float(np.trace(k).real)
    if not tr > ops.DEGENERATE_TRACE:
        raise DegenerateUpdateError(f"Tr K = {tr:.3e} at filter step", trace=tr)
    return k, tr


def filter_step(model: DiffusiveModel, theta, fs: FilterState, dy: float, strict: bool = False) -> FilterState:
    """Advance the filter state by one increment.

    Only ``rho`` and ``step`` change; sensitivities are advanced separately
    by :func:`sensitivity_step` from the same pre-update state.
    """
    k, _ = _trace_k(model, theta, fs.rho, dy)
    try:
        rho = ops.renormalize(k, strict=strict)
    except DegenerateUpdateError as exc:
        exc.step = fs.step
        raise
    return FilterState(rho, fs.xi.copy(), fs.loglik, fs.step + 1)


def _numerator(model, theta, fs, dy, j):
    dk = apply_partial_kraus_deriv(model, theta, j, dy, fs.rho)
    return dk + apply_partial_kraus(model, theta, dy, fs.xi[j])


def sensitivity_step(model: DiffusiveModel, theta, fs: FilterState, dy: float, j: int) -> np.ndarray:
    """Updated sensitivity ``xi_j`` of the filter with respect to parameter ``j``.

    ``xi' = N / Tr K(rho) - Tr(N) K(rho) / Tr K(rho)^2`` with
    ``N = dK/dtheta_j (rho) + K(xi_j)``.
    """
    k, tr = _trace_k(model, theta, fs.rho, dy)
    num = _numerator(model, theta, fs, dy, j)
    return num / tr - np.trace(num).real * k / tr**2


def innovation(model: DiffusiveModel, theta, rho, dy: float) -> float:
    """Measurement increment minus its filter prediction."""
    l = model.lindblad(theta)
    s = ops.expectation(l + ops.dag(l), rho)
    return float(dy - model.sqrt_efficiency(theta) * s * model.dt)


def loglik_increment(model: DiffusiveModel, theta, rho, dy: float, form: str = "exact") -> float:
    """Log-likelihood increment of one measurement increment.

    ``form="exact"`` returns ``log Tr K_dy(rho)``; ``form="ito"`` returns the
    continuous-time expansion ``sqrt(eta) s (dy - sqrt(eta) s dt / 2)`` with
    ``s = Tr((L + L^+) rho)``.
    """
    if form == "exact":
        _, tr = _trace_k(model, theta, rho, dy)
        return float(np.log(tr))
    if form == "ito":
        l = model.lindblad(theta)
        se = model.sqrt_efficiency(theta)
        s = ops.expectation(l + ops.dag(l), rho)
        return float(se * s * (dy - 0.5 * se * s * model.dt))
    raise UsageError(f"unknown log-likelihood form {form!r}")


def grad_increment(model: DiffusiveModel, theta, fs: FilterState, dy: float, j: int) -> float:
    """Gradient of the log-likelihood increment along parameter ``j``.

    Equals ``Tr(dK/dtheta_j (rho) + K(xi_j)) / Tr K(rho)``.
    """
    _, tr = _trace_k(model, theta, fs.rho, dy)
    return float(np.trace(_numerator(model, theta, fs, dy, j)).real / tr)


def continuous_grad_increment(model: DiffusiveModel, theta, fs: FilterState, dy: float, j: int) -> float:
    """Continuous-time counterpart of :func:`grad_increment`.

    ``d/dtheta_j [sqrt(eta) Tr((L + L^+) rho)] * dI``, with the filter
    dependence entering through ``xi_j``.  When ``L`` and ``eta`` do not
    depend on parameter ``j`` this is ``sqrt(eta) Tr((L + L^+) xi_j) dI``.
    """
    j = model._j(j)
    l = model.lindblad(theta)
    dl = model.lindblad_grad(theta, j)
    se = model.sqrt_efficiency(theta)
    dse = model.sqrt_efficiency_grad(theta, j)
    x = l + ops.dag(l)
    dmean = (dse * ops.expectation(x, fs.rho) + se * ops.expectation(dl + ops.dag(dl), fs.rho)
             + se * ops.expectation(x, fs.xi[j]))
    return float(dmean * innovation(model, theta, fs.rho, dy))


def advance(model: DiffusiveModel, theta, fs: FilterState, dy: float, strict: bool = False):
    """One complete filter step.

    Returns ``(new_state, gradient_increments, innovation)``.  Every
    quantity is computed from the pre-update state, then the new state is
    assembled.
    """
    theta = model.params.check(theta)
    try:
        xis = np.array([sensitivity_step(model, theta, fs, dy, j) for j in range(model.p)])
        grads = np.array([grad_increment(model, theta, fs, dy, j) for j in range(model.p)])
        dl = loglik_increment(model, theta, fs.rho, dy)
        nxt = filter_step(model, theta, fs, dy, strict=strict)
    except DegenerateUpdateError as exc:
        exc.step = fs.step
        raise
    nxt.xi = xis.reshape(fs.xi.shape)
    nxt.loglik = fs.loglik + dl
    return nxt, grads, innovation(model, theta, fs.rho, dy)


@dataclass
class FilterAudit:
    """Worst-case invariant violations over every step of a filter run."""

    steps: int
    trace_defect: float
    hermiticity_defect: float
    min_eigenvalue: float
    xi_trace: float
    xi_hermiticity_defect: float
    rho: np.ndarray = field(repr=False, default=None)
    xi: np.ndarray = field(repr=False, default=None)

    def problems(self, trace_tol=ops.TRACE_TOL, herm_tol=ops.HERMITIAN_TOL, psd_tol=ops.PSD_TOL) -> list:
        out = []
        if self.trace_defect > trace_tol:
            out.append(f"trace defect {self.trace_defect:.3e}")
        if self.hermiticity_defect > herm_tol:
            out.append(f"hermiticity defect {self.hermiticity_defect:.3e}")
        if self.min_eigenvalue < -psd_tol:
            out.append(f"smallest eigenvalue {self.min_eigenvalue:.3e}")
        if self.xi_trace > trace_tol:
            out.append(f"sensitivity trace {self.xi_trace:.3e}")
        if self.xi_hermiticity_defect > herm_tol:
            out.append(f"sensitivity hermiticity defect {self.xi_hermiticity_defect:.3e}")
        return out


def audit_filter(model: DiffusiveModel, theta, dys, rho0=None, chunk: int = 1 << 16) -> FilterAudit:
    """Run filter and sensitivities at fixed ``theta``, checking invariants after every step."""
    theta = model.params.check(np.array(theta, dtype=float))
    dys = np.ascontiguousarray(dys, dtype=float)
    fs = FilterState.initial(model, rho0)
    rho = np.ascontiguousarray(fs.rho, dtype=np.complex128)
    xi = np.ascontiguousarray(fs.xi)
    worst = np.array([0.0, 0.0, np.inf, 0.0, 0.0])
    nt = (0,) * model.dim
    for start in range(0, len(dys), chunk):
        status, k = _kernels.audit_chunk(nt, dys[start:start + chunk], start, theta, rho, xi, worst,
                                         *model.kernel_arrays())
        if status != _kernels.OK:
            raise DegenerateUpdateError(f"degenerate filter update at step {k}", step=k)
    return FilterAudit(len(dys), *(float(v) for v in worst), rho=rho, xi=xi)
