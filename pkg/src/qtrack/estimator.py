"""Online maximum-likelihood estimation by stochastic gradient ascent.

Each measurement increment advances the filter and its sensitivities at
the current estimate and then moves the estimate along the gradient of
that increment's log-likelihood::

    theta_{k+1} = clamp(theta_k + gamma_k * grad_k)

The compiled :class:`OnlineEstimator` is the production path;
:func:`estimator_step` is the same recursion composed from the
single-step functions of :mod:`qtrack.filtering`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import operators as ops
from .errors import DegenerateUpdateError, PositivityError, UsageError
from .filtering import FilterState, advance
from .model import DiffusiveModel

log = logging.getLogger(__name__)

_LR_KINDS = {"constant": 0, "power-decay": 1, "piecewise": 2}


@dataclass(frozen=True)
class LearningRate:
    """Step-size schedule ``gamma(t)``.

    kind
        ``"constant"``: ``gamma0``.
        ``"power-decay"``: ``gamma0 * (1 + t/t0) ** -alpha``.
        ``"piecewise"``: ``values[i]`` from ``times[i]`` onwards
        (``times[0]`` must be 0).
    """

    gamma0: float = 1e-4
    kind: str = "constant"
    t0: float = 1.0
    alpha: float = 0.0
    times: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in _LR_KINDS:
            raise UsageError(f"unknown learning-rate kind {self.kind!r}; use one of {sorted(_LR_KINDS)}")
        if self.kind == "piecewise":
            if not self.times or len(self.times) != len(self.values):
                raise UsageError("piecewise learning rate needs matching, non-empty times and values")
            if self.times[0] != 0 or any(b <= a for a, b in zip(self.times, self.times[1:])):
                raise UsageError("piecewise times must start at 0 and increase")
            if any(v < 0 for v in self.values):
                raise UsageError("learning rates must be non-negative")
        elif self.gamma0 < 0:
            raise UsageError("learning rate must be non-negative")
        if self.kind == "power-decay" and not self.t0 > 0:
            raise UsageError("power-decay needs t0 > 0")

    def at(self, t: float) -> float:
        return learning_rate_at(self, t)

    @property
    def reference(self) -> float:
        """Rate used for the ``gamma * t`` time axis."""
        return self.values[0] if self.kind == "piecewise" else self.gamma0

    def kernel_args(self):
        params = np.array([self.gamma0, self.t0, self.alpha])
        times = np.array(self.times if self.times else (0.0,), dtype=float)
        values = np.array(self.values if self.values else (self.gamma0,), dtype=float)
        return _LR_KINDS[self.kind], params, times, values


def learning_rate_at(lr: LearningRate, t: float) -> float:
    """Evaluate the schedule at time ``t >= 0``."""
    if t < 0:
        raise UsageError("time must be non-negative")
    kind, params, times, values = lr.kernel_args()
    return float(_kernels.learning_rate(kind, params, times, values, float(t)))


@dataclass
class EstimatorState:
    """Filter state plus the current estimate in working coordinates."""

    fs: FilterState
    theta: np.ndarray
    lr: LearningRate
    free: np.ndarray = None

    @property
    def step(self) -> int:
        return self.fs.step

    @classmethod
    def initial(cls, model, theta0, lr, rho0=None, free=None) -> "EstimatorState":
        theta0 = model.params.check(np.array(theta0, dtype=float))
        free = np.ones(model.p, dtype=bool) if free is None else np.asarray(free, dtype=bool)
        return cls(FilterState.initial(model, rho0), theta0.copy(), lr, free)


def estimator_step(model: DiffusiveModel, es: EstimatorState, dy: float, strict: bool = False) -> EstimatorState:
    """Filter, sensitivities, then parameter update, all at ``theta_k``."""
    gamma = learning_rate_at(es.lr, es.fs.step * model.dt)
    fs, grads, _ = advance(model, es.theta, es.fs, dy, strict=strict)
    free = np.ones(model.p, dtype=bool) if es.free is None else es.free
    theta = np.where(free, es.theta + gamma * grads, es.theta)
    return EstimatorState(fs, model.params.clamp(theta), es.lr, es.free)


@dataclass
class EstimateLog:
    """Decimated record of an online run (pre-step values at each logged step).

    ``theta`` is in working coordinates; :attr:`theta_natural` converts.
    """

    names: tuple
    dt: float
    decimation: int
    gamma_ref: float
    step: np.ndarray
    dy: np.ndarray
    innovation: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray
    loglik: np.ndarray
    rho: np.ndarray
    sqrt_mask: np.ndarray = field(repr=False, default=None)
    final: EstimatorState = field(repr=False, default=None)

    @property
    def t(self) -> np.ndarray:
        return self.step * self.dt

    @property
    def gamma_t(self) -> np.ndarray:
        return self.gamma_ref * self.t

    @property
    def theta_natural(self) -> np.ndarray:
        return np.where(self.sqrt_mask, self.theta**2, self.theta)

    def __len__(self):
        return len(self.step)

    def column(self, name: str) -> np.ndarray:
        return self.theta_natural[:, self.names.index(name)]

    def bloch(self) -> np.ndarray:
        return np.array([ops.bloch_vector(r) for r in self.rho]) if self.rho.shape[1] == 2 else None


class EstimationError(DegenerateUpdateError):
    """Numerical failure during an online run; carries the partial log."""

    def __init__(self, message, step, partial, cause=None):
        super().__init__(message, step=step)
        self.partial = partial
        self.cause = cause


class OnlineEstimator:
    """Streaming online estimator backed by the compiled recursion.

    Feed measurement increments in chunks of any size; the result does not
    depend on the chunking.

    Parameters
    ----------
    model : DiffusiveModel
    theta0 : array_like
        Initial estimate in working coordinates.
    lr : LearningRate
    rho0 : array_like, optional
        Initial filter state (maximally mixed by default).
    decimation : int
        Log every ``decimation``-th step.
    strict : bool
        Treat a smallest eigenvalue below ``-1e-8`` as an error.
    restart_on_degenerate : bool
        On a degenerate update, reset the filter to the maximally mixed
        state with zero sensitivities, skip the increment and continue.
        Off by default.
    free : array_like of bool, optional
        Parameters to update (all by default).
    """

    def __init__(self, model, theta0, lr, rho0=None, decimation=1, strict=False,
                 restart_on_degenerate=False, free=None):
        if decimation < 1:
            raise UsageError("decimation must be >= 1")
        self.model = model
        self.lr = lr
        self.decimation = int(decimation)
        self.strict = bool(strict)
        self.restart_on_degenerate = restart_on_degenerate
        st = EstimatorState.initial(model, theta0, lr, rho0, free)
        self.theta = st.theta
        self.free = st.free
        self.rho = np.ascontiguousarray(st.fs.rho)
        self.xi = np.ascontiguousarray(st.fs.xi)
        self._state = np.zeros(2)
        self.step = 0
        self.restarts = []
        self._lo, self._hi = model.params.working_bounds()
        self._lr_args = lr.kernel_args()
        self._nt = (0,) * model.dim
        self._chunks = []

    @property
    def loglik(self) -> float:
        return float(self._state[0])

    def state(self) -> EstimatorState:
        fs = FilterState(self.rho.copy(), self.xi.copy(), self.loglik, self.step)
        return EstimatorState(fs, self.theta.copy(), self.lr, self.free.copy())

    def feed(self, dys) -> None:
        dys = np.ascontiguousarray(dys, dtype=float)
        start = 0
        while start < len(dys):
            start = self._feed(dys, start)

    def _feed(self, dys, start):
        seg = dys[start:]
        d = self.decimation
        first = (-self.step) % d
        rows = 0 if first >= len(seg) else (len(seg) - 1 - first) // d + 1
        n, p = self.model.dim, self.model.p
        log_theta = np.zeros((rows, p))
        log_rho = np.zeros((rows, n, n), dtype=np.complex128)
        log_state = np.zeros((rows, 5))
        kind, params, times, values = self._lr_args
        status, k, nlog = _kernels.online_chunk(
            self._nt, seg, self.step, self.theta, self.rho, self.xi, self._state, self.free,
            self._lo, self._hi, kind, params, times, values, *self.model.kernel_arrays(),
            d, self.strict, log_theta, log_rho, log_state,
        )
        self._chunks.append((log_theta[:nlog], log_rho[:nlog], log_state[:nlog]))
        if status == _kernels.OK:
            self.step = k
            return len(dys)
        done = k - self.step
        self.step = k
        if status == _kernels.DEGENERATE and self.restart_on_degenerate:
            log.warning("degenerate filter update at step %d; restarting filter", k)
            self.restarts.append(k)
            self.rho[...] = ops.maximally_mixed(n)
            self.xi[...] = 0.0
            self.step = k + 1
            return start + done + 1
        if status == _kernels.DEGENERATE:
            cause = DegenerateUpdateError(f"Tr K = {self._state[1]:.3e}", step=k, trace=self._state[1])
            msg = f"degenerate filter update at step {k}"
        else:
            cause = PositivityError(f"smallest eigenvalue {self._state[1]:.3e}", step=k,
                                    min_eigenvalue=self._state[1])
            msg = f"filter lost positivity at step {k}"
        raise EstimationError(msg, k, self.result(), cause)

    def result(self) -> EstimateLog:
        n, p = self.model.dim, self.model.p
        if self._chunks:
            th = np.concatenate([c[0] for c in self._chunks])
            rh = np.concatenate([c[1] for c in self._chunks])
            stt = np.concatenate([c[2] for c in self._chunks])
        else:
            th, rh, stt = np.zeros((0, p)), np.zeros((0, n, n), complex), np.zeros((0, 5))
        return EstimateLog(
            names=self.model.params.names,
            dt=self.model.dt,
            decimation=self.decimation,
            gamma_ref=self.lr.reference,
            step=stt[:, 0].astype(np.int64),
            loglik=stt[:, 1],
            dy=stt[:, 2],
            innovation=stt[:, 3],
            gamma=stt[:, 4],
            theta=th,
            rho=rh,
            sqrt_mask=self.model.params.sqrt_mask,
            final=self.state(),
        )


def run_online(model: DiffusiveModel, dys, theta0, lr: LearningRate, rho0=None, decimation: int = 1,
               strict: bool = False, restart_on_degenerate: bool = False, free=None) -> EstimateLog:
    """Fold the online recursion over a measurement record.

    Raises
    ------
    UsageError
        On an empty record.
    EstimationError
        On numerical failure; ``exc.partial`` holds the log up to that step.
    """
    dys = np.asarray(dys, dtype=float)
    if dys.ndim != 1 or dys.size == 0:
        raise UsageError("measurement record must be a non-empty 1-d array")
    est = OnlineEstimator(model, theta0, lr, rho0, decimation, strict, restart_on_degenerate, free)
    est.feed(dys)
    return est.result()
