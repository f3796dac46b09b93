"""Ground-truth trajectories and measurement records.

Wiener increments come from ``numpy.random.Generator(PCG64(seed))`` via
``standard_normal`` (ziggurat) scaled by ``sqrt(dt)``.  Draws are consumed
sequentially, so a record does not depend on how it is chunked, and equal
seeds give identical records on the same platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import operators as ops
from .errors import DegenerateUpdateError, PositivityError, UsageError
from .model import DiffusiveModel, kraus_operator

CHUNK = 1 << 16


@dataclass(frozen=True)
class TruthSchedule:
    """True parameters ``base + amplitude * sin(frequency * time_scale * t)``.

    Values are in natural coordinates and ordered like the model's
    parameters.  ``frequency`` is an angular frequency in units of
    ``time_scale * t`` (the figures use ``time_scale = gamma``).
    """

    base: tuple
    amplitude: tuple = None
    frequency: tuple = None
    time_scale: float = 1.0

    def __post_init__(self):
        base = tuple(float(v) for v in self.base)
        zeros = (0.0,) * len(base)
        amp = zeros if self.amplitude is None else tuple(float(v) for v in self.amplitude)
        freq = zeros if self.frequency is None else tuple(float(v) for v in self.frequency)
        if not len(base) == len(amp) == len(freq):
            raise UsageError("schedule vectors must have equal length")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "frequency", freq)

    @classmethod
    def static(cls, base) -> "TruthSchedule":
        return cls(tuple(base))

    @property
    def is_static(self) -> bool:
        return not any(a != 0 and f != 0 for a, f in zip(self.amplitude, self.frequency))

    def at(self, t) -> np.ndarray:
        """Natural-coordinate parameters at time(s) ``t``."""
        t = np.asarray(t, dtype=float)[..., None]
        return np.asarray(self.base) + np.asarray(self.amplitude) * np.sin(
            np.asarray(self.frequency) * self.time_scale * t
        )

    def check(self, model: DiffusiveModel) -> None:
        """Conservative bound check: ``base +/- |amplitude|`` must be admissible."""
        if len(self.base) != model.p:
            raise UsageError(f"schedule has {len(self.base)} parameters, model has {model.p}")
        for j, name in enumerate(model.params.names):
            lo, hi = model.params.bounds[j]
            a = abs(self.amplitude[j]) if self.frequency[j] != 0 else 0.0
            b = self.base[j] + (self.amplitude[j] if self.frequency[j] == 0 else 0.0)
            if b - a < lo or b + a > hi:
                raise UsageError(f"true {name} leaves its bounds [{lo}, {hi}]")

    def kernel_args(self, model):
        base = np.array(self.base)
        amp = np.array(self.amplitude)
        freq = np.array(self.frequency)
        static = freq == 0
        base = base + np.where(static, amp, 0.0)
        amp = np.where(static, 0.0, amp)
        return base, amp, freq, float(self.time_scale), model.params.sqrt_mask.astype(np.bool_)


@dataclass
class TrajectoryLog:
    """Decimated true trajectory plus the full measurement record."""

    names: tuple
    dt: float
    decimation: int
    seed: int
    step: np.ndarray
    theta_true: np.ndarray
    rho: np.ndarray
    dy_all: np.ndarray = field(repr=False)

    @property
    def t(self) -> np.ndarray:
        return self.step * self.dt

    @property
    def dy(self) -> np.ndarray:
        return self.dy_all[self.step]

    def __len__(self):
        return len(self.step)

    def bloch(self):
        return np.array([ops.bloch_vector(r) for r in self.rho]) if self.rho.shape[1] == 2 else None


def step_true(model: DiffusiveModel, theta_true, rho, dw: float):
    """One true-system step driven by Wiener increment ``dw``.

    Returns ``(rho_next, dy)`` with
    ``dy = sqrt(eta) Tr((L + L^+) rho) dt + dw``.
    """
    rho = ops.as_operator(rho)
    l = model.lindblad(theta_true)
    dy = model.sqrt_efficiency(theta_true) * ops.expectation(l + ops.dag(l), rho) * model.dt + dw
    k = kraus_operator(model, theta_true, dy).apply(rho)
    return ops.renormalize(k), float(dy)


def wiener_increments(rng: np.random.Generator, n: int, dt: float) -> np.ndarray:
    return rng.standard_normal(n) * np.sqrt(dt)


class TrajectorySimulator:
    """Streaming simulator: yields the measurement record chunk by chunk."""

    def __init__(self, model: DiffusiveModel, schedule: TruthSchedule, seed: int, rho0=None,
                 decimation: int = 1, strict: bool = False):
        if decimation < 1:
            raise UsageError("decimation must be >= 1")
        schedule.check(model)
        self.model = model
        self.schedule = schedule
        self.seed = int(seed)
        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        rho = ops.ket_projector(0, model.dim) if rho0 is None else ops.renormalize(rho0)
        self.rho = np.ascontiguousarray(rho)
        self.decimation = int(decimation)
        self.strict = strict
        self.step = 0
        self._args = schedule.kernel_args(model)
        self._nt = (0,) * model.dim
        self._logs = []

    def advance(self, nsteps: int) -> np.ndarray:
        """Simulate ``nsteps`` steps and return their measurement increments."""
        dws = wiener_increments(self.rng, nsteps, self.model.dt)
        dy = np.empty(nsteps)
        d = self.decimation
        first = (-self.step) % d
        rows = 0 if first >= nsteps else (nsteps - 1 - first) // d + 1
        log_theta = np.zeros((rows, self.model.p))
        log_rho = np.zeros((rows, self.model.dim, self.model.dim), dtype=np.complex128)
        log_k = np.zeros(rows, dtype=np.int64)
        base, amp, freq, ts, mask = self._args
        status, k, nlog = _kernels.simulate_chunk(
            self._nt, dws, self.step, self.rho, base, amp, freq, ts, mask, self.schedule.is_static,
            *self.model.kernel_arrays(), d, self.strict, dy, log_theta, log_rho, log_k,
        )
        self._logs.append((log_k[:nlog], log_theta[:nlog], log_rho[:nlog]))
        if status == _kernels.DEGENERATE:
            raise DegenerateUpdateError(f"degenerate true-state update at step {k}", step=k)
        if status == _kernels.NOT_PSD:
            raise PositivityError(f"true state lost positivity at step {k}", step=k)
        self.step = k
        return dy

    def logged(self):
        ks = np.concatenate([c[0] for c in self._logs]) if self._logs else np.zeros(0, np.int64)
        th = np.concatenate([c[1] for c in self._logs]) if self._logs else np.zeros((0, self.model.p))
        rh = (np.concatenate([c[2] for c in self._logs]) if self._logs
              else np.zeros((0, self.model.dim, self.model.dim), complex))
        mask = self.model.params.sqrt_mask
        return ks, np.where(mask, th**2, th), rh


def simulate(model: DiffusiveModel, schedule: TruthSchedule, steps: int, seed: int, rho0=None,
             decimation: int = 1, strict: bool = False) -> TrajectoryLog:
    """Simulate ``steps`` steps of the true system.

    Deterministic in ``seed``.  The initial state defaults to ``|0><0|``.
    """
    if int(steps) < 1:
        raise UsageError("steps must be >= 1")
    sim = TrajectorySimulator(model, schedule, seed, rho0, decimation, strict)
    dys = np.empty(int(steps))
    for start in range(0, steps, CHUNK):
        stop = min(steps, start + CHUNK)
        dys[start:stop] = sim.advance(stop - start)
    ks, th, rh = sim.logged()
    return TrajectoryLog(model.params.names, model.dt, sim.decimation, sim.seed, ks, th, rh, dys)
