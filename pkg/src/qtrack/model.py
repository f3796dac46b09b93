"""Parametrized diffusive measurement models and their one-step Kraus maps.

A :class:`DiffusiveModel` describes a single homodyne channel

    d rho = -i[H, rho] dt + D[L](rho) dt + sqrt(eta) H[L](rho) dW,
    dy    = sqrt(eta) Tr((L + L^+) rho) dt + dW,

with ``H``, ``L`` and ``sqrt(eta)`` affine in the *working* parameter
vector.  Working coordinates may differ from the natural ones: a parameter
tagged ``"sqrt"`` is carried as its square root, so that e.g. a rate
``kappa`` enters ``L = sqrt(kappa) sigma_z`` linearly.

One time step is the partial Kraus map

    K_dy(X) = M X M^+ + (1 - eta) L X L^+ dt,
    M = I - (iH + L^+L/2) dt + sqrt(eta) L dy,

optionally right-multiplied by ``S^{-1/2}`` with
``S = M_0^+ M_0 + L^+L dt`` (``M_0`` the ``dy = 0`` part).  That makes the
Gaussian average of ``Tr K_dy`` over ``dy ~ N(0, dt)`` exactly one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import operators as ops
from .errors import UsageError

IDENTITY = "identity"
SQRT = "sqrt"

#: parameter order of the two-level homodyne example
PARAM_ORDER = ("omega", "eta", "delta", "kappa")

_BOUND_TOL = 1e-12


@dataclass(frozen=True)
class ParamSpec:
    """Names, reparametrization tags and natural-coordinate bounds."""

    names: tuple
    reparam: tuple = None
    bounds: tuple = None

    def __post_init__(self):
        names = tuple(self.names)
        p = len(names)
        if p < 1:
            raise UsageError("a model needs at least one parameter")
        if len(set(names)) != p:
            raise UsageError(f"parameter names must be unique: {names}")
        reparam = tuple(self.reparam) if self.reparam is not None else (IDENTITY,) * p
        bounds = (
            tuple((float(lo), float(hi)) for lo, hi in self.bounds)
            if self.bounds is not None
            else ((-np.inf, np.inf),) * p
        )
        if len(reparam) != p or len(bounds) != p:
            raise UsageError("reparam and bounds must have one entry per parameter")
        for name, tag, (lo, hi) in zip(names, reparam, bounds):
            if tag not in (IDENTITY, SQRT):
                raise UsageError(f"unknown reparametrization {tag!r} for {name}")
            if not lo <= hi:
                raise UsageError(f"empty bounds for {name}: [{lo}, {hi}]")
            if tag == SQRT and lo < 0:
                raise UsageError(f"sqrt reparametrization of {name} requires a lower bound >= 0")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "reparam", reparam)
        object.__setattr__(self, "bounds", bounds)

    @property
    def p(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UsageError(f"unknown parameter {name!r}; known: {', '.join(self.names)}") from None

    @property
    def sqrt_mask(self) -> np.ndarray:
        return np.array([tag == SQRT for tag in self.reparam])

    def to_working(self, natural) -> np.ndarray:
        natural = np.asarray(natural, dtype=float)
        self._check_len(natural)
        if np.any(natural[self.sqrt_mask] < 0):
            raise UsageError("sqrt-reparametrized parameters must be non-negative")
        return np.where(self.sqrt_mask, np.sqrt(np.abs(natural)), natural)

    def to_natural(self, working) -> np.ndarray:
        working = np.asarray(working, dtype=float)
        self._check_len(working)
        return np.where(self.sqrt_mask, working**2, working)

    def working_bounds(self):
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        m = self.sqrt_mask
        lo[m] = np.sqrt(lo[m])
        hi[m] = np.sqrt(hi[m])
        return lo, hi

    def clamp(self, working) -> np.ndarray:
        lo, hi = self.working_bounds()
        return np.clip(working, lo, hi)

    def check(self, working) -> np.ndarray:
        """Validate a working-coordinate vector against the bounds."""
        working = np.asarray(working, dtype=float)
        self._check_len(working)
        if not np.all(np.isfinite(working)):
            raise UsageError(f"non-finite parameter vector {working}")
        lo, hi = self.working_bounds()
        bad = (working < lo - _BOUND_TOL) | (working > hi + _BOUND_TOL)
        if np.any(bad):
            j = int(np.argmax(bad))
            raise UsageError(
                f"parameter {self.names[j]} = {working[j]!r} (working coordinates) "
                f"outside [{lo[j]}, {hi[j]}]"
            )
        return working

    def _check_len(self, v):
        if v.shape != (self.p,):
            raise UsageError(f"expected {self.p} parameters {self.names}, got shape {v.shape}")


@dataclass(frozen=True, eq=False)
class DiffusiveModel:
    """Single-channel diffusive model, affine in the working parameters.

    ``H(theta) = h0 + sum_j theta_j h_coef[j]`` and likewise for ``L`` and
    ``sqrt(eta)``.  Derivatives are therefore the coefficient arrays.
    """

    params: ParamSpec
    dt: float
    h0: np.ndarray
    h_coef: np.ndarray
    l0: np.ndarray
    l_coef: np.ndarray
    sqrt_eta0: float = 1.0
    sqrt_eta_coef: np.ndarray = None
    trace_preserving: bool = True
    label: str = field(default="", compare=False)

    def __post_init__(self):
        p = self.params.p
        h0 = ops.as_operator(self.h0)
        n = h0.shape[0]
        l0 = ops.as_operator(self.l0)
        h_coef = np.asarray(self.h_coef, dtype=np.complex128).reshape(p, n, n)
        l_coef = np.asarray(self.l_coef, dtype=np.complex128).reshape(p, n, n)
        se_coef = (
            np.zeros(p) if self.sqrt_eta_coef is None else np.asarray(self.sqrt_eta_coef, dtype=float)
        )
        if l0.shape != (n, n) or se_coef.shape != (p,):
            raise UsageError("model coefficient shapes are inconsistent")
        for h in (h0, *h_coef):
            if np.max(np.abs(h - ops.dag(h))) > 1e-12:
                raise UsageError("Hamiltonian terms must be Hermitian")
        if not (np.isfinite(self.dt) and self.dt >= 0):
            raise UsageError(f"time step must be finite and >= 0, got {self.dt}")
        for name, val in (("h0", h0), ("h_coef", h_coef), ("l0", l0), ("l_coef", l_coef)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        se_coef.setflags(write=False)
        object.__setattr__(self, "sqrt_eta_coef", se_coef)
        object.__setattr__(self, "sqrt_eta0", float(self.sqrt_eta0))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def dim(self) -> int:
        return self.h0.shape[0]

    @property
    def p(self) -> int:
        return self.params.p

    def with_dt(self, dt: float) -> "DiffusiveModel":
        return DiffusiveModel(
            self.params, dt, self.h0, self.h_coef, self.l0, self.l_coef,
            self.sqrt_eta0, self.sqrt_eta_coef, self.trace_preserving, self.label,
        )

    def with_trace_preserving(self, flag: bool) -> "DiffusiveModel":
        return DiffusiveModel(
            self.params, self.dt, self.h0, self.h_coef, self.l0, self.l_coef,
            self.sqrt_eta0, self.sqrt_eta_coef, flag, self.label,
        )

    def hamiltonian(self, theta) -> np.ndarray:
        theta = self.params.check(theta)
        return self.h0 + np.tensordot(theta, self.h_coef, axes=1)

    def hamiltonian_grad(self, theta, j: int) -> np.ndarray:
        self.params.check(theta)
        return self.h_coef[self._j(j)].copy()

    def lindblad(self, theta) -> np.ndarray:
        theta = self.params.check(theta)
        return self.l0 + np.tensordot(theta, self.l_coef, axes=1)

    def lindblad_grad(self, theta, j: int) -> np.ndarray:
        self.params.check(theta)
        return self.l_coef[self._j(j)].copy()

    def sqrt_efficiency(self, theta) -> float:
        theta = self.params.check(theta)
        return float(self.sqrt_eta0 + theta @ self.sqrt_eta_coef)

    def sqrt_efficiency_grad(self, theta, j: int) -> float:
        self.params.check(theta)
        return float(self.sqrt_eta_coef[self._j(j)])

    def efficiency(self, theta) -> float:
        se = self.sqrt_efficiency(theta)
        eta = se * se
        if not 0.0 <= eta <= 1.0 + 1e-12 or se < -1e-12:
            raise UsageError(f"efficiency {eta} outside [0, 1]")
        return eta

    def _j(self, j: int) -> int:
        if not 0 <= j < self.p:
            raise UsageError(f"parameter index {j} outside 0..{self.p - 1}")
        return j

    def kernel_arrays(self):
        """Contiguous arrays consumed by the compiled kernels."""
        return (
            np.ascontiguousarray(self.h0),
            np.ascontiguousarray(self.h_coef),
            np.ascontiguousarray(self.l0),
            np.ascontiguousarray(self.l_coef),
            self.sqrt_eta0,
            np.ascontiguousarray(self.sqrt_eta_coef),
            self.dt,
            self.trace_preserving,
        )


@dataclass(frozen=True)
class KrausStep:
    """Operators defining ``K_dy`` at one parameter point.

    ``m`` is the raw measurement-conditioned Kraus operator; ``normalizer``
    is ``S^{-1/2}`` (identity when trace preservation is disabled).  The map
    is ``X -> (m R) X (m R)^+ + loss_factor (L R) X (L R)^+``.
    """

    m: np.ndarray
    lindblad: np.ndarray
    loss_factor: float
    normalizer: np.ndarray

    def apply(self, x) -> np.ndarray:
        mr = self.m @ self.normalizer
        lr = self.lindblad @ self.normalizer
        return mr @ x @ ops.dag(mr) + self.loss_factor * (lr @ x @ ops.dag(lr))


def _drift_parts(model, theta):
    h = model.hamiltonian(theta)
    l = model.lindblad(theta)
    a = 1j * h + 0.5 * ops.dag(l) @ l
    m0 = np.eye(model.dim) - a * model.dt
    return h, l, m0


def normalizer(model: DiffusiveModel, theta, grad: bool = False):
    """``S^{-1/2}`` and, optionally, its derivative along each parameter.

    Computed from an eigendecomposition of ``S``; derivatives use the
    divided-difference (Daleckii-Krein) formula.
    """
    theta = model.params.check(theta)
    n = model.dim
    if not model.trace_preserving:
        r = np.eye(n, dtype=np.complex128)
        return (r, [np.zeros_like(r) for _ in range(model.p)]) if grad else r
    _, l, m0 = _drift_parts(model, theta)
    s = ops.dag(m0) @ m0 + model.dt * (ops.dag(l) @ l)
    w, u = np.linalg.eigh(0.5 * (s + ops.dag(s)))
    rw = np.sqrt(w)
    r = (u / rw) @ ops.dag(u)
    if not grad:
        return r
    f = -1.0 / (np.outer(rw, rw) * np.add.outer(rw, rw))
    dr = []
    for j in range(model.p):
        dl = model.l_coef[j]
        dlhl = ops.dag(dl) @ l + ops.dag(l) @ dl
        dm0 = -(1j * model.h_coef[j] + 0.5 * dlhl) * model.dt
        ds = ops.dag(dm0) @ m0 + ops.dag(m0) @ dm0 + model.dt * dlhl
        dr.append(u @ (f * (ops.dag(u) @ ds @ u)) @ ops.dag(u))
    return r, dr


def kraus_operator(model: DiffusiveModel, theta, dy: float) -> KrausStep:
    """Build the one-step Kraus data ``M_dy`` for outcome increment ``dy``."""
    theta = model.params.check(theta)
    _, l, m0 = _drift_parts(model, theta)
    se = model.sqrt_efficiency(theta)
    eta = model.efficiency(theta)
    m = m0 + se * dy * l
    return KrausStep(m, l, (1.0 - eta) * model.dt, normalizer(model, theta))


def apply_partial_kraus(model: DiffusiveModel, theta, dy: float, x) -> np.ndarray:
    """Unnormalized one-step update ``K_dy,theta(X)`` with exact products."""
    x = ops.as_operator(x)
    if x.shape != (model.dim, model.dim):
        raise UsageError(f"operator shape {x.shape} does not match model dimension {model.dim}")
    return kraus_operator(model, theta, dy).apply(x)


def apply_partial_kraus_deriv(model: DiffusiveModel, theta, j: int, dy: float, rho) -> np.ndarray:
    """Derivative of ``K_dy,theta(rho)`` with respect to working parameter ``j``."""
    rho = ops.as_operator(rho)
    if rho.shape != (model.dim, model.dim):
        raise UsageError(f"operator shape {rho.shape} does not match model dimension {model.dim}")
    j = model._j(j)
    theta = model.params.check(theta)
    _, l, m0 = _drift_parts(model, theta)
    se = model.sqrt_efficiency(theta)
    r, drs = normalizer(model, theta, grad=True)
    dr = drs[j]
    dl = model.l_coef[j]
    dse = model.sqrt_eta_coef[j]
    dm0 = -(1j * model.h_coef[j] + 0.5 * (ops.dag(dl) @ l + ops.dag(l) @ dl)) * model.dt
    m = m0 + se * dy * l
    dm = dm0 + dy * (dse * l + se * dl)
    mt, dmt = m @ r, dm @ r + m @ dr
    lt, dlt = l @ r, dl @ r + l @ dr
    c = (1.0 - se * se) * model.dt
    dc = -2.0 * se * dse * model.dt
    h = dmt @ rho @ ops.dag(mt)
    g = dlt @ rho @ ops.dag(lt)
    return h + ops.dag(h) + dc * (lt @ rho @ ops.dag(lt)) + c * (g + ops.dag(g))


def two_level_example(
    omega: float,
    delta: float,
    eta: float,
    kappa: float,
    dt: float,
    estimate=PARAM_ORDER,
    trace_preserving: bool = True,
    bounds: dict = None,
) -> DiffusiveModel:
    """Driven qubit under homodyne monitoring of ``sigma_z``.

    ``H = (delta/2) sigma_z + (omega/2) sigma_x`` and
    ``L = sqrt(kappa) sigma_z``.  Parameters named in ``estimate`` become
    model parameters (``eta`` and ``kappa`` carried as square roots); the
    remaining ones are frozen at the given values.  ``bounds`` optionally
    overrides the natural-coordinate interval of an estimated parameter.

    Examples
    --------
    >>> m = two_level_example(1.0, 0.2, 0.7, 0.1, dt=1e-2)
    >>> m.params.names
    ('omega', 'eta', 'delta', 'kappa')
    """
    if not 0.0 <= eta <= 1.0:
        raise UsageError(f"efficiency must lie in [0, 1], got {eta}")
    if kappa < 0:
        raise UsageError(f"measurement rate must be >= 0, got {kappa}")
    natural = {"omega": omega, "eta": eta, "delta": delta, "kappa": kappa}
    estimate = tuple(estimate)
    for name in estimate:
        if name not in natural:
            raise UsageError(f"unknown parameter {name!r}; expected one of {PARAM_ORDER}")
    names = tuple(n for n in PARAM_ORDER if n in estimate)
    if not names:
        raise UsageError("at least one parameter must be estimated")
    reparam = tuple(SQRT if n in ("eta", "kappa") else IDENTITY for n in names)
    limits = {"eta": (0.0, 1.0), "kappa": (0.0, np.inf)}
    for name, (lo, hi) in (bounds or {}).items():
        if name not in names:
            raise UsageError(f"bounds given for {name!r}, which is not estimated")
        dlo, dhi = limits.get(name, (-np.inf, np.inf))
        limits[name] = (max(lo, dlo), min(hi, dhi))
    spec = ParamSpec(names, reparam, tuple(limits.get(n, (-np.inf, np.inf)) for n in names))
    sx, sz = ops.pauli_x(), ops.pauli_z()
    zero = np.zeros((2, 2), dtype=np.complex128)
    h0, l0, se0 = zero.copy(), zero.copy(), 0.0
    h_coef = np.zeros((len(names), 2, 2), dtype=np.complex128)
    l_coef = np.zeros_like(h_coef)
    se_coef = np.zeros(len(names))
    fixed = {k: v for k, v in natural.items() if k not in names}
    if "omega" in fixed:
        h0 = h0 + 0.5 * fixed["omega"] * sx
    if "delta" in fixed:
        h0 = h0 + 0.5 * fixed["delta"] * sz
    if "kappa" in fixed:
        l0 = np.sqrt(fixed["kappa"]) * sz
    if "eta" in fixed:
        se0 = float(np.sqrt(fixed["eta"]))
    for j, name in enumerate(names):
        if name == "omega":
            h_coef[j] = 0.5 * sx
        elif name == "delta":
            h_coef[j] = 0.5 * sz
        elif name == "kappa":
            l_coef[j] = sz
        elif name == "eta":
            se_coef[j] = 1.0
    return DiffusiveModel(
        spec, dt, h0, h_coef, l0, l_coef, se0, se_coef,
        trace_preserving=trace_preserving, label="two-level homodyne",
    )


def working_point(model: DiffusiveModel, **values) -> np.ndarray:
    """Working-coordinate vector from natural values given by name."""
    missing = set(model.params.names) - set(values)
    if missing:
        raise UsageError(f"missing values for {sorted(missing)}")
    return model.params.to_working([values[n] for n in model.params.names])
