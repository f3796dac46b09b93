"""Dense complex-matrix kernel for small quantum operators.

Operators are plain ``numpy`` arrays of shape ``(n, n)`` and dtype
``complex128``.  Density operators and tangent (sensitivity) operators use
the same representation; :func:`validate_density` and
:func:`validate_tangent` check their invariants on demand.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateUpdateError, PositivityError, UsageError

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-9
PSD_TOL = 1e-10
STRICT_PSD_TOL = 1e-8
DEGENERATE_TRACE = 1e-12


def as_operator(a) -> np.ndarray:
    """Coerce ``a`` to a square complex matrix."""
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise UsageError(f"operator must be a non-empty square matrix, got shape {a.shape}")
    return a


def _pair(a, b):
    a, b = as_operator(a), as_operator(b)
    if a.shape != b.shape:
        raise UsageError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def dag(a: np.ndarray) -> np.ndarray:
    return a.conj().T


def commutator(a, b) -> np.ndarray:
    """Return ``AB - BA``."""
    a, b = _pair(a, b)
    return a @ b - b @ a


def dissipator(l, rho) -> np.ndarray:
    """Lindblad dissipator ``L rho L^+ - (L^+L rho + rho L^+L)/2``."""
    l, rho = _pair(l, rho)
    lhl = dag(l) @ l
    return l @ rho @ dag(l) - 0.5 * (lhl @ rho + rho @ lhl)


def backaction(l, rho) -> np.ndarray:
    """Measurement back-action ``L rho + rho L^+ - Tr((L + L^+) rho) rho``.

    The result is traceless whenever ``Tr(rho) = 1``.
    """
    l, rho = _pair(l, rho)
    s = np.trace((l + dag(l)) @ rho).real
    return l @ rho + rho @ dag(l) - s * rho


def hs_inner(a, b) -> complex:
    """Hilbert-Schmidt inner product ``Tr(A^+ B)``."""
    a, b = _pair(a, b)
    return complex(np.vdot(a, b))


def expectation(a, rho) -> float:
    """Real part of ``Tr(A rho)``."""
    a, rho = _pair(a, rho)
    return float(np.trace(a @ rho).real)


def min_eigenvalue(a) -> float:
    """Smallest eigenvalue of the Hermitian part of ``a``.

    Closed form for 2x2, LAPACK otherwise (intended for small n diagnostics).
    """
    a = as_operator(a)
    h = 0.5 * (a + dag(a))
    if h.shape[0] == 1:
        return float(h[0, 0].real)
    if h.shape[0] == 2:
        m = 0.5 * (h[0, 0].real + h[1, 1].real)
        d = 0.5 * (h[0, 0].real - h[1, 1].real)
        return float(m - np.hypot(d, abs(h[0, 1])))
    return float(np.linalg.eigvalsh(h)[0])


def renormalize(rho, strict: bool = False) -> np.ndarray:
    """Scrub Hermiticity and divide by the trace.

    Parameters
    ----------
    rho : array_like
        Unnormalized positive operator.
    strict : bool
        If true, a smallest eigenvalue below ``-1e-8`` (after normalization)
        raises :class:`PositivityError` instead of passing silently.

    Raises
    ------
    DegenerateUpdateError
        If ``Tr(rho) <= 1e-12``.
    """
    rho = as_operator(rho)
    h = 0.5 * (rho + dag(rho))
    tr = float(np.trace(h).real)
    if not tr > DEGENERATE_TRACE:
        raise DegenerateUpdateError(f"trace {tr:.3e} too small to renormalize", trace=tr)
    out = h / tr
    if strict:
        lam = min_eigenvalue(out)
        if lam < -STRICT_PSD_TOL:
            raise PositivityError(f"smallest eigenvalue {lam:.3e}", min_eigenvalue=lam)
    return out


def validate_density(rho, herm_tol=HERMITIAN_TOL, trace_tol=TRACE_TOL, psd_tol=PSD_TOL) -> list[str]:
    """Return a list of violated density-operator invariants (empty if valid)."""
    rho = as_operator(rho)
    problems = []
    herm = np.max(np.abs(rho - dag(rho)))
    if herm > herm_tol:
        problems.append(f"not Hermitian (max |rho - rho^+| = {herm:.3e})")
    tr = np.trace(rho)
    if abs(tr - 1.0) > trace_tol:
        problems.append(f"trace {tr:.12g} != 1")
    lam = min_eigenvalue(rho)
    if lam < -psd_tol:
        problems.append(f"smallest eigenvalue {lam:.3e} < 0")
    return problems


def validate_tangent(xi, herm_tol=HERMITIAN_TOL, trace_tol=TRACE_TOL) -> list[str]:
    """Return a list of violated tangent-operator invariants (empty if valid)."""
    xi = as_operator(xi)
    problems = []
    herm = np.max(np.abs(xi - dag(xi)))
    if herm > herm_tol:
        problems.append(f"not Hermitian (max |xi - xi^+| = {herm:.3e})")
    tr = abs(np.trace(xi))
    if tr > trace_tol:
        problems.append(f"|trace| {tr:.3e} != 0")
    return problems


def is_density(rho, **tols) -> bool:
    return not validate_density(rho, **tols)


def pauli_x() -> np.ndarray:
    return np.array([[0, 1], [1, 0]], dtype=np.complex128)


def pauli_y() -> np.ndarray:
    return np.array([[0, -1j], [1j, 0]], dtype=np.complex128)


def pauli_z() -> np.ndarray:
    return np.array([[1, 0], [0, -1]], dtype=np.complex128)


def ket_projector(index: int, dim: int = 2) -> np.ndarray:
    """Projector ``|index><index|`` in a ``dim``-dimensional space."""
    if not 0 <= index < dim:
        raise UsageError(f"basis index {index} outside 0..{dim - 1}")
    p = np.zeros((dim, dim), dtype=np.complex128)
    p[index, index] = 1.0
    return p


def maximally_mixed(dim: int) -> np.ndarray:
    if dim < 1:
        raise UsageError("dimension must be positive")
    return np.eye(dim, dtype=np.complex128) / dim


def bloch_vector(rho) -> np.ndarray:
    """Bloch coordinates ``(<sx>, <sy>, <sz>)`` of a qubit state."""
    rho = as_operator(rho)
    if rho.shape != (2, 2):
        raise UsageError("Bloch vector is defined for 2x2 states only")
    return np.array([2 * rho[0, 1].real, -2 * rho[0, 1].imag, (rho[0, 0] - rho[1, 1]).real])
