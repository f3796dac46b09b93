"""CSV logs, dy records and run manifests.

Numbers are written with ``%.17g`` so every float round-trips exactly.
The column layouts are versioned by :data:`SCHEMA_VERSION`, which is
recorded in each manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError

SCHEMA_VERSION = 1
FLOAT_FMT = "%.17g"


def estimate_header(names) -> list:
    return (
        ["step", "t", "gamma_t", "dy", "innovation"]
        + [f"theta_est_{n}" for n in names]
        + [f"theta_true_{n}" for n in names]
        + ["loglik", "bloch_x", "bloch_y", "bloch_z"]
    )


def trajectory_header(names) -> list:
    return ["step", "t", "dy"] + [f"theta_true_{n}" for n in names] + ["bloch_x", "bloch_y", "bloch_z"]


def offline_header(names) -> list:
    return ["iteration"] + [f"theta_{n}" for n in names] + ["loglik", "grad_norm", "step_size"]


SUMMARY_HEADER = ["seed", "parameter", "truth_tail_mean", "tail_mean", "tail_std", "tail_abs_err"]


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT % v


def _write_rows(path, header, columns):
    """Write column arrays (equal length) as CSV rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([_fmt(v) for v in row])
    return path


def _bloch_columns(rho):
    if rho.shape[1:] != (2, 2):
        return [np.full(len(rho), np.nan)] * 3
    x = 2 * rho[:, 0, 1].real
    y = -2 * rho[:, 0, 1].imag
    z = (rho[:, 0, 0] - rho[:, 1, 1]).real
    return [x, y, z]


def write_estimate_csv(path, log, theta_true) -> Path:
    """Estimate log; ``theta_true`` holds the true values (natural) at each logged step."""
    est = log.theta_natural
    cols = [log.step, log.t, log.gamma_t, log.dy, log.innovation]
    cols += [est[:, j] for j in range(est.shape[1])]
    cols += [theta_true[:, j] for j in range(theta_true.shape[1])]
    cols += [log.loglik] + _bloch_columns(log.rho)
    return _write_rows(path, estimate_header(log.names), cols)


def write_trajectory_csv(path, traj) -> Path:
    cols = [traj.step, traj.t, traj.dy] + [traj.theta_true[:, j] for j in range(traj.theta_true.shape[1])]
    cols += _bloch_columns(traj.rho)
    return _write_rows(path, trajectory_header(traj.names), cols)


def write_offline_csv(path, names, result, sqrt_mask) -> Path:
    th = np.array(result.theta)
    th = np.where(sqrt_mask, th**2, th)
    n = len(result.loglik)
    cols = [np.arange(n)] + [th[:, j] for j in range(th.shape[1])]
    cols += [np.array(result.loglik), np.array(result.grad_norm), np.array(result.step_size)]
    return _write_rows(path, offline_header(names), cols)


def write_summary_csv(path, rows) -> Path:
    """``rows`` are tuples in :data:`SUMMARY_HEADER` order."""
    cols = list(zip(*rows)) if rows else [[] for _ in SUMMARY_HEADER]
    return _write_rows(path, SUMMARY_HEADER, cols)


def read_csv(path) -> tuple:
    """Return ``(header, float array)`` for a file written by this module."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


class DigestStream:
    """Incremental SHA-256 of a float64 little-endian dy stream."""

    def __init__(self):
        self._h = hashlib.sha256()
        self.count = 0

    def update(self, dys) -> None:
        a = np.ascontiguousarray(dys, dtype="<f8")
        self._h.update(a.tobytes())
        self.count += a.size

    def hexdigest(self) -> str:
        return self._h.hexdigest()


def dy_digest(dys) -> str:
    d = DigestStream()
    d.update(dys)
    return d.hexdigest()


def versions() -> dict:
    import numba

    return {
        "qtrack": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "platform": platform.platform(),
        "byteorder": sys.byteorder,
    }


def write_manifest(path, command, config_raw, seed, extra=None) -> Path:
    """JSON manifest; its ``config`` member is a loadable configuration."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "versions": versions(),
        "config": config_raw,
    }
    body.update(extra or {})
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def load_record(path) -> np.ndarray:
    """Load a dy record from ``.npy`` or from a simulate manifest.

    A manifest's ``dy_sha256`` is checked against the loaded record.
    """
    path = Path(path)
    if path.suffix == ".json":
        try:
            man = json.loads(path.read_text())
            npy = path.parent / man["dy_file"]
            expected = man["dy_sha256"]
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path} is not a simulate manifest: {exc}", "run.replay") from None
        dys = np.load(npy, mmap_mode="r")
        got = dy_digest(dys)
        if got != expected:
            raise ConfigError(f"dy digest mismatch for {npy} ({got} != {expected})", "run.replay")
        return dys
    try:
        return np.load(path, mmap_mode="r")
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load record {path}: {exc}", "run.replay") from None
