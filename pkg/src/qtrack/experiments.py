"""Seeded experiment orchestration and built-in figure configurations.

Each seed runs in its own process (when ``workers > 1``) with its own
simulator and estimator; files are written per seed and the summary is
written after all seeds have finished.
"""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig, parse_config
from .errors import DegenerateUpdateError, UsageError
from .estimator import EstimationError, LearningRate, OnlineEstimator
from .model import PARAM_ORDER
from .offline import finite_diff_grad, grad_total, offline_ascent, relative_error
from .simulate import CHUNK, TrajectorySimulator, simulate

log = logging.getLogger(__name__)

_FIGURE_COMMON = {
    "model": {"omega": 1.0, "eta": 0.7, "delta": 0.2, "kappa": 0.1, "dt": 0.01},
    "run": {"steps": 20_000_000, "seeds": [1], "decimation": 100},
}

FIGURE_1A = copy.deepcopy(_FIGURE_COMMON)
FIGURE_1A["estimator"] = {
    "initial": {"omega": 1.3, "eta": 0.6, "delta": 0.3, "kappa": 0.15},
    "learning_rate": {"kind": "constant", "gamma0": 1e-4},
}
FIGURE_1A["run"].update(output="figure-1a", tail_fraction=0.1)

FIGURE_1B = copy.deepcopy(_FIGURE_COMMON)
FIGURE_1B["truth"] = {
    "omega": {"amplitude": 0.5, "frequency": 0.12},
    "eta": {"amplitude": 0.2, "frequency": 0.05},
    "delta": {"amplitude": 0.16, "frequency": 0.12},
    "kappa": {"amplitude": 0.1, "frequency": 0.11},
}
FIGURE_1B["estimator"] = {
    "initial": {"omega": 1.3, "eta": 0.8, "delta": 0.3, "kappa": 0.15},
    "learning_rate": {"kind": "constant", "gamma0": 1e-4},
}
FIGURE_1B["run"].update(output="figure-1b", tail_fraction=0.75)

FIGURES = {"1a": FIGURE_1A, "1b": FIGURE_1B}


def figure_config(which: str) -> ExperimentConfig:
    if which not in FIGURES:
        raise UsageError(f"unknown figure {which!r}; choose from {sorted(FIGURES)}")
    return parse_config(FIGURES[which])


@dataclass
class SeedResult:
    """Outcome of one seed; ``log`` is dropped when crossing processes."""

    seed: int
    tail: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    dy_sha256: str = ""
    error: str = None
    error_step: int = None
    log: object = field(default=None, repr=False)


def tail_stats(log, theta_true, fraction: float) -> dict:
    """Per-parameter mean, std and mean absolute error over the final ``fraction`` of the run."""
    steps_total = log.final.step if log.final is not None else (log.step[-1] + 1 if len(log) else 0)
    start = (1.0 - fraction) * steps_total
    sel = log.step >= start
    if not np.any(sel):
        sel = np.ones(len(log), dtype=bool)
    est = log.theta_natural[sel]
    tru = theta_true[sel]
    return {
        name: {
            "truth_tail_mean": float(tru[:, j].mean()),
            "tail_mean": float(est[:, j].mean()),
            "tail_std": float(est[:, j].std()),
            "tail_abs_err": float(np.abs(est[:, j] - tru[:, j]).mean()),
        }
        for j, name in enumerate(log.names)
    }


def _true_columns(cfg, log):
    """True natural parameters of the estimated names at each logged step."""
    truth = cfg.schedule().at(log.t)
    idx = [PARAM_ORDER.index(n) for n in log.names]
    return truth[:, idx].reshape(len(log), len(idx))


def estimate_seed(cfg: ExperimentConfig, seed: int, out=None, record=None) -> SeedResult:
    """Simulate (or replay ``record``) and run the online estimator for one seed.

    The simulator and estimator advance together chunk by chunk, so the
    full record is never held in memory unless it was passed in.
    """
    model = cfg.estimator_model()
    est = OnlineEstimator(model, cfg.theta0(model), cfg.learning_rate, decimation=cfg.decimation,
                          strict=cfg.strict_positivity, restart_on_degenerate=cfg.restart_on_degenerate)
    digest = io.DigestStream()
    res = SeedResult(seed)
    try:
        if record is None:
            sim = TrajectorySimulator(cfg.truth_model(), cfg.schedule(), seed,
                                      decimation=cfg.steps + 1, strict=cfg.strict_positivity)
            for start in range(0, cfg.steps, CHUNK):
                dys = sim.advance(min(CHUNK, cfg.steps - start))
                digest.update(dys)
                est.feed(dys)
        else:
            for start in range(0, len(record), CHUNK):
                dys = np.asarray(record[start:start + CHUNK])
                digest.update(dys)
                est.feed(dys)
        elog = est.result()
    except EstimationError as exc:
        elog = exc.partial
        res.error, res.error_step = str(exc), exc.step
        log.error("seed %d: %s", seed, exc)
    except DegenerateUpdateError as exc:
        elog = est.result()
        res.error, res.error_step = str(exc), exc.step
        log.error("seed %d: %s", seed, exc)
    res.log = elog
    res.dy_sha256 = digest.hexdigest()
    truth = _true_columns(cfg, elog)
    res.tail = tail_stats(elog, truth, cfg.tail_fraction) if len(elog) else {}
    if out is not None:
        out = Path(out)
        csv_path = io.write_estimate_csv(out / f"estimate_seed{seed}.csv", elog, truth)
        man = io.write_manifest(
            out / f"estimate_seed{seed}.json", "estimate", _echo(cfg, seed), seed,
            {"dy_sha256": res.dy_sha256, "steps": digest.count, "estimate_file": csv_path.name,
             "error": res.error, "error_step": res.error_step},
        )
        res.files = [str(csv_path), str(man)]
    return res


def simulate_seed(cfg: ExperimentConfig, seed: int, out) -> SeedResult:
    """Write the decimated trajectory CSV, the full dy record and a manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    traj = simulate(cfg.truth_model(), cfg.schedule(), cfg.steps, seed,
                    decimation=cfg.decimation, strict=cfg.strict_positivity)
    csv_path = io.write_trajectory_csv(out / f"trajectory_seed{seed}.csv", traj)
    npy = out / f"dy_seed{seed}.npy"
    np.save(npy, traj.dy_all)
    sha = io.dy_digest(traj.dy_all)
    man = io.write_manifest(out / f"trajectory_seed{seed}.json", "simulate", _echo(cfg, seed), seed,
                            {"dy_file": npy.name, "dy_sha256": sha, "steps": cfg.steps,
                             "trajectory_file": csv_path.name})
    return SeedResult(seed, files=[str(csv_path), str(npy), str(man)], dy_sha256=sha)


def _echo(cfg, seed):
    raw = copy.deepcopy(cfg.raw)
    raw.setdefault("run", {})["seeds"] = [int(seed)]
    return raw


def _estimate_worker(args):
    cfg, seed, out = args
    res = estimate_seed(cfg, seed, out)
    res.log = None
    return res


def run_estimate(cfg: ExperimentConfig, out=None) -> list:
    """Run every seed of ``cfg`` and write the across-seed summary."""
    out = Path(cfg.output if out is None else out)
    if cfg.replay is not None:
        record = io.load_record(cfg.replay)
        # a replayed record belongs to a single seed
        results = [estimate_seed(cfg, cfg.seeds[0], out, record)]
    elif cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(cfg.seeds))) as pool:
            results = list(pool.map(_estimate_worker, [(cfg, s, out) for s in cfg.seeds]))
    else:
        results = [estimate_seed(cfg, s, out) for s in cfg.seeds]
    write_summary(out / "summary.csv", results)
    return results


def write_summary(path, results):
    rows = []
    for r in results:
        for name, st in r.tail.items():
            rows.append((r.seed, name, st["truth_tail_mean"], st["tail_mean"], st["tail_std"], st["tail_abs_err"]))
    return io.write_summary_csv(path, rows)


def gradcheck(model, theta, dys, eps=(1e-4, 1e-5, 1e-6), tol: float = 1e-4) -> dict:
    """Compare the recursive gradient with central differences for several ``eps``.

    Returns a dict with ``grad``, ``fd`` (one row per eps), ``rel`` and
    ``failed`` (names of parameters whose error exceeds ``tol`` for any eps).
    """
    g = grad_total(model, theta, dys)
    fd = np.array([finite_diff_grad(model, theta, dys, e) for e in eps]).reshape(len(eps), model.p)
    rel = np.array([relative_error(g, row) for row in fd]).reshape(len(eps), model.p)
    failed = [name for j, name in enumerate(model.params.names) if not np.all(rel[:, j] <= tol)]
    return {"names": model.params.names, "eps": tuple(eps), "grad": g, "fd": fd, "rel": rel, "failed": failed}


def format_gradcheck(report) -> str:
    eps = report["eps"]
    head = f"{'parameter':<10} {'recursive':>22}" + "".join(f" {'fd eps=' + format(e, '.0e'):>22} {'rel':>9}"
                                                            for e in eps)
    lines = [head]
    for j, name in enumerate(report["names"]):
        line = f"{name:<10} {report['grad'][j]:>22.15g}"
        for i in range(len(eps)):
            line += f" {report['fd'][i, j]:>22.15g} {report['rel'][i, j]:>9.2e}"
        line += "  FAIL" if name in report["failed"] else "  ok"
        lines.append(line)
    if not report["names"]:
        lines.append("(no free parameters: gradient is identically 0)")
    return "\n".join(lines)


def gradcheck_config(cfg: ExperimentConfig, seed: int):
    """Gradcheck on a fresh record at the true (static) parameters."""
    gc = cfg.gradcheck
    steps = int(gc.get("steps", 20_000))
    eps = tuple(gc.get("eps", (1e-4, 1e-5, 1e-6)))
    tol = float(gc.get("tolerance", 1e-4))
    if steps < 1 or not eps or any(not e > 0 for e in eps):
        raise UsageError("gradcheck needs steps >= 1 and positive eps values")
    dys = simulate(cfg.truth_model(), cfg.schedule(), steps, seed, decimation=steps).dy_all
    model = cfg.estimator_model()
    theta = model.params.to_working([cfg.truth[n] for n in model.params.names])
    return gradcheck(model, theta, dys, eps, tol)


def offline_seed(cfg: ExperimentConfig, seed: int, out=None):
    """Batch ascent from the configured initial estimate on a fresh record."""
    oc = cfg.offline
    steps = int(oc.get("steps", cfg.steps))
    dys = simulate(cfg.truth_model(), cfg.schedule(), steps, seed, decimation=steps).dy_all
    model = cfg.estimator_model()
    result = offline_ascent(model, cfg.theta0(model), dys, LearningRate(float(oc.get("gamma0", 1e-3))),
                            max_iter=int(oc.get("max_iter", 100)), tol=oc.get("tol"),
                            backtrack=bool(oc.get("backtrack", True)))
    files = []
    if out is not None:
        out = Path(out)
        path = io.write_offline_csv(out / f"offline_seed{seed}.csv", model.params.names, result,
                                    model.params.sqrt_mask)
        man = io.write_manifest(out / f"offline_seed{seed}.json", "offline-ml", _echo(cfg, seed), seed,
                                {"dy_sha256": io.dy_digest(dys), "steps": steps, "offline_file": path.name,
                                 "converged": result.converged, "iterations": result.iterations})
        files = [str(path), str(man)]
    return result, files


__all__ = [
    "FIGURES", "FIGURE_1A", "FIGURE_1B", "SeedResult", "estimate_seed", "figure_config",
    "format_gradcheck", "gradcheck", "gradcheck_config", "offline_seed", "run_estimate", "simulate_seed",
    "tail_stats", "write_summary",
]
