"""Experiment configuration: sectioned TOML files.

Example::

    [model]
    omega = 1.0
    delta = 0.2
    eta = 0.7
    kappa = 0.1
    dt = 0.01

    [truth.omega]          # optional sinusoid on top of the model value
    amplitude = 0.5
    frequency = 0.12       # angular frequency in units of time_scale * t

    [estimator]
    initial = { omega = 1.3, eta = 0.6, delta = 0.3, kappa = 0.15 }
    learning_rate = { kind = "constant", gamma0 = 1e-4 }

    [run]
    steps = 20_000_000
    seeds = [1, 2, 3]
    decimation = 100
    output = "out"

A manifest JSON written by a previous run can be loaded in place of a
TOML file; its ``config`` member is used.
"""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .estimator import LearningRate
from .model import PARAM_ORDER, DiffusiveModel, two_level_example
from .simulate import TruthSchedule

_SCHEMA = {
    "model": {"omega", "delta", "eta", "kappa", "dt", "n", "trace_preserving"},
    "truth": {"time_scale", *PARAM_ORDER},
    "estimator": {"initial", "estimate", "learning_rate", "bounds", "reparam"},
    "run": {"steps", "T", "seeds", "decimation", "output", "tail_fraction",
            "strict_positivity", "replay", "workers", "restart_on_degenerate"},
    "gradcheck": {"steps", "eps", "tolerance", "seed"},
    "offline": {"steps", "max_iter", "gamma0", "backtrack", "tol"},
}
_LR_KEYS = {"kind", "gamma0", "t0", "alpha", "times", "values"}
_SINUSOID_KEYS = {"amplitude", "frequency"}
_DEFAULT_REPARAM = {"omega": "identity", "delta": "identity", "eta": "sqrt", "kappa": "sqrt"}


@dataclass
class ExperimentConfig:
    """Validated experiment definition (all values natural coordinates)."""

    truth: dict
    dt: float
    initial: dict
    estimate: tuple
    learning_rate: LearningRate
    perturbations: dict = field(default_factory=dict)
    time_scale: float = None
    bounds: dict = field(default_factory=dict)
    trace_preserving: bool = True
    steps: int = 20_000
    seeds: tuple = (1,)
    decimation: int = 100
    output: str = "out"
    tail_fraction: float = 0.1
    strict_positivity: bool = False
    restart_on_degenerate: bool = False
    replay: str = None
    workers: int = 1
    gradcheck: dict = field(default_factory=dict)
    offline: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def T(self) -> float:
        return self.steps * self.dt

    def truth_model(self) -> DiffusiveModel:
        """All four parameters free; used to generate the true trajectory."""
        t = self.truth
        return two_level_example(t["omega"], t["delta"], t["eta"], t["kappa"], self.dt,
                                 trace_preserving=self.trace_preserving)

    def estimator_model(self) -> DiffusiveModel:
        """Estimated parameters free, the others fixed at their model values."""
        t = self.truth
        return two_level_example(t["omega"], t["delta"], t["eta"], t["kappa"], self.dt,
                                 estimate=self.estimate, trace_preserving=self.trace_preserving,
                                 bounds=self.bounds)

    def schedule(self) -> TruthSchedule:
        amp = [self.perturbations.get(n, {}).get("amplitude", 0.0) for n in PARAM_ORDER]
        freq = [self.perturbations.get(n, {}).get("frequency", 0.0) for n in PARAM_ORDER]
        ts = self.learning_rate.reference if self.time_scale is None else self.time_scale
        return TruthSchedule(tuple(self.truth[n] for n in PARAM_ORDER), tuple(amp), tuple(freq), ts)

    def theta0(self, model: DiffusiveModel):
        return model.params.to_working([self.initial[n] for n in model.params.names])

    def with_overrides(self, **run) -> "ExperimentConfig":
        """Copy with ``[run]`` fields replaced (``None`` values are ignored)."""
        raw = copy.deepcopy(self.raw)
        section = raw.setdefault("run", {})
        for key, value in run.items():
            if value is None:
                continue
            if key == "steps":
                section.pop("T", None)
            section[key] = list(value) if isinstance(value, tuple) else value
        return parse_config(raw)


def _line_of(text, section, key):
    if not text:
        return None
    in_section = section is None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("["):
            in_section = section is not None and s.strip("[]").strip().split(".")[0] == section
            if in_section and key is None:
                return i
            continue
        if in_section and key is not None and re.match(rf"{re.escape(key)}\s*=", s):
            return i
    return None


def _num(value, field_name, text, section, key, positive=False, integer=False, nonneg=False):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if ok:
        ok = math.isfinite(value)
    if ok and integer:
        ok = float(value).is_integer()
    if ok and positive:
        ok = value > 0
    if ok and nonneg:
        ok = value >= 0
    if not ok:
        req = "a positive " if positive else ("a non-negative " if nonneg else "a finite ")
        req += "integer" if integer else "number"
        raise ConfigError(f"must be {req}, got {value!r}", field_name, _line_of(text, section, key))
    return int(value) if integer else float(value)


def parse_config(raw: dict, text: str = "") -> ExperimentConfig:
    """Validate a raw mapping (as loaded from TOML) into an ExperimentConfig."""
    raw = copy.deepcopy(raw)
    for section, body in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section (expected one of {sorted(_SCHEMA)})", section,
                              _line_of(text, section, None))
        if not isinstance(body, dict):
            raise ConfigError("must be a table", section)
        for key in body:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown field; allowed: {sorted(_SCHEMA[section])}", f"{section}.{key}",
                                  _line_of(text, section, key))

    model = raw.get("model", {})
    for name in PARAM_ORDER + ("dt",):
        if name not in model:
            raise ConfigError("missing required field", f"model.{name}", _line_of(text, "model", None))
    truth = {n: _num(model[n], f"model.{n}", text, "model", n) for n in PARAM_ORDER}
    dt = _num(model["dt"], "model.dt", text, "model", "dt", positive=True)
    if not 0 <= truth["eta"] <= 1:
        raise ConfigError("efficiency must lie in [0, 1]", "model.eta", _line_of(text, "model", "eta"))
    if truth["kappa"] < 0:
        raise ConfigError("measurement rate must be >= 0", "model.kappa", _line_of(text, "model", "kappa"))
    if model.get("n", 2) != 2:
        raise ConfigError("only the two-level model (n = 2) is available", "model.n", _line_of(text, "model", "n"))
    tp = model.get("trace_preserving", True)
    if not isinstance(tp, bool):
        raise ConfigError("must be true or false", "model.trace_preserving")

    truth_sec = raw.get("truth", {})
    perturb = {}
    for name in PARAM_ORDER:
        if name in truth_sec:
            body = truth_sec[name]
            if not isinstance(body, dict) or set(body) - _SINUSOID_KEYS:
                raise ConfigError(f"expected a table with keys {sorted(_SINUSOID_KEYS)}", f"truth.{name}",
                                  _line_of(text, "truth", None))
            perturb[name] = {k: _num(v, f"truth.{name}.{k}", text, "truth", k) for k, v in body.items()}
    time_scale = truth_sec.get("time_scale")
    if time_scale is not None:
        time_scale = _num(time_scale, "truth.time_scale", text, "truth", "time_scale", positive=True)

    est = raw.get("estimator", {})
    initial_raw = est.get("initial")
    if not isinstance(initial_raw, dict) or not initial_raw:
        raise ConfigError("missing table of initial estimates", "estimator.initial",
                          _line_of(text, "estimator", "initial"))
    for name in initial_raw:
        if name not in PARAM_ORDER:
            raise ConfigError(f"unknown parameter {name!r}; expected one of {PARAM_ORDER}",
                              f"estimator.initial.{name}", _line_of(text, "estimator", "initial"))
    initial = {n: _num(v, f"estimator.initial.{n}", text, "estimator", "initial") for n, v in initial_raw.items()}
    estimate = est.get("estimate", [n for n in PARAM_ORDER if n in initial])
    if not isinstance(estimate, list) or not estimate:
        raise ConfigError("must be a non-empty list of parameter names", "estimator.estimate")
    for name in estimate:
        if name not in PARAM_ORDER:
            raise ConfigError(f"unknown parameter {name!r}", "estimator.estimate",
                              _line_of(text, "estimator", "estimate"))
        if name not in initial:
            raise ConfigError(f"no initial estimate for {name!r}", "estimator.initial",
                              _line_of(text, "estimator", "initial"))
    for name, tag in est.get("reparam", {}).items():
        if _DEFAULT_REPARAM.get(name) != tag:
            raise ConfigError(f"{name} is carried as {_DEFAULT_REPARAM.get(name)!r} by the two-level model",
                              f"estimator.reparam.{name}", _line_of(text, "estimator", "reparam"))
    bounds = {}
    for name, b in est.get("bounds", {}).items():
        if name not in estimate or not (isinstance(b, list) and len(b) == 2):
            raise ConfigError("bounds need [lower, upper] for an estimated parameter",
                              f"estimator.bounds.{name}", _line_of(text, "estimator", "bounds"))
        bounds[name] = (float(b[0]), float(b[1]))

    lr_raw = est.get("learning_rate", {"gamma0": 1e-4})
    if isinstance(lr_raw, (int, float)) and not isinstance(lr_raw, bool):
        lr_raw = {"gamma0": lr_raw}
    if not isinstance(lr_raw, dict) or set(lr_raw) - _LR_KEYS:
        raise ConfigError(f"expected a number or a table with keys {sorted(_LR_KEYS)}",
                          "estimator.learning_rate", _line_of(text, "estimator", "learning_rate"))
    try:
        lr = LearningRate(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in lr_raw.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "estimator.learning_rate",
                          _line_of(text, "estimator", "learning_rate")) from None

    run = raw.get("run", {})
    if "steps" in run and "T" in run:
        steps = _num(run["steps"], "run.steps", text, "run", "steps", integer=True, positive=True)
        tt = _num(run["T"], "run.T", text, "run", "T", positive=True)
        if abs(steps * dt - tt) > 1e-9 * tt:
            raise ConfigError(f"steps * dt = {steps * dt} disagrees with T = {tt}", "run.T",
                              _line_of(text, "run", "T"))
    elif "T" in run:
        tt = _num(run["T"], "run.T", text, "run", "T", positive=True)
        steps = int(round(tt / dt))
        if abs(steps * dt - tt) > 1e-9 * tt:
            raise ConfigError("T is not a whole number of time steps", "run.T", _line_of(text, "run", "T"))
    else:
        steps = _num(run.get("steps", 20_000), "run.steps", text, "run", "steps", integer=True, positive=True)
    seeds = run.get("seeds", [1])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("must be a non-empty list of non-negative integers", "run.seeds",
                          _line_of(text, "run", "seeds"))
    decimation = _num(run.get("decimation", 100), "run.decimation", text, "run", "decimation",
                      integer=True, positive=True)
    tail = _num(run.get("tail_fraction", 0.1), "run.tail_fraction", text, "run", "tail_fraction", positive=True)
    if tail > 1:
        raise ConfigError("must lie in (0, 1]", "run.tail_fraction", _line_of(text, "run", "tail_fraction"))
    workers = _num(run.get("workers", 1), "run.workers", text, "run", "workers", integer=True, positive=True)

    cfg = ExperimentConfig(
        truth=truth, dt=dt, initial=initial, estimate=tuple(n for n in PARAM_ORDER if n in estimate),
        learning_rate=lr, perturbations=perturb, time_scale=time_scale, bounds=bounds,
        trace_preserving=tp, steps=steps, seeds=tuple(seeds), decimation=decimation,
        output=str(run.get("output", "out")), tail_fraction=tail,
        strict_positivity=bool(run.get("strict_positivity", False)),
        restart_on_degenerate=bool(run.get("restart_on_degenerate", False)),
        replay=run.get("replay"), workers=workers,
        gradcheck=dict(raw.get("gradcheck", {})), offline=dict(raw.get("offline", {})), raw=raw,
    )
    try:
        cfg.schedule().check(cfg.truth_model())
        m = cfg.estimator_model()
        m.params.check(cfg.theta0(m))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), "estimator") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read a TOML config, or the ``config`` member of a manifest JSON."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc.msg}", line=exc.lineno) from None
        return parse_config(data.get("config", data))
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, text)
