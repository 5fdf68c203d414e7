"""JSON run configuration: parsing, validation and model construction.

Schema (all keys optional unless noted)::

    {
      "experiment": "sample" | "or_mixture" | "and_equal_density" |
                    "estimator_validation" | "hutchinson_compare" | "dsm_train",
      "schedule": {"kind": "vp_linear", "params": {...}},
      "models": [{"kind": "gmm", "weights": [...], "means": [[...]], "stddevs": [...]},
                 {"kind": "grid", "path": "score.grid"},
                 {"kind": "mlp", "path": "weights.bin"}],
      "mode": {"kind": "or", "temperature": 1.0, "bias": [...], "weights": [...]},
      "integrator": {"kind": "sde", "steps": 1000, "xi": "half_g2", "seed": 0, ...},
      "n_samples": 1000,
      "seed": 0,
      "output_dir": "out",
      "tolerances": {...},
      "params": {...}
    }

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from ..dsm_training import MlpScoreModel, load_weights
from ..integrate import ConfigurationError, IntegratorConfig
from ..schedules import Schedule, make_schedule
from ..score_models import GmmParams, GmmScoreModel, GridFormatError, grid_score_load
from ..superpose import SuperposeMode

EXPERIMENTS = ("sample", "or_mixture", "and_equal_density", "estimator_validation",
               "hutchinson_compare", "dsm_train")
_TOP_KEYS = {"experiment", "schedule", "models", "mode", "integrator", "n_samples", "seed",
             "output_dir", "tolerances", "params"}
_INTEGRATOR_KEYS = {"kind", "steps", "xi", "seed", "divergence", "hutchinson_probes",
                    "brownian_refine", "track", "record_every", "trace_samples"}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending file or key."""


@dataclass
class RunConfig:
    experiment: str
    schedule: Schedule
    model_specs: list[dict[str, Any]]
    mode: SuperposeMode
    integrator: IntegratorConfig
    n_samples: int
    output_dir: Path
    tolerances: dict[str, float] = field(default_factory=dict)
    params: dict[str, Any] = field(default_factory=dict)
    source: Path | None = None

    @property
    def seed(self) -> int:
        return self.integrator.seed

    def to_dict(self) -> dict[str, Any]:
        integ = {k: getattr(self.integrator, k) for k in sorted(_INTEGRATOR_KEYS)}
        return {
            "experiment": self.experiment,
            "schedule": self.schedule.to_config(),
            "models": [{k: (str(v) if isinstance(v, Path) else v) for k, v in s.items()} for s in self.model_specs],
            "mode": self.mode.to_config(),
            "integrator": integ,
            "n_samples": self.n_samples,
            "output_dir": str(self.output_dir),
            "tolerances": dict(self.tolerances),
            "params": dict(self.params),
        }


def _fail(where: str, msg: str):
    raise ConfigError(f"{where}: {msg}")


def _model_spec(raw: Any, where: str, base: Path) -> dict[str, Any]:
    if not isinstance(raw, dict) or "kind" not in raw:
        _fail(where, "model entry must be an object with a 'kind'")
    kind = raw["kind"]
    if kind == "gmm":
        try:
            GmmParams.from_dict(raw)
        except (KeyError, TypeError, ValueError) as exc:
            _fail(where, f"invalid gmm parameters ({exc})")
        return dict(raw)
    if kind in ("grid", "mlp"):
        if "path" not in raw:
            _fail(where, f"{kind} model needs a 'path'")
        path = Path(raw["path"])
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            _fail(where, f"model file not found: {path}")
        return {"kind": kind, "path": path}
    _fail(where, f"unknown model kind {kind!r}")


def parse_config(raw: dict[str, Any], base: Path | str = ".", where: str = "config",
                 overrides: dict[str, Any] | None = None) -> RunConfig:
    """Validate a decoded JSON object. ``overrides`` may set seed, steps, n_samples, output_dir."""
    base = Path(base)
    if not isinstance(raw, dict):
        _fail(where, "top level must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        _fail(where, f"unknown keys {sorted(unknown)}")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    experiment = raw.get("experiment", "sample")
    if experiment not in EXPERIMENTS:
        _fail(where, f"unknown experiment {experiment!r}; expected one of {list(EXPERIMENTS)}")

    try:
        schedule = make_schedule(raw.get("schedule"))
    except (KeyError, TypeError, ValueError) as exc:
        _fail(f"{where}: schedule", str(exc))

    models_raw = raw.get("models", [])
    if not isinstance(models_raw, list):
        _fail(where, "'models' must be a list")
    if not models_raw and experiment != "dsm_train":
        _fail(where, "'models' must list at least one model")
    specs = [_model_spec(m, f"{where}: models[{i}]", base) for i, m in enumerate(models_raw)]

    try:
        mode = SuperposeMode.from_config(raw.get("mode", {"kind": "or"}))
        if mode.kind in ("or", "and"):
            mode.bias_vector(len(specs))
        if mode.weights is not None:
            mode.weight_vector(len(specs))
    except (KeyError, TypeError, ValueError) as exc:
        _fail(f"{where}: mode", str(exc))

    integ_raw = dict(raw.get("integrator", {}))
    unknown = set(integ_raw) - _INTEGRATOR_KEYS
    if unknown:
        _fail(f"{where}: integrator", f"unknown keys {sorted(unknown)}")
    if "seed" in raw:
        integ_raw["seed"] = raw["seed"]
    if "seed" in overrides:
        integ_raw["seed"] = overrides["seed"]
    if "steps" in overrides:
        integ_raw["steps"] = overrides["steps"]
    try:
        seed = int(integ_raw.get("seed", 0))
        if not 0 <= seed < 2**64:
            raise ConfigurationError(f"seed must be a 64-bit unsigned integer, got {seed}")
        integ_raw["seed"] = seed
        integ = IntegratorConfig(**integ_raw)
    except (TypeError, ValueError) as exc:
        _fail(f"{where}: integrator", str(exc))
    if mode.kind == "and" and (integ.kind != "sde" or integ.constant_xi is not None):
        _fail(f"{where}: mode", "AND mode requires SDE inference with xi = half_g2")

    n_samples = overrides.get("n_samples", raw.get("n_samples", 1000))
    if not isinstance(n_samples, int) or isinstance(n_samples, bool) or n_samples < 1:
        _fail(where, f"n_samples must be a positive integer, got {n_samples!r}")

    out = Path(overrides.get("output_dir", raw.get("output_dir", "out")))
    if not out.is_absolute() and "output_dir" not in overrides:
        out = base / out

    tolerances = raw.get("tolerances", {})
    params = raw.get("params", {})
    if not isinstance(tolerances, dict) or not isinstance(params, dict):
        _fail(where, "'tolerances' and 'params' must be objects")
    for key, val in tolerances.items():
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            _fail(f"{where}: tolerances.{key}", "must be a number")

    return RunConfig(experiment, schedule, specs, mode, integ, n_samples, out,
                     dict(tolerances), dict(params))


def load_config(path, overrides: dict[str, Any] | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    cfg = parse_config(raw, path.parent, str(path), overrides)
    return replace(cfg, source=path)


def build_models(config: RunConfig) -> list:
    models = []
    for i, spec in enumerate(config.model_specs):
        where = f"models[{i}]"
        try:
            if spec["kind"] == "gmm":
                models.append(GmmScoreModel(GmmParams.from_dict(spec), config.schedule))
            elif spec["kind"] == "grid":
                models.append(grid_score_load(spec["path"]))
            else:
                models.append(MlpScoreModel(load_weights(spec["path"])))
        except (GridFormatError, OSError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if len({m.dim for m in models}) > 1:
        raise ConfigError(f"models disagree on dimension: {[m.dim for m in models]}")
    return models
