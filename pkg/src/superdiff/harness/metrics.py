"""Metrics and the pass/fail report written to metrics.json."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..score_models import GmmParams

AMBIGUITY_RATIO = 2.0


@dataclass
class Check:
    name: str
    value: float
    op: str  # "<=", ">=", "<", "in"
    bound: Any
    passed: bool

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "value": self.value, "op": self.op, "bound": self.bound, "passed": self.passed}


@dataclass
class MetricsReport:
    experiment: str
    metrics: dict[str, Any] = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)

    def add(self, name: str, value, stderr: float | None = None) -> None:
        if stderr is None:
            self.metrics[name] = _plain(value)
        else:
            self.metrics[name] = {"value": _plain(value), "stderr": _plain(stderr)}

    def check(self, name: str, value: float, op: str, bound) -> bool:
        value = float(value)
        if op == "<=":
            ok = value <= bound
        elif op == "<":
            ok = value < bound
        elif op == ">=":
            ok = value >= bound
        elif op == "in":
            ok = bound[0] <= value <= bound[1]
        else:
            raise ValueError(f"unknown comparison {op!r}")
        ok = bool(ok) and math.isfinite(value)
        self.checks.append(Check(name, value, op, _plain(bound), ok))
        return ok

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict[str, Any]:
        return {"experiment": self.experiment, "passed": self.passed,
                "metrics": self.metrics, "checks": [c.to_dict() for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n"


def _plain(v):
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer, int)) and not isinstance(v, bool):
        return int(v)
    return v


@dataclass
class MixtureFractions:
    fractions: np.ndarray
    stderr: np.ndarray
    counts: np.ndarray
    ambiguous: int
    n: int


def metric_mixture_weights(samples, model_params: list[GmmParams]) -> MixtureFractions:
    """Assign each sample to the model owning its nearest mode.

    A sample is ambiguous when the distance to the nearest other model's mode
    is less than twice the distance to its own; ambiguous samples still count
    toward their nearest model and are reported separately.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    n = x.shape[0]
    m = len(model_params)
    if n == 0:
        return MixtureFractions(np.zeros(m), np.zeros(m), np.zeros(m, dtype=int), 0, 0)
    # distance to each model's closest mode, shape (n, m)
    dist = np.stack([np.min(np.linalg.norm(x[:, None, :] - p.means[None], axis=-1), axis=1)
                     for p in model_params], axis=1)
    owner = np.argmin(dist, axis=1)
    ambiguous = 0
    if m > 1:
        srt = np.sort(dist, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ambiguous = int(np.sum(srt[:, 1] < AMBIGUITY_RATIO * srt[:, 0]))
    counts = np.bincount(owner, minlength=m)
    frac = counts / n
    return MixtureFractions(frac, np.sqrt(frac * (1.0 - frac) / n), counts, ambiguous, n)


@dataclass
class DensityGap:
    median: float
    p95: float
    gaps: np.ndarray


def metric_density_gap(final_logq, bias=None, steps: int = 0, pair: tuple[int, int] = (0, 1)) -> DensityGap:
    """|logq^i - logq^j| at termination net of the accumulated offset steps * (l_i - l_j)."""
    lq = np.asarray(final_logq, dtype=float)
    i, j = pair
    offset = 0.0 if bias is None else steps * (float(bias[i]) - float(bias[j]))
    gaps = np.abs(lq[:, i] - lq[:, j] - offset)
    gaps = gaps[np.isfinite(gaps)]
    if gaps.size == 0:
        return DensityGap(math.nan, math.nan, gaps)
    return DensityGap(float(np.median(gaps)), float(np.quantile(gaps, 0.95)), gaps)


@dataclass
class EstimatorError:
    rmse: list[float]
    order: list[float]


def rmse(a, b) -> float:
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    diff = diff[np.isfinite(diff)]
    return float(np.sqrt(np.mean(diff * diff))) if diff.size else math.nan


def metric_estimator_error(tracked: list, analytic: list) -> EstimatorError:
    """RMSE per resolution (coarse to fine) and order log2(rmse_k / rmse_{k+1})."""
    errs = [rmse(t, a) for t, a in zip(tracked, analytic)]
    orders = [math.log2(errs[k] / errs[k + 1]) if errs[k + 1] > 0 else math.inf for k in range(len(errs) - 1)]
    return EstimatorError(errs, orders)
