"""Noise schedules and the Ornstein-Uhlenbeck forward SDE they induce.

Every schedule exposes the marginal coefficients ``alpha(t)`` and ``sigma(t)``
together with closed-form time derivatives. The forward SDE is

    dx = dlog_alpha_dt(t) * x dt + g(t) dW,
    g(t)^2 = 2 sigma(t)^2 * d/dt log(sigma(t) / alpha(t)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np

T_MIN = 1e-4


class ScheduleDomainError(ValueError):
    """Raised when a schedule is evaluated where its coefficients diverge."""


class ScheduleValues(NamedTuple):
    alpha: float
    sigma: float
    dlogalpha_dt: float
    g: float


class Schedule:
    """Base class. Subclasses implement the raw coefficient functions."""

    kind: str = ""
    variance_preserving: bool = True
    t_min: float = T_MIN

    def alpha(self, t: float) -> float:
        raise NotImplementedError

    def sigma(self, t: float) -> float:
        raise NotImplementedError

    def dlog_alpha_dt(self, t: float) -> float:
        raise NotImplementedError

    def dlog_sigma_over_alpha_dt(self, t: float) -> float:
        raise NotImplementedError

    def g2(self, t: float) -> float:
        """Squared diffusion coefficient, 2 sigma^2 d/dt log(sigma/alpha)."""
        s = self.sigma(t)
        return 2.0 * s * s * self.dlog_sigma_over_alpha_dt(t)

    @property
    def prior_std(self) -> float:
        """Standard deviation of the terminal (t = 1) reference Gaussian."""
        return 1.0

    def clamp(self, t: float) -> float:
        return min(max(float(t), self.t_min), 1.0)

    def params(self) -> dict[str, float]:
        raise NotImplementedError

    def to_config(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": self.params()}


@dataclass(frozen=True)
class VPLinear(Schedule):
    """Variance-preserving schedule with linear beta(t) = b_min + t (b_max - b_min)."""

    beta_min: float = 0.1
    beta_max: float = 20.0

    kind = "vp_linear"
    variance_preserving = True

    def __post_init__(self):
        if not (0.0 <= self.beta_min <= self.beta_max) or self.beta_max <= 0.0:
            raise ValueError(f"invalid beta range ({self.beta_min}, {self.beta_max})")

    def beta(self, t: float) -> float:
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def log_alpha(self, t: float) -> float:
        return -0.5 * (self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)

    def alpha(self, t):
        return math.exp(self.log_alpha(t))

    def sigma(self, t):
        # 1 - alpha^2 without cancellation near t = 0
        return math.sqrt(-math.expm1(2.0 * self.log_alpha(t)))

    def dlog_alpha_dt(self, t):
        return -0.5 * self.beta(t)

    def dlog_sigma_over_alpha_dt(self, t):
        s2 = -math.expm1(2.0 * self.log_alpha(t))
        if s2 == 0.0:
            return math.inf
        return self.beta(t) / (2.0 * s2)

    def g2(self, t):
        return self.beta(t)

    def params(self):
        return {"beta_min": self.beta_min, "beta_max": self.beta_max}


@dataclass(frozen=True)
class Cosine(Schedule):
    """Variance-preserving cosine schedule.

    ``alpha(t) = cos(phi(t)) / cos(phi(0))`` with the phase ``phi`` running
    linearly from ``pi/2 * s / (1 + s)`` to the angle at which alpha reaches
    ``alpha_end``. Stopping short of ``pi/2`` keeps g(1) finite.
    """

    s: float = 0.008
    alpha_end: float = 1e-3

    kind = "cosine"
    variance_preserving = True

    def __post_init__(self):
        if self.s < 0.0 or not (0.0 < self.alpha_end < 1.0):
            raise ValueError(f"invalid cosine parameters s={self.s}, alpha_end={self.alpha_end}")

    @property
    def _phi0(self) -> float:
        return 0.5 * math.pi * self.s / (1.0 + self.s)

    @property
    def _phi1(self) -> float:
        return math.acos(self.alpha_end * math.cos(self._phi0))

    def _phi(self, t: float) -> float:
        return self._phi0 + t * (self._phi1 - self._phi0)

    def alpha(self, t):
        return math.cos(self._phi(t)) / math.cos(self._phi0)

    def sigma(self, t):
        a = self.alpha(t)
        return math.sqrt(max(0.0, (1.0 - a) * (1.0 + a)))

    def dlog_alpha_dt(self, t):
        return -(self._phi1 - self._phi0) * math.tan(self._phi(t))

    def dlog_sigma_over_alpha_dt(self, t):
        # d log sigma = -alpha^2 dlog_alpha / sigma^2, so the ratio term is -dlog_alpha / sigma^2
        s = self.sigma(t)
        if s == 0.0:
            return math.inf
        return -self.dlog_alpha_dt(t) / (s * s)

    def g2(self, t):
        return -2.0 * self.dlog_alpha_dt(t)

    def params(self):
        return {"s": self.s, "alpha_end": self.alpha_end}


@dataclass(frozen=True)
class VarianceExploding(Schedule):
    """alpha = 1, sigma(t) = sigma_min (sigma_max / sigma_min)^t."""

    sigma_min: float = 0.01
    sigma_max: float = 50.0

    kind = "ve"
    variance_preserving = False

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError(f"invalid sigma range ({self.sigma_min}, {self.sigma_max})")

    @property
    def _log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def alpha(self, t):
        return 1.0

    def sigma(self, t):
        return self.sigma_min * math.exp(t * self._log_ratio)

    def dlog_alpha_dt(self, t):
        return 0.0

    def dlog_sigma_over_alpha_dt(self, t):
        return self._log_ratio

    @property
    def prior_std(self):
        return self.sigma_max

    def params(self):
        return {"sigma_min": self.sigma_min, "sigma_max": self.sigma_max}


SCHEDULES = {cls.kind: cls for cls in (VPLinear, Cosine, VarianceExploding)}


def make_schedule(spec: dict[str, Any] | None) -> Schedule:
    """Build a schedule from ``{"kind": ..., "params": {...}}``; None gives the default VP-linear."""
    if spec is None:
        return VPLinear()
    kind = spec.get("kind")
    if kind not in SCHEDULES:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {sorted(SCHEDULES)}")
    return SCHEDULES[kind](**spec.get("params", {}))


def evaluate(schedule: Schedule, t: float) -> ScheduleValues:
    """Return (alpha, sigma, dlogalpha_dt, g) at ``t`` clamped to ``[t_min, 1]``."""
    t = schedule.clamp(t)
    values = (schedule.alpha(t), schedule.sigma(t), schedule.dlog_alpha_dt(t), schedule.g2(t))
    if not all(math.isfinite(v) for v in values) or values[3] < 0.0:
        raise ScheduleDomainError(f"{schedule.kind} schedule is not finite at t={t!r}: {values}")
    return ScheduleValues(values[0], values[1], values[2], math.sqrt(values[3]))


def forward_drift(schedule: Schedule, x: np.ndarray, t: float) -> np.ndarray:
    """OU drift f_t(x) = dlog_alpha_dt(t) * x."""
    return evaluate(schedule, t).dlogalpha_dt * np.asarray(x, dtype=float)


def drift_divergence(schedule: Schedule, t: float, dim: int) -> float:
    """Divergence of the OU drift: dim * dlog_alpha_dt(t)."""
    if dim < 0:
        raise ValueError("dim must be nonnegative")
    return dim * evaluate(schedule, t).dlogalpha_dt
