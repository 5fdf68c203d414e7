"""Log-density increments along sampling trajectories, plus divergence oracles.

Shapes: states are ``(..., d)``; increments are returned per leading index.
Reverse time ``tau`` maps to forward time ``t = 1 - tau``.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np

from .schedules import Schedule, evaluate


class EstimatorError(FloatingPointError):
    pass


class LogDensityIncrement(NamedTuple):
    value: np.ndarray
    transport: np.ndarray
    divergence: np.ndarray
    correction: np.ndarray


class KernelParams(NamedTuple):
    scale: float
    S_squared: float


def _dot(a, b):
    return np.einsum("...d,...d->...", a, b)


def _resolve(score, x, t):
    """Accept a precomputed score array or a model with ``.score``."""
    if hasattr(score, "score"):
        score = score.score(x, t)
    s = np.asarray(score, dtype=float)
    if not np.all(np.isfinite(s)):
        bad = np.argwhere(~np.all(np.isfinite(s), axis=-1))
        raise EstimatorError(f"non-finite score at t={t:.6g}, rows {bad[:5].ravel().tolist()}")
    return s


def ito_value(s: np.ndarray, x: np.ndarray, dx: np.ndarray, dlogalpha: float, g: float, dtau: float) -> np.ndarray:
    """Value of the Ito increment from precomputed, finite scores (no component breakdown)."""
    step = dx + (dlogalpha * dtau) * x - (0.5 * g * g * dtau) * s
    return np.sum(step * s, axis=-1) + x.shape[-1] * dlogalpha * dtau


def ito_increment(score, schedule: Schedule, x, dx, tau: float, dtau: float) -> LogDensityIncrement:
    """Change of log q_{1-tau} along a realized reverse-SDE step with diffusion g_{1-tau}.

    ``dx`` may come from any drift as long as the noise coefficient is g.
    """
    t = 1.0 - tau
    x = np.asarray(x, dtype=float)
    s = _resolve(score, x, t)
    _, _, dlogalpha, g = evaluate(schedule, t)
    f = dlogalpha * x
    transport = _dot(np.asarray(dx, dtype=float), s)
    divergence = np.full_like(transport, x.shape[-1] * dlogalpha * dtau)
    correction = _dot(f - 0.5 * g * g * s, s) * dtau
    return LogDensityIncrement(transport + divergence + correction, transport, divergence, correction)


def smooth_increment(score, div_v, v, u, x, t: float, dt: float) -> LogDensityIncrement:
    """Change of log q^i along dx/dt = u for a density transported by v^i.

    The formula is invariant under time reversal, so reverse-time fields with
    ``dt = dtau`` are valid inputs.
    """
    s = _resolve(score, x, t)
    transport = _dot(s, np.asarray(u, dtype=float)) * dt
    divergence = -np.asarray(div_v, dtype=float) * dt
    correction = -_dot(s, np.asarray(v, dtype=float)) * dt
    return LogDensityIncrement(transport + divergence + correction, transport, divergence, correction)


def exact_divergence_fd(field: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Sum of central-difference partials d field_i / d x_i."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    eye = np.eye(d) * h
    # (2d, ..., d) perturbed copies in one call
    pts = np.concatenate([x[None] + eye.reshape(d, *([1] * (x.ndim - 1)), d),
                          x[None] - eye.reshape(d, *([1] * (x.ndim - 1)), d)])
    vals = np.asarray(field(pts))
    plus, minus = vals[:d], vals[d:]
    idx = np.arange(d)
    return np.sum((plus[idx, ..., idx] - minus[idx, ..., idx]), axis=0) / (2.0 * h)


def hutchinson_divergence(field: Callable, x, probes: int, rng: np.random.Generator, h: float = 1e-5):
    """Rademacher Hutchinson trace estimate with finite-difference JVPs.

    Returns ``(estimate, sample_variance)`` over probes, per leading index of x.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    x = np.asarray(x, dtype=float)
    eps = rng.integers(0, 2, size=(probes, *x.shape)) * 2.0 - 1.0
    return hutchinson_from_probes(field, x, eps, h)


def hutchinson_from_probes(field: Callable, x, eps, h: float = 1e-5):
    """Hutchinson estimate for given probe vectors ``eps`` of shape ``(probes, *x.shape)``."""
    x = np.asarray(x, dtype=float)
    probes = eps.shape[0]
    pts = np.concatenate([x[None] + h * eps, x[None] - h * eps])
    vals = np.asarray(field(pts))
    jvp = (vals[:probes] - vals[probes:]) / (2.0 * h)
    samples = _dot(eps, jvp)
    var = samples.var(axis=0, ddof=1) if probes > 1 else np.zeros_like(samples[0])
    return samples.mean(axis=0), var


def noising_kernel(schedule: Schedule, t: float, dt: float) -> KernelParams:
    """Data-independent Gaussian kernel from time t to t + dt: scale and variance S^2."""
    t0, t1 = schedule.clamp(t), schedule.clamp(t + dt)
    a0, s0 = schedule.alpha(t0), schedule.sigma(t0)
    a1, s1 = schedule.alpha(t1), schedule.sigma(t1)
    scale = a1 / a0
    s2 = s1 * s1 - (s0 * scale) ** 2
    if s2 < -1e-12:
        raise EstimatorError(f"negative kernel variance {s2:.3e} for t={t}, dt={dt}")
    return KernelParams(scale, max(s2, 0.0))


def detailed_balance_increment(score, schedule: Schedule, x, v, eps, t: float, dt: float,
                               expanded: bool = False) -> np.ndarray:
    """Discrete-time estimate of log q_t(y) - log q_{t+dt}(x) for y = x + dt v + g sqrt(dt) eps.

    ``x`` lives at forward time ``t + dt`` and the score is taken there. By
    default the Gaussian noising/denoising kernel pair is evaluated exactly::

        <scale * y - x, s> - S^2/2 |s|^2 + d log(scale)

    ``expanded=True`` returns the first-order expansion of the same quantity.
    """
    x = np.asarray(x, dtype=float)
    t_hi = t + dt
    s = _resolve(score, x, t_hi)
    _, _, dlogalpha, g = evaluate(schedule, t_hi)
    step = dt * np.asarray(v, dtype=float) + g * math.sqrt(dt) * np.asarray(eps, dtype=float)
    d = x.shape[-1]
    if expanded:
        return d * dt * dlogalpha - 0.5 * dt * g * g * _dot(s, s) + _dot(step + dt * dlogalpha * x, s)
    scale, s2 = noising_kernel(schedule, t, dt)
    y = x + step
    return _dot(scale * y - x, s) - 0.5 * s2 * _dot(s, s) + d * math.log(scale)
