"""Reverse-time SDE/ODE integration with per-model log-density tracking.

The main loop (``run_superdiff``) advances a batch of trajectories on a
uniform grid ``tau_k = k * dtau`` from ``tau = 0`` (t = 1) to
``tau = 1 - t_min``. Every step evaluates each model's score once on the
pre-step state; the same arrays feed the weights, the drift and the
log-density increments.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .estimators import exact_divergence_fd, hutchinson_from_probes, ito_value, smooth_increment
from .rng import TAG_CHOICE, TAG_DW, TAG_INIT, TAG_PROBE, CounterRNG
from .schedules import Schedule, evaluate
from .score_models import LOG_2PI
from .superpose import SuperposeMode, kappa_and, kappa_or, superposed_drift

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    """``xi`` is "half_g2" (standard reverse SDE), "zero" (probability-flow ODE)
    or a nonnegative constant. ``brownian_refine = r`` builds each step's
    noise from 2**r finer increments, so a run with N steps and r = 1 follows
    the same Brownian path as a run with 2N steps and r = 0.
    """

    kind: str = "sde"
    steps: int = 1000
    xi: Any = "half_g2"
    seed: int = 0
    divergence: str = "fd"
    hutchinson_probes: int = 1
    brownian_refine: int = 0
    track: bool = True
    record_every: int = 1
    trace_samples: int = 16

    def __post_init__(self):
        if self.kind not in ("sde", "ode"):
            raise ConfigurationError(f"unknown integrator kind {self.kind!r}")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.xi == "zero":
            object.__setattr__(self, "kind", "ode")
        elif self.xi != "half_g2":
            try:
                xi = float(self.xi)
            except (TypeError, ValueError):
                raise ConfigurationError(f"invalid xi {self.xi!r}") from None
            if xi < 0:
                raise ConfigurationError("xi must be nonnegative")
            object.__setattr__(self, "xi", xi)
        if self.divergence not in ("fd", "exact", "hutchinson"):
            raise ConfigurationError(f"unknown divergence method {self.divergence!r}")
        if self.brownian_refine < 0 or self.record_every < 1:
            raise ConfigurationError("brownian_refine must be >= 0 and record_every >= 1")

    @property
    def constant_xi(self) -> float | None:
        return self.xi if isinstance(self.xi, float) and self.kind == "sde" else None


@dataclass
class TrajectoryState:
    x: np.ndarray
    tau: float
    logq: np.ndarray
    last_kappa: np.ndarray
    fallback: np.ndarray


@dataclass
class RunResult:
    sample_ids: np.ndarray
    final_x: np.ndarray
    final_logq: np.ndarray
    aborted: np.ndarray
    fallback_steps: np.ndarray
    taus: np.ndarray
    dtau: float
    trace_ids: np.ndarray
    trace_steps: np.ndarray
    trace_tau: np.ndarray
    trace_x: np.ndarray
    trace_logq: np.ndarray
    trace_kappa: np.ndarray
    trace_fallback: np.ndarray
    score_calls: np.ndarray
    divergence_calls: np.ndarray
    initial_x: np.ndarray | None = None
    initial_logq: np.ndarray | None = None
    and_residual_max: float = 0.0
    abort_info: list[dict] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.final_x.shape[0]

    @property
    def steps(self) -> int:
        return self.taus.size

    def trace_records(self):
        """Yield ``(sample_id, step, tau, x, logq, kappa, fallback)`` in sample-major order."""
        for j, sid in enumerate(self.trace_ids):
            for r, step in enumerate(self.trace_steps):
                yield (int(sid), int(step), float(self.trace_tau[r]), self.trace_x[r, j],
                       self.trace_logq[r, j], self.trace_kappa[r, j], bool(self.trace_fallback[r, j]))


def time_grid(steps: int, t_min: float) -> tuple[np.ndarray, float]:
    dtau = (1.0 - t_min) / steps
    return np.arange(steps) * dtau, dtau


def sde_step(x, drift, g: float, dtau: float, noise):
    """Euler-Maruyama: dW = sqrt(dtau) * noise, dx = drift dtau + g dW."""
    dW = math.sqrt(dtau) * np.asarray(noise, dtype=float)
    dx = np.asarray(drift, dtype=float) * dtau + g * dW
    return x + dx, dx, dW


def ode_step(x, field, dtau: float):
    dx = np.asarray(field, dtype=float) * dtau
    return x + dx, dx


def step_noise(rng: CounterRNG, samples, step: int, dim: int, refine: int = 0) -> np.ndarray:
    """Standard normal for coarse step ``step`` assembled from 2**refine fine draws."""
    if refine == 0:
        return rng.normal(samples, step, dim, TAG_DW)
    k = 1 << refine
    total = sum(rng.normal(samples, step * k + j, dim, TAG_DW) for j in range(k))
    return total / math.sqrt(k)


def prior_log_density(x, std: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    return -0.5 * np.sum(x * x, axis=-1) / std**2 - 0.5 * d * (LOG_2PI + 2.0 * math.log(std))


class _Counter:
    def __init__(self, m: int):
        self.calls = np.zeros(m, dtype=np.int64)
        self.div_calls = np.zeros(m, dtype=np.int64)


def _score_divergence(model, x, t, method: str, rng: CounterRNG, ids, step: int, probes: int):
    """Divergence of the score field (Laplacian of log q) and number of extra evaluations."""
    if method == "exact":
        if not hasattr(model, "laplacian"):
            raise ConfigurationError("divergence='exact' needs models with an analytic laplacian")
        return model.laplacian(x, t), 0
    field_fn = lambda p: model.score(p, t)  # noqa: E731
    d = x.shape[-1]
    if method == "fd":
        return exact_divergence_fd(field_fn, x), 2 * d
    eps = rng.rademacher(ids, step, probes * d, TAG_PROBE).reshape(len(ids), probes, d).transpose(1, 0, 2)
    est, _ = hutchinson_from_probes(field_fn, x, eps)
    return est, 2 * probes


def _run_chunk(models, schedule: Schedule, mode: SuperposeMode, integ: IntegratorConfig,
               ids: np.ndarray, trace_mask: np.ndarray):
    m = len(models)
    d = models[0].dim
    n = ids.size
    rng = CounterRNG(integ.seed)
    taus, dtau = time_grid(integ.steps, schedule.t_min)
    bias = mode.bias_vector(m) if mode.kind in ("or", "and") else np.zeros(m)
    counter = _Counter(m)
    ode = integ.kind == "ode"
    xi = integ.constant_xi

    x = schedule.prior_std * rng.normal(ids, 0, d, TAG_INIT)
    logq = np.repeat(prior_log_density(x, schedule.prior_std)[:, None], m, axis=1)
    x_init, logq_init = x.copy(), logq.copy()
    kappa = np.full((n, m), 1.0 / m)
    fallback_now = np.zeros(n, dtype=bool)
    fallback_steps = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    aborts: list[dict] = []
    and_resid = 0.0

    if mode.kind == "average":
        fixed = np.broadcast_to(mode.weight_vector(m), (n, m))
    elif mode.kind == "choice":
        u = rng.uniform(ids, 0, 1, TAG_CHOICE)[:, 0]
        pick = np.minimum(np.searchsorted(np.cumsum(mode.weight_vector(m)), u), m - 1)
        fixed = np.eye(m)[pick]

    tr_idx = np.flatnonzero(trace_mask)
    rec_steps = [k for k in range(integ.steps) if k % integ.record_every == 0] + [integ.steps]
    rec = {key: [] for key in ("x", "logq", "kappa", "fb")}

    def record():
        rec["x"].append(x[tr_idx].copy())
        rec["logq"].append(logq[tr_idx].copy())
        rec["kappa"].append(kappa[tr_idx].copy())
        rec["fb"].append(fallback_now[tr_idx].copy())

    for k, tau in enumerate(taus):
        t = 1.0 - tau
        act = np.flatnonzero(alive)
        full = act.size == n
        xa = x if full else x[act]
        ida = ids if full else ids[act]
        _, _, dlogalpha, g = evaluate(schedule, t)

        with np.errstate(all="ignore"):
            s = np.stack([mdl.score(xa, t) for mdl in models], axis=-2)
        counter.calls += xa.shape[0]

        noise = None
        if not ode:
            noise = step_noise(rng, ida, k, d, integ.brownian_refine)
        fb = np.zeros(xa.shape[0], dtype=bool)
        if mode.kind == "or":
            ka = kappa_or(logq if full else logq[act], mode.temperature, bias)
        elif mode.kind == "and":
            if ode or xi is not None:
                raise ConfigurationError("AND mode requires SDE inference with xi = g^2/2")
            ka, _, fb = kappa_and(s, schedule, xa, tau, dtau, math.sqrt(dtau) * noise, bias)
        else:
            ka = fixed if full else fixed[act]

        if k % integ.record_every == 0:
            kappa[act] = ka
            fallback_now[:] = False
            fallback_now[act] = fb
            record()

        with np.errstate(all="ignore"):
            if ode:
                drift = superposed_drift(ka, s, schedule, xa, tau, "ode")
                new_x, dx = ode_step(xa, drift, dtau)
            else:
                drift = superposed_drift(ka, s, schedule, xa, tau, "sde", xi=xi)
                diff = g if xi is None else math.sqrt(2.0 * xi)
                new_x, dx, _ = sde_step(xa, drift, diff, dtau, noise)

            if integ.track:
                if ode:
                    # rows with a non-finite score are aborted below, not raised
                    good = np.all(np.isfinite(s), axis=(-2, -1))
                    sf = s if np.all(good) else np.where(good[:, None, None], s, 0.0)
                    v = -dlogalpha * xa[:, None, :] + 0.5 * g * g * sf
                    divs = np.empty((xa.shape[0], m))
                    for i, mdl in enumerate(models):
                        div_s, extra = _score_divergence(mdl, xa, t, integ.divergence, rng, ida, k,
                                                         integ.hutchinson_probes)
                        divs[:, i] = -d * dlogalpha + 0.5 * g * g * div_s
                        counter.div_calls[i] += extra * xa.shape[0]
                    inc = smooth_increment(sf, divs, v, drift[:, None, :], xa[:, None, :], t, dtau).value
                    inc[~good] = np.nan
                elif xi is None:
                    # non-finite scores propagate into inc and abort the row
                    inc = ito_value(s, xa[:, None, :], dx[:, None, :], dlogalpha, g, dtau)
                else:
                    raise ConfigurationError("density tracking needs xi = g^2/2 for SDE inference")
                if mode.kind == "and":
                    ok = ~fb
                    if np.any(ok) and m > 1:
                        gap = (inc[ok] - bias) - (inc[ok, :1] - bias[0])
                        finite = np.isfinite(gap)
                        if np.any(finite):
                            and_resid = max(and_resid, float(np.max(np.abs(gap[finite]))))
                new_logq = (logq if full else logq[act]) + inc
            else:
                new_logq = logq if full else logq[act]

        bad = ~(np.all(np.isfinite(new_x), axis=-1) & np.all(np.isfinite(new_logq), axis=-1))
        if np.any(bad):
            for j in np.flatnonzero(bad):
                aborts.append({"sample_id": int(ida[j]), "step": k, "tau": float(tau)})
            log.warning("%d trajectories aborted at step %d", int(bad.sum()), k)
        if full and not np.any(bad):
            x, logq, kappa = new_x, new_logq, np.array(ka, dtype=float, copy=True)
            fallback_now = fb
        else:
            keep = act[~bad]
            x[keep] = new_x[~bad]
            logq[keep] = new_logq[~bad]
            kappa[act] = ka
            fallback_now = np.zeros(n, dtype=bool)
            fallback_now[act] = fb
            dead = act[bad]
            alive[dead] = False
            x[dead] = np.nan
            logq[dead] = np.nan
        fallback_steps += fallback_now

    record()
    nrec = len(rec["x"])
    trace = {key: np.stack(v) for key, v in rec.items()}
    return {
        "x": x, "logq": logq, "x0": x_init, "logq0": logq_init, "aborted": ~alive, "fallback_steps": fallback_steps,
        "trace": trace, "trace_steps": np.asarray(rec_steps[:nrec]),
        "calls": counter.calls, "div_calls": counter.div_calls,
        "and_resid": and_resid, "aborts": aborts,
    }


def worker_count(default: int = 1) -> int:
    raw = os.environ.get("SUPERDIFF_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"SUPERDIFF_THREADS must be an integer, got {raw!r}") from None


def run_superdiff(models: Sequence, schedule: Schedule, mode: SuperposeMode, integ: IntegratorConfig,
                  n_samples: int, threads: int | None = None, chunk_size: int | None = None) -> RunResult:
    """Sample ``n_samples`` trajectories of the superposed reverse process.

    Results depend only on (seed, configuration): each trajectory's noise
    comes from a counter-based stream keyed by its sample index, so chunking
    and thread count do not change the output.
    """
    if not models:
        raise ConfigurationError("need at least one model")
    dims = {mdl.dim for mdl in models}
    if len(dims) != 1:
        raise ConfigurationError(f"models disagree on dimension: {sorted(dims)}")
    if mode.kind == "and" and (integ.kind != "sde" or integ.constant_xi is not None):
        raise ConfigurationError("AND mode requires SDE inference with xi = g^2/2")
    if not integ.track and mode.kind == "or" and mode.temperature != 0 and len(models) > 1:
        raise ConfigurationError("OR mode needs density tracking")
    if integ.kind == "sde" and integ.constant_xi is not None and integ.track:
        raise ConfigurationError("density tracking needs xi = g^2/2 for SDE inference")
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")

    threads = threads or worker_count()
    ids = np.arange(n_samples, dtype=np.int64)
    trace_mask = ids < integ.trace_samples
    if chunk_size is None:
        chunk_size = max(1, math.ceil(n_samples / threads))
    bounds = [(a, min(a + chunk_size, n_samples)) for a in range(0, n_samples, chunk_size)]

    def job(b):
        a, e = b
        return _run_chunk(models, schedule, mode, integ, ids[a:e], trace_mask[a:e])

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]

    taus, dtau = time_grid(integ.steps, schedule.t_min)
    tr = [p["trace"] for p in parts]
    return RunResult(
        sample_ids=ids,
        final_x=np.concatenate([p["x"] for p in parts]),
        final_logq=np.concatenate([p["logq"] for p in parts]),
        aborted=np.concatenate([p["aborted"] for p in parts]),
        fallback_steps=np.concatenate([p["fallback_steps"] for p in parts]),
        taus=taus,
        dtau=dtau,
        trace_ids=ids[trace_mask],
        trace_steps=parts[0]["trace_steps"],
        trace_tau=np.append(taus, 1.0 - schedule.t_min)[parts[0]["trace_steps"]],
        trace_x=np.concatenate([t["x"] for t in tr], axis=1),
        trace_logq=np.concatenate([t["logq"] for t in tr], axis=1),
        trace_kappa=np.concatenate([t["kappa"] for t in tr], axis=1),
        trace_fallback=np.concatenate([t["fb"] for t in tr], axis=1),
        score_calls=sum(p["calls"] for p in parts),
        divergence_calls=sum(p["div_calls"] for p in parts),
        initial_x=np.concatenate([p["x0"] for p in parts]),
        initial_logq=np.concatenate([p["logq0"] for p in parts]),
        and_residual_max=max(p["and_resid"] for p in parts),
        abort_info=[a for p in parts for a in p["aborts"]],
    )
