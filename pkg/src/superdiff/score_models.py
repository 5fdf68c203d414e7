"""Score backends: analytic Gaussian mixtures, gridded fields, and MLPs.

All backends accept states of shape ``(..., dim)`` and a scalar time ``t`` and
return arrays of the same shape. Times are clamped to the schedule domain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .schedules import Schedule, ScheduleDomainError, evaluate

LOG_2PI = math.log(2.0 * math.pi)


class GridFormatError(ValueError):
    """Malformed grid or weight file."""


@runtime_checkable
class ScoreModel(Protocol):
    dim: int

    def score(self, x: np.ndarray, t: float) -> np.ndarray: ...


def _as_state(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (dim,):
        raise ValueError(f"expected state with trailing dimension {dim}, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class GmmParams:
    weights: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        s = np.broadcast_to(np.asarray(self.stddevs, dtype=float), w.shape).copy()
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a nonempty vector")
        if mu.shape[0] != w.size:
            raise ValueError(f"{w.size} weights but {mu.shape[0]} means")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must lie on the simplex, got {w}")
        if np.any(s < 0) or not np.all(np.isfinite(mu)):
            raise ValueError("stddevs must be nonnegative and means finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stddevs", s)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def from_dict(cls, d: dict) -> GmmParams:
        means = np.atleast_2d(np.asarray(d["means"], dtype=float))
        k = means.shape[0]
        weights = d.get("weights")
        weights = np.full(k, 1.0 / k) if weights is None else weights
        return cls(weights, means, d.get("stddevs", 0.0))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "stddevs": self.stddevs.tolist()}


def _component_terms(params: GmmParams, schedule: Schedule, x: np.ndarray, t: float):
    """Per-component log-weights + log-normals, per-component scores, and variances."""
    x = _as_state(x, params.dim)
    alpha, sigma, _, _ = evaluate(schedule, t)
    var = sigma**2 + alpha**2 * params.stddevs**2
    if np.any(var <= 0.0):
        raise ScheduleDomainError(f"degenerate diffused variance at t={t}: {var}")
    diff = x[..., None, :] - alpha * params.means  # (..., K, d)
    sq = np.einsum("...kd,...kd->...k", diff, diff)
    with np.errstate(divide="ignore"):
        logw = np.log(params.weights)
    logp = logw - 0.5 * sq / var - 0.5 * params.dim * (LOG_2PI + np.log(var))
    comp_scores = -diff / var[:, None]
    return logp, comp_scores, var


def _log_resp(logp: np.ndarray):
    m = np.max(logp, axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(logp - m), axis=-1, keepdims=True))
    return lse[..., 0], logp - lse


def gmm_log_density(params: GmmParams, schedule: Schedule, x, t: float) -> np.ndarray:
    """log sum_k w_k N(x | alpha_t mu_k, (sigma_t^2 + alpha_t^2 s_k^2) I)."""
    logp, _, _ = _component_terms(params, schedule, x, t)
    return _log_resp(logp)[0]


def gmm_score(params: GmmParams, schedule: Schedule, x, t: float) -> np.ndarray:
    """Responsibility-weighted component scores."""
    logp, comp, _ = _component_terms(params, schedule, x, t)
    resp = np.exp(_log_resp(logp)[1])
    return np.einsum("...k,...kd->...d", resp, comp)


def gmm_laplacian(params: GmmParams, schedule: Schedule, x, t: float) -> np.ndarray:
    """Laplacian of the diffused log-density (trace of the score Jacobian)."""
    logp, comp, var = _component_terms(params, schedule, x, t)
    resp = np.exp(_log_resp(logp)[1])
    s = np.einsum("...k,...kd->...d", resp, comp)
    per_comp = -params.dim / var + np.einsum("...kd,...kd->...k", comp, comp)
    return np.einsum("...k,...k->...", resp, per_comp) - np.einsum("...d,...d->...", s, s)


class GmmScoreModel:
    """Exact score of a diffused isotropic Gaussian mixture."""

    def __init__(self, params: GmmParams, schedule: Schedule):
        self.params = params
        self.schedule = schedule
        self.dim = params.dim

    def score(self, x, t):
        return gmm_score(self.params, self.schedule, x, t)

    def log_density(self, x, t):
        return gmm_log_density(self.params, self.schedule, x, t)

    def laplacian(self, x, t):
        return gmm_laplacian(self.params, self.schedule, x, t)

    def modes(self) -> np.ndarray:
        return self.params.means

    def sample_data(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(self.params.weights.size, size=n, p=self.params.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.params.means[k] + self.params.stddevs[k, None] * noise

    def sample_marginal(self, n: int, t: float, rng: np.random.Generator) -> np.ndarray:
        """Exact samples from the diffused density at time ``t``."""
        alpha, sigma, _, _ = evaluate(self.schedule, t)
        return alpha * self.sample_data(n, rng) + sigma * rng.standard_normal((n, self.dim))


class CountingScoreModel:
    """Wraps a model and counts per-row score evaluations and JVPs."""

    def __init__(self, model):
        self.model = model
        self.dim = model.dim
        self.calls = 0
        self.jvps = 0

    def score(self, x, t):
        x = np.asarray(x, dtype=float)
        self.calls += int(np.prod(x.shape[:-1], dtype=int))
        return self.model.score(x, t)

    def __getattr__(self, name):
        return getattr(self.model, name)


# -- gridded fields -----------------------------------------------------------


class GridScoreModel:
    """Multilinear interpolation of a score tabulated on a (space x time) grid.

    ``values`` has shape ``(n_1, ..., n_d, m, d)``; queries outside the box or
    the time range are clamped to the boundary.
    """

    def __init__(self, bbox, grid, times, values):
        bbox = np.asarray(bbox, dtype=float)
        grid = [int(n) for n in grid]
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        dim = len(grid)
        if bbox.shape != (dim, 2) or np.any(bbox[:, 1] <= bbox[:, 0]):
            raise GridFormatError(f"bbox must be {dim} increasing [lo, hi] pairs")
        if any(n < 2 for n in grid) or times.ndim != 1 or times.size < 1:
            raise GridFormatError("need at least 2 nodes per axis and 1 time")
        if np.any(np.diff(times) <= 0):
            raise GridFormatError("times must be strictly increasing")
        if values.shape != (*grid, times.size, dim):
            raise GridFormatError(f"values shape {values.shape} does not match {(*grid, times.size, dim)}")
        if not np.all(np.isfinite(values)):
            raise GridFormatError("grid contains non-finite entries")
        self.dim = dim
        self.bbox, self.grid, self.times, self.values = bbox, grid, times, values
        self.axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bbox, grid)]

    def _time_weights(self, t: float):
        ts = self.times
        if ts.size == 1 or t <= ts[0]:
            return 0, 0, 0.0
        if t >= ts[-1]:
            return ts.size - 1, ts.size - 1, 0.0
        j = int(np.searchsorted(ts, t, side="right")) - 1
        return j, j + 1, (t - ts[j]) / (ts[j + 1] - ts[j])

    def score(self, x, t):
        x = _as_state(x, self.dim)
        flat = x.reshape(-1, self.dim)
        lo_idx, fracs = [], []
        for i, (lo, hi) in enumerate(self.bbox):
            n = self.grid[i]
            u = (np.clip(flat[:, i], lo, hi) - lo) / (hi - lo) * (n - 1)
            i0 = np.minimum(np.floor(u).astype(int), n - 2)
            lo_idx.append(i0)
            fracs.append(u - i0)
        j0, j1, ft = self._time_weights(float(t))
        out = np.zeros_like(flat)
        for corner in range(2**self.dim):
            w = np.ones(flat.shape[0])
            idx = []
            for i in range(self.dim):
                bit = (corner >> i) & 1
                w = w * (fracs[i] if bit else 1.0 - fracs[i])
                idx.append(lo_idx[i] + bit)
            v0 = self.values[(*idx, j0)]
            v1 = self.values[(*idx, j1)]
            out += w[:, None] * ((1.0 - ft) * v0 + ft * v1)
        return out.reshape(x.shape)


def tabulate_grid(model, bbox, grid, times) -> GridScoreModel:
    """Sample ``model.score`` on a regular grid."""
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bbox, grid)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = np.stack([model.score(mesh, float(t)) for t in times], axis=-2)
    return GridScoreModel(bbox, grid, times, values)


def write_header_payload(path, header: dict, payload: np.ndarray) -> None:
    data = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(data)


def read_header_payload(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise GridFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise GridFormatError(f"{path}: malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise GridFormatError(f"{path}: header must be a JSON object")
    body = raw[nl + 1:]
    if len(body) % 8:
        raise GridFormatError(f"{path}: payload length {len(body)} is not a multiple of 8")
    return header, np.frombuffer(body, dtype="<f8")


def grid_score_save(model: GridScoreModel, path) -> None:
    header = {"dim": model.dim, "bbox": model.bbox.tolist(), "grid": model.grid, "times": model.times.tolist()}
    write_header_payload(path, header, model.values)


def grid_score_load(path) -> GridScoreModel:
    header, payload = read_header_payload(path)
    try:
        dim = int(header["dim"])
        bbox, grid, times = header["bbox"], [int(n) for n in header["grid"]], header["times"]
    except (KeyError, TypeError, ValueError) as exc:
        raise GridFormatError(f"{path}: header missing or invalid field: {exc}") from None
    if len(grid) != dim:
        raise GridFormatError(f"{path}: grid has {len(grid)} axes but dim={dim}")
    expected = math.prod(grid) * len(times) * dim
    if payload.size != expected:
        raise GridFormatError(f"{path}: payload has {payload.size} floats, header implies {expected}")
    if not np.all(np.isfinite(payload)):
        raise GridFormatError(f"{path}: payload contains non-finite entries")
    return GridScoreModel(bbox, grid, times, payload.reshape(*grid, len(times), dim))
