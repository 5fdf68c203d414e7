"""Per-step model weights (kappa) and the superposed reverse-time drift."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .schedules import Schedule, evaluate

COND_LIMIT = 1e12


class DegenerateStateError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SuperposeMode:
    """``kind`` is one of "or", "and", "average", "choice".

    ``choice`` draws one model per trajectory with probabilities ``weights``
    and follows it for the whole run (the uncorrelated random-model baseline).
    """

    kind: str
    temperature: float = 1.0
    bias: tuple[float, ...] | None = None
    weights: tuple[float, ...] | None = None
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in ("or", "and", "average", "choice"):
            raise ValueError(f"unknown mode kind {self.kind!r}")
        if self.bias is not None:
            object.__setattr__(self, "bias", tuple(float(b) for b in self.bias))
            if not np.all(np.isfinite(self.bias)):
                raise ValueError("bias must be finite")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
                raise ValueError(f"weights must lie on the simplex, got {self.weights}")
            object.__setattr__(self, "weights", tuple(w.tolist()))
        elif self.kind in ("average", "choice"):
            raise ValueError(f"{self.kind} mode needs weights")

    def bias_vector(self, m: int) -> np.ndarray:
        b = np.zeros(m) if self.bias is None else np.asarray(self.bias, dtype=float)
        if b.shape != (m,):
            raise ValueError(f"bias has length {b.size}, expected {m}")
        return b

    def weight_vector(self, m: int) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (m,):
            raise ValueError(f"weights have length {w.size}, expected {m}")
        return w

    @classmethod
    def from_config(cls, spec: dict[str, Any]) -> SuperposeMode:
        known = {"kind", "temperature", "bias", "weights"}
        unknown = set(spec) - known
        if unknown:
            raise ValueError(f"unknown mode keys {sorted(unknown)}")
        return cls(spec["kind"], float(spec.get("temperature", 1.0)),
                   spec.get("bias"), spec.get("weights"))

    def to_config(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        if self.kind == "or":
            out["temperature"] = self.temperature
        if self.bias is not None:
            out["bias"] = list(self.bias)
        if self.weights is not None:
            out["weights"] = list(self.weights)
        return out


def kappa_or(logqs, temperature: float, bias) -> np.ndarray:
    """softmax(T * logq + bias) over the last axis."""
    logqs = np.asarray(logqs, dtype=float)
    if np.any(np.all(np.isneginf(logqs), axis=-1)) and temperature != 0:
        raise DegenerateStateError("all log-densities are -inf")
    if temperature == 0:
        z = np.broadcast_to(np.asarray(bias, dtype=float), logqs.shape).copy()
    else:
        z = temperature * logqs + bias
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def kappa_and(scores, schedule: Schedule, x, tau: float, dtau: float, dW, bias):
    """Weights making every model's Ito log-density increment equal up to ``bias``.

    ``scores`` has shape ``(..., M, d)``. Per-model drifts are
    ``u^j = -f + g^2 s_j`` so that the assembled drift matches the sampler.
    Row ``i`` of the system reads ``sum_j a_ij kappa_j - dlog = bias_i - b_i``.

    Returns ``(kappa, common_dlog, fallback)``; fallback rows (condition
    number above 1e12 or a failed solve) get uniform weights and the mean of
    the resulting per-model increments.
    """
    s = np.asarray(scores, dtype=float)
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    *lead, m, d = s.shape
    bias = np.broadcast_to(np.asarray(bias, dtype=float), (m,))
    _, _, dlogalpha, g = evaluate(schedule, 1.0 - tau)
    f = dlogalpha * x
    u = -f[..., None, :] + g * g * s
    a = dtau * np.einsum("...jd,...id->...ij", u, s)
    noise = g * dW[..., None, :] + (f[..., None, :] - 0.5 * g * g * s) * dtau
    b = d * dlogalpha * dtau + np.einsum("...id,...id->...i", noise, s)

    sysm = np.zeros((*lead, m + 1, m + 1))
    sysm[..., :m, :m] = a
    sysm[..., :m, m] = -1.0
    sysm[..., m, :m] = 1.0
    rhs = np.zeros((*lead, m + 1))
    rhs[..., :m] = bias - b
    rhs[..., m] = 1.0

    flat_m = sysm.reshape(-1, m + 1, m + 1)
    flat_r = rhs.reshape(-1, m + 1)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(flat_m)
    fallback = ~(np.isfinite(cond) & (cond <= COND_LIMIT))
    sol = np.empty_like(flat_r)
    ok = ~fallback
    if np.any(ok):
        sol[ok] = np.linalg.solve(flat_m[ok], flat_r[ok][..., None])[..., 0]
        bad = ok & ~np.all(np.isfinite(sol), axis=-1)
        fallback |= bad
    if np.any(fallback):
        uniform = np.full(m, 1.0 / m)
        flat_a = a.reshape(-1, m, m)[fallback]
        flat_b = b.reshape(-1, m)[fallback]
        sol[fallback, :m] = uniform
        sol[fallback, m] = np.mean(flat_a @ uniform + flat_b, axis=-1)
    sol = sol.reshape(*lead, m + 1)
    return sol[..., :m], sol[..., m], fallback.reshape(lead)


def superposed_drift(kappa, scores, schedule: Schedule, x, tau: float, kind: str = "sde",
                     xi: float | None = None) -> np.ndarray:
    """-f + c * sum_i kappa_i s_i with c = g^2 (SDE), g^2/2 (ODE) or g^2/2 + xi."""
    _, _, dlogalpha, g = evaluate(schedule, 1.0 - tau)
    if xi is not None:
        c = 0.5 * g * g + xi
    elif kind == "sde":
        c = g * g
    elif kind == "ode":
        c = 0.5 * g * g
    else:
        raise ValueError(f"unknown integrator kind {kind!r}")
    mix = np.einsum("...i,...id->...d", np.asarray(kappa, dtype=float), np.asarray(scores, dtype=float))
    return -dlogalpha * np.asarray(x, dtype=float) + c * mix
