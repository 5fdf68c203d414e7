"""Toy MLP score networks trained by denoising score matching.

Architecture: ``[d + 16] -> 128 -> 128 -> d`` with SiLU activations and a
16-dimensional sinusoidal time embedding. The network output is divided by
``sigma_t`` so that it parameterizes the score directly; the regression target
is ``-eps / sigma_t`` for ``x = alpha_t mu + sigma_t eps``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .schedules import Schedule, VPLinear, make_schedule
from .score_models import GridFormatError, read_header_payload, write_header_payload

log = logging.getLogger(__name__)

HIDDEN = 128
TIME_EMBED = 16
_FREQS = np.geomspace(0.5, 32.0, TIME_EMBED // 2)

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingDivergedError(RuntimeError):
    pass


def time_embedding(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)[..., None]
    return np.concatenate([np.sin(_FREQS * t), np.cos(_FREQS * t)], axis=-1)


def _silu(z):
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return z * sig, sig


@dataclass
class MlpWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    seed: int = 0
    schedule: Schedule = field(default_factory=VPLinear)

    NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    @property
    def dim(self) -> int:
        return self.w3.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.NAMES]

    @classmethod
    def init(cls, dim: int, seed: int, schedule: Schedule | None = None, zero_output: bool = False) -> MlpWeights:
        rng = np.random.default_rng(seed)
        fan = dim + TIME_EMBED

        def dense(n_in, n_out):
            return rng.normal(0.0, np.sqrt(1.0 / n_in), size=(n_in, n_out))

        w3 = np.zeros((HIDDEN, dim)) if zero_output else dense(HIDDEN, dim) * 0.1
        return cls(dense(fan, HIDDEN), np.zeros(HIDDEN), dense(HIDDEN, HIDDEN), np.zeros(HIDDEN),
                   w3, np.zeros(dim), seed=seed, schedule=schedule or VPLinear())

    def check(self) -> None:
        d = self.dim
        expected = [(d + TIME_EMBED, HIDDEN), (HIDDEN,), (HIDDEN, HIDDEN), (HIDDEN,), (HIDDEN, d), (d,)]
        for name, arr, shape in zip(self.NAMES, self.arrays(), expected):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")


def _inputs(weights: MlpWeights, x: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != weights.dim:
        raise ValueError(f"input dimension {x.shape[-1]} does not match model dimension {weights.dim}")
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
    return np.concatenate([x, time_embedding(t)], axis=-1), t


def _sigma(schedule: Schedule, t: np.ndarray) -> np.ndarray:
    tc = np.clip(t, schedule.t_min, 1.0)
    return np.vectorize(schedule.sigma, otypes=[float])(tc)


def mlp_forward(weights: MlpWeights, x, t, cache: bool = False):
    """Raw network output (before division by sigma_t)."""
    h0, _ = _inputs(weights, x, t)
    z1 = h0 @ weights.w1 + weights.b1
    h1, s1 = _silu(z1)
    z2 = h1 @ weights.w2 + weights.b2
    h2, s2 = _silu(z2)
    out = h2 @ weights.w3 + weights.b3
    if cache:
        return out, (h0, z1, s1, h1, z2, s2, h2)
    return out


def mlp_score(weights: MlpWeights, x, t) -> np.ndarray:
    """Score estimate: network output divided by sigma_t."""
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), np.asarray(x).shape[:-1])
    return mlp_forward(weights, x, t_arr) / _sigma(weights.schedule, t_arr)[..., None]


class MlpScoreModel:
    def __init__(self, weights: MlpWeights):
        weights.check()
        self.weights = weights
        self.schedule = weights.schedule
        self.dim = weights.dim

    def score(self, x, t):
        return mlp_score(self.weights, x, t)


def _dsilu(z, sig):
    return sig * (1.0 + z * (1.0 - sig))


def _backward(weights: MlpWeights, cache, grad_out: np.ndarray) -> list[np.ndarray]:
    h0, z1, s1, h1, z2, s2, h2 = cache
    g3 = h2.T @ grad_out
    gb3 = grad_out.sum(0)
    dz2 = (grad_out @ weights.w3.T) * _dsilu(z2, s2)
    g2 = h1.T @ dz2
    gb2 = dz2.sum(0)
    dz1 = (dz2 @ weights.w2.T) * _dsilu(z1, s1)
    g1 = h0.T @ dz1
    gb1 = dz1.sum(0)
    return [g1, gb1, g2, gb2, g3, gb3]


def _noised(schedule: Schedule, mu, t, noise):
    mu = np.asarray(mu, dtype=float)
    noise = np.asarray(noise, dtype=float)
    t = np.clip(np.asarray(t, dtype=float), schedule.t_min, 1.0)
    if not (mu.shape[0] == t.shape[0] == noise.shape[0]):
        raise ValueError(f"length mismatch: batch {mu.shape[0]}, times {t.shape[0]}, noise {noise.shape[0]}")
    alpha = np.vectorize(schedule.alpha, otypes=[float])(t)[:, None]
    sigma = np.vectorize(schedule.sigma, otypes=[float])(t)[:, None]
    return alpha * mu + sigma * noise, -noise / sigma, t


def dsm_loss(model, schedule: Schedule, batch, t_samples, noise) -> float:
    """Mean squared error between ``model.score`` and the conditional score -eps/sigma_t.

    ``model.score`` must accept a per-row time array.
    """
    x, target, t = _noised(schedule, batch, t_samples, noise)
    resid = target - model.score(x, t)
    return float(np.mean(np.sum(resid * resid, axis=-1)))


def dsm_loss_and_grad(weights: MlpWeights, batch, t_samples, noise, weighting: str = "none"):
    x, target, t = _noised(weights.schedule, batch, t_samples, noise)
    out, cache = mlp_forward(weights, x, t, cache=True)
    sigma = _sigma(weights.schedule, t)[:, None]
    resid = out / sigma - target
    lam = sigma**2 if weighting == "sigma2" else 1.0
    n = x.shape[0]
    loss = float(np.sum(lam * resid * resid) / n)
    grad_out = 2.0 * lam * resid / sigma / n
    return loss, _backward(weights, cache, grad_out)


@dataclass
class TrainConfig:
    dataset: np.ndarray
    steps: int = 8000
    batch: int = 256
    step_size: float = 2e-3
    seed: int = 0
    schedule: Schedule = field(default_factory=VPLinear)
    # "sigma2" scales each term by sigma_t^2 (noise-prediction loss); "none" is the plain objective
    weighting: str = "sigma2"
    lr_decay: bool = True

    def __post_init__(self):
        self.dataset = np.atleast_2d(np.asarray(self.dataset, dtype=float))
        if self.dataset.shape[0] < 1:
            raise ValueError("dataset must be nonempty")
        if self.steps < 1 or self.batch < 1 or not self.step_size > 0:
            raise ValueError("steps and batch must be >= 1 and step_size > 0")
        if self.weighting not in ("none", "sigma2"):
            raise ValueError(f"unknown loss weighting {self.weighting!r}")


def two_cluster_dataset(separation: float = 4.0, radius: float = 0.3, per_cluster: int = 4) -> np.ndarray:
    """Point-symmetric pair of small rings centred at (+-separation/2, 0)."""
    angles = 2.0 * np.pi * (np.arange(per_cluster) + 0.5) / per_cluster
    ring = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    centre = np.array([separation / 2.0, 0.0])
    return np.concatenate([-centre - ring, centre + ring])


def train(config: TrainConfig, history: list[float] | None = None) -> MlpWeights:
    """Adam on the DSM loss with t ~ Uniform[t_min, 1]. Deterministic given the seed."""
    schedule = config.schedule
    dim = config.dataset.shape[1]
    weights = MlpWeights.init(dim, config.seed, schedule)
    rng = np.random.default_rng([config.seed, 1])
    params = weights.arrays()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, config.dataset.shape[0], size=config.batch)
        t = rng.uniform(schedule.t_min, 1.0, size=config.batch)
        eps = rng.standard_normal((config.batch, dim))
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = dsm_loss_and_grad(weights, config.dataset[idx], t, eps, config.weighting)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergedError(f"non-finite loss {loss} at step {step}")
        if history is not None:
            history.append(loss)
        lr = config.step_size
        if config.lr_decay:
            lr *= 0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / config.steps))
        c1 = 1.0 - ADAM_BETA1**step
        c2 = 1.0 - ADAM_BETA2**step
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= ADAM_BETA1
            mi += (1.0 - ADAM_BETA1) * g
            vi *= ADAM_BETA2
            vi += (1.0 - ADAM_BETA2) * g * g
            p -= lr * (mi / c1) / (np.sqrt(vi / c2) + ADAM_EPS)
        if step % 1000 == 0:
            log.debug("step %d loss %.4f", step, loss)
    return weights


def save_weights(weights: MlpWeights, path) -> None:
    header = {
        "kind": "mlp",
        "dim": weights.dim,
        "hidden": HIDDEN,
        "time_embed": TIME_EMBED,
        "shapes": [list(a.shape) for a in weights.arrays()],
        "seed": weights.seed,
        "schedule": weights.schedule.to_config(),
    }
    write_header_payload(path, header, np.concatenate([a.ravel() for a in weights.arrays()]))


def load_weights(path) -> MlpWeights:
    header, payload = read_header_payload(path)
    if header.get("kind") != "mlp" or header.get("hidden") != HIDDEN or header.get("time_embed") != TIME_EMBED:
        raise GridFormatError(f"{path}: not an MLP weight file for this architecture")
    shapes = [tuple(s) for s in header["shapes"]]
    sizes = [int(np.prod(s)) for s in shapes]
    if sum(sizes) != payload.size:
        raise GridFormatError(f"{path}: payload has {payload.size} floats, header implies {sum(sizes)}")
    arrays, offset = [], 0
    for shape, size in zip(shapes, sizes):
        arrays.append(payload[offset:offset + size].reshape(shape).copy())
        offset += size
    weights = MlpWeights(*arrays, seed=int(header.get("seed", 0)), schedule=make_schedule(header.get("schedule")))
    try:
        weights.check()
    except ValueError as exc:
        raise GridFormatError(f"{path}: {exc}") from None
    return weights
