"""Experiment runners. Each returns an :class:`Outcome` holding the metrics
report, the sampling run to emit (if any) and extra artifacts."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from ..dsm_training import (MlpScoreModel, TrainConfig, dsm_loss, save_weights, train,
                            two_cluster_dataset)
from ..estimators import (detailed_balance_increment, exact_divergence_fd, hutchinson_from_probes,
                          ito_increment)
from ..integrate import IntegratorConfig, RunResult, run_superdiff, sde_step, step_noise, time_grid
from ..rng import TAG_INIT, TAG_PROBE, CounterRNG
from ..schedules import Schedule, evaluate
from ..score_models import GmmParams, GmmScoreModel
from ..superpose import SuperposeMode
from .config import ConfigError, RunConfig, build_models
from .metrics import (MetricsReport, metric_density_gap, metric_estimator_error, metric_mixture_weights,
                      rmse)

ABORT_THRESHOLD = 0.01


@dataclass
class Outcome:
    report: MetricsReport
    run: RunResult | None = None
    labels: np.ndarray | None = None
    artifacts: dict[str, Callable[[Any], None]] = field(default_factory=dict)

    @property
    def aborted_fraction(self) -> float:
        if self.run is None or self.run.n_samples == 0:
            return 0.0
        return float(np.mean(self.run.aborted))


def _tol(cfg: RunConfig, name: str, default: float) -> float:
    return float(cfg.tolerances.get(name, default))


def _gmm_params(cfg: RunConfig) -> list[GmmParams]:
    params = []
    for i, spec in enumerate(cfg.model_specs):
        if spec["kind"] != "gmm":
            raise ConfigError(f"models[{i}]: experiment {cfg.experiment!r} needs analytic gmm models")
        params.append(GmmParams.from_dict(spec))
    return params


def _record_run(report: MetricsReport, run: RunResult, prefix: str = "") -> None:
    report.add(prefix + "aborted_fraction", float(np.mean(run.aborted)))
    report.add(prefix + "score_calls_per_step", (run.score_calls / (run.n_samples * run.steps)).tolist())
    report.add(prefix + "fallback_rate", float(run.fallback_steps.sum() / (run.n_samples * run.steps)))


def exp_sample(cfg: RunConfig) -> Outcome:
    models = build_models(cfg)
    run = run_superdiff(models, cfg.schedule, cfg.mode, cfg.integrator, cfg.n_samples)
    report = MetricsReport("sample")
    _record_run(report, run)
    ok = ~run.aborted
    if np.any(ok):
        report.add("sample_mean", run.final_x[ok].mean(axis=0))
        report.add("sample_std", run.final_x[ok].std(axis=0))
    labels = np.argmax(run.final_logq, axis=1) if len(models) > 1 else None
    return Outcome(report, run, labels)


def expected_or_fractions(mode: SuperposeMode, m: int) -> np.ndarray | None:
    """Mixture weights implied by T = 1 and bias l: softmax(l). None for other temperatures."""
    if mode.kind != "or" or mode.temperature != 1.0:
        return None
    b = mode.bias_vector(m)
    e = np.exp(b - b.max())
    return e / e.sum()


def exp_or_mixture(cfg: RunConfig) -> Outcome:
    params = _gmm_params(cfg)
    if cfg.mode.kind != "or":
        raise ConfigError("or_mixture: mode.kind must be 'or'")
    models = build_models(cfg)
    run = run_superdiff(models, cfg.schedule, cfg.mode, cfg.integrator, cfg.n_samples)
    report = MetricsReport("or_mixture")
    _record_run(report, run)
    mix = metric_mixture_weights(run.final_x[~run.aborted], params)
    report.add("mixture_fraction", mix.fractions, mix.stderr)
    report.add("ambiguous", mix.ambiguous)
    expected = expected_or_fractions(cfg.mode, len(params))
    if expected is not None:
        report.add("expected_fraction", expected)
        for i, (f, p) in enumerate(zip(mix.fractions, expected)):
            band = _tol(cfg, "fraction_band", 3.0 * math.sqrt(p * (1.0 - p) / max(mix.n, 1)))
            report.check(f"mixture_fraction_{i}", abs(f - p), "<=", band)
    x = run.final_x
    labels = metric_owner(x, params)
    return Outcome(report, run, labels)


def metric_owner(x, params: list[GmmParams]) -> np.ndarray:
    x = np.nan_to_num(np.asarray(x, dtype=float))
    dist = np.stack([np.min(np.linalg.norm(x[:, None, :] - p.means[None], axis=-1), axis=1) for p in params],
                    axis=1)
    return np.argmin(dist, axis=1)


def exp_and_equal_density(cfg: RunConfig) -> Outcome:
    if cfg.mode.kind != "and":
        raise ConfigError("and_equal_density: mode.kind must be 'and'")
    models = build_models(cfg)
    m = len(models)
    if m < 2:
        raise ConfigError("and_equal_density needs at least two models")
    bias = cfg.mode.bias_vector(m)
    run = run_superdiff(models, cfg.schedule, cfg.mode, cfg.integrator, cfg.n_samples)
    weights = cfg.params.get("baseline_weights", [1.0 / m] * m)
    base_mode = SuperposeMode("average", weights=weights)
    base = run_superdiff(models, cfg.schedule, base_mode, cfg.integrator, cfg.n_samples)

    report = MetricsReport("and_equal_density")
    _record_run(report, run)
    gap = metric_density_gap(run.final_logq[~run.aborted], bias, run.steps)
    base_gap = metric_density_gap(base.final_logq[~base.aborted])
    report.add("median_gap", gap.median)
    report.add("p95_gap", gap.p95)
    report.add("baseline_median_gap", base_gap.median)
    report.add("baseline_p95_gap", base_gap.p95)
    report.add("and_residual_max", run.and_residual_max)
    if all(s["kind"] == "gmm" for s in cfg.model_specs):
        # informational: gap under the analytic densities at the final time
        t_end = cfg.schedule.t_min
        lq = np.stack([mdl.log_density(run.final_x[~run.aborted], t_end) for mdl in models], axis=1)
        report.add("analytic_median_gap", metric_density_gap(lq, bias, run.steps).median)
    fallback_rate = run.fallback_steps.sum() / (run.n_samples * run.steps)
    report.check("median_gap", gap.median, "<=", _tol(cfg, "median_gap", 0.1))
    report.check("median_gap_below_baseline", gap.median, "<", base_gap.median)
    report.check("and_residual_max", run.and_residual_max, "<=", _tol(cfg, "and_residual", 1e-8))
    report.check("fallback_rate", fallback_rate, "<=", _tol(cfg, "fallback_rate", 0.01))
    labels = np.argmax(run.final_logq, axis=1)
    return Outcome(report, run, labels)


def _level_configs(integ: IntegratorConfig, levels: int) -> list[IntegratorConfig]:
    """Coarse to fine configurations sharing one Brownian path."""
    return [replace(integ, steps=integ.steps * 2**k, brownian_refine=levels - 1 - k) for k in range(levels)]


def exp_estimator_validation(cfg: RunConfig) -> Outcome:
    params = _gmm_params(cfg)
    models = build_models(cfg)
    levels = int(cfg.params.get("levels", 2))
    if levels < 2:
        raise ConfigError("estimator_validation: params.levels must be >= 2")
    ode = cfg.integrator.kind == "ode"
    integ = cfg.integrator
    if ode and integ.divergence == "fd":
        integ = replace(integ, divergence="exact")
    report = MetricsReport("estimator_validation")
    report.add("estimator", "smooth" if ode else "ito")
    t_end = cfg.schedule.t_min
    runs, total, integ_only, tracked, analytic, worst = [], [], [], [], [], []
    for lvl in _level_configs(integ, levels):
        run = run_superdiff(models, cfg.schedule, cfg.mode, lvl, cfg.n_samples)
        ok = ~run.aborted
        exact_end = np.stack([mdl.log_density(run.final_x[ok], t_end) for mdl in models], axis=1)
        exact_start = np.stack([mdl.log_density(run.initial_x[ok], 1.0) for mdl in models], axis=1)
        tracked.append(run.final_logq[ok])
        analytic.append(exact_end)
        total.append(rmse(run.final_logq[ok], exact_end))
        worst.append(float(np.max(np.abs(run.final_logq[ok] - exact_end))))
        integ_only.append(rmse(run.final_logq[ok] - run.initial_logq[ok], exact_end - exact_start))
        runs.append(run)
    err = metric_estimator_error(tracked, analytic)
    init_err = rmse(runs[0].initial_logq[~runs[0].aborted],
                    np.stack([mdl.log_density(runs[0].initial_x[~runs[0].aborted], 1.0) for mdl in models], axis=1))
    steps = [r.steps for r in runs]
    inc_err = metric_estimator_error([[e] for e in integ_only], [[0.0] for _ in integ_only])
    report.add("steps", steps)
    report.add("terminal_rmse", err.rmse)
    report.add("terminal_order", err.order)
    report.add("terminal_max_abs", worst)
    report.add("initialization_rmse", init_err)
    report.add("integration_rmse", integ_only)
    report.add("integration_order", inc_err.order)
    _record_run(report, runs[0])
    if ode:
        # deterministic: the bound applies to every sample
        report.check("terminal_max_abs", worst[0], "<=", _tol(cfg, "terminal_max_abs", 0.02))
    else:
        report.check("terminal_rmse", err.rmse[0], "<=", _tol(cfg, "terminal_rmse", 0.05))
    # the initialization error does not shrink with the step size, so the order
    # is measured on the integrated part when the estimator is deterministic
    order = inc_err.order[0] if ode else err.order[0]
    report.check("order", order, "in", [_tol(cfg, "order_min", 0.7), _tol(cfg, "order_max", 1.3)])

    if not ode and len(models) == 1 and cfg.params.get("detailed_balance", True):
        study = [estimator_pair_study(models[0], cfg.schedule, lvl.steps, cfg.n_samples, lvl.seed,
                                      lvl.brownian_refine)
                 for lvl in _level_configs(cfg.integrator, max(levels, 3))]
        diff = [float(np.mean(np.abs(s.db - s.ito))) for s in study]
        ratio = diff[0] / diff[1]
        dts = np.array([s.dtau for s in study])
        var = np.array([s.db_step_variance for s in study])
        slope = float(np.polyfit(np.log(dts), np.log(var), 1)[0])
        report.add("db_ito_mean_abs_diff", diff)
        report.add("db_ito_halving_ratio", ratio)
        report.add("db_step_variance", var)
        report.add("db_variance_slope", slope)
        report.check("db_ito_halving_ratio", ratio, "in", [_tol(cfg, "db_ratio_min", 1.6), _tol(cfg, "db_ratio_max", 2.6)])
        report.check("db_variance_slope", slope, "in", [_tol(cfg, "db_slope_min", 1.7), _tol(cfg, "db_slope_max", 2.3)])
    return Outcome(report, runs[-1], None)


@dataclass
class PairStudy:
    dtau: float
    ito: np.ndarray
    db: np.ndarray
    analytic: np.ndarray
    db_step_variance: float


def estimator_pair_study(model: GmmScoreModel, schedule: Schedule, steps: int, n: int, seed: int = 0,
                         refine: int = 0) -> PairStudy:
    """Reverse SDE for one analytic model, tracking Ito and detailed-balance
    estimates on the same realized steps.

    ``db_step_variance`` is the per-step variance (over samples, averaged over
    steps) of the detailed-balance increment minus the exact increment.
    """
    rng = CounterRNG(seed)
    ids = np.arange(n, dtype=np.int64)
    taus, dtau = time_grid(steps, schedule.t_min)
    x = schedule.prior_std * rng.normal(ids, 0, model.dim, TAG_INIT)
    ito, db, exact = np.zeros(n), np.zeros(n), np.zeros(n)
    var_sum = 0.0
    for k, tau in enumerate(taus):
        t = 1.0 - tau
        s = model.score(x, t)
        _, _, dlogalpha, g = evaluate(schedule, t)
        v = -dlogalpha * x + g * g * s
        eps = step_noise(rng, ids, k, model.dim, refine)
        new_x, dx, _ = sde_step(x, v, g, dtau, eps)
        ito += ito_increment(s, schedule, x, dx, tau, dtau).value
        step_db = detailed_balance_increment(s, schedule, x, v, eps, t - dtau, dtau)
        step_exact = model.log_density(new_x, t - dtau) - model.log_density(x, t)
        db += step_db
        exact += step_exact
        var_sum += float(np.var(step_db - step_exact))
        x = new_x
    return PairStudy(dtau, ito, db, exact, var_sum / steps)


def _flow_field(model, schedule: Schedule, t: float):
    _, _, dlogalpha, g = evaluate(schedule, t)

    def field_fn(x):
        return -dlogalpha * x + 0.5 * g * g * model.score(x, t)
    return field_fn


def exp_hutchinson_compare(cfg: RunConfig) -> Outcome:
    _gmm_params(cfg)
    models = build_models(cfg)
    n_points = int(cfg.params.get("points", 100))
    probes = int(cfg.params.get("probes", 64))
    floor = _tol(cfg, "fd_floor", 1e-6)
    rng = CounterRNG(cfg.seed)
    gen = rng.generator(TAG_PROBE)
    report = MetricsReport("hutchinson_compare")
    within, zscores, rows = 0, [], []
    for p in range(n_points):
        mdl = models[int(gen.integers(len(models)))]
        t = float(gen.uniform(0.05, 1.0))
        x = mdl.sample_marginal(1, t, gen)
        field_fn = _flow_field(mdl, cfg.schedule, t)
        exact = float(exact_divergence_fd(field_fn, x)[0])
        eps = rng.rademacher(p * probes + np.arange(probes), 0, mdl.dim)[:, None, :]
        est, var = hutchinson_from_probes(field_fn, x, eps)
        se = math.sqrt(float(var[0]) / probes)
        diff = abs(float(est[0]) - exact)
        within += diff <= 3.0 * se + floor * (1.0 + abs(exact))
        zscores.append(diff / se if se > 0 else 0.0)
        rows.append((p, t, *x[0], exact, float(est[0]), se))
    coverage = within / n_points
    report.add("points", n_points)
    report.add("probes", probes)
    report.add("coverage_3se", coverage)
    report.add("median_z", float(np.median(zscores)))

    # a linear field with diagonal symmetric part: one probe recovers the trace exactly
    d = models[0].dim
    lin_gen = rng.generator(TAG_PROBE, 1)
    diag = lin_gen.normal(size=d)
    skew = lin_gen.normal(size=(d, d))
    mat = np.diag(diag) + (skew - skew.T)
    offset = lin_gen.normal(size=d)
    xs = lin_gen.normal(size=(n_points, d))
    one = rng.rademacher(np.arange(n_points), 1, d)[None]
    lin_est, _ = hutchinson_from_probes(lambda z: z @ mat.T + offset, xs, one)
    lin_err = float(np.max(np.abs(lin_est - np.trace(mat))))
    report.add("linear_single_probe_error", lin_err)
    report.check("coverage_3se", coverage, ">=", _tol(cfg, "coverage", 0.95))
    report.check("linear_single_probe_error", lin_err, "<=", _tol(cfg, "linear_exact", 1e-8))

    def write_table(out_dir):
        from .output import fmt, write_text
        head = "point,t," + ",".join(f"x{k}" for k in range(d)) + ",exact,estimate,stderr\n"
        body = "".join(f"{r[0]}," + ",".join(fmt(v) for v in r[1:]) + "\n" for r in rows)
        write_text(out_dir / "hutchinson.csv", head + body)
    return Outcome(report, None, None, {"hutchinson.csv": write_table})


def _dataset(cfg: RunConfig) -> np.ndarray:
    spec = cfg.params.get("dataset", "two_cluster")
    if spec == "two_cluster":
        return two_cluster_dataset()
    data = np.atleast_2d(np.asarray(spec, dtype=float))
    if data.size == 0 or not np.all(np.isfinite(data)):
        raise ConfigError("params.dataset must be 'two_cluster' or a nonempty list of points")
    return data


def relative_score_error(model, reference: GmmScoreModel, t: float, n: int, gen: np.random.Generator,
                         coverage: float = 0.9) -> float:
    """Relative L2 error of ``model.score`` over the highest-density ``coverage`` fraction of q_t."""
    x = reference.sample_marginal(n, t, gen)
    logq = reference.log_density(x, t)
    keep = logq >= np.quantile(logq, 1.0 - coverage)
    ref = reference.score(x[keep], t)
    err = model.score(x[keep], t) - ref
    return float(np.sqrt(np.sum(err * err) / np.sum(ref * ref)))


def loss_superposition_gap(model, schedule: Schedule, data_a, data_b, gen: np.random.Generator) -> float:
    """|L(A u B) - (L(A) + L(B)) / 2| with paired time and noise draws, for |A| = |B|."""
    data_a, data_b = np.asarray(data_a, dtype=float), np.asarray(data_b, dtype=float)
    if data_a.shape != data_b.shape:
        raise ValueError("datasets must have equal size")
    n, d = data_a.shape
    t = gen.uniform(schedule.t_min, 1.0, size=2 * n)
    eps = gen.standard_normal((2 * n, d))
    whole = dsm_loss(model, schedule, np.concatenate([data_a, data_b]), t, eps)
    part_a = dsm_loss(model, schedule, data_a, t[:n], eps[:n])
    part_b = dsm_loss(model, schedule, data_b, t[n:], eps[n:])
    return abs(whole - 0.5 * (part_a + part_b))


def exp_dsm_train(cfg: RunConfig) -> Outcome:
    data = _dataset(cfg)
    p = cfg.params
    tc = TrainConfig(data, steps=int(p.get("steps", 8000)), batch=int(p.get("batch", 256)),
                     step_size=float(p.get("step_size", 2e-3)), seed=cfg.seed, schedule=cfg.schedule,
                     weighting=p.get("weighting", "sigma2"))
    history: list[float] = []
    start = time.perf_counter()
    weights = train(tc, history)
    elapsed = time.perf_counter() - start
    model = MlpScoreModel(weights)
    reference = GmmScoreModel(GmmParams(np.full(len(data), 1.0 / len(data)), data, 0.0), cfg.schedule)
    gen = CounterRNG(cfg.seed).generator(7)
    report = MetricsReport("dsm_train")
    report.add("train_seconds", round(elapsed, 3))
    tenth = max(1, len(history) // 10)
    first, last = float(np.median(history[:tenth])), float(np.median(history[-tenth:]))
    report.add("loss_first_decile_median", first)
    report.add("loss_last_decile_median", last)
    report.check("loss_decreases", last - first, "<", 0.0)
    for t in p.get("eval_times", [0.1, 0.5, 0.9]):
        rel = relative_score_error(model, reference, float(t), int(p.get("eval_points", 4000)), gen)
        report.check(f"relative_l2_t{t}", rel, "<=", _tol(cfg, "relative_l2", 0.15))
    half = len(data) // 2
    if half:
        gap = loss_superposition_gap(model, cfg.schedule, data[:half], data[half:2 * half], gen)
        report.check("loss_superposition_gap", gap, "<=", _tol(cfg, "superposition", 1e-10))

    run = None
    if int(p.get("sample", 1)):
        run = run_superdiff([model], cfg.schedule, SuperposeMode("or"), cfg.integrator, cfg.n_samples)
        _record_run(report, run)

    def write_weights(out_dir):
        save_weights(weights, out_dir / "weights.bin")
    return Outcome(report, run, None, {"weights.bin": write_weights})


RUNNERS = {
    "sample": exp_sample,
    "or_mixture": exp_or_mixture,
    "and_equal_density": exp_and_equal_density,
    "estimator_validation": exp_estimator_validation,
    "hutchinson_compare": exp_hutchinson_compare,
    "dsm_train": exp_dsm_train,
}


def run_experiment(cfg: RunConfig) -> Outcome:
    return RUNNERS[cfg.experiment](cfg)
