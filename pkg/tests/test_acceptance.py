"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line at the stated tolerance.

Run ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the terminal
summary) or ``python tests/test_acceptance.py``.
"""

import json
import math
import time

import numpy as np
import pytest

from superdiff.dsm_training import MlpScoreModel, two_cluster_dataset
from superdiff.estimators import exact_divergence_fd, hutchinson_from_probes
from superdiff.harness.cli import main as cli_main
from superdiff.harness.config import parse_config
from superdiff.harness.experiments import (estimator_pair_study, exp_hutchinson_compare, loss_superposition_gap,
                                           relative_score_error)
from superdiff.harness.metrics import metric_density_gap, metric_mixture_weights, rmse
from superdiff.integrate import IntegratorConfig, run_superdiff
from superdiff.schedules import VPLinear
from superdiff.score_models import CountingScoreModel, GmmParams, GmmScoreModel
from superdiff.superpose import SuperposeMode

RESULTS: list[str] = []

SCHEDULE = VPLinear()
GAUSSIAN = GmmParams([1.0], [[1.0, -1.0]], 0.5)
OR_A = GmmParams([0.5, 0.5], [[-4.0, 2.0], [-4.0, -2.0]], 0.3)
OR_B = GmmParams([0.5, 0.5], [[4.0, 2.0], [4.0, -2.0]], 0.3)
AND_A = GmmParams([0.5, 0.5], [[-1.0, 0.0], [1.0, 1.0]], 0.5)
AND_B = GmmParams([0.5, 0.5], [[1.0, 0.0], [-1.0, 1.0]], 0.5)


def report(number: int, title: str, parts: list[tuple[str, bool]]) -> bool:
    ok = all(p for _, p in parts)
    detail = "; ".join(f"{text} [{'ok' if p else 'FAIL'}]" for text, p in parts)
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def _levels(steps, levels, **kw):
    return [IntegratorConfig(steps=steps * 2**k, brownian_refine=levels - 1 - k, **kw) for k in range(levels)]


def _terminal_errors(model, run):
    exact_end = model.log_density(run.final_x, SCHEDULE.t_min)
    exact_start = model.log_density(run.initial_x, 1.0)
    total = run.final_logq[:, 0] - exact_end
    integrated = (run.final_logq[:, 0] - run.initial_logq[:, 0]) - (exact_end - exact_start)
    return total, integrated


def test_criterion_1_ito_estimator():
    model = GmmScoreModel(GAUSSIAN, SCHEDULE)
    mode = SuperposeMode("or")
    start = time.perf_counter()
    base = run_superdiff([model], SCHEDULE, mode, IntegratorConfig(steps=1000, brownian_refine=1), 200, threads=1)
    elapsed = time.perf_counter() - start
    fine = run_superdiff([model], SCHEDULE, mode, IntegratorConfig(steps=2000), 200, threads=1)
    err = [rmse(_terminal_errors(model, r)[0], 0.0) for r in (base, fine)]
    order = math.log2(err[0] / err[1])
    ok = report(1, "Ito estimator", [
        (f"terminal RMSE {err[0]:.4f} <= 0.05", err[0] <= 0.05),
        (f"order {order:.3f} in [0.7, 1.3]", 0.7 <= order <= 1.3),
        (f"runtime {elapsed:.2f}s <= 10s", elapsed <= 10.0),
    ])
    assert ok, RESULTS[-1]


def test_criterion_2_smooth_estimator():
    model = GmmScoreModel(GAUSSIAN, SCHEDULE)
    runs = [run_superdiff([model], SCHEDULE, SuperposeMode("or"), cfg, 200)
            for cfg in _levels(1000, 2, kind="ode", divergence="exact")]
    total, integrated = _terminal_errors(model, runs[0])
    fine_integrated = _terminal_errors(model, runs[1])[1]
    order = math.log2(rmse(integrated, 0.0) / rmse(fine_integrated, 0.0))
    again = run_superdiff([model], SCHEDULE, SuperposeMode("or"), _levels(1000, 2, kind="ode",
                                                                          divergence="exact")[0], 200)
    worst = float(np.max(np.abs(total)))
    ok = report(2, "smooth estimator, ODE", [
        (f"max terminal |logq error| {worst:.4f} <= 0.02", worst <= 0.02),
        (f"order {order:.3f} in [0.7, 1.3]", 0.7 <= order <= 1.3),
        ("deterministic", again.final_logq.tobytes() == runs[0].final_logq.tobytes()),
    ])
    # the terminal error includes log N(x|0,I) - log q_1(x) from initialization
    print(f"  info: terminal RMSE {rmse(total, 0.0):.4f}; integration-only max {np.max(np.abs(integrated)):.4f}, "
          f"initialization max {np.max(np.abs(total - integrated)):.4f}")
    assert ok, RESULTS[-1]


def test_criterion_3_detailed_balance():
    model = GmmScoreModel(GAUSSIAN, SCHEDULE)
    studies = [estimator_pair_study(model, SCHEDULE, cfg.steps, 200, 0, cfg.brownian_refine)
               for cfg in _levels(500, 3)]
    diff = [float(np.mean(np.abs(s.db - s.ito))) for s in studies]
    ratio = diff[1] / diff[2]  # N = 1000 -> 2000
    dts = np.array([s.dtau for s in studies])
    var = np.array([s.db_step_variance for s in studies])
    slope = float(np.polyfit(np.log(dts), np.log(var), 1)[0])
    ok = report(3, "detailed balance", [
        (f"DB-Ito difference halving ratio {ratio:.3f} in [1.6, 2.6]", 1.6 <= ratio <= 2.6),
        (f"variance slope {slope:.3f} in [1.7, 2.3]", 1.7 <= slope <= 2.3),
    ])
    assert ok, RESULTS[-1]


@pytest.mark.parametrize("bias,expected,band", [((0.0, 0.0), (0.5, 0.5), 0.015),
                                                ((math.log(3), 0.0), (0.75, 0.25), 0.013)])
def test_criterion_4_or_mixture(bias, expected, band):
    models = [GmmScoreModel(p, SCHEDULE) for p in (OR_A, OR_B)]
    sep = min(np.linalg.norm(a - b) for a in OR_A.means for b in OR_B.means) / 0.3
    run = run_superdiff(models, SCHEDULE, SuperposeMode("or", 1.0, bias), IntegratorConfig(steps=1000, seed=3),
                        10_000)
    mix = metric_mixture_weights(run.final_x[~run.aborted], [OR_A, OR_B])
    dev = np.abs(mix.fractions - np.asarray(expected))
    ok = report(4, f"OR mixture, bias {tuple(round(b, 4) for b in bias)}", [
        (f"mode separation {sep:.1f} stddev >= 8", sep >= 8),
        (f"fractions ({mix.fractions[0]:.4f}, {mix.fractions[1]:.4f}) within {band} of {expected}",
         bool(np.all(dev <= band))),
    ])
    assert ok, RESULTS[-1]


def test_criterion_5_and_density_control():
    models = [GmmScoreModel(p, SCHEDULE) for p in (AND_A, AND_B)]
    cfg = IntegratorConfig(steps=1000, seed=1)
    run = run_superdiff(models, SCHEDULE, SuperposeMode("and"), cfg, 500)
    base = run_superdiff(models, SCHEDULE, SuperposeMode("average", weights=(0.5, 0.5)), cfg, 500)
    gap = metric_density_gap(run.final_logq[~run.aborted]).median
    base_gap = metric_density_gap(base.final_logq[~base.aborted]).median
    fallback = run.fallback_steps.sum() / (run.n_samples * run.steps)
    ok = report(5, "AND density control", [
        (f"median gap {gap:.2e} <= 0.1", gap <= 0.1),
        (f"below FixedAverage median gap {base_gap:.3f}", gap < base_gap),
        (f"residual {run.and_residual_max:.1e} <= 1e-8", run.and_residual_max <= 1e-8),
        (f"fallback rate {fallback:.4f} <= 0.01", fallback <= 0.01),
    ])
    assert ok, RESULTS[-1]


def test_criterion_6_zero_overhead():
    counted = CountingScoreModel(GmmScoreModel(GAUSSIAN, SCHEDULE))
    mode = SuperposeMode("average", weights=(1.0,))
    calls = {}
    for track in (True, False):
        counted.calls = 0
        r = run_superdiff([counted], SCHEDULE, mode, IntegratorConfig(steps=200, track=track), 50)
        calls[track] = (counted.calls, counted.jvps, int(r.divergence_calls.sum()))
    plain = GmmScoreModel(GAUSSIAN, SCHEDULE)
    timings = {True: [], False: []}
    for _ in range(7):
        for track in (True, False):
            start = time.perf_counter()
            run_superdiff([plain], SCHEDULE, mode, IntegratorConfig(steps=1000, track=track), 200, threads=1)
            timings[track].append(time.perf_counter() - start)
    overhead = min(timings[True]) / min(timings[False]) - 1.0
    ok = report(6, "zero overhead", [
        (f"score calls {calls[True][0]} tracked vs {calls[False][0]} untracked", calls[True][0] == calls[False][0]
         == 50 * 200),
        (f"JVPs {calls[True][1]}, divergence calls {calls[True][2]}", calls[True][1] == 0 and calls[True][2] == 0),
        (f"wall-clock overhead {overhead:.1%} <= 10%", overhead <= 0.10),
    ])
    assert ok, RESULTS[-1]


def test_criterion_7_hutchinson():
    cfg = parse_config({
        "experiment": "hutchinson_compare",
        "models": [{"kind": "gmm", "weights": [0.3, 0.3, 0.4], "means": [[-2.0, 0.0], [2.0, 0.5], [0.0, 2.0]],
                    "stddevs": [0.4, 0.6, 0.5]}],
        "params": {"points": 100, "probes": 64}})
    out = exp_hutchinson_compare(cfg).report.metrics
    # a second linear family: x -> c x + b, a scalar multiple of the identity plus offset
    x = np.random.default_rng(0).normal(size=(50, 3))
    est, _ = hutchinson_from_probes(lambda z: -0.7 * z + 2.0, x, np.ones((1, 50, 3)))
    lin = max(out["linear_single_probe_error"], float(np.max(np.abs(est + 2.1))))
    fd = float(np.max(np.abs(exact_divergence_fd(lambda z: -0.7 * z, x) + 2.1)))
    ok = report(7, "Hutchinson comparison", [
        (f"coverage within 3 SE {out['coverage_3se']:.2f} >= 0.95", out["coverage_3se"] >= 0.95),
        (f"linear single-probe error {lin:.1e} <= 1e-8", lin <= 1e-8),
        (f"finite-difference reference error {fd:.1e} <= 1e-8", fd <= 1e-8),
    ])
    assert ok, RESULTS[-1]


def test_criterion_8_dsm_training(trained_two_cluster):
    weights, seconds, _ = trained_two_cluster
    data = two_cluster_dataset()
    ref = GmmScoreModel(GmmParams(np.full(len(data), 1 / len(data)), data, 0.0), SCHEDULE)
    model = MlpScoreModel(weights)
    gen = np.random.default_rng(8)
    errs = {t: relative_score_error(model, ref, t, 4000, gen) for t in (0.1, 0.5, 0.9)}
    gap = loss_superposition_gap(model, SCHEDULE, data[:4], data[4:], gen)
    parts = [(f"relative L2 at t={t} {e:.3f} <= 0.15", e <= 0.15) for t, e in errs.items()]
    parts += [(f"loss superposition gap {gap:.1e} <= 1e-10", gap <= 1e-10),
              (f"training time {seconds:.1f}s <= 60s", seconds <= 60.0)]
    ok = report(8, "DSM training", parts)
    assert ok, RESULTS[-1]


DETERMINISM_CONFIGS = {
    "sample": {"models": [{"kind": "gmm", "weights": [0.5, 0.5], "means": [[-1.0, 0.0], [1.0, 1.0]],
                           "stddevs": [0.5, 0.5]}], "mode": {"kind": "or"}},
    "or_mixture": {"models": [OR_A.to_dict() | {"kind": "gmm"}, OR_B.to_dict() | {"kind": "gmm"}],
                   "mode": {"kind": "or", "bias": [math.log(3), 0.0]}},
    "and_equal_density": {"models": [AND_A.to_dict() | {"kind": "gmm"}, AND_B.to_dict() | {"kind": "gmm"}],
                          "mode": {"kind": "and"}},
    "estimator_validation": {"models": [GAUSSIAN.to_dict() | {"kind": "gmm"}], "mode": {"kind": "or"}},
    "hutchinson_compare": {"models": [OR_A.to_dict() | {"kind": "gmm"}], "params": {"points": 20}},
    "dsm_train": {"models": [], "params": {"steps": 40, "batch": 32}, "tolerances": {"relative_l2": 100.0}},
}


def test_criterion_9_determinism(tmp_path, monkeypatch):
    mismatched, compared = [], 0
    for name, body in DETERMINISM_CONFIGS.items():
        cfg = {"experiment": name, "integrator": {"steps": 60}, "n_samples": 64, **body}
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps(cfg))
        outs = []
        for k, threads in enumerate(("1", "4")):
            monkeypatch.setenv("SUPERDIFF_THREADS", threads)
            out = tmp_path / f"{name}_{k}"
            cli_main(["run", "--config", str(path), "--seed", "11", "--out", str(out)])
            outs.append(out)
        csvs = sorted(p.name for p in outs[0].glob("*.csv"))
        assert csvs, name
        for fname in csvs:
            compared += 1
            if (outs[0] / fname).read_bytes() != (outs[1] / fname).read_bytes():
                mismatched.append(f"{name}/{fname}")
    ok = report(9, "determinism", [
        (f"{compared} CSV files byte-identical across re-runs (1 vs 4 threads); mismatches {mismatched}",
         not mismatched),
    ])
    assert ok, RESULTS[-1]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
