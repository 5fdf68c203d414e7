"""Command line entry point.

Exit codes: 0 all declared tolerances pass, 1 configuration error,
2 more than 1% of trajectories aborted, 3 tolerance failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from ..integrate import ConfigurationError
from .config import ConfigError, RunConfig, load_config
from .experiments import ABORT_THRESHOLD, Outcome, run_experiment
from .output import OutputError, emit_csv, emit_samples_csv, emit_scatter_svg, write_text

log = logging.getLogger("superdiff")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 1, 2, 3

_COMMAND_EXPERIMENTS = {"train": ("dsm_train",), "validate": ("estimator_validation",)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="superdiff", description="Combine pretrained diffusion score models while sampling.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run the experiment named in the config"),
                       ("train", "train an MLP score model (dsm_train)"),
                       ("validate", "check density estimators against analytic models")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="override the output directory")
        p.add_argument("--steps", type=int, help="override the number of integration steps")
        p.add_argument("--samples", type=int, help="override the number of trajectories")
        p.add_argument("-v", "--verbose", action="store_true", help="enable debug logging")
    return parser


def write_outputs(cfg: RunConfig, outcome: Outcome, out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"{out_dir}: cannot create output directory ({exc.strerror})") from None
    run = outcome.run
    if run is not None:
        d = run.final_x.shape[1]
        m = run.final_logq.shape[1]
        emit_samples_csv(run.sample_ids, run.final_x, run.final_logq, run.aborted, out_dir / "samples.csv")
        emit_csv(run.trace_records(), out_dir / "trace.csv", d, m)
        emit_scatter_svg(run.final_x[~run.aborted], out_dir / "scatter.svg",
                         None if outcome.labels is None else outcome.labels[~run.aborted])
    for name, writer in outcome.artifacts.items():
        try:
            writer(out_dir)
        except OutputError:
            raise
        except OSError as exc:
            raise OutputError(f"{out_dir / name}: cannot write ({exc.strerror})") from None
    write_text(out_dir / "metrics.json", outcome.report.to_json())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "steps": args.steps, "n_samples": args.samples, "output_dir": args.out}
    try:
        cfg = load_config(args.config, overrides)
        allowed = _COMMAND_EXPERIMENTS.get(args.command)
        if allowed and cfg.experiment not in allowed:
            raise ConfigError(f"{args.config}: '{args.command}' expects experiment {allowed[0]!r}, "
                              f"config names {cfg.experiment!r}")
        outcome = run_experiment(cfg)
    except (ConfigError, ConfigurationError) as exc:
        print(f"superdiff: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        write_outputs(cfg, outcome, cfg.output_dir)
    except OutputError as exc:
        print(f"superdiff: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    report = outcome.report
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value:.6g} {c.op} {c.bound}")
    aborted = outcome.aborted_fraction
    if aborted > ABORT_THRESHOLD:
        print(f"superdiff: {aborted:.2%} of trajectories aborted (threshold {ABORT_THRESHOLD:.0%})", file=sys.stderr)
        return EXIT_NUMERIC
    if not report.passed:
        return EXIT_TOLERANCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
