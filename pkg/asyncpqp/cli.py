""" Command-line entry point of asyncpqp.

    asyncpqp survey --config experiment.json --p inf
    asyncpqp monte-carlo --config experiment.json --runs 50 --out results/

Exit status is 0 on success, 1 for invalid input and 2 for runtime failures.
Stalled or diverged runs only count as failures with ``--strict``.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from asyncpqp.asynchronous import assemble_r_blocks, run_async
from asyncpqp.delay import decode_mode, mode_index
from asyncpqp.exceptions import AsyncPQPError, DivergenceError, StallError
from asyncpqp.harness import (
    ExperimentConfig,
    export_trajectories,
    run_experiment,
    stability_survey,
    write_summary,
)
from asyncpqp.problem import compute_phi_set, save_problem, sync_fixed_point
from asyncpqp.stability import enumerate_modes, step_condition_value
from asyncpqp.sync import run_sync
from asyncpqp.utils.serialize import FORMATS, write_frame

FAILED_STATUSES = ("stalled", "diverged")


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors are validation errors: exit 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config_epilog() -> str:
    defaults = ExperimentConfig().to_dict()
    lines = ["config fields (JSON file given with --config, flags take precedence):"]
    for name, help in ExperimentConfig.field_help().items():
        lines.append(f"  {name:<22} {help} (default: {defaults[name]})")
    return "\n".join(lines)


def _common_options() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment configuration")
    common.add_argument("--out", type=Path, help="output directory for data files")
    common.add_argument("--seed", type=int, help="problem seed (overrides problem_seed)")
    common.add_argument("--runs", type=int, help="number of Monte Carlo runs")
    common.add_argument("--q", type=int, help="delay window length")
    common.add_argument("--alpha", type=float, help="step size of every block")
    common.add_argument("--p", choices=["1", "2", "inf"], help="norm selector")
    common.add_argument("--gate", choices=["on", "off"], help="stabilizing gate")
    common.add_argument("--format", choices=FORMATS, default="csv", help="data file format")
    common.add_argument(
        "--strict", action="store_true", help="exit 2 when a run stalls or diverges"
    )
    common.add_argument("--verbose", action="store_true", help="log progress to stderr")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="asyncpqp",
        description="Dual decomposition of separable QPs under simulated asynchrony.",
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command", required=True)
    common = _common_options()
    epilog = _config_epilog()
    for name, help in (
        ("generate", "generate the random instance and save it as JSON"),
        ("survey", "print the pre-flight stability survey"),
        ("run-sync", "run the synchronous dual iteration"),
        ("run-async", "run one asynchronous dual iteration"),
        ("monte-carlo", "run the seeded Monte Carlo experiment"),
        ("enumerate-modes", "list and verify every switching mode"),
    ):
        subparsers.add_parser(
            name,
            help=help,
            description=help,
            parents=[common],
            epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    return config.with_overrides(
        problem_seed=args.seed,
        runs=args.runs,
        q=args.q,
        alpha=args.alpha,
        p=args.p,
        gate_enabled=None if args.gate is None else args.gate == "on",
    )


def _output_dir(args) -> Optional[Path]:
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _print_trajectory(trajectory) -> None:
    print(f"status       {trajectory.terminal_status}")
    print(f"iterations   {trajectory.iterations}")
    print(f"holds        {trajectory.holds}")
    print(f"final y      {np.array2string(trajectory.final_y, precision=10)}")


def cmd_generate(args, config: ExperimentConfig) -> int:
    problem = config.build_problem()
    out = _output_dir(args) or Path(".")
    path = out / "problem.json"
    save_problem(problem, path)
    print(f"problem_seed {config.problem_seed}: N={problem.N} n={config.n} m={problem.m}")
    print(f"wrote {path}")
    return 0


def cmd_survey(args, config: ExperimentConfig) -> int:
    problem = config.build_problem()
    report = stability_survey(
        problem,
        config.build_distribution(problem.N),
        config.survey_samples,
        config.p,
        config.run_seed_base,
    )
    for line in report.summary_lines():
        print(line)
    return 0


def cmd_run_sync(args, config: ExperimentConfig) -> int:
    problem = config.build_problem()
    try:
        trajectory = run_sync(
            problem, config.initial_dual(), config.epsilon, config.max_iter,
            p=config.p, allow_divergence=True,
        )
    except DivergenceError as exc:
        trajectory = exc.trajectory
    _print_trajectory(trajectory)

    out = _output_dir(args)
    if out is not None:
        path = out / f"sync.{args.format}"
        write_frame(trajectory.to_frame(), path, args.format)
        print(f"wrote {path}")
    return 2 if args.strict and trajectory.terminal_status in FAILED_STATUSES else 0


def cmd_run_async(args, config: ExperimentConfig) -> int:
    problem = config.build_problem()
    try:
        trajectory = run_async(
            problem,
            config.build_distribution(problem.N),
            config.initial_dual(),
            config.epsilon,
            config.max_iter,
            gate_enabled=config.gate_enabled,
            p=config.p,
            seed=config.run_seed_base,
            hold_policy=config.hold_policy,
            max_consecutive_holds=config.max_consecutive_holds,
            record_delays=config.record_delays,
        )
    except (StallError, DivergenceError) as exc:
        trajectory = exc.trajectory
    _print_trajectory(trajectory)
    if trajectory.terminal_status == "converged":
        distance = np.abs(trajectory.final_y - sync_fixed_point(problem)).max()
        print(f"||y - y*||_inf {distance:.6g}")

    out = _output_dir(args)
    if out is not None:
        path = out / f"run_0000_seed_{config.run_seed_base}.{args.format}"
        write_frame(trajectory.to_frame(), path, args.format)
        print(f"wrote {path}")
    return 2 if args.strict and trajectory.terminal_status in FAILED_STATUSES else 0


def cmd_monte_carlo(args, config: ExperimentConfig) -> int:
    summary, trajectories = run_experiment(config, progress=args.verbose)
    for line in summary.stability.summary_lines():
        print(line)
    counts = "  ".join(f"{k} {v}" for k, v in summary.status_counts().items())
    print(f"runs {len(trajectories)}: {counts}")
    print(f"sync baseline {summary.sync_trajectory.terminal_status} "
          f"after {summary.sync_trajectory.iterations} iterations")
    print(f"max pairwise distance      {summary.max_pairwise_distance:.6g}")
    print(f"max distance to fixed point {summary.max_distance_to_fixed_point:.6g}")

    out = _output_dir(args)
    if out is not None:
        written = export_trajectories(
            trajectories, out, args.format, sync=summary.sync_trajectory
        )
        write_summary(summary, out / "summary.json")
        print(f"wrote {len(written)} {args.format} files and summary.json to {out}")

    failed = any(status in FAILED_STATUSES for status in summary.statuses)
    return 2 if args.strict and failed else 0


def _expected_q2n2_blocks(phis: np.ndarray, delays) -> List[np.ndarray]:
    """The four two-worker, two-slot patterns written out by hand."""
    eye = np.eye(phis.shape[1])
    zero = np.zeros_like(eye)
    return {
        (0, 0): [eye + phis[0] + phis[1], zero],
        (1, 0): [eye + phis[1], phis[0]],
        (0, 1): [eye + phis[0], phis[1]],
        (1, 1): [eye, phis[0] + phis[1]],
    }[tuple(delays)]


def cmd_enumerate_modes(args, config: ExperimentConfig) -> int:
    problem = config.build_problem()
    phi_set = compute_phi_set(problem)
    q, N, m = config.q, problem.N, problem.m
    modes = enumerate_modes(phi_set, q)

    failures = 0
    for ix, W in enumerate(modes):
        sample = decode_mode(ix, q, N)
        rset = assemble_r_blocks(phi_set, sample, q)
        checks = [
            mode_index(sample, q) == ix,
            np.allclose(rset.r_blocks.sum(axis=0), phi_set.sync_matrix, rtol=0, atol=1e-12),
            np.array_equal(W[:m], np.hstack(list(rset.r_blocks))),
            np.array_equal(W[m:, : (q - 1) * m], np.eye((q - 1) * m)),
            not W[m:, (q - 1) * m:].any(),
        ]
        if q == 2 and N == 2:
            expected = _expected_q2n2_blocks(phi_set.phis, sample.staleness)
            checks.append(np.allclose(W[:m], np.hstack(expected), rtol=0, atol=1e-12))
        ok = all(checks)
        failures += not ok
        delays = ",".join(str(d) for d in sample.staleness)
        print(
            f"mode {ix:>5}  delays ({delays})  "
            f"condition {step_condition_value(rset, config.p):.6g}  "
            f"{'ok' if ok else 'FAILED'}"
        )

    print(f"{len(modes)} modes, {len(modes) - failures} verified")
    if failures:
        logging.error(f"{failures} modes failed verification")
        return 1
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "survey": cmd_survey,
    "run-sync": cmd_run_sync,
    "run-async": cmd_run_async,
    "monte-carlo": cmd_monte_carlo,
    "enumerate-modes": cmd_enumerate_modes,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s: %(message)s",
    )
    try:
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except ValueError as exc:
        print(f"asyncpqp: error: {exc}", file=sys.stderr)
        return 1
    except (AsyncPQPError, OSError) as exc:
        print(f"asyncpqp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
