""" Seeded Monte Carlo experiments: many asynchronous runs on one instance.

One instance is generated from ``problem_seed``; run r draws its delays from a
private Philox stream seeded with ``run_seed_base + r`` and every run starts
from the same y^0. The synchronous baseline and the fixed point y* are the
references the asynchronous runs are compared against.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics.pairwise import pairwise_distances

from asyncpqp.asynchronous import HOLD_POLICIES, assemble_r_blocks, run_async
from asyncpqp.delay import DelayDistribution, make_sampler_state, sample_delays
from asyncpqp.exceptions import (
    ConfigError,
    DivergenceError,
    ExportError,
    SingularAggregateError,
    StallError,
)
from asyncpqp.problem import (
    PhiSet,
    SeparableQpProblem,
    compute_phi_set,
    generate_random_problem,
    sync_fixed_point,
)
from asyncpqp.stability import (
    StabilityReport,
    build_report,
    norm_label,
    parse_norm,
    step_condition_value,
)
from asyncpqp.sync import run_sync
from asyncpqp.trajectory import Trajectory
from asyncpqp.utils.parallelize import parallelize_inputs
from asyncpqp.utils.serialize import FORMATS, read_frame, write_frame, write_json


def _field(default, help, **kwargs):
    return field(default=default, metadata={"help": help}, **kwargs)


@dataclass(frozen=True)
class ExperimentConfig:
    """Monte Carlo experiment protocol. Run r uses seed run_seed_base + r."""

    problem_seed: int = _field(0, "seed of the random instance")
    N: int = _field(10, "number of blocks (workers)")
    n: int = _field(4, "primal dimension of each block")
    m: int = _field(3, "number of coupling constraints (dual dimension)")
    alpha: float = _field(0.01, "step size alpha_i shared by every block")
    q: int = _field(5, "delay window length; staleness lies in 0..q-1")
    delay_spec: Dict[str, object] = _field(
        None,
        "delay law, e.g. {\"kind\": \"exponential\", \"rate\": 1.2}; "
        "kinds: exponential, uniform, iid, markov",
    )
    runs: int = _field(10, "number of asynchronous Monte Carlo runs")
    epsilon: float = _field(1e-9, "termination tolerance on ||y^{k+1} - y^k||_p")
    max_iter: int = _field(100000, "maximum iterations per run")
    p: object = _field(2, "norm for the gate condition and residual: 1, 2 or inf")
    gate_enabled: bool = _field(True, "hold updates failing sum_j ||R_1j||_p < 1")
    run_seed_base: int = _field(1000, "run r draws delays with seed run_seed_base + r")
    conditioning: float = _field(10.0, "condition-number cap of every generated Q_i")
    y0: Optional[List[float]] = _field(None, "initial dual vector (default zeros)")
    hold_policy: str = _field(
        "decay", "staleness during holds: decay (one slot per held step) or freeze"
    )
    max_consecutive_holds: Optional[int] = _field(
        None, "stall guard on consecutive holds (default 10 * q)"
    )
    survey_samples: int = _field(1000, "delay draws in the pre-flight stability survey")
    record_delays: bool = _field(True, "keep per-step delay samples in trajectories")
    num_workers: int = _field(1, "parallel workers for the Monte Carlo runs")
    backend: str = _field("thread", "executor for parallel runs: thread or process")

    def __post_init__(self):
        if self.delay_spec is None:
            object.__setattr__(self, "delay_spec", {"kind": "exponential", "rate": 1.2})
        for name in ("N", "n", "m", "q", "runs", "max_iter", "survey_samples", "num_workers"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not self.conditioning >= 1:
            raise ConfigError(f"conditioning must be >= 1, got {self.conditioning}")
        if self.hold_policy not in HOLD_POLICIES:
            raise ConfigError(f"hold_policy must be one of {HOLD_POLICIES}")
        if self.backend not in ("thread", "process"):
            raise ConfigError(f"backend must be thread or process, got {self.backend!r}")
        if self.y0 is not None and len(self.y0) != self.m:
            raise ConfigError(f"y0 must have {self.m} entries, got {len(self.y0)}")
        try:
            parse_norm(self.p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.build_distribution()

    @classmethod
    def field_help(cls) -> Dict[str, str]:
        return {f.name: f.metadata["help"] for f in fields(cls)}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"Config must be a JSON object, got {type(data).__name__}")
        data = dict(data)
        # {"dims": {"N": .., "n": .., "m": ..}} is accepted as well as flat keys
        dims = data.pop("dims", None) or {}
        if not isinstance(dims, dict):
            raise ConfigError(f"dims must be an object with N, n and m, got {dims!r}")
        data.update(dims)
        unknown = set(data) - set(cls.field_help())
        if unknown:
            raise ConfigError(f"Unknown config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, KeyError, IndexError) as exc:
            raise ConfigError(f"Invalid config: {exc}") from exc

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            with open(path) as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigError(f"Could not read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with every non-None override applied."""
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if not overrides:
            return self
        try:
            return replace(self, **overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        data["p"] = norm_label(self.p)
        return data

    def build_problem(self) -> SeparableQpProblem:
        return generate_random_problem(
            self.problem_seed, self.N, self.n, self.m, self.alpha, self.conditioning
        )

    def build_distribution(self, N: Optional[int] = None) -> DelayDistribution:
        return DelayDistribution.from_spec(self.delay_spec, N or self.N, self.q)

    def initial_dual(self) -> np.ndarray:
        return np.zeros(self.m) if self.y0 is None else np.asarray(self.y0, dtype=np.float64)


@dataclass
class RunSummary:
    """Per-run outcomes and the cross-run comparison against y*."""

    seeds: np.ndarray
    statuses: List[str]
    final_y: np.ndarray
    iterations: np.ndarray
    holds: np.ndarray
    fixed_point: np.ndarray
    distances_to_fixed_point: np.ndarray
    max_pairwise_distance: float
    max_distance_to_fixed_point: float
    spread: pd.DataFrame
    sync_trajectory: Optional[Trajectory] = None
    stability: Optional[StabilityReport] = None
    config: Optional[Dict[str, object]] = None

    @property
    def converged(self) -> int:
        return sum(status == "converged" for status in self.statuses)

    def status_counts(self) -> Dict[str, int]:
        return dict(pd.Series(self.statuses).value_counts().sort_index())

    def to_dict(self) -> Dict[str, object]:
        sync = self.sync_trajectory
        return {
            "config": self.config,
            "fixed_point": self.fixed_point,
            "max_pairwise_distance": self.max_pairwise_distance,
            "max_distance_to_fixed_point": self.max_distance_to_fixed_point,
            "status_counts": self.status_counts(),
            "sync": None if sync is None else {
                "status": sync.terminal_status,
                "iterations": sync.iterations,
                "final_y": sync.final_y,
            },
            "stability": None if self.stability is None else self.stability.to_dict(),
            "runs": [
                {
                    "seed": int(seed),
                    "status": status,
                    "iterations": int(iters),
                    "holds": int(holds),
                    "final_y": y,
                    "distance_to_fixed_point": dist,
                }
                for seed, status, iters, holds, y, dist in zip(
                    self.seeds,
                    self.statuses,
                    self.iterations,
                    self.holds,
                    self.final_y,
                    self.distances_to_fixed_point,
                )
            ],
        }


def stability_survey(
    problem: SeparableQpProblem,
    dist: DelayDistribution,
    samples: int,
    p=2,
    seed: int = 0,
    phi_set: Optional[PhiSet] = None,
) -> StabilityReport:
    """Empirical distribution of the gate condition over ``samples`` delay draws,
    next to the classical and synchronous spectral radii."""
    if samples < 1:
        raise ValueError(f"samples must be positive, got {samples}")
    if phi_set is None:
        phi_set = compute_phi_set(problem)
    state = make_sampler_state(dist, seed)
    conditions = np.array(
        [
            step_condition_value(
                assemble_r_blocks(phi_set, sample_delays(dist, state, k), dist.q), p
            )
            for k in range(samples)
        ]
    )
    return build_report(phi_set, conditions, p)


@parallelize_inputs
def _run_single(
    run_seed: int,
    problem: SeparableQpProblem,
    dist: DelayDistribution,
    config: ExperimentConfig,
    phi_set: PhiSet,
) -> Trajectory:
    try:
        trajectory = run_async(
            problem,
            dist,
            config.initial_dual(),
            config.epsilon,
            config.max_iter,
            gate_enabled=config.gate_enabled,
            p=config.p,
            seed=run_seed,
            hold_policy=config.hold_policy,
            max_consecutive_holds=config.max_consecutive_holds,
            record_delays=config.record_delays,
            phi_set=phi_set,
        )
    except (StallError, DivergenceError) as exc:
        trajectory = exc.trajectory
    logging.info(
        f"Run with seed {run_seed}: {trajectory.terminal_status} "
        f"after {trajectory.iterations} iterations"
    )
    return trajectory


def cross_run_spread(
    trajectories: List[Trajectory], sync: Optional[Trajectory] = None
) -> pd.DataFrame:
    """Per-iteration min/max/mean of each y component across runs.

    Runs that stopped early are padded with their final iterate. The
    synchronous baseline, when given, is added as sync_y_* columns padded
    (or cut) to the same length.
    """
    if not trajectories:
        raise ValueError("No trajectories to aggregate")
    length = max(t.iterations for t in trajectories)
    m = trajectories[0].m
    df = pd.DataFrame({"k": np.arange(1, length + 1)})

    total = np.zeros(length)
    for j in range(m):
        values = np.empty((len(trajectories), length))
        for row, t in enumerate(trajectories):
            values[row, : t.iterations] = t.y[:, j]
            values[row, t.iterations:] = t.final_y[j]
        df[f"y_{j + 1}_min"] = values.min(axis=0)
        df[f"y_{j + 1}_max"] = values.max(axis=0)
        df[f"y_{j + 1}_mean"] = values.mean(axis=0)
        total = np.maximum(total, df[f"y_{j + 1}_max"] - df[f"y_{j + 1}_min"])
    df["spread"] = total

    if sync is not None and sync.iterations:
        for j in range(m):
            column = np.full(length, sync.final_y[j])
            upto = min(length, sync.iterations)
            column[:upto] = sync.y[:upto, j]
            df[f"sync_y_{j + 1}"] = column
    return df


def tail_envelope_is_monotone(
    spread: pd.Series, fraction: float = 0.1, window: int = 10, atol: float = 0.0
) -> bool:
    """Whether the smoothed cross-run spread never grows over the final ``fraction``."""
    spread = pd.Series(np.asarray(spread, dtype=np.float64))
    smoothed = spread.rolling(window, min_periods=1).mean()
    tail = smoothed.iloc[int(len(smoothed) * (1 - fraction)):]
    return bool((tail.diff().dropna() <= atol).all())


def run_experiment(
    config: ExperimentConfig, progress: bool = True
) -> Tuple[RunSummary, List[Trajectory]]:
    """Generate the instance, run the synchronous baseline and ``config.runs``
    asynchronous runs, and compare every final iterate against y*.

    Stalled or diverged runs are recorded through their terminal status.

    Raises:
        SingularAggregateError: the instance has no unique fixed point.
    """
    problem = config.build_problem()
    dist = config.build_distribution(problem.N)
    phi_set = compute_phi_set(problem)
    try:
        fixed_point = sync_fixed_point(problem, phi_set)
    except SingularAggregateError:
        logging.error(f"Rejecting instance with problem_seed={config.problem_seed}")
        raise

    stability = stability_survey(
        problem, dist, config.survey_samples, config.p, config.run_seed_base, phi_set
    )
    y0 = config.initial_dual()
    try:
        sync = run_sync(
            problem, y0, config.epsilon, config.max_iter, p=config.p,
            allow_divergence=True, phi_set=phi_set,
        )
    except DivergenceError as exc:
        sync = exc.trajectory

    seeds = [config.run_seed_base + r for r in range(config.runs)]
    trajectories = _run_single(
        seeds,
        problem,
        dist,
        config,
        phi_set,
        num_workers=config.num_workers,
        backend=config.backend,
        progress=progress,
    )

    final_y = np.vstack([t.final_y for t in trajectories])
    distances = np.abs(final_y - fixed_point).max(axis=1)
    pairwise = pairwise_distances(final_y, metric="chebyshev")

    summary = RunSummary(
        seeds=np.array(seeds),
        statuses=[t.terminal_status for t in trajectories],
        final_y=final_y,
        iterations=np.array([t.iterations for t in trajectories]),
        holds=np.array([t.holds for t in trajectories]),
        fixed_point=fixed_point,
        distances_to_fixed_point=distances,
        max_pairwise_distance=float(pairwise.max()),
        max_distance_to_fixed_point=float(distances.max()),
        spread=cross_run_spread(trajectories, sync),
        sync_trajectory=sync,
        stability=stability,
        config=config.to_dict(),
    )
    return summary, trajectories


def export_trajectories(
    trajectories: List[Trajectory],
    path: Union[str, Path],
    format: str = "csv",
    sync: Optional[Trajectory] = None,
) -> List[Path]:
    """Write one file per run plus the aggregate spread file into directory ``path``.

    Returns:
        The written paths, runs first and the aggregate last.
    """
    if not trajectories:
        raise ValueError("Nothing to export: the trajectory list is empty")
    if format not in FORMATS:
        raise ValueError(f"Unknown format {format!r}, expected one of {FORMATS}")
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"Could not create {path}: {exc}") from exc

    written = []
    for ix, trajectory in enumerate(trajectories):
        name = f"run_{ix:04d}.{format}"
        if trajectory.seed is not None:
            name = f"run_{ix:04d}_seed_{trajectory.seed}.{format}"
        write_frame(trajectory.to_frame(), path / name, format)
        written.append(path / name)

    aggregate = path / f"aggregate.{format}"
    write_frame(cross_run_spread(trajectories, sync), aggregate, format)
    written.append(aggregate)
    return written


def read_trajectory(path: Union[str, Path]) -> Trajectory:
    """Re-import a run written by export_trajectories."""
    df = read_frame(path)
    y_columns = sorted(
        (c for c in df.columns if c.startswith("y_")), key=lambda c: int(c[2:])
    )
    if not y_columns:
        raise ExportError(f"{path} has no y_* columns")
    kind = "async" if "zeta" in df.columns else "sync"
    y = df[y_columns].to_numpy(dtype=np.float64)

    trajectory = Trajectory(y0=np.full(len(y_columns), np.nan), kind=kind)
    trajectory.k = df["k"].to_numpy()
    trajectory.y = y
    trajectory.residual = df["residual"].to_numpy(dtype=np.float64)
    if kind == "async":
        trajectory.condition = df["condition_value"].to_numpy(dtype=np.float64)
        trajectory.zeta = df["zeta"].to_numpy()
        trajectory.updated = df["updated"].to_numpy().astype(bool)
        if "delay_sample" in df.columns:
            trajectory.delays = np.array(
                [[int(d) for d in str(row).split(";")] for row in df["delay_sample"]]
            )
    return trajectory


def write_summary(summary: RunSummary, path: Union[str, Path]) -> None:
    write_json(summary.to_dict(), path)
