import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from asyncpqp.delay import DelayDistribution, exponential_pmf, uniform_pmf
from asyncpqp.exceptions import ConfigError, ExportError
from asyncpqp.harness import (
    ExperimentConfig,
    cross_run_spread,
    export_trajectories,
    read_trajectory,
    run_experiment,
    stability_survey,
    tail_envelope_is_monotone,
    write_summary,
)
from asyncpqp.asynchronous import run_async
from asyncpqp.problem import (
    compute_phi_set,
    dual_curvature,
    generate_random_problem,
    sync_fixed_point,
)
from asyncpqp.stability import (
    bertsekas_condition,
    calibrate_alpha,
    matrix_p_norm,
    sync_radius,
)
from asyncpqp.sync import run_sync
from asyncpqp.utils.serialize import read_frame


def test_config_defaults_and_overrides(get_data_folder):
    config = ExperimentConfig()
    assert config.delay_spec == {"kind": "exponential", "rate": 1.2}
    assert config.hold_policy == "decay"

    config = ExperimentConfig.from_json(get_data_folder / "desk.json")
    assert (config.N, config.n, config.m, config.q, config.runs) == (10, 4, 3, 5, 50)

    overridden = config.with_overrides(runs=3, q=None, p="inf", gate_enabled=False)
    assert overridden.runs == 3 and overridden.q == 5
    assert overridden.to_dict()["p"] == "inf"
    assert not overridden.gate_enabled
    assert config.with_overrides() is config


@pytest.mark.parametrize(
    "data",
    [
        {"runs": 0},
        {"q": 0},
        {"alpha": -1.0},
        {"p": 3},
        {"hold_policy": "skip"},
        {"backend": "gpu"},
        {"m": 2, "y0": [0.0, 0.0, 0.0]},
        {"colour": "blue"},
        {"dims": [10, 4, 3]},
        {"N": [10]},
        {"delay_spec": [1, 2]},
        {"delay_spec": {"kind": "markov", "transitions": [[[1.0]]] * 10}},
        {"delay_spec": {"kind": "iid", "pmf": [0.5, 0.5]}},
        {"delay_spec": {"kind": "exponential", "q": 4}},
        {"delay_spec": {"kind": "exponential", "rate": "fast"}},
    ],
)
def test_config_validation(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_config_must_be_an_object():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict([1, 2])


def test_window_length_follows_q():
    config = ExperimentConfig(q=2, delay_spec={"kind": "iid", "pmf": [0.5, 0.5]})
    assert config.build_distribution().q == 2
    with pytest.raises(ConfigError):
        config.with_overrides(q=3)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(bad)


def test_field_help_covers_every_field():
    help = ExperimentConfig.field_help()
    assert set(help) == set(ExperimentConfig().to_dict())
    assert all(help.values())


def test_survey_synchronous_pmf_is_constant(scaled_problem):
    problem = scaled_problem(0, N=5)
    pmf = np.zeros(4)
    pmf[0] = 1.0
    dist = DelayDistribution.identical(pmf, 5)
    report = stability_survey(problem, dist, 200, p=1, seed=3)
    expected = matrix_p_norm(compute_phi_set(problem).sync_matrix, 1)
    assert report.condition_min == pytest.approx(expected)
    assert report.condition_max == pytest.approx(expected)
    assert report.samples == 200
    assert report.fraction_below_one == (1.0 if expected < 1 else 0.0)

    with pytest.raises(ValueError):
        stability_survey(problem, dist, 0)


def test_survey_predicts_stall(scaled_problem):
    problem = scaled_problem(1, N=5, fraction=4.0)
    dist = DelayDistribution.identical(exponential_pmf(3, 1.2), 5)
    report = stability_survey(problem, dist, 300, seed=0)
    assert report.fraction_below_one == 0.0

    config = ExperimentConfig(N=5, n=4, m=3, q=3, runs=2, max_iter=500, survey_samples=50)
    config = config.with_overrides(alpha=problem.alphas[0], problem_seed=1)
    summary, trajectories = run_experiment(config, progress=False)
    assert summary.statuses == ["stalled", "stalled"]
    assert all(t.iterations == 30 for t in trajectories)


def test_survey_conservative_instance():
    """bertsekas_rho above one while most sampled steps still contract."""
    for seed in range(50):
        problem = generate_random_problem(seed, 3, 3, 3, 0.01)
        try:
            problem = calibrate_alpha(problem, 1.1)
        except ValueError:
            continue
        dist = DelayDistribution.identical(exponential_pmf(3, 3.0), 3)
        report = stability_survey(problem, dist, 500, seed=seed)
        if report.fraction_below_one >= 0.5:
            break
    else:
        pytest.fail("no conservative instance found")
    assert report.bertsekas_rho == pytest.approx(1.1, abs=1e-9)
    assert report.sync_rho < 1


def test_single_synchronous_run_matches_baseline():
    G = dual_curvature(generate_random_problem(0, 4, 3, 2, 1.0))
    alpha = 0.5 / np.linalg.eigvalsh(G).max()
    config = ExperimentConfig(
        N=4, n=3, m=2, alpha=alpha, q=3, runs=1, epsilon=1e-12, max_iter=5000,
        delay_spec={"kind": "iid", "pmf": [1.0, 0.0, 0.0]}, survey_samples=10,
    )
    summary, trajectories = run_experiment(config, progress=False)
    sync = summary.sync_trajectory
    assert trajectories[0].iterations == sync.iterations
    assert_allclose(trajectories[0].y, sync.y, rtol=0, atol=1e-12)
    assert summary.max_pairwise_distance == 0.0


def test_desk_scale_uniqueness(desk_config):
    summary, trajectories = run_experiment(desk_config, progress=False)
    assert len(trajectories) == 50
    assert summary.statuses == ["converged"] * 50
    assert summary.max_distance_to_fixed_point < 10 * desk_config.epsilon
    assert np.all(summary.distances_to_fixed_point >= 0)
    assert summary.max_pairwise_distance < 1e-6
    assert_array_equal(summary.seeds, np.arange(1000, 1050))
    assert len(summary.spread) == max(t.iterations for t in trajectories)

    assert tail_envelope_is_monotone(summary.spread["spread"], atol=1e-9)


def test_experiment_is_reproducible(desk_config):
    config = desk_config.with_overrides(runs=4, epsilon=1e-8)
    first, first_runs = run_experiment(config, progress=False)
    second, second_runs = run_experiment(
        config.with_overrides(num_workers=2), progress=False
    )
    assert_array_equal(first.final_y, second.final_y)
    for a, b in zip(first_runs, second_runs):
        assert a.seed == b.seed
        assert_array_equal(a.y, b.y)
        assert_array_equal(a.delays, b.delays)
    pd.testing.assert_frame_equal(first.spread, second.spread)


def test_experiment_with_process_backend(desk_config):
    config = desk_config.with_overrides(runs=2, epsilon=1e-8)
    serial, serial_runs = run_experiment(config, progress=False)
    parallel, parallel_runs = run_experiment(
        config.with_overrides(num_workers=2, backend="process"), progress=False
    )
    assert_array_equal(serial.final_y, parallel.final_y)
    assert [t.seed for t in parallel_runs] == [1000, 1001]


def test_conservatism_instance_converges_under_gate():
    """The classical test fails (rho = 1.1) yet every gated run reaches y*."""
    for seed in range(50):
        problem = generate_random_problem(seed, 3, 3, 3, 0.01)
        try:
            problem = calibrate_alpha(problem, 1.1)
        except ValueError:
            continue
        if sync_radius(compute_phi_set(problem)) < 0.99:
            break
    else:
        pytest.fail("no conservative instance found")

    phi_set = compute_phi_set(problem)
    assert 1.05 <= bertsekas_condition(phi_set) <= 1.15
    y_star = sync_fixed_point(problem, phi_set)
    dist = DelayDistribution.identical(exponential_pmf(3, 1.2), 3)
    for run_seed in range(20):
        trajectory = run_async(
            problem, dist, np.zeros(3), 1e-12, 200000, seed=run_seed, phi_set=phi_set
        )
        assert trajectory.terminal_status == "converged"
        assert np.abs(trajectory.final_y - y_star).max() < 1e-6


def test_bertsekas_sufficiency_without_gate(decoupled_problem):
    problem = decoupled_problem(0)
    phi_set = compute_phi_set(problem)
    assert bertsekas_condition(phi_set) < 0.9
    y_star = sync_fixed_point(problem, phi_set)
    dist = DelayDistribution.identical(uniform_pmf(5), problem.N)
    for run_seed in range(20):
        trajectory = run_async(
            problem, dist, np.zeros(3), 1e-12, 100000,
            gate_enabled=False, seed=run_seed, phi_set=phi_set,
        )
        assert trajectory.terminal_status == "converged"
        assert trajectory.holds == 0
        assert np.abs(trajectory.final_y - y_star).max() < 1e-6


def test_ungated_divergence_is_recorded(scaled_problem):
    problem = scaled_problem(2, N=4, fraction=3.0)
    config = ExperimentConfig(
        problem_seed=2, N=4, n=4, m=3, alpha=problem.alphas[0], q=3, runs=2,
        gate_enabled=False, y0=[1.0, 1.0, 1.0], survey_samples=10,
    )
    summary, trajectories = run_experiment(config, progress=False)
    assert summary.statuses == ["diverged", "diverged"]
    assert summary.sync_trajectory.terminal_status == "diverged"


def test_cross_run_spread(scaled_problem):
    problem = scaled_problem(3)
    dist = DelayDistribution.identical(exponential_pmf(3, 1.2), problem.N)
    runs = [
        run_async(problem, dist, np.zeros(3), 1e-300, 40, seed=seed) for seed in range(3)
    ]
    runs.append(run_async(problem, dist, np.zeros(3), 1e-300, 10, seed=9))
    sync = run_sync(problem, np.zeros(3), 1e-300, 15)
    df = cross_run_spread(runs, sync)

    assert len(df) == 40
    assert_array_equal(df["k"], np.arange(1, 41))
    # the short run is padded with its final iterate
    short = np.concatenate([runs[3].y[:, 0], np.full(30, runs[3].final_y[0])])
    stacked = np.vstack([r.y[:, 0] for r in runs[:3]] + [short])
    assert_array_equal(df["y_1_min"], stacked.min(axis=0))
    assert_array_equal(df["y_1_max"], stacked.max(axis=0))
    assert np.all(df["spread"] >= 0)
    assert_array_equal(df["sync_y_2"].iloc[:15], sync.y[:, 1])
    assert np.all(df["sync_y_2"].iloc[15:] == sync.final_y[1])

    with pytest.raises(ValueError):
        cross_run_spread([])


def test_tail_envelope():
    decaying = pd.Series(np.exp(-np.arange(200) / 20.0))
    assert tail_envelope_is_monotone(decaying)
    bumpy = decaying.copy()
    bumpy.iloc[-5:] = 10.0
    assert not tail_envelope_is_monotone(bumpy)


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_export_and_read_back(tmp_path, scaled_problem, fmt):
    problem = scaled_problem(4)
    dist = DelayDistribution.identical(exponential_pmf(4, 1.2), problem.N)
    runs = [
        run_async(problem, dist, np.zeros(3), 1e-10, 5000, seed=seed) for seed in range(3)
    ]
    written = export_trajectories(runs, tmp_path / "out", fmt)

    assert len(written) == 4
    assert written[-1].name == f"aggregate.{fmt}"
    aggregate = read_frame(written[-1])
    assert len(aggregate) == max(t.iterations for t in runs)

    for path, original in zip(written[:-1], runs):
        restored = read_trajectory(path)
        assert_array_equal(restored.y, original.y)
        assert_array_equal(restored.residual, original.residual)
        assert_array_equal(restored.condition, original.condition)
        assert_array_equal(restored.updated, original.updated)
        assert_array_equal(restored.delays, original.delays)


def test_export_errors(tmp_path, scaled_problem):
    with pytest.raises(ValueError):
        export_trajectories([], tmp_path)

    problem = scaled_problem(5)
    trajectory = run_sync(problem, np.zeros(3), 1e-6, 10)
    with pytest.raises(ValueError):
        export_trajectories([trajectory], tmp_path, "parquet")

    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ExportError):
        export_trajectories([trajectory], blocker / "sub")


def test_write_summary(tmp_path):
    config = ExperimentConfig(N=3, n=3, m=2, alpha=0.05, q=2, runs=2, max_iter=3000,
                              epsilon=1e-8, survey_samples=20)
    summary, _ = run_experiment(config, progress=False)
    write_summary(summary, tmp_path / "summary.json")

    with open(tmp_path / "summary.json") as f:
        data = json.load(f)
    assert data["config"]["runs"] == 2
    assert [run["seed"] for run in data["runs"]] == [1000, 1001]
    assert data["stability"]["samples"] == 20
    assert sum(data["status_counts"].values()) == 2
    assert len(data["fixed_point"]) == 2


@pytest.mark.slow
def test_full_scale_experiment(get_data_folder, tmp_path):
    config = ExperimentConfig.from_json(get_data_folder / "full_scale.json").with_overrides(
        num_workers=4, backend="process"
    )
    summary, trajectories = run_experiment(config, progress=False)
    assert summary.statuses == ["converged"] * 300
    assert summary.max_pairwise_distance < 1e-5

    written = export_trajectories(trajectories, tmp_path, "csv", sync=summary.sync_trajectory)
    assert len(written) == 301


def test_exports_are_byte_identical_for_a_seed(tmp_path, scaled_problem):
    problem = scaled_problem(6)
    dist = DelayDistribution.identical(exponential_pmf(3, 1.2), problem.N)
    contents = []
    for name in ("first", "second"):
        runs = [run_async(problem, dist, np.zeros(3), 1e-10, 3000, seed=s) for s in (4, 5)]
        written = export_trajectories(runs, tmp_path / name, "csv")
        contents.append([path.read_bytes() for path in written])
    assert contents[0] == contents[1]


def test_markov_delays_end_to_end(scaled_problem):
    problem = scaled_problem(8, N=4)
    config = ExperimentConfig(
        problem_seed=8, N=4, n=4, m=3, alpha=problem.alphas[0] / 2, q=2, runs=3,
        epsilon=1e-11, max_iter=200000, survey_samples=50,
        delay_spec={"kind": "markov", "transition": [[0.8, 0.2], [0.6, 0.4]]},
    )
    dist = config.build_distribution()
    assert dist.kind == "markov" and dist.N == 4

    summary, trajectories = run_experiment(config, progress=False)
    assert summary.statuses == ["converged"] * 3
    assert summary.max_distance_to_fixed_point < 1e-6
    for trajectory in trajectories:
        assert set(np.unique(trajectory.delays)) <= {0, 1}
