from __future__ import annotations

import csv
import math
import statistics

import numpy as np
import pytest

from rankgrad.gradients import lpg_trajectory_grad
from rankgrad.harness import (REINFORCE_GRADIENT, ConfigError, SweepSpec, aggregate, aggregate_csv_text,
                              config_from_mapping, default_out_dir, gradcheck_csv_text, load_config,
                              onpolicy_reinforce_baseline, parse_config_text, run_experiment, run_gradcheck,
                              run_sweep)
from rankgrad.metrics import EvalRecord, RunLog, read_metrics_csv
from rankgrad.model import load_checkpoint
from rankgrad.offpolicy import TrainRunConfig

BASE_TEXT = """\
# small tree, quick runs
env = tree:T=3,opt=5
eval_period = 48
max_env_steps = 480
lr = 0.1
"""


def base_config(**values):
    cfg = config_from_mapping(parse_config_text(BASE_TEXT))
    return cfg.with_values(**values) if values else cfg


def log_of(values, steps=None):
    steps = steps or list(range(10, 10 * len(values) + 1, 10))
    log = RunLog()
    for s, v in zip(steps, values):
        log.add(EvalRecord(s, 0, s, float(v), float(v)))
    return log


# -- config ------------------------------------------------------------------------------


def test_parse_config_text_handles_comments_and_dashes():
    values = parse_config_text("a-b = 1  # note\n\n c=x\n")
    assert values == {"a_b": "1", "c": "x"}


def test_config_errors():
    with pytest.raises(ConfigError):
        parse_config_text("no equals sign")
    with pytest.raises(ConfigError):
        parse_config_text("a=1\na=2")
    with pytest.raises(ConfigError):
        config_from_mapping({"seed": "1"})
    with pytest.raises(ConfigError):
        config_from_mapping({"env": "tree:T=3", "bogus": "1"})
    with pytest.raises(ConfigError):
        config_from_mapping({"env": "donut:r=3"})
    with pytest.raises(ConfigError):
        config_from_mapping({"env": "tree:T=3", "batch_size": "0"})


def test_capacities_key():
    cfg = config_from_mapping({"env": "tree:T=3", "capacities": "50,70"})
    assert (cfg.run.regular_capacity, cfg.run.nearopt_capacity) == (50, 70)


def test_config_file_round_trip(tmp_path):
    cfg = base_config(seed=4, threshold=0.5, hidden=(3, 2))
    path = tmp_path / "c.txt"
    path.write_text(cfg.text(), encoding="utf-8")
    again = load_config(path)
    assert again == cfg and again.text() == cfg.text()
    assert load_config(path, seed=9).run.seed == 9


def test_default_out_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("RANKGRAD_OUT", str(tmp_path))
    assert default_out_dir() == tmp_path
    monkeypatch.delenv("RANKGRAD_OUT")
    assert str(default_out_dir()) == "runs"


# -- single runs ---------------------------------------------------------------------------


def test_run_experiment_writes_artifacts(tmp_path):
    log = run_experiment(base_config(seed=1), tmp_path)
    assert (tmp_path / "config.txt").read_text(encoding="utf-8") == base_config(seed=1).text()
    records = read_metrics_csv(tmp_path / "metrics.csv")
    assert [r.step for r in records] == [r.step for r in log.records]
    assert load_checkpoint(log.checkpoint).n_params == 2 * 15


def test_metrics_csv_byte_identical(tmp_path):
    run_experiment(base_config(seed=3), tmp_path / "a")
    run_experiment(base_config(seed=3), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


# -- REINFORCE baseline ----------------------------------------------------------------------


def test_reinforce_shares_the_listwise_gradient():
    assert REINFORCE_GRADIENT is lpg_trajectory_grad


def test_reinforce_zero_learning_rate_is_flat():
    spec = base_config().spec()
    log = onpolicy_reinforce_baseline(TrainRunConfig(algorithm="reinforce", lr=0.0, eval_period=48,
                                                     max_env_steps=480, target=99.0), spec)
    assert len(log.records) == 10
    assert len({r.eval_return_mean for r in log.records}) == 1


def test_reinforce_converges_on_majority_of_seeds():
    spec = base_config().spec()
    converged = 0
    for seed in range(5):
        run = TrainRunConfig(algorithm="reinforce", lr=0.5, eval_period=48, max_env_steps=20_000, seed=seed)
        converged += onpolicy_reinforce_baseline(run, spec).converged
    assert converged >= 3


# -- sweeps ------------------------------------------------------------------------------------


def test_single_variant_single_seed():
    results = run_sweep(SweepSpec(base_config(), seeds=[0]))
    assert len(results) == 1 and results[0].variant == "base"


def test_sweep_requires_seeds():
    with pytest.raises(ConfigError):
        SweepSpec(base_config(), seeds=[])


def test_sweep_is_reproducible(tmp_path):
    spec_a = SweepSpec(base_config(target=99.0), seeds=[0, 1], out_dir=tmp_path / "a")
    spec_b = SweepSpec(base_config(target=99.0), seeds=[0, 1], out_dir=tmp_path / "b", workers=2)
    run_sweep(spec_a)
    run_sweep(spec_b)
    for rel in ("aggregate.csv", "base/seed0/metrics.csv", "base/seed1/metrics.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_two_algorithms_five_seeds_and_independent_aggregate(tmp_path):
    spec = SweepSpec(base_config(target=99.0), seeds=range(5), axes={"algorithm": ["rpg", "lpg"]},
                     out_dir=tmp_path)
    results = run_sweep(spec)
    assert len(results) == 10 and all(r.log.error is None for r in results)
    with open(tmp_path / "aggregate.csv", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    z = statistics.NormalDist().inv_cdf(0.975)
    for variant in ("algorithm=rpg", "algorithm=lpg"):
        logs = [r.log for r in results if r.variant == variant]
        mine = [row for row in rows if row["variant"] == variant]
        assert len(mine) == len(logs[0].records)
        for t, row in enumerate(mine):
            vals = [log.records[t].eval_return_mean for log in logs]
            assert abs(float(row["mean"]) - statistics.fmean(vals)) < 1e-12
            assert abs(float(row["half_width"]) - z * statistics.stdev(vals) / math.sqrt(5)) < 1e-12


def test_failed_runs_are_recorded_and_sweep_continues():
    spec = SweepSpec(base_config(), seeds=[0], axes={"explore_eps": [0.5, 2.0]})
    results = run_sweep(spec)
    assert results[0].log.error is None
    assert results[1].log.error is not None and "explore_eps" in results[1].log.error


# -- aggregation -------------------------------------------------------------------------------


def test_identical_logs_zero_half_width():
    points = aggregate([log_of([1, 2, 3]), log_of([1, 2, 3])])
    assert all(p.half_width == 0.0 for p in points)


def test_two_logs_zero_and_two():
    point = aggregate([log_of([0.0]), log_of([2.0])])[0]
    # s = sqrt(2), n = 2: half-width z * s / sqrt(n) = z
    assert point.mean == 1.0
    assert abs(point.half_width - statistics.NormalDist().inv_cdf(0.975)) < 1e-12
    assert abs(point.half_width - 1.96) < 1e-3


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(0)
    logs = [log_of(rng.normal(size=6)) for _ in range(5)]
    a = aggregate(logs)
    b = aggregate(logs[::-1])
    c = aggregate([logs[2], logs[0], logs[4], logs[1], logs[3]])
    for x, y, z in zip(a, b, c):
        assert abs(x.mean - y.mean) < 1e-15 and abs(x.mean - z.mean) < 1e-15
        assert abs(x.half_width - y.half_width) < 1e-15 and abs(x.half_width - z.half_width) < 1e-15


def test_mismatched_grids_interpolated_and_flagged():
    short = log_of([0.0, 1.0], steps=[10, 30])
    long = log_of([0.0, 1.0, 2.0, 3.0], steps=[10, 20, 30, 40])
    points = aggregate([short, long])
    assert [p.step for p in points] == [10, 30]
    assert all(p.interpolated for p in points)
    assert points[1].mean == 1.5


def test_aggregate_needs_two_logs():
    with pytest.raises(ValueError):
        aggregate([log_of([1.0])])


def test_aggregate_csv_header():
    text = aggregate_csv_text({"v": aggregate([log_of([1.0]), log_of([2.0])])})
    assert text.splitlines()[0] == "variant,step,mean,half_width,n,interpolated"


# -- gradient checks ------------------------------------------------------------------------------


def test_run_gradcheck_small_and_csv():
    trials = run_gradcheck(losses=("hinge", "lpg"), kinds=("tabular",), trials=3)
    assert len(trials) == 6 and all(t.passed for t in trials)
    lines = gradcheck_csv_text(trials).splitlines()
    assert lines[0].startswith("loss,model,trial,coordinate")
    assert len(lines) == 1 + sum(t.report.analytic.size for t in trials)
