"""Experiment orchestration: config files, seed sweeps, aggregation, baselines.

A config file is flat ``key = value`` text; ``#`` starts a comment.  The
``env`` key names a suite environment (see :func:`rankgrad.envs.parse_env`),
``capacities`` sets both buffer sizes as ``regular,near_optimal``, and every
other key maps onto :class:`rankgrad.offpolicy.TrainRunConfig`.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .envs import Env, MdpSpec, SpecError, Trajectory, parse_env
from . import gradients as G
from .gradients import lpg_trajectory_grad
from .metrics import EvalRecord, RunLog
from .model import SGD, FDReport, make_model, model_gradcheck, save_checkpoint
from .offpolicy import RunStreams, TrainRunConfig, build_model, evaluate, resolve_threshold, train
from .policy import sample_index, softmax

DEFAULT_OUT = "runs"
# on-policy baseline and the listwise estimator share one implementation
REINFORCE_GRADIENT = lpg_trajectory_grad


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


def default_out_dir() -> Path:
    return Path(os.environ.get("RANKGRAD_OUT", DEFAULT_OUT))


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    env: str
    run: TrainRunConfig

    def snapshot(self) -> dict[str, str]:
        return {"env": self.env, **self.run.snapshot()}

    def text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.snapshot().items())

    def spec(self) -> MdpSpec:
        try:
            return parse_env(self.env)
        except SpecError as exc:
            raise ConfigError(str(exc)) from None

    def with_values(self, **values) -> "ExperimentConfig":
        snap = self.snapshot()
        snap.update({k: _text(v) for k, v in values.items()})
        return config_from_mapping(snap)


def _text(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key = key.strip().replace("-", "_")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def config_from_mapping(values: dict[str, str]) -> ExperimentConfig:
    values = dict(values)
    env = values.pop("env", None)
    if env is None:
        raise ConfigError("config needs an env key")
    caps = values.pop("capacities", None)
    if caps is not None:
        parts = [p.strip() for p in caps.split(",")]
        if len(parts) != 2:
            raise ConfigError("capacities takes two values: regular,near_optimal")
        values["regular_capacity"], values["nearopt_capacity"] = parts
    try:
        run = TrainRunConfig.from_mapping(values)
    except KeyError as exc:
        raise ConfigError(f"unknown config key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig(env, run)
    cfg.spec()  # validate the environment string eagerly
    return cfg


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    values = parse_config_text(text)
    values.update({k: _text(v) for k, v in overrides.items() if v is not None})
    return config_from_mapping(values)


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------


def onpolicy_reinforce_baseline(run: TrainRunConfig, spec: MdpSpec) -> RunLog:
    """Plain REINFORCE with a softmax policy: no buffers, one update per episode.

    Uses the same seeding, budget and evaluation schedule as the off-policy
    trainer so curves line up.
    """
    start = time.perf_counter()
    streams = RunStreams.from_seed(run.seed)
    model = build_model(run, spec, streams.init)
    opt = SGD(run.learning_rate, run.momentum)
    env = Env(spec, streams.env)
    log = RunLog(config=run.snapshot(), seed=run.seed)
    target = resolve_threshold(run, spec) if run.target is None else run.target
    steps = episode = 0
    next_eval = run.eval_period
    last_loss = last_norm = math.nan
    while episode < run.max_episodes and steps < run.max_env_steps:
        s = env.reset()
        done = False
        states, actions, rewards = [], [], []
        while not done:
            a = sample_index(softmax(model.forward(s), run.temperature), streams.explore)
            s2, r, done = env.step(a)
            states.append(s)
            actions.append(a)
            rewards.append(r)
            s = s2
            steps += 1
        episode += 1
        traj = Trajectory(tuple(states), tuple(actions), tuple(rewards), s)
        est = REINFORCE_GRADIENT(model, traj, run.temperature)
        opt.step(model, -est.grad)  # ascent on the expected return
        last_loss, last_norm = est.loss, float(np.abs(est.grad).max())
        if steps >= next_eval:
            next_eval = (steps // run.eval_period + 1) * run.eval_period
            res = evaluate(model, spec, run.eval_episodes, seed=streams.eval)
            log.add(EvalRecord(steps, episode, steps, res.mean, res.min, loss=last_loss, grad_inf_norm=last_norm))
            if run.checkpoint_dir is not None:
                log.checkpoint = str(save_checkpoint(model, Path(run.checkpoint_dir) / "checkpoint.rpgc"))
            if res.min >= target:
                log.converged_step = steps
                break
    if log.converged_step is None and steps > 0 and (not log.records or log.records[-1].step != steps):
        res = evaluate(model, spec, run.eval_episodes, seed=streams.eval)
        log.add(EvalRecord(steps, episode, steps, res.mean, res.min, loss=last_loss, grad_inf_norm=last_norm))
    log.episodes, log.env_steps = episode, steps
    log.wall_clock = time.perf_counter() - start
    return log


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunLog:
    """Train once; with ``out_dir`` also write config, metrics CSV and checkpoint."""
    spec = cfg.spec()
    run = cfg.run
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        run = replace(run, checkpoint_dir=str(out_dir))
    if run.algorithm == "reinforce":
        log = onpolicy_reinforce_baseline(run, spec)
    else:
        log = train(run, spec)
    log.config = cfg.snapshot()
    if out_dir is not None:
        (out_dir / "config.txt").write_text(cfg.text(), encoding="utf-8")
        log.write_csv(out_dir / "metrics.csv")
    return log


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepSpec:
    """Base config crossed with seeds and variant axes, e.g. ``{"algorithm": ["rpg", "reinforce"]}``."""

    base: ExperimentConfig
    seeds: Sequence[int]
    axes: dict[str, Sequence] = field(default_factory=dict)
    out_dir: str | Path | None = None
    workers: int = 1

    def __post_init__(self):
        if not len(self.seeds):
            raise ConfigError("a sweep needs at least one seed")

    def variants(self) -> list[tuple[str, dict[str, str]]]:
        keys = list(self.axes)
        out = []
        for combo in itertools.product(*(self.axes[k] for k in keys)):
            values = {k: _text(v) for k, v in zip(keys, combo)}
            name = ",".join(f"{k}={v}" for k, v in values.items()) or "base"
            out.append((name, values))
        return out


@dataclass
class SweepResult:
    variant: str
    seed: int
    log: RunLog


def _run_one(args) -> SweepResult:
    variant, values, seed, base_snapshot, out_dir = args
    snap = dict(base_snapshot)
    snap.update(values)
    snap["seed"] = str(seed)
    try:
        cfg = config_from_mapping(snap)
        path = None if out_dir is None else Path(out_dir) / _safe(variant) / f"seed{seed}"
        log = run_experiment(cfg, path)
    except Exception as exc:  # a failed run is recorded, the sweep goes on
        log = RunLog(config=snap, seed=seed, error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")
    return SweepResult(variant, seed, log)


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in name)


def run_sweep(spec: SweepSpec) -> list[SweepResult]:
    jobs = [(name, values, int(seed), spec.base.snapshot(), spec.out_dir)
            for name, values in spec.variants() for seed in spec.seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    if spec.out_dir is not None:
        table = aggregate_by_variant(results)
        write_aggregate_csv(table, Path(spec.out_dir) / "aggregate.csv")
    return results


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass
class CurvePoint:
    step: int
    mean: float
    half_width: float
    n: int
    interpolated: bool


def _steps_and_values(log: RunLog) -> tuple[np.ndarray, np.ndarray]:
    steps = np.array([r.step for r in log.records], dtype=float)
    values = np.array([r.eval_return_mean for r in log.records])
    return steps, values


def aggregate(logs: Sequence[RunLog], confidence: float = 0.95) -> list[CurvePoint]:
    """Mean curve with a normal-approximation confidence half-width ``z * s / sqrt(n)``.

    When evaluation grids differ, every log is interpolated onto the grid of
    the log with the fewest evaluations (a log that ended early holds its last
    value) and the points are flagged.
    """
    logs = [log for log in logs if log.records]
    if len(logs) < 2:
        raise ValueError("need at least two logs with records for a confidence interval")
    grids = [tuple(r.step for r in log.records) for log in logs]
    mismatch = len(set(grids)) > 1
    grid = min(grids, key=lambda g: (len(g), g))
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    columns = []
    for log in logs:
        steps, values = _steps_and_values(log)
        columns.append(np.interp(grid, steps, values) if mismatch else values)
    out = []
    for t, step in enumerate(grid):
        vals = [float(c[t]) for c in columns]
        n = len(vals)
        mean = math.fsum(vals) / n
        var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
        out.append(CurvePoint(int(step), mean, z * math.sqrt(var / n), n, mismatch))
    return out


def aggregate_by_variant(results: Sequence[SweepResult], confidence: float = 0.95) -> dict[str, list[CurvePoint]]:
    groups: dict[str, list[RunLog]] = {}
    for res in results:
        if res.log.error is None:
            groups.setdefault(res.variant, []).append(res.log)
    return {name: aggregate(logs, confidence) for name, logs in groups.items()
            if sum(1 for log in logs if log.records) >= 2}


def aggregate_csv_text(table: dict[str, list[CurvePoint]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "step", "mean", "half_width", "n", "interpolated"])
    for name in sorted(table):
        for p in table[name]:
            writer.writerow([name, p.step, repr(p.mean), repr(p.half_width), p.n, int(p.interpolated)])
    return buf.getvalue()


def write_aggregate_csv(table: dict[str, list[CurvePoint]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(aggregate_csv_text(table), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Gradient checks over random draws
# ---------------------------------------------------------------------------

GRADCHECK_LOSSES = ("rpg", "rpg-exact", "lpg", "hinge", "xent")
MODEL_KINDS = ("tabular", "linear", "mlp")


@dataclass
class GradcheckTrial:
    loss: str
    kind: str
    trial: int
    report: FDReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _random_model(kind: str, rng: np.random.Generator, S: int, m: int, d: int):
    features = rng.normal(size=(S, d)) if kind != "tabular" else None
    model = make_model(kind, S, m, hidden=(5,), features=features, seed=rng)
    model.theta = rng.normal(scale=0.7, size=model.n_params)
    return model


def gradcheck_trial(loss: str, kind: str, rng: np.random.Generator, tolerance: float = 1e-4,
                    S: int = 6, m: int = 3, d: int = 4):
    """One random (theta, data) draw checked against central differences."""
    model = _random_model(kind, rng, S, m, d)
    pattern = None
    if loss in ("rpg", "rpg-exact", "lpg"):
        T = int(rng.integers(1, 6))
        traj = Trajectory(tuple(int(x) for x in rng.integers(0, S, T)),
                          tuple(int(x) for x in rng.integers(0, m, T)),
                          tuple(float(x) for x in rng.uniform(0.1, 2.0, T)))
        fn = {"rpg": G.rpg_trajectory_grad, "rpg-exact": G.rpg_exact_grad_unapproximated,
              "lpg": G.lpg_trajectory_grad}[loss]

        def objective(mod):
            est = fn(mod, traj)
            return est.loss, est.grad
    elif loss in ("hinge", "xent"):
        B = int(rng.integers(1, 9))
        batch = (rng.integers(0, S, B), rng.integers(0, m, B))
        fn = G.hinge_loss_and_grad if loss == "hinge" else G.cross_entropy_loss_and_grad

        def objective(mod):
            est = fn(mod, batch)
            return est.loss, est.grad

        if loss == "hinge":
            def pattern(mod):
                return G.hinge_pattern(mod.forward_batch(batch[0]), batch[1])
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return model_gradcheck(model, objective, tolerance, pattern=pattern)


def run_gradcheck(losses: Sequence[str] = GRADCHECK_LOSSES, kinds: Sequence[str] = MODEL_KINDS,
                  trials: int = 100, tolerance: float = 1e-4, seed: int = 0) -> list[GradcheckTrial]:
    out = []
    for li, loss in enumerate(losses):
        for ki, kind in enumerate(kinds):
            rng = np.random.default_rng([seed, li, ki])
            for t in range(trials):
                out.append(GradcheckTrial(loss, kind, t, gradcheck_trial(loss, kind, rng, tolerance)))
    return out


def gradcheck_csv_text(trials: Sequence[GradcheckTrial]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["loss", "model", "trial", "coordinate", "analytic", "numeric", "rel_error", "kink"])
    for tr in trials:
        for i, a, n, e, k in tr.report.rows():
            writer.writerow([tr.loss, tr.kind, tr.trial, i, repr(a), repr(n), repr(e), int(k)])
    return buf.getvalue()
