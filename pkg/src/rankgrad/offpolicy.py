"""Off-policy learning through near-optimal replay.

The loop separates exploration from learning.  An explorer (uniform random,
epsilon-greedy over the learner, or a stochastic listwise agent) fills a
regular replay buffer.  Finished episodes whose trajectory reward clears the
threshold ``c`` are copied into a near-optimal buffer, and the learner is fit
to that buffer by supervised learning (pairwise hinge or cross-entropy).
Greedy evaluation runs periodically and training stops once the target
return is reached.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .envs import Env, MdpSpec, Trajectory, replay_actions
from .gradients import GradEstimate, cross_entropy_loss_and_grad, hinge_loss_and_grad
from .metrics import EvalRecord, RunLog
from .model import SGD, LambdaModel, make_model, save_checkpoint
from .policy import greedy_action, sample_index, softmax


# ---------------------------------------------------------------------------
# Trajectory reward shaping
# ---------------------------------------------------------------------------


@dataclass
class ShapingConfig:
    """``w(tau) = 1`` iff ``r(tau) >= c``.

    In ``adaptive`` mode each initial state keeps its own threshold, raised to
    the best trajectory reward seen from it (starting at ``floor``).
    """

    threshold: float
    mode: str = "fixed"
    floor: float = 0.0
    per_state: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown shaping mode {self.mode!r}")

    @classmethod
    def from_epsilon(cls, r_max: float, epsilon: float = 0.0, **kw) -> "ShapingConfig":
        if epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        return cls(r_max - epsilon, **kw)

    def threshold_for(self, start: int) -> float:
        if self.mode == "fixed":
            return self.threshold
        return self.per_state.get(start, self.floor)


def shape(traj: Trajectory, config: ShapingConfig) -> int:
    r = traj.trajectory_reward
    if config.mode == "adaptive":
        s0 = traj.states[0]
        config.per_state[s0] = max(config.per_state.get(s0, config.floor), r)
    return int(r >= config.threshold_for(traj.states[0]))


# ---------------------------------------------------------------------------
# Replay buffers
# ---------------------------------------------------------------------------


class RegularBuffer:
    """FIFO ring of transitions (s, a, r, s')."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros(capacity, dtype=np.int64)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros(capacity, dtype=np.int64)
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s: int, a: int, r: float, s2: int) -> None:
        i = self.pos
        self.s[i], self.a[i], self.r[i], self.s2[i] = s, a, r, s2
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def tail(self, length: int) -> Trajectory:
        """The last ``length`` transitions as a trajectory (oldest first)."""
        if length > self.size:
            raise ValueError("regular buffer holds fewer transitions than one episode")
        idx = (self.pos - length + np.arange(length)) % self.capacity
        steps = [(int(self.s[i]), int(self.a[i]), float(self.r[i])) for i in idx]
        final = int(self.s2[idx[-1]]) if length else None
        return Trajectory.from_steps(steps, final_state=final)


class NearOptimalBuffer:
    """FIFO ring of (state, action) pairs, each tagged with its source trajectory."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.s = np.zeros(capacity, dtype=np.int64)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.src = np.zeros(capacity, dtype=np.int64)
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def extend(self, states, actions, source: int) -> None:
        for s, a in zip(states, actions):
            i = self.pos
            self.s[i], self.a[i], self.src[i] = s, a, source
            self.pos = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, self.size, size=batch_size)
        return self.s[idx], self.a[idx]

    def all(self) -> tuple[np.ndarray, np.ndarray]:
        return self.s[:self.size].copy(), self.a[:self.size].copy()


@dataclass
class SourceRecord:
    key: bytes
    reward: float
    threshold: float


class ReplayBuffers:
    def __init__(self, regular_capacity: int = 100_000, near_optimal_capacity: int = 100_000,
                 unique_trajectories: bool = False):
        self.regular = RegularBuffer(regular_capacity)
        self.near_optimal = NearOptimalBuffer(near_optimal_capacity)
        self.unique_trajectories = unique_trajectories
        self.keys: dict[bytes, int] = {}
        self.sources: list[SourceRecord] = []
        self.episodes = 0
        self.env_steps = 0
        self.inserts = 0

    @property
    def distinct(self) -> int:
        return len(self.keys)


def insert_if_near_optimal(buffers: ReplayBuffers, traj: Trajectory, config: ShapingConfig) -> bool:
    if len(traj) == 0 or not shape(traj, config):
        return False
    key = traj.key
    seen = key in buffers.keys
    if seen and buffers.unique_trajectories:
        return False
    if not seen:
        buffers.keys[key] = len(buffers.keys)
    source = len(buffers.sources)
    buffers.sources.append(SourceRecord(key, traj.trajectory_reward, config.threshold_for(traj.states[0])))
    buffers.near_optimal.extend(traj.states, traj.actions, source)
    buffers.inserts += 1
    return True


def audit_near_optimal(buffers: ReplayBuffers, spec: MdpSpec, rng: np.random.Generator,
                       samples: int = 100) -> list[tuple[float, float]]:
    """Replay the source trajectories of random buffer entries.

    Returns (replayed reward, acceptance threshold) pairs; every reward should
    clear its threshold.  Only defined for deterministic dynamics.
    """
    out = []
    if len(buffers.near_optimal) == 0:
        return out
    for i in rng.integers(0, len(buffers.near_optimal), size=samples):
        rec = buffers.sources[int(buffers.near_optimal.src[i])]
        pairs = np.frombuffer(rec.key, dtype="<u4").reshape(-1, 2)
        traj = replay_actions(spec, int(pairs[0, 0]), [int(a) for a in pairs[:, 1]])
        if traj.key != rec.key:
            raise RuntimeError("replayed trajectory does not match its recorded key")
        out.append((traj.trajectory_reward, rec.threshold))
    return out


# ---------------------------------------------------------------------------
# Explorers
# ---------------------------------------------------------------------------


class RandomExplorer:
    def __init__(self, spec: MdpSpec):
        self.mask = spec.action_mask
        self.m = spec.action_count
        self.full = bool(self.mask.all())

    def act(self, state: int, rng: np.random.Generator) -> int:
        if self.full:
            return int(rng.integers(self.m))
        legal = np.flatnonzero(self.mask[state])
        return int(legal[rng.integers(legal.size)])

    def update(self, buffers, rng) -> None:
        pass


class EpsGreedyExplorer(RandomExplorer):
    """With probability ``eps`` act uniformly, else greedily on the learner's lambda."""

    def __init__(self, spec: MdpSpec, model: LambdaModel, eps: float):
        super().__init__(spec)
        if not 0.0 <= eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        self.model = model
        self.eps = eps

    def act(self, state: int, rng: np.random.Generator) -> int:
        if self.eps > 0 and rng.random() < self.eps:
            return super().act(state, rng)
        return greedy_action(self.model.forward(state))


class EPGExplorer:
    """Stochastic listwise agent with its own model, fit to the near-optimal buffer."""

    def __init__(self, model: LambdaModel, learning_rate: float, batch_size: int, temperature: float = 1.0):
        self.model = model
        self.opt = SGD(learning_rate)
        self.batch_size = batch_size
        self.temperature = temperature

    def act(self, state: int, rng: np.random.Generator) -> int:
        return sample_index(softmax(self.model.forward(state), self.temperature), rng)

    def update(self, buffers: ReplayBuffers, rng: np.random.Generator) -> None:
        if len(buffers.near_optimal) == 0:
            return
        batch = buffers.near_optimal.sample(self.batch_size, rng)
        est = cross_entropy_loss_and_grad(self.model, batch, self.temperature)
        self.opt.step(self.model, est.grad)


def explore_step(explorer, env: Env, buffers: ReplayBuffers, rng: np.random.Generator):
    """One environment transition chosen by ``explorer``, stored in the regular buffer."""
    s = env.state
    a = explorer.act(s, rng)
    s2, r, done = env.step(a)
    buffers.regular.add(s, a, r, s2)
    buffers.env_steps += 1
    return s, a, r, s2, done


# ---------------------------------------------------------------------------
# Supervision and evaluation
# ---------------------------------------------------------------------------


def supervision_update(model: LambdaModel, buffers: ReplayBuffers, loss: str, batch_size: int,
                       optimizer: SGD, rng: np.random.Generator, margin: float = 1.0,
                       temperature: float = 1.0) -> GradEstimate | None:
    """One SGD step on a uniform batch from the near-optimal buffer.

    Returns ``None`` (skip) when the buffer is empty.
    """
    if len(buffers.near_optimal) == 0:
        return None
    batch = buffers.near_optimal.sample(batch_size, rng)
    if loss == "hinge":
        est = hinge_loss_and_grad(model, batch, margin)
    elif loss == "xent":
        est = cross_entropy_loss_and_grad(model, batch, temperature)
    else:
        raise ValueError(f"unknown supervised loss {loss!r}")
    optimizer.step(model, est.grad)
    return est


@dataclass
class EvalResult:
    returns: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.returns.mean())

    @property
    def min(self) -> float:
        return float(self.returns.min())


def evaluate(model: LambdaModel, spec: MdpSpec, episodes: int, mode: str = "greedy",
             seed: int | np.random.Generator | None = 0, temperature: float = 1.0) -> EvalResult:
    """Roll out ``episodes`` episodes and return their exact trajectory rewards."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    env = Env(spec, rng)
    cache: dict[int, np.ndarray] = {}

    def lam(s):
        if s not in cache:
            cache[s] = model.forward(s)
        return cache[s]

    if mode == "greedy":
        choose = lambda s: greedy_action(lam(s))  # noqa: E731
    elif mode == "sample":
        choose = lambda s: sample_index(softmax(lam(s), temperature), rng)  # noqa: E731
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    out = np.empty(episodes)
    for e in range(episodes):
        s = env.reset()
        done = False
        total = 0.0
        while not done:
            s, r, done = env.step(choose(s))
            total += r
        out[e] = total
    return EvalResult(out)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainRunConfig:
    """Everything one training run needs besides the environment.

    ``threshold`` of ``None`` means ``c = R_max - epsilon``; ``target`` of
    ``None`` means the stopping target equals ``c``.
    """

    algorithm: str = "rpg"
    policy: str = "pairwise"
    loss: str | None = None
    explorer: str = "random"
    explore_eps: float = 0.1
    threshold: float | None = None
    epsilon: float = 0.0
    shaping: str = "fixed"
    target: float | None = None
    max_episodes: int = 100_000
    max_env_steps: int = 50_000
    batch_size: int = 32
    update_period: int = 4
    eval_period: int = 500
    eval_episodes: int = 20
    seed: int = 0
    lr: float | None = None
    momentum: float = 0.0
    model: str = "tabular"
    hidden: tuple[int, ...] = (16,)
    c_q: float | None = None
    dummy_action: bool = False
    temperature: float = 1.0
    margin: float = 1.0
    regular_capacity: int = 100_000
    nearopt_capacity: int = 100_000
    unique_trajectories: bool = False
    checkpoint_dir: str | None = None

    def __post_init__(self):
        for name in ("max_env_steps", "batch_size", "update_period", "eval_period",
                     "eval_episodes", "regular_capacity", "nearopt_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_episodes < 0:
            raise ValueError("max_episodes must be >= 0")
        if self.algorithm not in ("rpg", "lpg", "epg", "reinforce"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.explorer not in ("random", "eps-greedy", "epg"):
            raise ValueError(f"unknown explorer {self.explorer!r}")
        if self.policy not in ("pairwise", "listwise"):
            raise ValueError(f"unknown policy kind {self.policy!r}")
        if self.resolved_loss not in ("hinge", "xent"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.explore_eps <= 1.0:
            raise ValueError("explore_eps must lie in [0, 1]")
        if self.lr is not None and self.lr < 0:
            raise ValueError("learning rate must be >= 0")

    @property
    def resolved_loss(self) -> str:
        if self.loss is not None:
            return self.loss
        return "hinge" if self.algorithm == "rpg" else "xent"

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-2 if self.model == "tabular" else 1e-3

    def snapshot(self) -> dict[str, str]:
        """Text form of every field; feeding it to :meth:`from_mapping` restores the config."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                out[f.name] = "none"
            elif isinstance(v, bool):
                out[f.name] = "on" if v else "off"
            elif isinstance(v, tuple):
                out[f.name] = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                out[f.name] = repr(v)
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainRunConfig":
        kwargs = {}
        types = {f.name: f for f in fields(cls)}
        defaults = asdict(cls())
        for key, text in values.items():
            if key not in types:
                raise KeyError(key)
            kwargs[key] = _coerce(text, defaults[key], key)
        return cls(**kwargs)


_FLOAT_OR_NONE = {"threshold", "target", "lr", "c_q"}
_STR_OR_NONE = {"loss", "checkpoint_dir"}


def _coerce(text: str, default, key: str):
    text = str(text).strip()
    if key in _FLOAT_OR_NONE:
        return None if text.lower() == "none" else float(text)
    if key in _STR_OR_NONE:
        return None if text.lower() == "none" else text
    if isinstance(default, bool):
        low = text.lower()
        if low in ("on", "true", "1", "yes"):
            return True
        if low in ("off", "false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected on/off, got {text!r}")
    if isinstance(default, int):
        value = float(text)
        if value != int(value):
            raise ValueError(f"{key}: expected an integer, got {text!r}")
        return int(value)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(",") if v.strip())
    return text


@dataclass
class RunStreams:
    """Independent generators so changing one component leaves the others untouched."""

    env: np.random.Generator
    explore: np.random.Generator
    batch: np.random.Generator
    eval: np.random.Generator
    init: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunStreams":
        children = np.random.SeedSequence(seed).spawn(5)
        return cls(*(np.random.default_rng(c) for c in children))


def resolve_threshold(run: TrainRunConfig, spec: MdpSpec) -> float:
    if run.threshold is not None:
        return run.threshold
    return spec.max_trajectory_reward() - run.epsilon


def build_model(run: TrainRunConfig, spec: MdpSpec, rng) -> LambdaModel:
    return make_model(run.model, spec.state_count, spec.action_count, hidden=run.hidden,
                      c_q=run.c_q, seed=rng)


def _make_explorer(run: TrainRunConfig, spec: MdpSpec, model: LambdaModel, rng):
    if run.explorer == "random":
        return RandomExplorer(spec)
    if run.explorer == "eps-greedy":
        return EpsGreedyExplorer(spec, model, run.explore_eps)
    return EPGExplorer(build_model(run, spec, rng), run.learning_rate, run.batch_size, run.temperature)


@dataclass
class Trainer:
    """State of one training run; :func:`train` drives it to completion."""

    run: TrainRunConfig
    spec: MdpSpec
    streams: RunStreams = field(init=False)
    model: LambdaModel = field(init=False)

    def __post_init__(self):
        if self.run.regular_capacity < self.spec.horizon:
            raise ValueError("regular buffer capacity must hold at least one full episode")
        self.streams = RunStreams.from_seed(self.run.seed)
        self.model = build_model(self.run, self.spec, self.streams.init)
        self.optimizer = SGD(self.run.learning_rate, self.run.momentum)
        self.explorer = _make_explorer(self.run, self.spec, self.model, self.streams.init)
        self.env = Env(self.spec, self.streams.env)
        self.buffers = ReplayBuffers(self.run.regular_capacity, self.run.nearopt_capacity,
                                     self.run.unique_trajectories)
        c = resolve_threshold(self.run, self.spec)
        self.shaping = ShapingConfig(c, mode=self.run.shaping)
        self.target = c if self.run.target is None else self.run.target
        self.last_loss = math.nan
        self.last_grad_norm = math.nan


def train(run: TrainRunConfig, spec: MdpSpec, log: RunLog | None = None,
          trainer: Trainer | None = None) -> RunLog:
    """Explore, filter by trajectory reward, imitate; evaluate greedily and stop on target."""
    start = time.perf_counter()
    tr = trainer or Trainer(run, spec)
    log = log or RunLog(config=run.snapshot(), seed=run.seed)
    buffers, env, rng = tr.buffers, tr.env, tr.streams
    next_eval = run.eval_period
    steps = 0
    episode = 0
    while episode < run.max_episodes and steps < run.max_env_steps:
        env.reset()
        done = False
        length = 0
        while not done:
            _, _, _, _, done = explore_step(tr.explorer, env, buffers, rng.explore)
            steps += 1
            length += 1
            if steps % run.update_period == 0:
                est = supervision_update(tr.model, buffers, run.resolved_loss, run.batch_size,
                                         tr.optimizer, rng.batch, run.margin, run.temperature)
                if est is not None:
                    tr.last_loss = est.loss
                    tr.last_grad_norm = float(np.abs(est.grad).max())
                tr.explorer.update(buffers, rng.batch)
        episode += 1
        buffers.episodes = episode
        # Rebuild the finished episode from the regular buffer, then filter it.
        traj = buffers.regular.tail(length)
        if insert_if_near_optimal(buffers, traj, tr.shaping) and log.first_insert_episode is None:
            log.first_insert_episode = episode
        log.distinct_history.append(buffers.distinct)
        if steps >= next_eval:
            next_eval = (steps // run.eval_period + 1) * run.eval_period
            if _evaluate_and_record(tr, log, steps, episode):
                break
    if log.converged_step is None and steps > 0 and (not log.records or log.records[-1].step != steps):
        _evaluate_and_record(tr, log, steps, episode)
    log.episodes, log.env_steps = episode, steps
    log.wall_clock = time.perf_counter() - start
    return log


def _evaluate_and_record(tr: Trainer, log: RunLog, steps: int, episode: int) -> bool:
    res = evaluate(tr.model, tr.spec, tr.run.eval_episodes, seed=tr.streams.eval)
    b = tr.buffers
    log.add(EvalRecord(steps, episode, b.env_steps, res.mean, res.min, len(b.regular),
                       len(b.near_optimal), b.distinct, tr.last_loss, tr.last_grad_norm))
    if tr.run.checkpoint_dir is not None:
        log.checkpoint = str(save_checkpoint(tr.model, Path(tr.run.checkpoint_dir) / "checkpoint.rpgc"))
    if res.min >= tr.target:
        log.converged_step = steps
        return True
    return False


def train_with_state(run: TrainRunConfig, spec: MdpSpec) -> tuple[RunLog, Trainer]:
    """Like :func:`train` but also hands back the trainer (model, buffers, streams)."""
    tr = Trainer(run, spec)
    return train(run, spec, trainer=tr), tr

