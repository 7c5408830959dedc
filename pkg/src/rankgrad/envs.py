"""Finite-horizon discrete MDPs and the small environment suite.

Every environment is described by an immutable :class:`MdpSpec` holding dense
tabular dynamics.  Episodes run through :class:`Env`, which owns its own seeded
generator.  Small specs can be enumerated exhaustively, which is what the
oracles in the test-suite lean on.

Suite names (used by config files)::

    tree:T=<int>,roots=<int>,opt=<csv-leaf-ids>,rewards=<csv>
    chain:n=<int>,T=<int>,p=<float>
    grid:w=<int>,h=<int>,T=<int>
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# Intermediate step reward for tree MDPs; rewards must stay strictly positive.
TREE_STEP_REWARD = 1e-9
ENUMERATION_CAP = 1_000_000


class SpecError(ValueError):
    """Raised when an MDP description violates its invariants."""


class EpisodeError(RuntimeError):
    """Raised on illegal use of a running episode."""


@dataclass(frozen=True, eq=False)
class MdpSpec:
    """Tabular finite-horizon MDP.

    ``transitions[s, a]`` is the next-state distribution, ``rewards[s, a]`` the
    (strictly positive) immediate reward, ``initial`` the initial state
    distribution.  ``action_mask[s, a]`` marks which actions exist in ``s``.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    initial: np.ndarray
    horizon: int
    terminal: np.ndarray | None = None
    action_mask: np.ndarray | None = None
    name: str = "mdp"

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=float)
        R = np.asarray(self.rewards, dtype=float)
        p0 = np.asarray(self.initial, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise SpecError(f"transitions must have shape (S, m, S), got {P.shape}")
        S, m, _ = P.shape
        if m < 2:
            raise SpecError("need at least two actions")
        if R.shape != (S, m):
            raise SpecError(f"rewards must have shape {(S, m)}, got {R.shape}")
        if p0.shape != (S,):
            raise SpecError(f"initial distribution must have shape {(S,)}")
        if int(self.horizon) < 1:
            raise SpecError("horizon must be >= 1")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-12):
            raise SpecError("every dynamics row must be a distribution")
        if not np.all(np.isfinite(R)) or np.any(R <= 0):
            raise SpecError("rewards must satisfy 0 < r(s, a) < inf")
        if np.any(p0 < 0) or p0.sum() <= 0:
            raise SpecError("initial state set is empty")
        if abs(p0.sum() - 1.0) > 1e-12:
            raise SpecError("initial distribution must sum to 1")
        term = np.zeros(S, dtype=bool) if self.terminal is None else np.asarray(self.terminal, dtype=bool)
        mask = np.ones((S, m), dtype=bool) if self.action_mask is None else np.asarray(self.action_mask, dtype=bool)
        if term.shape != (S,) or mask.shape != (S, m):
            raise SpecError("terminal/action_mask shapes do not match the state space")
        if not np.all(mask.any(axis=1)):
            raise SpecError("every state needs at least one legal action")
        for name, arr in (("transitions", P), ("rewards", R), ("initial", p0),
                          ("terminal", term), ("action_mask", mask)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def state_count(self) -> int:
        return self.transitions.shape[0]

    @property
    def action_count(self) -> int:
        return self.transitions.shape[1]

    @property
    def initial_states(self) -> np.ndarray:
        return np.flatnonzero(self.initial > 0)

    @property
    def deterministic(self) -> bool:
        return bool(np.all((self.transitions == 0) | (self.transitions == 1)))

    def max_trajectory_reward(self, cap: int = ENUMERATION_CAP) -> float:
        """R_max: the largest reward of any feasible trajectory.

        Enumerates when possible so the value is bit-identical to the rewards
        produced by rollouts; falls back to a max-plus recursion otherwise.
        """
        try:
            return max(traj.trajectory_reward for traj, _ in enumerate_trajectories(self, cap=cap))
        except EnumerationCapExceeded:
            return _max_reward_dp(self)


def _max_reward_dp(spec: MdpSpec) -> float:
    S, T = spec.state_count, spec.horizon
    value = np.zeros(S)
    reach = spec.transitions > 0
    for _ in range(T):
        nxt = np.where(spec.terminal, 0.0, value)
        cand = spec.rewards + np.where(reach, nxt[None, None, :], -np.inf).max(axis=2)
        cand[~spec.action_mask] = -np.inf
        value = cand.max(axis=1)
    return float(value[spec.initial_states].max())


@dataclass(frozen=True)
class Trajectory:
    """Ordered (state, action, reward) steps of one episode."""

    states: tuple[int, ...]
    actions: tuple[int, ...]
    rewards: tuple[float, ...]
    final_state: int | None = None

    def __post_init__(self):
        if not (len(self.states) == len(self.actions) == len(self.rewards)):
            raise ValueError("states, actions and rewards must have equal length")

    @classmethod
    def from_steps(cls, steps: Sequence[tuple[int, int, float]], final_state: int | None = None) -> "Trajectory":
        if not steps:
            return cls((), (), (), final_state)
        s, a, r = zip(*steps)
        return cls(tuple(int(x) for x in s), tuple(int(x) for x in a), tuple(float(x) for x in r), final_state)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def steps(self) -> list[tuple[int, int, float]]:
        return list(zip(self.states, self.actions, self.rewards))

    @property
    def trajectory_reward(self) -> float:
        # plain left-to-right sum: rollouts and enumeration must agree bit-for-bit
        total = 0.0
        for r in self.rewards:
            total += r
        return total

    @property
    def key(self) -> bytes:
        return trajectory_key(self.states, self.actions)


def trajectory_key(states: Sequence[int], actions: Sequence[int]) -> bytes:
    """(state, action) pairs packed as little-endian u32, in order."""
    flat = [v for pair in zip(states, actions) for v in pair]
    return struct.pack(f"<{len(flat)}I", *flat)


def decode_key(key: bytes) -> list[tuple[int, int]]:
    flat = struct.unpack(f"<{len(key) // 4}I", key)
    return list(zip(flat[0::2], flat[1::2]))


class Env:
    """One running episode over an :class:`MdpSpec`."""

    def __init__(self, spec: MdpSpec, seed: int | np.random.Generator | None = None):
        self.spec = spec
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        P = spec.transitions
        self._det = np.full(P.shape[:2], -1, dtype=np.int64)
        det_rows = (P == 1.0)
        has = det_rows.any(axis=2)
        self._det[has] = det_rows.argmax(axis=2)[has]
        self._cum = np.cumsum(P, axis=2)
        self._init_cum = np.cumsum(spec.initial)
        self._single_init = int(spec.initial.argmax()) if spec.initial.max() == 1.0 else -1
        self.state: int = -1
        self.t = 0
        self.done = True

    def reset(self) -> int:
        if self._single_init >= 0:
            self.state = self._single_init
        else:
            self.state = _draw(self._init_cum, self.rng)
        self.t = 0
        self.done = False
        return self.state

    def step(self, action: int) -> tuple[int, float, bool]:
        if self.done:
            raise EpisodeError("step() called on a finished episode; call reset()")
        s = self.state
        if not 0 <= action < self.spec.action_count or not self.spec.action_mask[s, action]:
            raise EpisodeError(f"action {action} is not legal in state {s}")
        nxt = self._det[s, action]
        if nxt < 0:
            nxt = _draw(self._cum[s, action], self.rng)
        reward = float(self.spec.rewards[s, action])
        self.t += 1
        self.state = int(nxt)
        self.done = bool(self.spec.terminal[self.state]) or self.t >= self.spec.horizon
        return self.state, reward, self.done


def _draw(cum: np.ndarray, rng: np.random.Generator) -> int:
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(idx, len(cum) - 1)


def reset(spec: MdpSpec, seed: int | None = None) -> Env:
    """Fresh environment positioned at an initial state."""
    env = Env(spec, seed)
    env.reset()
    return env


def rollout(env: Env, choose: Callable[[int], int]) -> Trajectory:
    """Run one full episode, picking actions with ``choose(state)``."""
    s = env.reset()
    steps = []
    done = False
    while not done:
        a = choose(s)
        s_next, r, done = env.step(a)
        steps.append((s, a, r))
        s = s_next
    return Trajectory.from_steps(steps, final_state=s)


def replay_actions(spec: MdpSpec, start: int, actions: Sequence[int]) -> Trajectory:
    """Replay an action sequence from ``start`` on a deterministic spec."""
    if not spec.deterministic:
        raise SpecError("replay is only defined for deterministic dynamics")
    s = start
    steps = []
    for t, a in enumerate(actions):
        nxt = int(spec.transitions[s, a].argmax())
        steps.append((s, a, float(spec.rewards[s, a])))
        s = nxt
        if spec.terminal[s] or t + 1 >= spec.horizon:
            break
    return Trajectory.from_steps(steps, final_state=s)


class EnumerationCapExceeded(RuntimeError):
    pass


def enumerate_trajectories(spec: MdpSpec, cap: int = ENUMERATION_CAP) -> list[tuple[Trajectory, float]]:
    """Every feasible trajectory with its dynamics probability p_d(tau).

    p_d excludes the policy: p_d = p(s_1) * prod p(s_{t+1} | s_t, a_t).
    Branches that differ only in the unrecorded final state are merged.
    """
    out: dict[bytes, list] = {}
    P, R = spec.transitions, spec.rewards

    def visit(s: int, t: int, prob: float, steps: list):
        for a in np.flatnonzero(spec.action_mask[s]):
            a = int(a)
            step = steps + [(s, a, float(R[s, a]))]
            for nxt in np.flatnonzero(P[s, a] > 0):
                nxt = int(nxt)
                p = prob * P[s, a, nxt]
                if spec.terminal[nxt] or t + 1 >= spec.horizon:
                    traj = Trajectory.from_steps(step, final_state=nxt)
                    entry = out.get(traj.key)
                    if entry is None:
                        if len(out) >= cap:
                            raise EnumerationCapExceeded(f"more than {cap} trajectories")
                        out[traj.key] = [traj, p]
                    else:
                        entry[1] += p
                else:
                    visit(nxt, t + 1, p, step)

    for s0 in spec.initial_states:
        visit(int(s0), 0, float(spec.initial[s0]), [])
    return [(traj, p) for traj, p in out.values()]


def trajectory_log_prob(traj: Trajectory, action_probs: Callable[[int], np.ndarray]) -> float:
    """Sum of log pi(a_t | s_t) along the trajectory (policy factor only)."""
    return float(sum(np.log(action_probs(s)[a]) for s, a in zip(traj.states, traj.actions)))


def policy_trajectory_probs(spec: MdpSpec, action_probs: Callable[[int], np.ndarray],
                            cap: int = ENUMERATION_CAP) -> list[tuple[Trajectory, float]]:
    """Enumerated trajectories with p_theta(tau) = p_d(tau) * prod pi(a_t|s_t)."""
    cache: dict[int, np.ndarray] = {}

    def probs(s: int) -> np.ndarray:
        if s not in cache:
            cache[s] = np.asarray(action_probs(s), dtype=float)
        return cache[s]

    result = []
    for traj, pd in enumerate_trajectories(spec, cap=cap):
        p = pd
        for s, a in zip(traj.states, traj.actions):
            p *= probs(s)[a]
        result.append((traj, p))
    return result


# ---------------------------------------------------------------------------
# Environment suite
# ---------------------------------------------------------------------------


@dataclass
class BinaryTreeParams:
    """Deterministic binary tree of depth ``depth`` with ``roots`` initial states.

    Leaves are indexed left to right across the forest, so leaf ``k`` belongs
    to root ``k // 2**depth``.  ``leaf_rewards`` overrides the per-leaf
    trajectory reward; otherwise optimal leaves get ``r_max`` and the rest
    ``base_reward``.
    """

    depth: int
    roots: int = 1
    optimal_leaves: Sequence[int] = (0,)
    leaf_rewards: Sequence[float] | None = None
    r_max: float = 1.0
    base_reward: float = 0.1
    step_reward: float = TREE_STEP_REWARD
    initial_probs: Sequence[float] | None = None

    @property
    def leaf_count(self) -> int:
        return self.roots * 2 ** self.depth


def tree_node_id(roots: int, level: int, index: int) -> int:
    """Breadth-first id of node ``index`` (0-based) on ``level`` of the forest."""
    return roots * (2 ** level - 1) + index


def make_binary_tree(params: BinaryTreeParams) -> MdpSpec:
    T, K = params.depth, params.roots
    if T < 1 or K < 1:
        raise SpecError("depth and roots must be positive")
    n_leaves = params.leaf_count
    if params.leaf_rewards is not None:
        leaf_r = np.asarray(params.leaf_rewards, dtype=float)
        if leaf_r.shape != (n_leaves,):
            raise SpecError(f"need {n_leaves} leaf rewards, got {leaf_r.shape}")
    else:
        opt = list(params.optimal_leaves)
        if not opt:
            raise SpecError("optimal leaf set must be nonempty")
        for leaf in opt:
            if not 0 <= leaf < n_leaves:
                raise SpecError(f"optimal leaf {leaf} out of range [0, {n_leaves})")
        leaf_r = np.full(n_leaves, float(params.base_reward))
        leaf_r[opt] = params.r_max
    # the leaf reward is carried by the last step, so r(tau) = leaf + (T-1) * step_reward
    S = K * (2 ** (T + 1) - 1)
    P = np.zeros((S, 2, S))
    R = np.full((S, 2), float(params.step_reward))
    terminal = np.zeros(S, dtype=bool)
    for level in range(T + 1):
        for k in range(K * 2 ** level):
            node = tree_node_id(K, level, k)
            if level == T:
                terminal[node] = True
                P[node, :, node] = 1.0
                continue
            for a in (0, 1):
                child = tree_node_id(K, level + 1, 2 * k + a)
                P[node, a, child] = 1.0
                if level == T - 1:
                    R[node, a] = leaf_r[2 * k + a]
    p0 = np.zeros(S)
    if params.initial_probs is None:
        p0[:K] = 1.0 / K
    else:
        p0[:K] = np.asarray(params.initial_probs, dtype=float)
    return MdpSpec(P, R, p0, T, terminal=terminal, name=f"tree:T={T},roots={K}")


def tree_leaf_of(traj: Trajectory) -> int:
    """Leaf index reached by a full-depth tree trajectory (root ids are 0..roots-1)."""
    index = traj.states[0]
    for a in traj.actions:
        index = 2 * index + a
    return index


def make_chain(n: int, horizon: int, p_success: float = 1.0,
               goal_reward: float = 1.0, step_reward: float = 0.01) -> MdpSpec:
    """Chain of ``n`` states starting at 0; action 1 moves right with ``p_success``
    (else stays), action 0 moves left.  Being at the right end pays ``goal_reward``."""
    if n < 2:
        raise SpecError("chain needs at least two states")
    P = np.zeros((n, 2, n))
    R = np.full((n, 2), float(step_reward))
    for s in range(n):
        P[s, 0, max(s - 1, 0)] += 1.0
        right = min(s + 1, n - 1)
        P[s, 1, right] += p_success
        P[s, 1, s] += 1.0 - p_success
    R[n - 1, :] = goal_reward
    p0 = np.zeros(n)
    p0[0] = 1.0
    return MdpSpec(P, R, p0, horizon, name=f"chain:n={n},T={horizon},p={p_success}")


def make_grid(width: int, height: int, horizon: int,
              goal_reward: float = 1.0, step_reward: float = 0.01) -> MdpSpec:
    """Deterministic grid, start top-left, goal bottom-right (absorbing, terminal).

    Actions: 0 up, 1 down, 2 left, 3 right; moves off the grid stay put.
    """
    S = width * height
    P = np.zeros((S, 4, S))
    R = np.full((S, 4), float(step_reward))
    goal = S - 1
    moves = [(0, -1), (0, 1), (-1, 0), (1, 0)]
    for s in range(S):
        x, y = s % width, s // width
        for a, (dx, dy) in enumerate(moves):
            nx, ny = min(max(x + dx, 0), width - 1), min(max(y + dy, 0), height - 1)
            nxt = ny * width + nx
            P[s, a, nxt] = 1.0
            if nxt == goal and s != goal:
                R[s, a] = goal_reward
    terminal = np.zeros(S, dtype=bool)
    terminal[goal] = True
    p0 = np.zeros(S)
    p0[0] = 1.0
    return MdpSpec(P, R, p0, horizon, terminal=terminal, name=f"grid:w={width},h={height},T={horizon}")


def parse_env(text: str) -> MdpSpec:
    """Build a suite environment from its config string, e.g. ``tree:T=4,roots=1,opt=3``.

    Comma-separated list values (``opt=1,5``) are allowed: a token without
    ``=`` continues the preceding field.
    """
    kind, _, rest = text.strip().partition(":")
    fields: dict[str, str] = {}
    last = None
    for part in filter(None, rest.split(",")):
        k, sep, v = part.partition("=")
        if sep:
            last = k.strip()
            fields[last] = v.strip()
        elif last is not None:
            # continuation of a csv-valued field such as opt=1,5
            fields[last] += "," + part.strip()
        else:
            raise SpecError(f"malformed environment field {part!r} in {text!r}")
    try:
        if kind == "tree":
            T = int(fields.pop("T"))
            roots = int(fields.pop("roots", 1))
            opt = [int(v) for v in fields.pop("opt", "0").split(",")]
            rewards = fields.pop("rewards", None)
            leaf_rewards = [float(v) for v in rewards.split(",")] if rewards else None
            base = float(fields.pop("base", 0.1))
            rmax = float(fields.pop("rmax", 1.0))
            params = BinaryTreeParams(T, roots, opt, leaf_rewards, r_max=rmax, base_reward=base)
            spec = make_binary_tree(params)
        elif kind == "chain":
            spec = make_chain(int(fields.pop("n")), int(fields.pop("T")), float(fields.pop("p", 1.0)))
        elif kind == "grid":
            spec = make_grid(int(fields.pop("w")), int(fields.pop("h")), int(fields.pop("T")))
        else:
            raise SpecError(f"unknown environment kind {kind!r}")
    except KeyError as exc:
        raise SpecError(f"environment {text!r} is missing field {exc}") from None
    if fields:
        raise SpecError(f"unknown environment fields {sorted(fields)} in {text!r}")
    return spec
