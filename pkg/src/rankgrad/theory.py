"""Sample-complexity and exploration-efficiency calculators.

All logarithms are natural logarithms unless a base is stated (the
``log_{1+e}`` in the generalisation bound is explicit).  ``LOG_BASE`` is
surfaced in CLI output so downstream consumers know which constants apply.

Exploration efficiency is the probability that ``k`` uniformly random
episodes over ``N`` equally likely trajectories hit at least ``i`` distinct
members of a near-optimal set of size ``n_opt``.  It is evaluated by
inclusion-exclusion, exactly with rationals when the integers stay small.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .envs import (BinaryTreeParams, enumerate_trajectories, make_binary_tree, policy_trajectory_probs,
                   tree_leaf_of)
from .gradients import hinge_loss_and_grad
from .model import make_model, sgd_update

LOG_BASE = "e"
ONE_PLUS_E = 1.0 + math.e
EXACT_BITS = 512


class InfeasibleError(ValueError):
    """The requested guarantee cannot be met for these parameters."""


def _check_open_unit(name: str, x: float) -> None:
    if not 0.0 < x < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {x}")


# ---------------------------------------------------------------------------
# PAC calculators
# ---------------------------------------------------------------------------


def sl_sample_bound(gamma: float, delta: float, hypotheses: int) -> float:
    """Real-valued ``ln(2|H|/delta) / (2 gamma^2)``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if not delta > 0:
        raise ValueError("delta must be positive")
    if hypotheses < 1:
        raise ValueError("hypothesis count must be >= 1")
    return math.log(2 * hypotheses / delta) / (2 * gamma ** 2)


def sl_sample_complexity(gamma: float, delta: float, hypotheses: int) -> int:
    """Smallest n with ``n >= ln(2|H|/delta) / (2 gamma^2)``."""
    return max(0, math.ceil(sl_sample_bound(gamma, delta, hypotheses)))


def sl_gap(n: float, delta: float, hypotheses: int) -> float:
    """The gap gamma guaranteed by n samples (inverse of the bound)."""
    if not n > 0:
        raise ValueError("n must be positive")
    return math.sqrt(math.log(2 * hypotheses / delta) / (2 * n))


def generalization_eta(n: float, delta: float, hypotheses: int) -> float:
    """Generalisation error bound eta = 2 gamma for a realisable finite class."""
    return 2.0 * sl_gap(n, delta, hypotheses)


def generalization_lower_bound(D: float, eta: float, m: int, T: int) -> float:
    """``D (1+e)^{eta (1-m) T}``: lower bound on the expected (R_max=1) return."""
    if not D > 0:
        raise ValueError("D must be positive")
    if not 0.0 <= eta:
        raise ValueError("eta must be >= 0")
    if m < 2 or T < 1:
        raise ValueError("need m >= 2 and T >= 1")
    return D * ONE_PLUS_E ** (eta * (1 - m) * T)


def rl_sample_bound(epsilon: float, D: float, m: int, T: int, hypotheses: int, delta: float) -> float:
    """Real-valued sample requirement for an ``(1 - epsilon)``-optimal return."""
    _check_open_unit("epsilon", epsilon)
    _check_open_unit("delta", delta)
    if not D > 0:
        raise ValueError("D must be positive")
    ratio = D / (1.0 - epsilon)
    if not ratio > 1.0:
        raise InfeasibleError(f"D / (1 - epsilon) = {ratio} must exceed 1")
    log_ratio = math.log(ratio) / math.log(ONE_PLUS_E)
    return 2 * (m - 1) ** 2 * T ** 2 / log_ratio ** 2 * math.log(2 * hypotheses / delta)


def rl_sample_complexity(epsilon: float, D: float, m: int, T: int, hypotheses: int, delta: float,
                         exact: bool = False):
    """Samples needed so the learned policy's return is at least ``1 - epsilon``.

    ``exact=True`` returns the unrounded bound.
    """
    n = rl_sample_bound(epsilon, D, m, T, hypotheses, delta)
    return n if exact else math.ceil(n)


# ---------------------------------------------------------------------------
# Exploration efficiency
# ---------------------------------------------------------------------------


def _check_exploration(N: int, n_opt: int, k: int, i: int) -> None:
    if not (isinstance(N, (int, np.integer)) and isinstance(n_opt, (int, np.integer))):
        raise TypeError("N and n_opt must be integers")
    if not 1 <= n_opt <= N:
        raise ValueError(f"need 1 <= n_opt <= N, got n_opt={n_opt}, N={N}")
    if k < 0:
        raise ValueError("k must be >= 0")
    if not 0 <= i <= n_opt:
        raise ValueError(f"need 0 <= i <= n_opt, got i={i}")


def _exactly_probabilities(N: int, n_opt: int, k: int, upto: int, exact: bool) -> list:
    """P(exactly i' distinct near-optimal trajectories after k draws), i' < upto."""
    out = []
    for ip in range(upto):
        terms = [(-1) ** j * math.comb(ip, j) * (N - n_opt + ip - j) ** k for j in range(ip + 1)]
        if exact:
            out.append(Fraction(math.comb(n_opt, ip) * sum(terms), N ** k))
        else:
            # int / int is correctly rounded even when both sides are huge
            out.append(math.comb(n_opt, ip) * math.fsum(t / N ** k for t in terms))
    return out


def _use_exact(N: int, k: int) -> bool:
    return k * math.log2(max(N, 2)) <= EXACT_BITS


def exploration_efficiency_random(N: int, n_opt: int, k: int, i: int) -> float:
    """p(n_traj >= i | k) for a uniform random explorer."""
    _check_exploration(N, n_opt, k, i)
    if i == 0:
        return 1.0
    exact = _use_exact(N, k)
    probs = _exactly_probabilities(N, n_opt, k, i, exact)
    if exact:
        return float(1 - sum(probs, Fraction(0)))
    return min(1.0, max(0.0, 1.0 - math.fsum(probs)))


def exploration_distribution(N: int, n_opt: int, k: int) -> np.ndarray:
    """P(n_traj = i | k) for i = 0..n_opt."""
    _check_exploration(N, n_opt, k, 0)
    exact = _use_exact(N, k)
    probs = _exactly_probabilities(N, n_opt, k, n_opt + 1, exact)
    return np.array([float(p) for p in probs])


@dataclass
class EfficiencyEstimate:
    mean: float
    stderr: float
    replicates: int


def expected_exploration_efficiency(N: int | None = None, n_opt: int | None = None, k: int | None = None,
                                    *, counts=None, logs=None) -> EfficiencyEstimate:
    """Expected number of distinct near-optimal trajectories after ``k`` episodes.

    Closed form (``N``, ``n_opt``, ``k``): ``sum_{i>=1} p(n_traj >= i | k)``.
    Empirical: ``counts`` is a sequence of per-replicate distinct counts, or
    ``logs`` a sequence of run logs read at episode ``k``.
    """
    if logs is not None:
        if k is None:
            raise ValueError("k is required when reading run logs")
        counts = [log.distinct_history[min(k, len(log.distinct_history)) - 1] if k > 0 else 0
                  for log in logs]
    if counts is not None:
        c = np.asarray(counts, dtype=float)
        if c.size < 1:
            raise ValueError("need at least one replicate")
        se = float(c.std(ddof=1) / math.sqrt(c.size)) if c.size > 1 else math.nan
        return EfficiencyEstimate(float(c.mean()), se, int(c.size))
    if N is None or n_opt is None or k is None:
        raise ValueError("closed form needs N, n_opt and k")
    total = math.fsum(exploration_efficiency_random(N, n_opt, k, i) for i in range(1, n_opt + 1))
    return EfficiencyEstimate(total, 0.0, 0)


def simulate_exploration(N: int, n_opt: int, k: int, replicates: int,
                         rng: np.random.Generator | int | None = None, chunk: int = 50_000) -> np.ndarray:
    """Distinct near-optimal counts from ``replicates`` runs of ``k`` uniform draws.

    Trajectory ids ``0..n_opt-1`` play the near-optimal set.
    """
    _check_exploration(N, n_opt, k, 0)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = np.zeros(replicates, dtype=np.int64)
    if k == 0:
        return out
    for start in range(0, replicates, chunk):
        size = min(chunk, replicates - start)
        draws = rng.integers(0, N, size=(size, k))
        hits = np.zeros(size, dtype=np.int64)
        for t in range(n_opt):
            hits += (draws == t).any(axis=1)
        out[start:start + size] = hits
    return out


def hit_probability_decay(p_tau: float, n: int) -> float:
    """Probability that ``n`` independent episodes all miss a trajectory of probability ``p_tau``."""
    if not 0.0 < p_tau <= 1.0:
        raise ValueError("p_tau must lie in (0, 1]")
    if n < 0:
        raise ValueError("n must be >= 0")
    return (1.0 - p_tau) ** n


# ---------------------------------------------------------------------------
# Joint exploration + generalisation bound
# ---------------------------------------------------------------------------


@dataclass
class JointBound:
    eta: float
    bound: float
    p_explore: float
    trajectories_needed: int


def joint_bound(delta_prime: float, n: int, k: int, N: int, n_opt: int, hypotheses: int,
                m: int, T: int, D: float) -> JointBound:
    """Generalisation bound that also pays for the chance of under-exploring.

    ``n`` state-action samples are counted as ``ceil(n / T)`` distinct
    trajectories when asking how likely ``k`` random episodes are to supply them.
    """
    _check_open_unit("delta_prime", delta_prime)
    if n < 1:
        raise ValueError("n must be >= 1")
    need = math.ceil(n / T)
    p = exploration_efficiency_random(N, n_opt, k, need) if need <= n_opt else 0.0
    if not p - 1.0 + delta_prime > 0.0:
        raise InfeasibleError(f"exploration probability {p} does not exceed 1 - delta' = {1 - delta_prime}")
    eta = 2.0 * math.sqrt(math.log(2 * hypotheses * p / (p - 1.0 + delta_prime)) / (2 * n))
    return JointBound(eta, generalization_lower_bound(D, eta, m, T), p, need)


def dynamics_factor(p_d: list[float] | np.ndarray) -> float:
    """``|T| * (prod p_d)^{1/|T|}`` over the near-optimal trajectories."""
    p = np.asarray(p_d, dtype=float)
    if p.size == 0 or np.any(p <= 0):
        raise ValueError("need positive dynamics probabilities")
    return float(p.size * np.exp(np.mean(np.log(p))))


# ---------------------------------------------------------------------------
# End-to-end check of the generalisation inequality
# ---------------------------------------------------------------------------


@dataclass
class GeneralizationCheck:
    n: int
    eta_emp: float
    expected_return: float
    bound: float
    D: float
    states_covered: int

    @property
    def holds(self) -> bool:
        return self.expected_return >= self.bound


def generalization_check(n: int, depth: int = 4, optimal_leaves=(5,), base_reward: float = 0.1,
                         seed: int = 0, lr: float = 0.1, max_iters: int = 10_000) -> GeneralizationCheck:
    """Fit a tabular hinge model to ``n`` samples of the uniform near-optimal policy.

    Samples are drawn i.i.d. from that policy's state-action distribution on a
    single-root binary tree (R_max = 1).  The fitted classifier acts greedily;
    its expected return is computed by enumeration and compared with
    ``D (1+e)^{eta (1-m) T}`` at the measured misclassification rate eta.
    """
    spec = make_binary_tree(BinaryTreeParams(depth, 1, tuple(optimal_leaves), base_reward=base_reward))
    rng = np.random.default_rng(seed)
    pd_opt, pairs = [], []
    for traj, pd in enumerate_trajectories(spec):
        if tree_leaf_of(traj) in optimal_leaves:
            pd_opt.append(pd)
            pairs.extend(zip(traj.states, traj.actions))
    # UNOP state-action distribution: uniform over near-optimal trajectories, then over steps
    pairs = np.array(pairs, dtype=np.int64)
    idx = rng.integers(0, len(pairs), size=n)
    states, targets = pairs[idx, 0], pairs[idx, 1]
    model = make_model("tabular", spec.state_count, 2, seed=rng)
    for _ in range(max_iters):
        est = hinge_loss_and_grad(model, (states, targets))
        if est.loss == 0.0:
            break
        sgd_update(model, est.grad, lr)
    table = model.table
    greedy = table.argmax(axis=1)
    eta_emp = float(np.mean(greedy[pairs[:, 0]] != pairs[:, 1]))

    def probs(s):
        p = np.zeros(2)
        p[greedy[s]] = 1.0
        return p

    expected = math.fsum(p * traj.trajectory_reward for traj, p in policy_trajectory_probs(spec, probs))
    D = dynamics_factor(pd_opt)
    return GeneralizationCheck(n, eta_emp, expected, generalization_lower_bound(D, eta_emp, 2, depth),
                               D, int(np.unique(states).size))
