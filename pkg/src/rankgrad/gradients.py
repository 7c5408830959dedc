"""Loss functions and gradient estimators.

Trajectory estimators (``rpg_trajectory_grad``, ``rpg_exact_grad_unapproximated``,
``lpg_trajectory_grad``) return the gradient of an objective to be *maximised*:
the value in ``GradEstimate.loss`` is that objective and ``grad`` points uphill.
Supervised losses (hinge, cross-entropy) return a loss to be *minimised*.

Each estimator is split into a lambda-space ``*_upstream`` function and the
model's backward pass, so the same upstream code is shared by on-policy and
off-policy trainers.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .envs import Trajectory
from .model import LambdaModel
from .policy import log_sigmoid, log_softmax, sigmoid, softmax

DEFAULT_MARGIN = 1.0


@dataclass
class RunningMoments:
    """Welford accumulator of per-dimension mean and M2."""

    count: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None

    def push(self, x: np.ndarray) -> "RunningMoments":
        x = np.asarray(x, dtype=float)
        if self.mean is None:
            self.mean = np.zeros_like(x)
            self.m2 = np.zeros_like(x)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)
        return self

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean.copy(), other.m2.copy()
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean = self.mean + delta * other.count / n
        self.m2 = self.m2 + other.m2 + delta ** 2 * self.count * other.count / n
        self.count = n
        return self

    def variance(self, ddof: int = 0) -> np.ndarray:
        if self.count - ddof <= 0:
            raise ValueError("not enough samples for a variance")
        return self.m2 / (self.count - ddof)


@dataclass
class GradEstimate:
    grad: np.ndarray
    loss: float
    moments: RunningMoments = field(default_factory=RunningMoments)

    def __post_init__(self):
        if not np.all(np.isfinite(self.grad)):
            raise FloatingPointError("non-finite gradient estimate")
        if self.moments.count == 0:
            self.moments.push(self.grad)


# ---------------------------------------------------------------------------
# lambda-space upstream gradients
# ---------------------------------------------------------------------------


def _states(traj: Trajectory) -> np.ndarray:
    return np.asarray(traj.states, dtype=np.int64)


def rpg_upstream(lam: np.ndarray, actions: np.ndarray, reward: float) -> tuple[float, np.ndarray]:
    """Linear surrogate ``sum_t sum_{j != i} (lambda_i - lambda_j) / 2 * r``."""
    T, m = lam.shape
    rows = np.arange(T)
    up = np.full((T, m), -0.5 * reward)
    up[rows, actions] = 0.5 * (m - 1) * reward
    value = float(np.sum(up * lam))
    return value, up


def rpg_exact_upstream(lam: np.ndarray, actions: np.ndarray, reward: float) -> tuple[float, np.ndarray]:
    """Log-sigmoid form ``sum_t sum_{j != i} log sigmoid(lambda_i - lambda_j) * r``."""
    T, m = lam.shape
    rows = np.arange(T)
    lam_i = lam[rows, actions][:, None]
    diff = lam_i - lam
    mask = np.ones((T, m), dtype=bool)
    mask[rows, actions] = False
    value = float(np.sum(log_sigmoid(diff)[mask]) * reward)
    w = np.where(mask, 1.0 - sigmoid(diff), 0.0) * reward
    up = -w
    up[rows, actions] = w.sum(axis=1)
    return value, up


def lpg_upstream(lam: np.ndarray, actions: np.ndarray, reward: float,
                 temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """REINFORCE with softmax: ``sum_t log pi(a_t | s_t) * r``."""
    T, m = lam.shape
    rows = np.arange(T)
    logp = log_softmax(lam, temperature)
    value = float(np.sum(logp[rows, actions]) * reward)
    up = -softmax(lam, temperature)
    up[rows, actions] += 1.0
    return value, up * (reward / temperature)


def hinge_upstream(lam: np.ndarray, targets: np.ndarray,
                   margin: float = DEFAULT_MARGIN) -> tuple[float, np.ndarray]:
    """Mean over the batch of ``sum_{j != i} max(0, margin + lambda_j - lambda_i)``.

    The subgradient at the kink (term exactly zero) is taken to be 0.
    """
    B, m = lam.shape
    rows = np.arange(B)
    slack = margin + lam - lam[rows, targets][:, None]
    slack[rows, targets] = 0.0
    active = slack > 0
    value = float(np.sum(np.where(active, slack, 0.0)) / B)
    up = active.astype(float)
    up[rows, targets] = -active.sum(axis=1)
    return value, up / B


def hinge_pattern(lam: np.ndarray, targets: np.ndarray, margin: float = DEFAULT_MARGIN) -> np.ndarray:
    """Sign pattern of the hinge terms (-1, 0, +1); changes mark kinks."""
    rows = np.arange(lam.shape[0])
    slack = margin + lam - lam[rows, targets][:, None]
    slack[rows, targets] = -1.0
    return np.sign(slack)


def xent_upstream(lam: np.ndarray, targets: np.ndarray, temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean negative log softmax of the target action."""
    B, _ = lam.shape
    rows = np.arange(B)
    value = float(-np.sum(log_softmax(lam, temperature)[rows, targets]) / B)
    up = softmax(lam, temperature)
    up[rows, targets] -= 1.0
    return value, up / (B * temperature)


# ---------------------------------------------------------------------------
# estimators over a model
# ---------------------------------------------------------------------------


def _trajectory_estimate(model: LambdaModel, traj: Trajectory, upstream_fn, **kw) -> GradEstimate:
    if len(traj) == 0:
        return GradEstimate(np.zeros(model.n_params), 0.0)
    states = _states(traj)
    actions = np.asarray(traj.actions, dtype=np.int64)
    lam = model.forward_batch(states)
    value, up = upstream_fn(lam, actions, traj.trajectory_reward, **kw)
    return GradEstimate(model.backward_batch(states, up), value)


def rpg_trajectory_grad(model: LambdaModel, traj: Trajectory) -> GradEstimate:
    return _trajectory_estimate(model, traj, rpg_upstream)


def rpg_exact_grad_unapproximated(model: LambdaModel, traj: Trajectory) -> GradEstimate:
    return _trajectory_estimate(model, traj, rpg_exact_upstream)


def lpg_trajectory_grad(model: LambdaModel, traj: Trajectory, temperature: float = 1.0) -> GradEstimate:
    return _trajectory_estimate(model, traj, lpg_upstream, temperature=temperature)


def _batch_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        states, targets = batch
    else:
        if len(batch) == 0:
            raise ValueError("empty batch")
        states, targets = zip(*batch)
        states = np.asarray(states)
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        raise ValueError("empty batch")
    return np.asarray(states), targets


def _supervised(model, batch, upstream_fn, per_sample: bool, **kw) -> GradEstimate:
    states, targets = _batch_arrays(batch)
    lam = model.forward_batch(states)
    value, up = upstream_fn(lam, targets, **kw)
    grad = model.backward_batch(states, up)
    moments = RunningMoments()
    if per_sample:
        B = len(targets)
        for b in range(B):
            moments.push(model.backward_batch(states[b:b + 1], up[b:b + 1] * B))
    return GradEstimate(grad, value, moments)


def hinge_loss_and_grad(model: LambdaModel, batch, margin: float = DEFAULT_MARGIN,
                        per_sample: bool = False) -> GradEstimate:
    """Pairwise hinge loss over ``batch`` of (state, target action).

    ``batch`` is a sequence of pairs or a ``(states, targets)`` array tuple.
    With ``per_sample`` the moments hold single-example gradients.
    """
    return _supervised(model, batch, hinge_upstream, per_sample, margin=margin)


def cross_entropy_loss_and_grad(model: LambdaModel, batch, temperature: float = 1.0,
                                per_sample: bool = False) -> GradEstimate:
    return _supervised(model, batch, xent_upstream, per_sample, temperature=temperature)


# ---------------------------------------------------------------------------
# log-likelihood decomposition
# ---------------------------------------------------------------------------


def loglikelihood_decomposition_check(policy, traj: Trajectory) -> tuple[float, float, float]:
    """Per-step average log-likelihood against its state-action frequency form.

    lhs = (1/T) sum_t log pi(a_t|s_t); rhs = sum_{(s,a)} (count(s,a)/T) log pi(a|s).
    """
    T = len(traj)
    if T == 0:
        raise ValueError("empty trajectory")
    logp = {}
    for s, a in zip(traj.states, traj.actions):
        if (s, a) not in logp:
            logp[(s, a)] = float(np.log(policy.probs(s)[a]))
    lhs = sum(logp[(s, a)] for s, a in zip(traj.states, traj.actions)) / T
    counts = Counter(zip(traj.states, traj.actions))
    rhs = sum((c / T) * logp[pair] for pair, c in counts.items())
    return lhs, rhs, abs(lhs - rhs)


# ---------------------------------------------------------------------------
# variance bounds
# ---------------------------------------------------------------------------


@dataclass
class VarianceReport:
    kind: str
    count: int
    variance: np.ndarray
    c_hat: float
    bound: float

    @property
    def max_variance(self) -> float:
        return float(self.variance.max())

    @property
    def holds(self) -> bool:
        return bool(np.all(self.variance <= self.bound))

    @property
    def slack(self) -> float:
        return self.bound / self.max_variance if self.max_variance > 0 else float("inf")


def grad_variance_report(estimates: Sequence[GradEstimate] | RunningMoments, c_hat: float,
                         T: int = 1, r_max: float = 1.0, kind: str = "policy") -> VarianceReport:
    """Per-dimension variance of gradient samples against its analytic ceiling.

    ``kind='policy'`` checks ``Var <= T^2 C^2 R_max^2``; ``kind='supervised'``
    checks ``Var <= C^2``.  The variance is the plug-in (divide by n) estimate
    of the same samples over which ``c_hat`` was maximised, which keeps the
    comparison one-sided.
    """
    if isinstance(estimates, RunningMoments):
        moments = estimates
    else:
        moments = RunningMoments()
        for est in estimates:
            moments.push(est.grad)
    if moments.count < 2:
        raise ValueError("need at least two gradient samples")
    if kind == "policy":
        bound = (T * c_hat * r_max) ** 2
    elif kind == "supervised":
        bound = c_hat ** 2
    else:
        raise ValueError(f"unknown estimate kind {kind!r}")
    return VarianceReport(kind, moments.count, moments.variance(ddof=0), float(c_hat), float(bound))


def policy_log_grad_max_norm(model: LambdaModel, trajectories: Sequence[Trajectory],
                             temperature: float = 1.0) -> float:
    """max over observed steps of ||grad_theta log pi(a_t|s_t)||_inf (softmax policy)."""
    best = 0.0
    for traj in trajectories:
        states = _states(traj)
        actions = np.asarray(traj.actions, dtype=np.int64)
        lam = model.forward_batch(states)
        _, up = lpg_upstream(lam, actions, 1.0, temperature)
        for t in range(len(traj)):
            g = model.backward_batch(states[t:t + 1], up[t:t + 1])
            best = max(best, float(np.abs(g).max()))
    return best


def supervised_grad_max_norm(model: LambdaModel, batch, margin: float = DEFAULT_MARGIN) -> float:
    """max over examples of the single-example hinge gradient's inf-norm."""
    states, targets = _batch_arrays(batch)
    lam = model.forward_batch(states)
    best = 0.0
    for b in range(len(targets)):
        _, up = hinge_upstream(lam[b:b + 1], targets[b:b + 1], margin)
        g = model.backward_batch(states[b:b + 1], up)
        best = max(best, float(np.abs(g).max()))
    return best
