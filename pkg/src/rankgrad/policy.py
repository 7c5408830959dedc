"""From lambda-values to action probabilities and choices.

Two policy families share a model:

* pairwise: ``pi(a_i) = prod_{j != i} sigmoid(lambda_i - lambda_j)``, optionally
  completed with a bookkeeping dummy action so the vector sums to one;
* listwise: the softmax of ``lambda / temperature``.

Both have the same top-1 action, which is what greedy evaluation uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import LambdaModel

DUMMY_TOLERANCE = 1e-12


class Condition2Error(ValueError):
    """The pairwise probabilities sum past one: the dummy action would be negative."""


def sigmoid(x):
    """Logistic function, evaluated on the non-overflowing branch for each sign."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def log_sigmoid(x):
    """``log(sigmoid(x))`` without overflow or cancellation."""
    x = np.asarray(x, dtype=float)
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def pairwise_prob(lam_i: float, lam_j: float) -> float:
    """p_ij: probability that action i is ranked above action j."""
    return sigmoid(float(lam_i) - float(lam_j))


def pairwise_matrix(lam: np.ndarray) -> np.ndarray:
    """(m, m) matrix of p_ij with 0.5 on the diagonal."""
    lam = np.asarray(lam, dtype=float)
    return sigmoid(lam[:, None] - lam[None, :])


def pairwise_probs_from_lambda(lam: np.ndarray, dummy: bool = False) -> np.ndarray:
    """Pairwise ranking probabilities; appends the dummy action when ``dummy``."""
    lam = np.asarray(lam, dtype=float)
    logp = log_sigmoid(lam[:, None] - lam[None, :])
    np.fill_diagonal(logp, 0.0)
    probs = np.exp(logp.sum(axis=1))
    return complete_with_dummy(probs) if dummy else probs


def complete_with_dummy(probs: np.ndarray) -> np.ndarray:
    """Append ``1 - sum(probs)``; tiny negative round-off is clamped to 0.

    For products of sigmoids the sum never exceeds one (each product is the
    chance that one action wins every independent pairwise duel, and those
    events are disjoint), so the error branch guards against numerical
    trouble or foreign inputs rather than a reachable parameter region.
    """
    rest = 1.0 - float(np.sum(probs))
    if rest < 0.0:
        if rest < -DUMMY_TOLERANCE:
            raise Condition2Error(f"action probabilities sum to {1.0 - rest!r} > 1")
        rest = 0.0
    return np.append(probs, rest)


def condition2_threshold(m: int) -> float:
    """``ln(m**(1/(m-1)) - 1)``: lower bound on the smallest pairwise difference.

    The dummy action is a valid probability whenever
    ``min_{i,j} (lambda_j - lambda_i) >= threshold``, i.e. whenever the spread
    ``max(lambda) - min(lambda)`` is at most ``-threshold``.
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    if m == 2:
        return 0.0
    return math.log(m ** (1.0 / (m - 1)) - 1.0)


def softmax(lam: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(lam, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(lam: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(lam, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_action(lam: np.ndarray) -> int:
    # np.argmax already returns the first maximiser
    return int(np.argmax(lam))


@dataclass(frozen=True)
class PairwisePolicy:
    model: LambdaModel
    dummy_action: bool = False

    def lambdas(self, state) -> np.ndarray:
        return self.model.forward(state)

    def probs(self, state) -> np.ndarray:
        return pairwise_probs_from_lambda(self.lambdas(state), self.dummy_action)

    def real_action_probs(self, state) -> np.ndarray:
        """Probabilities over executable actions, renormalised."""
        p = pairwise_probs_from_lambda(self.lambdas(state), False)
        return p / p.sum()


@dataclass(frozen=True)
class ListwisePolicy:
    model: LambdaModel
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def lambdas(self, state) -> np.ndarray:
        return self.model.forward(state)

    def probs(self, state) -> np.ndarray:
        return softmax(self.lambdas(state), self.temperature)

    def real_action_probs(self, state) -> np.ndarray:
        return self.probs(state)


Policy = PairwisePolicy | ListwisePolicy


def pairwise_action_probs(policy: PairwisePolicy, state) -> np.ndarray:
    return policy.probs(state)


def listwise_probs(policy: ListwisePolicy, state) -> np.ndarray:
    return policy.probs(state)


def select_action(policy, state, mode: str = "greedy", rng: np.random.Generator | None = None) -> int:
    """Greedy argmax (lowest index wins ties) or a draw from the policy.

    Sampling never returns the dummy action: pairwise draws are taken from the
    real-action probabilities renormalised.
    """
    if mode == "greedy":
        return greedy_action(policy.lambdas(state))
    if mode != "sample":
        raise ValueError(f"unknown selection mode {mode!r}")
    if rng is None:
        raise ValueError("sampling needs a generator")
    p = policy.real_action_probs(state)
    return sample_index(p, rng)


def sample_index(p: np.ndarray, rng: np.random.Generator) -> int:
    cum = np.cumsum(p)
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(idx, p.size - 1)


def make_policy(model: LambdaModel, kind: str = "listwise", *, dummy_action: bool = False,
                temperature: float = 1.0):
    if kind == "pairwise":
        return PairwisePolicy(model, dummy_action)
    if kind == "listwise":
        return ListwisePolicy(model, temperature)
    raise ValueError(f"unknown policy kind {kind!r}")
