"""Parameterised relative-action-value models.

A model maps a state (an integer id, or a feature vector) to ``m`` scores
``lambda(s, a)``.  All parameters live in one flat float64 vector ``theta`` so
optimisers, finite-difference checks and checkpoints can treat every model
kind the same way.

Three kinds are provided:

* ``tabular``: ``theta`` reshaped to ``(S, m)``; the state id picks a row.
* ``linear``:  ``lambda = W phi(s) + b``.
* ``mlp``:     tanh hidden layers and a linear output layer.

Any kind can squash its outputs into ``[0, c_q]`` with ``c_q * sigmoid(z)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

INIT_SCALE = 0.05
CHECKPOINT_MAGIC = b"RPGC"
CHECKPOINT_VERSION = 1
KIND_TAGS = {"tabular": 0, "linear": 1, "mlp": 2}


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LambdaModel:
    """Base class; subclasses implement the raw (unsquashed) map."""

    kind: str = ""

    def __init__(self, action_count: int, n_params: int, c_q: float | None = None):
        if action_count < 2:
            raise ValueError("need at least two actions")
        if c_q is not None and not c_q > 0:
            raise ValueError("c_q must be positive")
        self.m = int(action_count)
        self.c_q = c_q
        self.theta = np.zeros(n_params)

    # -- subclass hooks -------------------------------------------------
    def _raw_forward(self, x: np.ndarray) -> tuple[np.ndarray, object]:
        raise NotImplementedError

    def _raw_backward(self, cache, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def arch_dims(self) -> list[int]:
        raise NotImplementedError

    def _inputs(self, states) -> np.ndarray:
        raise NotImplementedError

    # -- public API -----------------------------------------------------
    @property
    def n_params(self) -> int:
        return self.theta.size

    def forward_batch(self, states) -> np.ndarray:
        """(B, m) scores for a batch of states."""
        z, _ = self._raw_forward(self._inputs(states))
        if self.c_q is not None:
            return self.c_q * _sigmoid(z)
        return z

    def forward(self, state) -> np.ndarray:
        return self.forward_batch(_as_batch(state))[0]

    def backward_batch(self, states, upstream: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. theta of ``sum_b upstream[b] . lambda(states[b])``."""
        upstream = np.asarray(upstream, dtype=float)
        if not np.all(np.isfinite(upstream)):
            raise FloatingPointError("non-finite upstream gradient")
        z, cache = self._raw_forward(self._inputs(states))
        if upstream.shape != z.shape:
            raise ValueError(f"upstream shape {upstream.shape} does not match scores {z.shape}")
        if self.c_q is not None:
            sig = _sigmoid(z)
            upstream = upstream * self.c_q * sig * (1.0 - sig)
        return self._raw_backward(cache, upstream)

    def backward(self, state, upstream: np.ndarray) -> np.ndarray:
        return self.backward_batch(_as_batch(state), np.asarray(upstream, dtype=float)[None, :])

    def copy(self) -> "LambdaModel":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.theta = self.theta.copy()
        return clone

    def init_params(self, seed: int | np.random.Generator | None, scale: float = INIT_SCALE) -> "LambdaModel":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.theta = rng.uniform(-scale, scale, size=self.n_params)
        return self

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dims={self.arch_dims}, c_q={self.c_q})"


def _as_batch(state):
    if np.isscalar(state) or (isinstance(state, np.ndarray) and state.ndim == 0):
        return np.array([int(state)])
    arr = np.asarray(state, dtype=float)
    return arr[None, :]


class TabularModel(LambdaModel):
    kind = "tabular"

    def __init__(self, state_count: int, action_count: int, c_q: float | None = None):
        super().__init__(action_count, state_count * action_count, c_q)
        self.state_count = int(state_count)

    @property
    def table(self) -> np.ndarray:
        return self.theta.reshape(self.state_count, self.m)

    @property
    def arch_dims(self) -> list[int]:
        return [self.state_count, self.m]

    def _inputs(self, states) -> np.ndarray:
        idx = np.asarray(states)
        if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
            raise ValueError("tabular models take integer state ids")
        if idx.size and (idx.min() < 0 or idx.max() >= self.state_count):
            raise IndexError("state id out of range")
        return idx

    def _raw_forward(self, idx):
        return self.table[idx], idx

    def _raw_backward(self, idx, upstream):
        grad = np.zeros((self.state_count, self.m))
        np.add.at(grad, idx, upstream)
        return grad.ravel()


class _FeatureModel(LambdaModel):
    """Shared featurisation: integer states are looked up in ``features``."""

    def __init__(self, input_dim: int, action_count: int, n_params: int,
                 c_q: float | None, features: np.ndarray | None):
        super().__init__(action_count, n_params, c_q)
        self.input_dim = int(input_dim)
        if features is not None:
            features = np.asarray(features, dtype=float)
            if features.ndim != 2 or features.shape[1] != self.input_dim:
                raise ValueError(f"features must have shape (S, {self.input_dim})")
        self.features = features

    def _inputs(self, states) -> np.ndarray:
        arr = np.asarray(states)
        if arr.ndim == 1 and np.issubdtype(arr.dtype, np.integer):
            if self.features is None:
                out = np.zeros((arr.size, self.input_dim))
                out[np.arange(arr.size), arr] = 1.0
                return out
            return self.features[arr]
        arr = np.asarray(arr, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != self.input_dim:
            raise ValueError(f"expected feature vectors of length {self.input_dim}, got shape {arr.shape}")
        return arr


class LinearModel(_FeatureModel):
    """``lambda = W phi + b`` with ``W`` of shape (m, d); theta = [W.ravel(), b]."""

    kind = "linear"

    def __init__(self, input_dim: int, action_count: int, c_q: float | None = None,
                 features: np.ndarray | None = None):
        super().__init__(input_dim, action_count, action_count * input_dim + action_count, c_q, features)

    @property
    def arch_dims(self) -> list[int]:
        return [self.input_dim, self.m]

    def _split(self):
        k = self.m * self.input_dim
        return self.theta[:k].reshape(self.m, self.input_dim), self.theta[k:]

    def _raw_forward(self, x):
        W, b = self._split()
        return x @ W.T + b, x

    def _raw_backward(self, x, upstream):
        return np.concatenate([(upstream.T @ x).ravel(), upstream.sum(axis=0)])


class MLPModel(_FeatureModel):
    """tanh MLP; layer l stores W_l (out, in) then b_l (out) in theta."""

    kind = "mlp"

    def __init__(self, input_dim: int, hidden: Sequence[int], action_count: int,
                 c_q: float | None = None, features: np.ndarray | None = None):
        dims = [int(input_dim), *[int(h) for h in hidden], int(action_count)]
        n = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
        super().__init__(input_dim, action_count, n, c_q, features)
        self.dims = dims

    @property
    def arch_dims(self) -> list[int]:
        return list(self.dims)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, pos = [], 0
        for i, o in zip(self.dims[:-1], self.dims[1:]):
            W = self.theta[pos:pos + o * i].reshape(o, i)
            pos += o * i
            b = self.theta[pos:pos + o]
            pos += o
            out.append((W, b))
        return out

    def _raw_forward(self, x):
        acts = [x]
        h = x
        layers = self.layers()
        for li, (W, b) in enumerate(layers):
            z = h @ W.T + b
            h = z if li == len(layers) - 1 else np.tanh(z)
            acts.append(h)
        return h, acts

    def _raw_backward(self, acts, upstream):
        layers = self.layers()
        grads = []
        delta = upstream
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            grads.append(np.concatenate([(delta.T @ acts[li]).ravel(), delta.sum(axis=0)]))
            if li:
                delta = (delta @ W) * (1.0 - acts[li] ** 2)
        return np.concatenate(grads[::-1])


def make_model(kind: str, state_count: int, action_count: int, *, hidden: Sequence[int] = (16,),
               c_q: float | None = None, features: np.ndarray | None = None,
               seed: int | np.random.Generator | None = 0) -> LambdaModel:
    """Build and initialise a model for an environment with ``state_count`` states."""
    if kind == "tabular":
        model = TabularModel(state_count, action_count, c_q)
    elif kind in ("linear", "mlp"):
        d = state_count if features is None else np.asarray(features).shape[1]
        if kind == "linear":
            model = LinearModel(d, action_count, c_q, features)
        else:
            model = MLPModel(d, hidden, action_count, c_q, features)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return model.init_params(seed)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


def sgd_update(model: LambdaModel, grad: np.ndarray, learning_rate: float) -> LambdaModel:
    """In-place ``theta <- theta - lr * grad``; returns the model."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != model.theta.shape:
        raise ValueError("gradient is not aligned with the parameters")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    model.theta -= learning_rate * grad
    return model


@dataclass
class SGD:
    """Plain SGD with optional heavy-ball momentum."""

    learning_rate: float
    momentum: float = 0.0
    velocity: np.ndarray | None = field(default=None, repr=False)

    def step(self, model: LambdaModel, grad: np.ndarray) -> LambdaModel:
        if self.momentum == 0.0:
            return sgd_update(model, grad, self.learning_rate)
        if self.velocity is None:
            self.velocity = np.zeros_like(model.theta)
        self.velocity = self.momentum * self.velocity + np.asarray(grad, dtype=float)
        return sgd_update(model, self.velocity, self.learning_rate)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class FDReport:
    """Per-coordinate comparison of an analytic gradient to central differences."""

    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    kink: np.ndarray
    tolerance: float
    finite: bool = True

    @property
    def max_rel_error(self) -> float:
        ok = ~self.kink
        return float(self.rel_error[ok].max()) if ok.any() else 0.0

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_error < self.tolerance

    def rows(self) -> list[tuple[int, float, float, float, bool]]:
        return [(i, float(a), float(n), float(e), bool(k))
                for i, (a, n, e, k) in enumerate(zip(self.analytic, self.numeric, self.rel_error, self.kink))]


def finite_difference_check(theta: np.ndarray, loss: Callable[[np.ndarray], float], analytic: np.ndarray,
                            tolerance: float = 1e-4, h: float = 1e-5,
                            pattern: Callable[[np.ndarray], object] | None = None,
                            floor: float = 1e-5) -> FDReport:
    """Compare ``analytic`` with central differences of ``loss`` at ``theta``.

    ``pattern(theta)`` optionally returns the active-piece signature of a
    piecewise-smooth loss (e.g. which hinge terms are positive).  A coordinate
    whose +/-h probe changes the signature straddles a kink and is excluded.
    Relative error is ``|a - n| / max(|a|, |n|, floor * max(1, |loss(theta)|))``:
    components smaller than ``floor`` relative to the loss scale are treated
    as zero, since central differences cannot resolve them below round-off.
    """
    theta = np.asarray(theta, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.zeros_like(theta)
    kink = np.zeros(theta.size, dtype=bool)
    base = None if pattern is None else pattern(theta)
    finite = bool(np.all(np.isfinite(analytic)))
    for i in range(theta.size):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += h
        minus[i] -= h
        fp, fm = loss(plus), loss(minus)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            finite = False
        numeric[i] = (fp - fm) / (2.0 * h)
        if pattern is not None:
            kink[i] = not (_same(pattern(plus), base) and _same(pattern(minus), base))
    scale = floor * max(1.0, abs(float(loss(theta))))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
    rel = np.abs(analytic - numeric) / denom
    return FDReport(analytic, numeric, rel, kink, tolerance, finite)


def _same(a, b) -> bool:
    return bool(np.array_equal(a, b))


def model_gradcheck(model: LambdaModel, objective: Callable[[LambdaModel], tuple[float, np.ndarray]],
                    tolerance: float = 1e-4, h: float = 1e-5,
                    pattern: Callable[[LambdaModel], object] | None = None) -> FDReport:
    """:func:`finite_difference_check` for an objective ``model -> (value, grad)``."""
    probe = model.copy()

    def loss(theta):
        probe.theta = theta
        return objective(probe)[0]

    def sig(theta):
        probe.theta = theta
        return pattern(probe)

    _, grad = objective(model)
    return finite_difference_check(model.theta.copy(), loss, grad, tolerance, h,
                                   None if pattern is None else sig)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_bytes(model: LambdaModel) -> bytes:
    dims = model.arch_dims
    head = CHECKPOINT_MAGIC + struct.pack("<HB", CHECKPOINT_VERSION, KIND_TAGS[model.kind])
    head += struct.pack(f"<I{len(dims)}I", len(dims), *dims)
    return head + model.theta.astype("<f8").tobytes()


def model_from_bytes(data: bytes, *, c_q: float | None = None, features: np.ndarray | None = None) -> LambdaModel:
    """Inverse of :func:`checkpoint_bytes`.

    Squashing and feature tables are not part of the file format and must be
    supplied again by the caller.
    """
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    version, tag = struct.unpack_from("<HB", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", data, 7)
    dims = list(struct.unpack_from(f"<{count}I", data, 11))
    offset = 11 + 4 * count
    kind = {v: k for k, v in KIND_TAGS.items()}.get(tag)
    if kind == "tabular":
        model: LambdaModel = TabularModel(dims[0], dims[1], c_q)
    elif kind == "linear":
        model = LinearModel(dims[0], dims[1], c_q, features)
    elif kind == "mlp":
        model = MLPModel(dims[0], dims[1:-1], dims[-1], c_q, features)
    else:
        raise ValueError(f"unknown model kind tag {tag}")
    theta = np.frombuffer(data, dtype="<f8", offset=offset)
    if theta.size != model.n_params:
        raise ValueError(f"expected {model.n_params} parameters, found {theta.size}")
    model.theta = theta.astype(np.float64)
    return model


def save_checkpoint(model: LambdaModel, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def load_checkpoint(path: str | Path, **kwargs) -> LambdaModel:
    return model_from_bytes(Path(path).read_bytes(), **kwargs)
