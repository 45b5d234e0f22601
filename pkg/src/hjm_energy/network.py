"""Small fully connected networks in numpy with exact reverse-mode gradients.

Networks are immutable: training returns a new :class:`Network`.  Inputs are
mapped affinely to [0, 1] using per-input ``(lo, hi)`` bounds before the first
layer; outputs are left unscaled.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional, Sequence

import numpy as np

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "elu")
LOSSES = ("mse", "bidask")


class ShapeError(ValueError):
    """Array shapes do not match the network or each other."""


class SerializationError(ValueError):
    """A weights document is malformed, truncated or from another format version."""


@dataclass(frozen=True, eq=False)
class Network:
    dims: tuple
    weights: tuple
    biases: tuple
    activation: str = "relu"
    input_lo: Optional[np.ndarray] = None
    input_hi: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        dims = tuple(int(n) for n in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ShapeError(f"invalid layer sizes {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("need one weight matrix and bias vector per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ShapeError(f"layer {i + 1}: got {w.shape} and {b.shape}")
        if (self.input_lo is None) != (self.input_hi is None):
            raise ShapeError("input_lo and input_hi must be given together")
        if self.input_lo is not None:
            lo = np.asarray(self.input_lo, dtype=float)
            hi = np.asarray(self.input_hi, dtype=float)
            if lo.shape != (dims[0],) or hi.shape != (dims[0],) or np.any(hi <= lo):
                raise ShapeError("input bounds must have length n0 with lo < hi")
            object.__setattr__(self, "input_lo", lo)
            object.__setattr__(self, "input_hi", hi)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def n_params(self) -> int:
        return count_params(self.dims)

    def params(self) -> list:
        """Parameters in the order W1, b1, W2, b2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Network":
        return Network(self.dims, tuple(params[0::2]), tuple(params[1::2]), self.activation,
                       self.input_lo, self.input_hi, dict(self.meta))

    def with_meta(self, **meta) -> "Network":
        return Network(self.dims, self.weights, self.biases, self.activation,
                       self.input_lo, self.input_hi, {**self.meta, **meta})

    def input_scale(self) -> np.ndarray:
        if self.input_lo is None:
            return np.ones(self.dims[0])
        return 1.0 / (self.input_hi - self.input_lo)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.input_lo is None:
            return x
        return (x - self.input_lo) * self.input_scale()

    def __call__(self, x):
        return forward(self, x)


def count_params(dims: Sequence[int]) -> int:
    return sum(dims[i] * (dims[i - 1] + 1) for i in range(1, len(dims)))


def init_network(dims: Sequence[int], activation: str = "relu", seed: int = 0,
                 input_lo=None, input_hi=None) -> Network:
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return Network(tuple(dims), tuple(weights), tuple(biases), activation, input_lo, input_hi,
                   {"seed": int(seed)})


# ---------------------------------------------------------------------------
# forward and backward
# ---------------------------------------------------------------------------


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))


def _act_deriv(kind: str, z: np.ndarray) -> np.ndarray:
    # ReLU'(0) is taken as 0; ELU is C^1 so both sides agree at 0
    if kind == "relu":
        return (z > 0.0).astype(float)
    return np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != net.dims[0]:
        raise ShapeError(f"expected inputs with {net.dims[0]} columns, got shape {x.shape}")
    return x2, single


def _forward_cache(net: Network, x: np.ndarray):
    h = net.normalize(x)
    hs, zs = [h], []
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        zs.append(z)
        h = z if i == last else _act(net.activation, z)
        hs.append(h)
    return hs, zs


def forward(net: Network, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    x2, single = _as_batch(net, x)
    out = _forward_cache(net, x2)[0][-1]
    return out[0] if single else out


def _backward(net: Network, hs, zs, dout: np.ndarray, want_params=True, want_inputs=False):
    grads = [None] * (2 * net.n_layers)
    delta = dout
    for i in range(net.n_layers - 1, -1, -1):
        if i < net.n_layers - 1:
            delta = delta * _act_deriv(net.activation, zs[i])
        if want_params:
            grads[2 * i] = delta.T @ hs[i]
            grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0 or want_inputs:
            delta = delta @ net.weights[i]
    dx = delta * net.input_scale() if want_inputs else None
    return grads, dx


def input_gradient(net: Network, x, dout) -> np.ndarray:
    """Vector-Jacobian product d(dout . net(x))/dx for a batch of raw inputs."""
    x2, _ = _as_batch(net, x)
    dout = np.asarray(dout, dtype=float).reshape(x2.shape[0], net.dims[-1])
    hs, zs = _forward_cache(net, x2)
    return _backward(net, hs, zs, dout, want_params=False, want_inputs=True)[1]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_mse(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    return float(np.mean((pred - target) ** 2))


def _check_bands(bid, ask):
    if np.any(bid > ask):
        raise ValueError("bid exceeds ask")


def loss_bidask(pred, bid, ask) -> float:
    """Mean squared distance of each prediction to its [bid, ask] band."""
    pred, bid, ask = (np.asarray(v, dtype=float) for v in (pred, bid, ask))
    if not (pred.shape == bid.shape == ask.shape):
        raise ShapeError("pred, bid and ask must have the same shape")
    _check_bands(bid, ask)
    below = np.where(pred < bid, pred - bid, 0.0)
    above = np.where(pred > ask, pred - ask, 0.0)
    return float(np.mean(below**2 + above**2))


def loss_and_dpred(kind: str, pred: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its derivative with respect to ``pred``."""
    if kind == "mse":
        target = np.asarray(target, dtype=float)
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
        r = pred - target
    elif kind == "bidask":
        bid, ask = (np.asarray(v, dtype=float) for v in target)
        if not (pred.shape == bid.shape == ask.shape):
            raise ShapeError("pred, bid and ask must have the same shape")
        _check_bands(bid, ask)
        # inside the band (boundaries included) the residual is 0
        r = np.where(pred < bid, pred - bid, 0.0) + np.where(pred > ask, pred - ask, 0.0)
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return float(np.mean(r * r)), 2.0 * r / r.size


def grad(net: Network, inputs, targets, loss: str = "mse"):
    """Loss value and gradients (ordered as :meth:`Network.params`) of the batch-mean loss."""
    x2, _ = _as_batch(net, inputs)
    hs, zs = _forward_cache(net, x2)
    value, dpred = loss_and_dpred(loss, hs[-1], targets)
    return value, _backward(net, hs, zs, dpred)[0]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.step_count < 0 or self.lr <= 0:
            raise ValueError("need step_count >= 0 and lr > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, lr, beta1, beta2, epsilon)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list, AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and state."""
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_params.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t, state.lr, b1, b2, state.epsilon)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 200
    batch_size: int = 30
    lr: float = 1e-3
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


def train(net: Network, inputs, targets, cfg: TrainingConfig = TrainingConfig(),
          loss: str = "mse") -> tuple[Network, np.ndarray]:
    """Mini-batch Adam; returns the trained network and the per-epoch mean loss.

    For ``loss="bidask"`` the targets are a ``(bid, ask)`` pair of arrays.
    """
    x, _ = _as_batch(net, inputs)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if loss == "bidask":
        bid, ask = (np.asarray(v, dtype=float).reshape(n, -1) for v in targets)
        _check_bands(bid, ask)
        y = np.stack([bid, ask], axis=0)
    else:
        y = np.asarray(targets, dtype=float).reshape(n, -1)[None]
    if y.shape[2] != net.dims[-1]:
        raise ShapeError(f"targets have {y.shape[2]} columns, network outputs {net.dims[-1]}")
    if cfg.lr == 0:
        trace = [loss_and_dpred(loss, forward(net, x), y[0] if loss == "mse" else (y[0], y[1]))[0]]
        return net.with_meta(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=0.0), np.array(trace * cfg.epochs)

    rng = np.random.default_rng(cfg.seed)
    params = [p.copy() for p in net.params()]
    state = AdamState.zeros_like(params, lr=cfg.lr)
    trace = np.empty(cfg.epochs)
    work = net
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tgt = y[0, idx] if loss == "mse" else (y[0, idx], y[1, idx])
            value, grads = grad(work, x[idx], tgt, loss)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            total += value * idx.size
            params, state = adam_step(params, grads, state)
            work = work.with_params(params)
        trace[epoch] = total / n
    meta = {"epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.lr, "train_seed": cfg.seed}
    return work.with_meta(**meta), trace


# ---------------------------------------------------------------------------
# exact linear maps with ReLU networks
# ---------------------------------------------------------------------------


def linear_embed(A, L: int, dims: Optional[Sequence[int]] = None) -> Network:
    """Zero-bias ReLU network of depth ``L`` whose forward pass is exactly x -> A x.

    Each hidden layer carries (x+, x-) in its first 2d units; the last layer
    applies A [I, -I, 0].
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    p, d = A.shape
    if L < 2:
        raise ValueError("depth must be at least 2")
    if dims is None:
        dims = (d,) + (2 * d,) * (L - 1) + (p,)
    dims = tuple(int(n) for n in dims)
    if len(dims) != L + 1 or dims[0] != d or dims[-1] != p:
        raise ShapeError(f"dims {dims} inconsistent with A of shape {A.shape} and L={L}")
    if any(n < 2 * d for n in dims[1:-1]):
        raise ShapeError("every hidden layer needs at least 2d units")

    def split(n):  # [I, -I, 0] of shape d x n
        m = np.zeros((d, n))
        m[:, :d] = np.eye(d)
        m[:, d:2 * d] = -np.eye(d)
        return m

    weights = [split(dims[1]).T]
    for i in range(2, L):
        weights.append(split(dims[i]).T @ split(dims[i - 1]))
    weights.append(A @ split(dims[L - 1]))
    biases = [np.zeros(n) for n in dims[1:]]
    return Network(dims, tuple(weights), tuple(biases), "relu")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _floats(values) -> str:
    arr = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(arr)):
        raise SerializationError("cannot serialize non-finite parameters")
    return "[" + ", ".join(format(v, ".17g") for v in arr) + "]"


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp so repeated runs write identical files
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.isoformat(timespec="seconds")


def serialize(net: Network) -> str:
    """JSON weights document; floats carry 17 significant digits, so the round trip is exact."""
    meta = net.meta
    header = {
        "format_version": FORMAT_VERSION,
        "dims": list(net.dims),
        "activation": net.activation,
        "seed": meta.get("seed"),
        "epochs": meta.get("epochs"),
        "batch_size": meta.get("batch_size"),
        "lr": meta.get("lr"),
        "created_at": meta.get("created_at", _timestamp()),
    }
    lines = ["{"]
    for key, value in header.items():
        lines.append(f"  {json.dumps(key)}: {json.dumps(value)},")
    lines.append('  "weights": [')
    lines.append(",\n".join(f"    {_floats(w)}" for w in net.weights))
    lines.append("  ],")
    lines.append('  "biases": [')
    lines.append(",\n".join(f"    {_floats(b)}" for b in net.biases))
    lines.append("  ],")
    if net.input_lo is None:
        lines.append('  "input_norm": null')
    else:
        lines.append(f'  "input_norm": {{"lo": {_floats(net.input_lo)}, "hi": {_floats(net.input_hi)}}}')
    lines.append("}")
    return "\n".join(lines) + "\n"


def deserialize(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SerializationError(f"malformed weights document: {exc}") from exc
    if not isinstance(doc, dict):
        raise SerializationError("weights document must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise SerializationError(f"unsupported format_version {version!r}")
    missing = {"dims", "activation", "weights", "biases", "input_norm"} - doc.keys()
    if missing:
        raise SerializationError(f"missing fields {sorted(missing)}")
    dims = tuple(doc["dims"])
    try:
        weights = tuple(np.array(w, dtype=float).reshape(dims[i + 1], dims[i])
                        for i, w in enumerate(doc["weights"]))
        biases = tuple(np.array(b, dtype=float) for b in doc["biases"])
        norm = doc["input_norm"]
        lo = hi = None
        if norm is not None:
            lo, hi = np.array(norm["lo"], dtype=float), np.array(norm["hi"], dtype=float)
        meta = {k: doc[k] for k in ("seed", "epochs", "batch_size", "lr", "created_at")
                if doc.get(k) is not None}
        return Network(dims, weights, biases, doc["activation"], lo, hi, meta)
    except (ValueError, IndexError, KeyError, TypeError) as exc:
        raise SerializationError(f"inconsistent weights document: {exc}") from exc


def save(net: Network, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(net))


def load(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return deserialize(fh.read())
