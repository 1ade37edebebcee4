"""Minimal neural kernel: linear/Swish stacks with manual backward passes.

Parameters live in a flat name -> float64 array store; gradients use the
same naming. Initialization draws each tensor from its own counter-based
stream keyed by (seed, crc32(name)), so results do not depend on creation
order and are exactly reproducible from the 64-bit seed.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(x):
    return x * sigmoid(x)


def swish_grad(x):
    """d swish / dx = s(x) + x s(x) (1 - s(x))."""
    s = sigmoid(x)
    return s + x * s * (1.0 - s)


@dataclass(frozen=True)
class MlpSpec:
    """Shape/bias/activation description of one linear stack.

    dims chains layer sizes: (d_in, h, d_out) is two linear layers. acts has
    one flag per layer; the default activates every layer but the last, the
    usual [linear -> Swish] stack with a linear head.
    """

    name: str
    dims: tuple
    bias: bool = True
    acts: tuple = ()

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ShapeError("an MLP needs at least one layer")
        if not self.acts:
            object.__setattr__(self, "acts", tuple([True] * (self.n_layers - 1) + [False]))
        if len(self.acts) != self.n_layers:
            raise ShapeError("one activation flag per layer required")

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def d_in(self) -> int:
        return self.dims[0]

    @property
    def d_out(self) -> int:
        return self.dims[-1]

    def weight_name(self, i: int) -> str:
        return f"{self.name}.w{i}"

    def bias_name(self, i: int) -> str:
        return f"{self.name}.b{i}"

    def tensor_names(self):
        names = []
        for i in range(self.n_layers):
            names.append(self.weight_name(i))
            if self.bias:
                names.append(self.bias_name(i))
        return names


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(zlib.crc32(name.encode()))], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def init_mlp(spec: MlpSpec, seed: int, store: dict) -> dict:
    """Glorot-uniform weights, zero biases, written into `store`."""
    for i in range(spec.n_layers):
        d_in, d_out = spec.dims[i], spec.dims[i + 1]
        a = math.sqrt(6.0 / (d_in + d_out))
        rng = _tensor_rng(seed, spec.weight_name(i))
        store[spec.weight_name(i)] = rng.uniform(-a, a, size=(d_in, d_out))
        if spec.bias:
            store[spec.bias_name(i)] = np.zeros(d_out)
    return store


def mlp_forward(x: np.ndarray, store: dict, spec: MlpSpec):
    """Returns (output, cache); cache feeds mlp_backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.d_in:
        raise ShapeError(f"{spec.name}: expected (N, {spec.d_in}) input, got {x.shape}")
    cache = []
    for i in range(spec.n_layers):
        w = store[spec.weight_name(i)]
        z = x @ w
        if spec.bias:
            z = z + store[spec.bias_name(i)]
        if spec.acts[i]:
            cache.append((x, z))
            x = swish(z)
        else:
            cache.append((x, None))
            x = z
    return x, cache


def mlp_backward(dy: np.ndarray, cache, store: dict, spec: MlpSpec, grads: dict) -> np.ndarray:
    """Accumulates parameter gradients into `grads`; returns d loss / d input."""
    for i in range(spec.n_layers - 1, -1, -1):
        x, z = cache[i]
        dz = dy * swish_grad(z) if z is not None else dy
        w = store[spec.weight_name(i)]
        _accumulate(grads, spec.weight_name(i), x.T @ dz)
        if spec.bias:
            _accumulate(grads, spec.bias_name(i), dz.sum(axis=0))
        dy = dz @ w.T
    return dy


def _accumulate(grads: dict, name: str, g: np.ndarray):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)


def zero_like_store(store: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in store.items()}


def finite_diff_check(loss_fn, params: dict, h: float = 1e-5, names=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn(params) must return (scalar loss, gradient dict) and be
    deterministic. Every entry of every (selected) tensor is perturbed.
    """
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise NumericError(f"loss is not finite ({loss}); gradient check aborted")
    worst = 0.0
    for name in sorted(names if names is not None else params.keys()):
        p = params[name]
        analytic = grads.get(name, np.zeros_like(p))
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up, _ = loss_fn(params)
            flat[j] = orig - h
            down, _ = loss_fn(params)
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{j}]")
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 at step 0 to 0 at total_steps."""
    t = min(max(step, 0), total_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class Sgd:
    """SGD with classical momentum: v <- m v + g; p <- p - lr v."""

    store: dict
    lr: float
    momentum: float = 0.9
    total_steps: int = 0  # 0 disables the cosine schedule
    velocity: dict = field(default_factory=dict)

    def step(self, grads: dict, step_index: int = 0):
        lr = cosine_lr(step_index, self.total_steps, self.lr) if self.total_steps else self.lr
        for name, p in self.store.items():
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
                self.velocity[name] = v
            v *= self.momentum
            v += g
            p -= lr * v
        return lr
