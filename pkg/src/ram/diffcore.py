"""Minimal differentiable building blocks.

Every layer is written as a forward function that returns ``(output, cache)``
and a backward function that consumes the cache. Inputs may be a single
vector of shape ``(n,)`` or a batch of shape ``(B, n)``; parameter gradients
are summed over the batch. Gradients accumulate additively until an
optimizer step clears them.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(eq=False)
class ParamBlock:
    """A trainable 2-D tensor with its gradient and momentum buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False, repr=False)
    velocity: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.value.ndim != 2:
            raise DimensionError(f"{self.name}: expected 2-D value, got shape {self.value.shape}")
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def uniform_init(name, rows, cols, fan_in, rng, dtype=np.float64):
    r = 1.0 / math.sqrt(fan_in)
    return ParamBlock(name, rng.uniform(-r, r, size=(rows, cols)).astype(dtype))


# ---------------------------------------------------------------- affine ----

def affine_forward(x, weight: ParamBlock, bias: ParamBlock):
    """``y = x W^T + b``. Returns ``(y, cache)``."""
    W, b = weight.value, bias.value
    if x.shape[-1] != W.shape[1] or b.shape != (1, W.shape[0]):
        raise DimensionError(
            f"affine: input {x.shape} / bias {b.shape} incompatible with weight {W.shape}"
        )
    y = x @ W.T + (b[0] if x.ndim == 1 else b)
    return y, (x, weight, bias)


def affine_backward(dy, cache):
    """Accumulate ``dL/dW`` and ``dL/db`` and return ``dL/dx``."""
    if cache is None:
        raise StateError("affine_backward called before affine_forward")
    x, weight, bias = cache
    if dy.shape[-1] != weight.value.shape[0]:
        raise DimensionError(f"affine: output grad {dy.shape} vs weight {weight.value.shape}")
    if dy.ndim == 1:
        weight.grad += np.outer(dy, x)
        bias.grad[0] += dy
    else:
        weight.grad += dy.T @ x
        bias.grad[0] += dy.sum(axis=0)
    return dy @ weight.value


class Linear:
    """Holds the ``W, b`` pair of one affine map."""

    def __init__(self, name, n_in, n_out, rng, dtype=np.float64):
        self.n_in, self.n_out = n_in, n_out
        self.W = uniform_init(f"{name}.W", n_out, n_in, n_in, rng, dtype)
        self.b = uniform_init(f"{name}.b", 1, n_out, n_in, rng, dtype)

    def forward(self, x):
        return affine_forward(x, self.W, self.b)

    def backward(self, dy, cache):
        return affine_backward(dy, cache)

    def blocks(self):
        return [self.W, self.b]


# ---------------------------------------------------------- nonlinearity ----

def rect_forward(x):
    mask = x > 0
    return np.where(mask, x, 0.0).astype(x.dtype, copy=False), mask


def rect_backward(dy, mask):
    # subgradient at exactly 0 is 0
    return dy * mask


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


LOG_CLAMP = 1e-12


def cross_entropy_loss(probs, target):
    """Negative log-likelihood of ``target`` and its gradient w.r.t. the logits.

    ``probs`` is ``(K,)`` with an integer target, or ``(B, K)`` with an integer
    array of targets; the batched loss is the sum over rows.
    """
    target = np.asarray(target)
    K = probs.shape[-1]
    if np.any(target < 0) or np.any(target >= K):
        raise DimensionError(f"target {target} out of range for {K} classes")
    if probs.ndim == 1:
        loss = -math.log(max(probs[int(target)], LOG_CLAMP))
        grad = probs.copy()
        grad[int(target)] -= 1.0
        return loss, grad
    rows = np.arange(probs.shape[0])
    loss = -np.log(np.maximum(probs[rows, target], LOG_CLAMP)).sum()
    grad = probs.copy()
    grad[rows, target] -= 1.0
    return float(loss), grad


# ------------------------------------------------------------------ LSTM ----

@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise DimensionError(f"hidden {self.hidden.shape} != cell {self.cell.shape}")


class LSTMCell:
    """Peephole-free LSTM. Gate rows are ordered input, forget, output, candidate."""

    def __init__(self, name, n_in, n_hidden, rng, dtype=np.float64):
        self.n_in, self.n_hidden = n_in, n_hidden
        fan_in = n_in + n_hidden
        self.Wx = uniform_init(f"{name}.Wx", 4 * n_hidden, n_in, fan_in, rng, dtype)
        self.Wh = uniform_init(f"{name}.Wh", 4 * n_hidden, n_hidden, fan_in, rng, dtype)
        self.b = uniform_init(f"{name}.b", 1, 4 * n_hidden, fan_in, rng, dtype)

    def blocks(self):
        return [self.Wx, self.Wh, self.b]

    def zero_state(self, batch=None, dtype=np.float64):
        shape = (self.n_hidden,) if batch is None else (batch, self.n_hidden)
        return LstmState(np.zeros(shape, dtype), np.zeros(shape, dtype))

    def step(self, x, state: LstmState):
        H = self.n_hidden
        if x.shape[-1] != self.n_in or state.hidden.shape[-1] != H:
            raise DimensionError(
                f"lstm: input {x.shape} / hidden {state.hidden.shape} vs ({self.n_in}, {H})"
            )
        b = self.b.value[0] if x.ndim == 1 else self.b.value
        a = x @ self.Wx.value.T + state.hidden @ self.Wh.value.T + b
        i = sigmoid(a[..., :H])
        f = sigmoid(a[..., H:2 * H])
        o = sigmoid(a[..., 2 * H:3 * H])
        c_hat = np.tanh(a[..., 3 * H:])
        c = f * state.cell + i * c_hat
        tc = np.tanh(c)
        h = o * tc
        cache = (x, state, i, f, o, c_hat, tc)
        return LstmState(h, c), cache

    def backward_step(self, dh, dc, cache):
        """Backprop one step. Returns ``(dx, dh_prev, dc_prev)``."""
        if cache is None:
            raise StateError("lstm backward called before forward")
        x, prev, i, f, o, c_hat, tc = cache
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * c_hat
        df = dc * prev.cell
        dc_hat = dc * i
        dc_prev = dc * f
        da = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dc_hat * (1 - c_hat * c_hat)],
            axis=-1,
        )
        if da.ndim == 1:
            self.Wx.grad += np.outer(da, x)
            self.Wh.grad += np.outer(da, prev.hidden)
            self.b.grad[0] += da
        else:
            self.Wx.grad += da.T @ x
            self.Wh.grad += da.T @ prev.hidden
            self.b.grad[0] += da.sum(axis=0)
        return da @ self.Wx.value, da @ self.Wh.value, dc_prev


# ------------------------------------------------------------- gaussian ----

def gaussian_logprob(sample, mean, sigma):
    """Log-density of an isotropic Gaussian over the last axis.

    Returns ``(logp, dlogp_dmean)``.
    """
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    diff = sample - mean
    d = diff.shape[-1]
    logp = -(diff * diff).sum(axis=-1) / (2 * sigma * sigma) - d * math.log(sigma * math.sqrt(2 * math.pi))
    return logp, diff / (sigma * sigma)


# ------------------------------------------------------------- optimizer ----

class SGDMomentum:
    """``v <- m v + g ; w <- w - lr v``; gradients are cleared after the step."""

    def __init__(self, blocks: Sequence[ParamBlock], learning_rate, momentum=0.9):
        if not learning_rate >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {learning_rate}")
        self.blocks = list(blocks)
        self.learning_rate = learning_rate
        self.momentum = momentum

    def step(self):
        for p in self.blocks:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter block {p.name!r}")
        for p in self.blocks:
            p.velocity *= self.momentum
            p.velocity += p.grad
            p.value -= self.learning_rate * p.velocity
            p.grad[...] = 0.0

    def zero_grad(self):
        for p in self.blocks:
            p.grad[...] = 0.0


def sgd_momentum_step(blocks, learning_rate, momentum):
    SGDMomentum(blocks, learning_rate, momentum).step()


# ------------------------------------------------------------ checkpoint ----
#
# Layout (all integers little-endian):
#   8 bytes   magic b"RAMCKPT\0"
#   u32       format version (1)
#   u32       number of blocks N
#   N times:  u16 name length, utf-8 name, u32 rows, u32 cols
#   payload:  float64 values of each block, row-major, in manifest order

CHECKPOINT_MAGIC = b"RAMCKPT\0"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, blocks: Iterable[ParamBlock]):
    blocks = list(blocks)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blocks))]
    for p in blocks:
        name = p.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name + struct.pack("<II", *p.shape))
    for p in blocks:
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    """Return an ordered ``{name: float64 array}`` mapping."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    manifest = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", data, off)
        name = data[off + 2: off + 2 + ln].decode("utf-8")
        rows, cols = struct.unpack_from("<II", data, off + 2 + ln)
        manifest.append((name, rows, cols))
        off += 2 + ln + 8
    out = {}
    for name, rows, cols in manifest:
        nbytes = rows * cols * 8
        if off + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).copy()
        off += nbytes
    return out


def load_checkpoint(path, blocks: Iterable[ParamBlock]):
    stored = read_checkpoint(path)
    blocks = list(blocks)
    names = [p.name for p in blocks]
    if list(stored) != names:
        raise CheckpointError(f"{path}: block manifest {list(stored)} does not match model {names}")
    for p in blocks:
        if stored[p.name].shape != p.shape:
            raise CheckpointError(f"{path}: {p.name} has shape {stored[p.name].shape}, model expects {p.shape}")
        p.value[...] = stored[p.name]
