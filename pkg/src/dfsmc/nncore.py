"""Small float64 neural-network kernel with hand-written backward passes.

Feature maps are numpy arrays shaped (N, C, H, W) (a single (C, H, W) map is
accepted by the functional ``conv2d``). Every layer caches what its backward
pass needs during ``forward``; ``backward`` takes dL/d(output), accumulates
parameter gradients into ``grads`` and returns dL/d(input).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dfsmc.errors import ShapeError

DTYPE = np.float64


# ---------------------------------------------------------------------------
# convolution

@dataclass
class Kernel:
    weight: np.ndarray  # (out_ch, in_ch, m, n)
    bias: np.ndarray    # (out_ch,)

    @property
    def size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                   padding: int = 0) -> np.ndarray:
    """Valid cross-correlation of a zero-padded batch:
    out[o, s, t] = sum_c sum_a sum_b x[c, s+a, t+b] * w[o, c, a, b] + bias[o]."""
    xp = _pad(x, padding)
    m, n = weight.shape[2:]
    if xp.shape[1] != weight.shape[1]:
        raise ShapeError(f"input has {xp.shape[1]} channels, kernel expects {weight.shape[1]}")
    if m > xp.shape[2] or n > xp.shape[3]:
        raise ShapeError(f"kernel {m}x{n} larger than input {xp.shape[2]}x{xp.shape[3]}")
    win = sliding_window_view(xp, (m, n), axis=(2, 3))  # N, C, S', T', m, n
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray,
                    padding: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d input, d weight, d bias)."""
    xp = _pad(x, padding)
    m, n = weight.shape[2:]
    win = sliding_window_view(xp, (m, n), axis=(2, 3))
    dw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    db = grad_out.sum(axis=(0, 2, 3))
    gp = np.pad(grad_out, ((0, 0), (0, 0), (m - 1, m - 1), (n - 1, n - 1)))
    gwin = sliding_window_view(gp, (m, n), axis=(2, 3))  # N, O, S, T, m, n
    flipped = weight[:, :, ::-1, ::-1]
    dxp = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), dw, db


def conv2d(x: np.ndarray, k: Kernel, padding: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return conv2d_forward(x[None], k.weight, k.bias, padding)[0]
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (C,S,T) or (N,C,S,T), got shape {x.shape}")
    return conv2d_forward(x, k.weight, k.bias, padding)


# ---------------------------------------------------------------------------
# elementwise / pooling / dense

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pooling over the last two axes.

    Returns (pooled, argmax) where argmax indexes the window in row-major order,
    first maximum winning ties."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    win = x.reshape(*lead, h // 2, 2, w // 2, 2)
    win = np.moveaxis(win, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def maxpool2x2_backward(grad_out: np.ndarray, arg: np.ndarray) -> np.ndarray:
    *lead, hh, ww = grad_out.shape
    win = np.zeros((*lead, hh, ww, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, arg[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(*lead, hh, ww, 2, 2)
    return np.moveaxis(win, -2, -3).reshape(*lead, hh * 2, ww * 2)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(-2, -1))


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """y = x W^T + b with W shaped (out, in)."""
    return x @ weight.T + bias


def softmax(v: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    v = np.asarray(v, dtype=DTYPE)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, true_index: int) -> float:
    return float(-math.log(probs[true_index]))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# layer objects

class Module:
    """Base for layers and blocks: own parameters plus ordered child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: list[tuple[str, Module]] = []

    def add(self, name: str, module: "Module") -> "Module":
        self.children.append((name, module))
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children:
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            yield prefix + k, self.grads[k]
        for name, child in self.children:
            yield from child.named_grads(f"{prefix}{name}.")

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)
        for _, child in self.children:
            child.zero_grad()

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Conv2D(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, padding: int = 0,
                 bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        self.padding = padding
        shape = (out_ch, in_ch, k, k)
        if rng is None:
            self.params["w"] = np.zeros(shape)
        else:
            self.params["w"] = glorot_uniform(rng, shape, in_ch * k * k, out_ch * k * k)
        if bias:
            self.params["b"] = np.zeros(out_ch)
        self.zero_grad()
        self._x = None

    @property
    def kernel(self) -> Kernel:
        w = self.params["w"]
        return Kernel(w, self.params.get("b", np.zeros(w.shape[0])))

    def forward(self, x):
        self._x = x
        return conv2d_forward(x, self.params["w"], self.params.get("b"), self.padding)

    def backward(self, grad):
        dx, dw, db = conv2d_backward(self._x, self.params["w"], grad, self.padding)
        self.grads["w"] += dw
        if "b" in self.params:
            self.grads["b"] += db
        return dx


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


class Identity(Module):
    def forward(self, x):
        return x

    def backward(self, grad):
        return grad


class MaxPool2x2(Module):
    def forward(self, x):
        out, self._arg = maxpool2x2(x)
        return out

    def backward(self, grad):
        return maxpool2x2_backward(grad, self._arg)


class GlobalAvgPool(Module):
    def forward(self, x):
        self._shape = x.shape
        return global_avg_pool(x)

    def backward(self, grad):
        h, w = self._shape[-2:]
        return np.broadcast_to(grad[..., None, None] / (h * w), self._shape).copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        if rng is None:
            self.params["w"] = np.zeros((n_out, n_in))
        else:
            self.params["w"] = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
        self.params["b"] = np.zeros(n_out)
        self.zero_grad()

    def forward(self, x):
        self._x = x
        return linear(x, self.params["w"], self.params["b"])

    def backward(self, grad):
        self.grads["w"] += grad.T @ self._x
        self.grads["b"] += grad.sum(axis=0)
        return grad @ self.params["w"]


class Softmax(Module):
    def forward(self, x):
        self._s = softmax(x)
        return self._s

    def backward(self, grad):
        s = self._s
        return s * (grad - (grad * s).sum(axis=-1, keepdims=True))


class Sequential(Module):
    def __init__(self, layers: list[tuple[str, Module]] | None = None):
        super().__init__()
        for name, layer in layers or []:
            self.add(name, layer)

    def forward(self, x):
        for _, layer in self.children:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for _, layer in reversed(self.children):
            grad = layer.backward(grad)
        return grad


# ---------------------------------------------------------------------------
# optimisation

def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             velocity: dict[str, np.ndarray], lr: float, momentum: float = 0.0,
             frozen: frozenset[str] = frozenset()) -> None:
    """In-place momentum SGD: v <- momentum*v - lr*g ; p <- p + v."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v -= lr * g
        p += v
