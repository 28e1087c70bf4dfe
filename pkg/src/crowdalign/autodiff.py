"""Small reverse-mode autodiff over float64 numpy arrays.

A Tensor wraps an ndarray plus a closure that maps the output gradient to
parent gradients.  Graphs are built per step and discarded; backward() runs
an iterative topological sweep so deep graphs cannot hit the recursion limit.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "parents", "bwd")

    def __init__(self, data, parents=(), bwd=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.bwd is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node.bwd(node.grad)):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # structural ops route through the module-level functions
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent shape."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.data.shape),
                             _unbroadcast(g * a.data, b.data.shape)))


def square(a: Tensor) -> Tensor:
    return Tensor(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return Tensor(a.data @ b.data, (a, b),
                  lambda g: (g @ b.data.T, a.data.T @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(a.data * mask, (a,), lambda g: (g * mask,))


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = stable_sigmoid(a.data)
    return Tensor(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor(y, (a,), lambda g: (g * (1.0 - y * y),))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) computed without overflow
    y = np.logaddexp(0.0, a.data)
    return Tensor(y, (a,), lambda g: (g * stable_sigmoid(a.data),))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)
    return Tensor(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def tsum(a: Tensor) -> Tensor:
    return Tensor(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.data.shape),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor(a.data.mean(), (a,),
                  lambda g: (np.broadcast_to(g / n, a.data.shape),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def grl(a: Tensor, factor: float) -> Tensor:
    """Gradient reversal: identity forward, -factor * g backward."""
    return Tensor(a.data, (a,), lambda g: (grl_backward(g, factor),))


def grl_backward(g, factor: float):
    return -factor * np.asarray(g)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: int = 1) -> Tensor:
    """Stride-1 cross-correlation on NCHW input with zero padding."""
    co, ci, kh, kw = w.data.shape
    if x.data.ndim != 4 or x.data.shape[1] != ci:
        raise ValueError(f"conv2d input {x.data.shape} does not match kernel {w.data.shape}")
    if pad > kh - 1 or pad > kw - 1:
        raise ValueError("pad must be < kernel size")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bwd(g):
        dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - pad, kh - 1 - pad),
                        (kw - 1 - pad, kw - 1 - pad)))
        gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        wf = w.data[:, :, ::-1, ::-1]
        dx = np.tensordot(gwin, wf, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(np.ascontiguousarray(out), parents, bwd)


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise channel mixing; w has shape (C_out, C_in)."""
    if x.data.ndim != 4 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"conv1x1 input {x.data.shape} does not match weight {w.data.shape}")
    out = np.einsum("oc,nchw->nohw", w.data, x.data)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bwd(g):
        dx = np.einsum("oc,nohw->nchw", w.data, g)
        dw = np.einsum("nohw,nchw->oc", g, x.data)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, bwd)


def avgpool2d(x: Tensor, kh: int, kw: int | None = None) -> Tensor:
    """Non-overlapping average pooling on NCHW input."""
    kw = kh if kw is None else kw
    n, c, h, w = x.data.shape
    if h % kh or w % kw:
        raise ValueError(f"spatial dims ({h}, {w}) not divisible by pool ({kh}, {kw})")
    out = x.data.reshape(n, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))

    def bwd(g):
        return (np.repeat(np.repeat(g, kh, axis=2), kw, axis=3) / (kh * kw),)

    return Tensor(out, (x,), bwd)


class AdamState:
    """Moment accumulators for the adaptive step."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta2: float = 0.999, eps: float = 1e-8,
              beta1: float = 0.0) -> None:
    """One bias-corrected adaptive-moment update, in place.

    beta1 defaults to 0 (momentum-free, second moments only), the network
    training regime; pass beta1=0.9 for a conventional configuration.
    grads may omit entries (treated as zero).
    """
    state.t += 1
    c1 = 1.0 - beta1 ** state.t if beta1 > 0 else 1.0
    c2 = 1.0 - beta2 ** state.t
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        v = state.v[name]
        v *= beta2
        v += (1.0 - beta2) * g * g
        if beta1 > 0:
            m = state.m[name]
            m *= beta1
            m += (1.0 - beta1) * g
            num = m / c1
        else:
            num = g
        w -= lr * num / (np.sqrt(v / c2) + eps)


def check_gradients(build, params: dict, eps: float = 1e-4,
                    fd_build=None) -> float:
    """Max relative error of reverse-mode grads vs central finite differences.

    build maps {name: Tensor} to a scalar Tensor and must be deterministic;
    params holds float64 arrays that are perturbed in place and restored.
    When the graph contains non-conservative pieces (gradient reversal), pass
    fd_build: a plain scalar objective whose true derivative at the base
    point equals what the reversed graph backpropagates.
    """
    tensors = {k: Tensor(v) for k, v in params.items()}
    build(tensors).backward()
    probe = build if fd_build is None else fd_build
    worst = 0.0
    for name, arr in params.items():
        g = tensors[name].grad
        g = np.zeros_like(arr) if g is None else g
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(probe({k: Tensor(v) for k, v in params.items()}).data)
            flat[i] = orig - eps
            lo = float(probe({k: Tensor(v) for k, v in params.items()}).data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(fd), 1e-6)
            worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
