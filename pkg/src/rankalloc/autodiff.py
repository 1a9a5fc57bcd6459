"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A Value wraps an ndarray plus its gradient; every op records a closure on a
tape that is replayed in reverse topological order by backward().  The tape
is rebuilt on every forward pass, so graphs are always fresh.  Also home to
the Adam optimizer and the versioned npz checkpoint format, since everything
trainable in this package goes through here.
"""

from __future__ import annotations

import json

import numpy as np

_LOG_2PI = float(np.log(2.0 * np.pi))


class Value:
    """Node in the computation graph: float64 data + accumulated gradient."""

    __slots__ = ("data", "grad", "_parents", "_backward", "version")

    def __init__(self, data, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self._parents = _parents
        self._backward = _backward
        # bumped by the optimizer / checkpoint loads; inference caches key on it
        self.version = 0

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Value(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Value:
    """Wrap data as a leaf with no parents (gradient is computed but unused)."""
    return data if isinstance(data, Value) else Value(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Value:
    a, b = constant(a), constant(b)
    out = Value(a.data + b.data, (a, b))

    def bw(o):
        a.grad += _unbroadcast(o.grad, a.data.shape)
        b.grad += _unbroadcast(o.grad, b.data.shape)

    out._backward = bw
    return out


def sub(a, b) -> Value:
    a, b = constant(a), constant(b)
    out = Value(a.data - b.data, (a, b))

    def bw(o):
        a.grad += _unbroadcast(o.grad, a.data.shape)
        b.grad -= _unbroadcast(o.grad, b.data.shape)

    out._backward = bw
    return out


def mul(a, b) -> Value:
    a, b = constant(a), constant(b)
    out = Value(a.data * b.data, (a, b))

    def bw(o):
        a.grad += _unbroadcast(o.grad * b.data, a.data.shape)
        b.grad += _unbroadcast(o.grad * a.data, b.data.shape)

    out._backward = bw
    return out


def neg(a) -> Value:
    a = constant(a)
    out = Value(-a.data, (a,))

    def bw(o):
        a.grad -= o.grad

    out._backward = bw
    return out


def matmul(a, b) -> Value:
    a, b = constant(a), constant(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul expects (m,k)@(k,n), got {a.data.shape} @ {b.data.shape}"
        )
    out = Value(a.data @ b.data, (a, b))

    def bw(o):
        a.grad += o.grad @ b.data.T
        b.grad += a.data.T @ o.grad

    out._backward = bw
    return out


def exp(a) -> Value:
    a = constant(a)
    out = Value(np.exp(a.data), (a,))

    def bw(o):
        a.grad += o.grad * o.data

    out._backward = bw
    return out


def log(a) -> Value:
    a = constant(a)
    out = Value(np.log(a.data), (a,))

    def bw(o):
        a.grad += o.grad / a.data

    out._backward = bw
    return out


def tanh(a) -> Value:
    a = constant(a)
    out = Value(np.tanh(a.data), (a,))

    def bw(o):
        a.grad += o.grad * (1.0 - o.data * o.data)

    out._backward = bw
    return out


def sigmoid(a) -> Value:
    a = constant(a)
    out = Value(1.0 / (1.0 + np.exp(-a.data)), (a,))

    def bw(o):
        a.grad += o.grad * o.data * (1.0 - o.data)

    out._backward = bw
    return out


def silu(a) -> Value:
    """x * sigmoid(x); derivative s(x) * (1 + x * (1 - s(x)))."""
    a = constant(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Value(a.data * s, (a,))

    def bw(o):
        a.grad += o.grad * s * (1.0 + a.data * (1.0 - s))

    out._backward = bw
    return out


def square(a) -> Value:
    a = constant(a)
    out = Value(a.data * a.data, (a,))

    def bw(o):
        a.grad += o.grad * 2.0 * a.data

    out._backward = bw
    return out


def vsum(a, axis=None) -> Value:
    a = constant(a)
    out = Value(a.data.sum(axis=axis), (a,))

    def bw(o):
        g = o.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        a.grad += np.broadcast_to(g, a.data.shape)

    out._backward = bw
    return out


def vmean(a) -> Value:
    a = constant(a)
    n = a.data.size
    out = Value(a.data.mean(), (a,))

    def bw(o):
        a.grad += np.broadcast_to(o.grad / n, a.data.shape)

    out._backward = bw
    return out


def minimum(a, b) -> Value:
    """Elementwise min; gradient routes to the smaller input (ties to `a`)."""
    a, b = constant(a), constant(b)
    take_a = a.data <= b.data
    out = Value(np.where(take_a, a.data, b.data), (a, b))

    def bw(o):
        a.grad += _unbroadcast(o.grad * take_a, a.data.shape)
        b.grad += _unbroadcast(o.grad * ~take_a, b.data.shape)

    out._backward = bw
    return out


def clip(a, lo: float, hi: float) -> Value:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    a = constant(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = Value(np.clip(a.data, lo, hi), (a,))

    def bw(o):
        a.grad += o.grad * inside

    out._backward = bw
    return out


def concat(parts, axis=1) -> Value:
    parts = [constant(p) for p in parts]
    out = Value(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]

    def bw(o):
        offset = 0
        for p, s in zip(parts, sizes):
            idx = [slice(None)] * o.grad.ndim
            idx[axis] = slice(offset, offset + s)
            p.grad += o.grad[tuple(idx)]
            offset += s

    out._backward = bw
    return out


def backward(root: Value):
    """Seed d(root)/d(root) = 1 and propagate through the tape in reverse."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.data.shape}")

    topo: list[Value] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)


# === optimizer ===


class Adam:
    """Adam with bias correction: p -= lr * m_hat / (sqrt(v_hat) + eps).

    Gradients are cleared after each step; parameter versions are bumped so
    packed inference caches invalidate themselves.
    """

    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params.values()) if isinstance(params, dict) else list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.grad = np.zeros_like(p.data)
            p.version += 1

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self, prefix: str) -> dict:
        """Moment estimates and step count, for checkpoint resume."""
        out = {f"{prefix}.t": np.array(float(self.t))}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m{i}"] = m
            out[f"{prefix}.v{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict, prefix: str):
        self.t = int(arrays[f"{prefix}.t"])
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"{prefix}.m{i}"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"{prefix}.v{i}"], dtype=np.float64)


# === checkpoints ===

CHECKPOINT_FORMAT = 1


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Write named float64 arrays + JSON metadata to an .npz container."""
    meta = dict(meta or {})
    meta["checkpoint_format"] = CHECKPOINT_FORMAT
    np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path):
    """Return (arrays, meta); rejects containers without a format marker."""
    with np.load(path, allow_pickle=False) as zf:
        if "__meta__" not in zf:
            raise ValueError(f"{path}: not a rankalloc checkpoint (missing metadata)")
        meta = json.loads(str(zf["__meta__"]))
        if meta.get("checkpoint_format") != CHECKPOINT_FORMAT:
            raise ValueError(
                f"{path}: unsupported checkpoint format {meta.get('checkpoint_format')}"
            )
        arrays = {k: zf[k] for k in zf.files if k != "__meta__"}
    return arrays, meta


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray):
    """Diagonal Gaussian log density, summed over action dims (pure numpy)."""
    z = (actions - mean) * np.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * _LOG_2PI).sum(axis=-1)
