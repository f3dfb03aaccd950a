"""Dense tensors over numpy with reverse-mode autodiff.

Everything the translation model needs and nothing more: a small tape,
the differentiable primitives (matmul, softmax, layer norm, embedding
lookup, ...), an Adam step, and a finite-difference helper used by the
gradient-check tests. Arrays are float32 by default; building parameters
as float64 switches the whole computation to wide precision, which the
finite-difference checks rely on.
"""

from __future__ import annotations

import threading

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (inference paths)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A numpy array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            # numpy scalar (e.g. a 0-d reduction result): keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse accumulation from a scalar loss node."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # convenience operators, all routed through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents, backward) -> Tensor:
    requires = grad_enabled() and any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out_data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def bw(g):
        _accum(a, g * s)

    return _make(out_data, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batch dimensions broadcast as numpy's @ does."""
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.outer(g, b.data)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    out_data = np.swapaxes(a.data, -1, -2)

    def bw(g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _make(out_data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bw(g):
        _accum(a, g * (a.data > 0))

    return _make(out_data, (a,), bw)


def rowwise_softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted so it never overflows."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse

    def bw(g):
        soft = np.exp(out_data)
        _accum(a, g - soft * g.sum(axis=-1, keepdims=True))

    return _make(out_data, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = gamma.data * xhat + beta.data

    def bw(g):
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.shape))
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx - m1 - xhat * m2))

    return _make(out_data, (x, gamma, beta), bw)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding matrix; ids is an integer array."""
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def bw(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            _accum(table, acc)

    return _make(out_data, (table,), bw)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.data.shape[axis] for p in parts]

    def bw(g):
        offset = 0
        for p, extent in zip(parts, extents):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + extent)
            _accum(p, g[tuple(index)])
            offset += extent

    return _make(out_data, tuple(parts), bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float | None = None) -> Tensor:
    """Write the most-negative finite value (or `value`) where mask is True.

    Used on attention logits before softmax; finite rather than -inf keeps
    the softmax NaN-free.
    """
    if value is None:
        value = float(np.finfo(a.dtype).min)
    out_data = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)

    def bw(g):
        _accum(a, np.where(mask, 0, g))

    return _make(out_data, (a,), bw)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=False)
    if axis is None:
        out_data = np.asarray(out_data, dtype=a.dtype)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(out_data, (a,), bw)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[..., i] = a[..., i, idx[..., i]] - pick one entry along the last axis."""
    idx = np.asarray(idx)
    out_data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            flat = acc.reshape(-1, acc.shape[-1])
            np.add.at(flat, (np.arange(flat.shape[0]), idx.reshape(-1)), g.reshape(-1))
            _accum(a, acc)

    return _make(out_data, (a,), bw)


def adam_step(params: dict, grads: dict, state: dict | None, t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.98,
              eps: float = 1e-9) -> dict:
    """One bias-corrected Adam update, applied in place to `params` arrays.

    `state` is {"m": {...}, "v": {...}} keyed like params; pass None on the
    first call. Returns the (new) state.
    """
    if state is None:
        state = {"m": {k: np.zeros_like(v) for k, v in params.items()},
                 "v": {k: np.zeros_like(v) for k, v in params.items()}}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def finite_difference(loss_fn, arrays: dict, step: float = 1e-4) -> dict:
    """Central finite differences of loss_fn() w.r.t. every entry of `arrays`.

    loss_fn takes no arguments and must read the arrays in place; it is the
    independent check against the tape's analytic gradients, so it should be
    called on float64 data.
    """
    out = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        out[name] = g
    return out
