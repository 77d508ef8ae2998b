"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Covers exactly the operations the visuomotor network needs: affine maps,
valid convolution, rectifier, sigmoid/tanh gates, exp/log, log-softmax,
reductions, slicing/gather and elementwise arithmetic with broadcasting.
dtype follows the inputs (float32 for training, float64 for grad checks).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad and _grad_enabled
        self.grad = None
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad needs a scalar")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = _accumulate(self.grad, grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operators used in losses
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)


def _accumulate(current, g):
    if current is None:
        return g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    current += g
    return current


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum g down to the given shape (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=tuple(p for p in parents
                                                         if p.requires_grad),
                  backward=backward if req else None)


# --- elementwise -----------------------------------------------------------

def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.grad = _accumulate(b.grad, _unbroadcast(g, b.data.shape))
    return _node(out_data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.grad = _accumulate(b.grad, _unbroadcast(g * a.data, b.data.shape))
    return _node(out_data, (a, b), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        x.grad = _accumulate(x.grad, g * mask)
    return _node(x.data * mask, (x,), backward)


def sigmoid(x):
    s = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        x.grad = _accumulate(x.grad, g * s * (1.0 - s))
    return _node(s, (x,), backward)


def tanh(x):
    t = np.tanh(x.data)

    def backward(g):
        x.grad = _accumulate(x.grad, g * (1.0 - t * t))
    return _node(t, (x,), backward)


def exp(x):
    e = np.exp(x.data)

    def backward(g):
        x.grad = _accumulate(x.grad, g * e)
    return _node(e, (x,), backward)


def log(x):
    def backward(g):
        x.grad = _accumulate(x.grad, g / x.data)
    return _node(np.log(x.data), (x,), backward)


def minimum(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    take_a = a.data <= b.data

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, _unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b.grad = _accumulate(b.grad, _unbroadcast(g * ~take_a, b.data.shape))
    return _node(np.where(take_a, a.data, b.data), (a, b), backward)


def clip(x, lo, hi):
    """Clamp to constants; gradient passes only inside the interval."""
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x.grad = _accumulate(x.grad, g * inside)
    return _node(np.clip(x.data, lo, hi), (x,), backward)


# --- linear algebra --------------------------------------------------------

def matmul(a, b):
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.grad = _accumulate(a.grad, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.grad = _accumulate(b.grad, _unbroadcast(gb, b.data.shape))
    return _node(out_data, (a, b), backward)


def affine(x, w, b):
    """x @ w + b over the last axis."""
    out_data = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            x.grad = _accumulate(x.grad, g @ w.data.T)
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.data.shape[-1])
            w.grad = _accumulate(w.grad, x2.T @ g2)
        if b.requires_grad:
            b.grad = _accumulate(b.grad,
                                 g.reshape(-1, g.shape[-1]).sum(axis=0))
    return _node(out_data, (x, w, b), backward)


def _im2col(x, kh, kw, stride):
    sw = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    sw = sw[:, ::stride, ::stride]                  # (B, OH, OW, C, KH, KW)
    return np.ascontiguousarray(sw.transpose(0, 1, 2, 4, 5, 3))


def conv2d(x, w, b, stride):
    """Valid convolution; x (B,H,W,C), w (KH,KW,C,F), b (F)."""
    kh, kw, c, f = w.data.shape
    col = _im2col(x.data, kh, kw, stride)           # (B, OH, OW, KH, KW, C)
    bsz, oh, ow = col.shape[:3]
    col2 = col.reshape(bsz * oh * ow, kh * kw * c)
    out_data = (col2 @ w.data.reshape(-1, f) + b.data).reshape(bsz, oh, ow, f)

    def backward(g):
        g2 = g.reshape(-1, f)
        if w.requires_grad:
            # recompute the column matrix rather than keeping it alive
            colb = _im2col(x.data, kh, kw, stride).reshape(-1, kh * kw * c)
            w.grad = _accumulate(w.grad, (colb.T @ g2).reshape(w.data.shape))
        if b.requires_grad:
            b.grad = _accumulate(b.grad, g2.sum(axis=0))
        if x.requires_grad:
            dcol = (g2 @ w.data.reshape(-1, f).T) \
                .reshape(bsz, oh, ow, kh, kw, c)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, i:i + stride * oh:stride,
                       j:j + stride * ow:stride, :] += dcol[:, :, :, i, j, :]
            x.grad = _accumulate(x.grad, dx)
    return _node(out_data, (x, w, b), backward)


# --- shape & selection -----------------------------------------------------

def reshape(x, shape):
    old = x.data.shape

    def backward(g):
        x.grad = _accumulate(x.grad, g.reshape(old))
    return _node(x.data.reshape(shape), (x,), backward)


def narrow(x, start, stop):
    """Slice columns [start:stop] of a 2-D tensor."""
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x.grad = _accumulate(x.grad, full)
    return _node(x.data[:, start:stop], (x,), backward)


def concat_cols(a, b):
    """Concatenate two 2-D tensors along columns."""
    na = a.data.shape[1]

    def backward(g):
        if a.requires_grad:
            a.grad = _accumulate(a.grad, g[:, :na])
        if b.requires_grad:
            b.grad = _accumulate(b.grad, g[:, na:])
    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def gather_cols(x, idx):
    """Pick one column per row of a 2-D tensor: out[i] = x[i, idx[i]]."""
    idx = np.asarray(idx)
    rows = np.arange(x.data.shape[0])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        x.grad = _accumulate(x.grad, full)
    return _node(x.data[rows, idx], (x,), backward)


# --- reductions & softmax --------------------------------------------------

def tsum(x, axis=None):
    def backward(g):
        if axis is None:
            x.grad = _accumulate(x.grad, np.broadcast_to(g, x.data.shape)
                                 .astype(x.data.dtype).copy())
        else:
            x.grad = _accumulate(x.grad,
                                 np.broadcast_to(np.expand_dims(g, axis),
                                                 x.data.shape).copy())
    return _node(x.data.sum(axis=axis), (x,), backward)


def tmean(x):
    n = x.data.size

    def backward(g):
        x.grad = _accumulate(x.grad,
                             np.broadcast_to(g / n, x.data.shape)
                             .astype(x.data.dtype).copy())
    return _node(x.data.mean(), (x,), backward)


def log_softmax(x):
    """Stable log-softmax over the last axis."""
    shift = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=-1, keepdims=True))
    out_data = shift - lse

    def backward(g):
        softmax = np.exp(out_data)
        x.grad = _accumulate(x.grad,
                             g - softmax * g.sum(axis=-1, keepdims=True))
    return _node(out_data, (x,), backward)
