"""Dense float64 tensors with reverse-mode differentiation.

A Tensor wraps a C-contiguous float64 numpy array. Operations build a
graph of backward closures; ``backward()`` on a scalar walks it once in
reverse topological order and then consumes it. Leaves created with
``requires_grad=True`` keep their ``.grad`` afterwards.

The operation set is what the detection model needs: matmul, elementwise
arithmetic, row softmax / log-softmax, layer normalization, reshape and
transpose, reductions, row/column gathers. New fused operations (e.g.
convolution) can be added from outside via :func:`from_op`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar. Consumes the graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() called on an already-consumed graph")

        order = _topo_order(self)
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += 1.0

        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

        # Consume: interior nodes drop graph refs and gradients, leaves keep .grad.
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None
                node._consumed = True
        self._consumed = True

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar ---------------------------------------------------------

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _topo_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def from_op(data, parents, backward):
    """Build an op-result node. ``backward(grad)`` must add into parent grads.

    The node participates in differentiation only if some parent requires
    grad; otherwise the closure is dropped and a constant is returned.
    """
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward
        return out
    return Tensor(data)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return from_op(out_data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.data.shape)

    return from_op(out_data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return from_op(out_data, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g / b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)

    return from_op(out_data, (a, b), backward)


def matmul(a, b, _product=None):
    """2-D matrix product. ``_product`` lets callers inject a precomputed
    forward value (e.g. from an instrumented kernel) without changing the
    backward rule."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data if _product is None else _product

    def backward(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return from_op(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.grad += g.reshape(a.data.shape)

    return from_op(out_data, (a,), backward)


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    out_data = a.data.T.copy()

    def backward(g):
        if a.requires_grad:
            a.grad += g.T

    return from_op(out_data, (a,), backward)


def cols(a, j0, j1):
    """Column slice [j0, j1) of a 2-D tensor."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"cols expects a 2-D tensor, got shape {a.shape}")
    out_data = a.data[:, j0:j1].copy()

    def backward(g):
        if a.requires_grad:
            a.grad[:, j0:j1] += g

    return from_op(out_data, (a,), backward)


def concat_cols(parts):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_cols needs at least one tensor")
    out_data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]

    def backward(g):
        j = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p.grad += g[:, j:j + w]
            j += w

    return from_op(out_data, tuple(parts), backward)


def take_rows(a, index):
    """Row gather: out[i] = a[index[i]]."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    out_data = a.data[index].copy()

    def backward(g):
        if a.requires_grad:
            np.add.at(a.grad, index, g)

    return from_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.grad += g * (a.data > 0.0)

    return from_op(out_data, (a,), backward)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a.grad += g * out_data * (1.0 - out_data)

    return from_op(out_data, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad += g * out_data

    return from_op(out_data, (a,), backward)


def log(a):
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad += g / a.data

    return from_op(out_data, (a,), backward)


def tabs(a):
    a = _as_tensor(a)
    out_data = np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a.grad += g * np.sign(a.data)

    return from_op(out_data, (a,), backward)


def maximum(a, b):
    """Elementwise max; on exact ties the gradient goes to the first input."""
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = np.maximum(a.data, b.data)
    a_wins = a.data >= b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * a_wins, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * ~a_wins, b.data.shape)

    return from_op(out_data, (a, b), backward)


def minimum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = np.minimum(a.data, b.data)
    a_wins = a.data <= b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * a_wins, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * ~a_wins, b.data.shape)

    return from_op(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a.grad += g
            elif keepdims:
                a.grad += g
            else:
                a.grad += np.expand_dims(g, axis)

    return from_op(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# row-wise normalizers
# ---------------------------------------------------------------------------

def softmax_rows(a):
    """Row softmax of a 2-D tensor, computed shift-stably."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-D tensor, got shape {a.shape}")
    if np.isnan(a.data).any():
        raise ValueError("softmax_rows: input contains NaN")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            a.grad += out_data * (g - (g * out_data).sum(axis=1, keepdims=True))

    return from_op(out_data, (a,), backward)


def log_softmax_rows(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"log_softmax_rows expects a 2-D tensor, got shape {a.shape}")
    if np.isnan(a.data).any():
        raise ValueError("log_softmax_rows: input contains NaN")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward(g):
        if a.requires_grad:
            a.grad += g - soft * g.sum(axis=1, keepdims=True)

    return from_op(out_data, (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row normalization with learned scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim != 2:
        raise ValueError(f"layer_norm expects a 2-D tensor, got shape {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        gg = g * gain.data
        if x.requires_grad:
            d = x.data.shape[1]
            term = gg - gg.mean(axis=1, keepdims=True) \
                - xhat * (gg * xhat).sum(axis=1, keepdims=True) / d
            x.grad += term * inv
        if gain.requires_grad:
            gain.grad += (g * xhat).sum(axis=0)
        if bias.requires_grad:
            bias.grad += g.sum(axis=0)

    return from_op(out_data, (x, gain, bias), backward)


def weighted_cross_entropy(logits, targets, class_weights):
    """Weighted-mean cross entropy over rows, fused for stability.

    loss = sum_i w[t_i] * (-log softmax(logits)_i[t_i]) / sum_i w[t_i]
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    weights = np.asarray(class_weights, dtype=np.float64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(
            f"cross entropy shape mismatch: logits {logits.shape}, targets {targets.shape}"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = logits.shape[0]
    w = weights[targets]
    wsum = w.sum()
    out_data = -(w * logp[np.arange(n), targets]).sum() / wsum

    def backward(g):
        if logits.requires_grad:
            soft = np.exp(logp)
            d = soft * w[:, None]
            d[np.arange(n), targets] -= w
            logits.grad += (float(g) / wsum) * d

    return from_op(np.float64(out_data), (logits,), backward)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate <= 0.0:
        return x
    x = _as_tensor(x)
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float


def grad_check(f, x, eps=1e-5):
    """Compare the analytic gradient of scalar ``f`` at ``x`` against central
    differences, coordinate by coordinate.

    Relative error per coordinate: |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = _as_tensor(x)
    base = x.data.copy()

    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check expects f to return a scalar Tensor")
    out.backward()
    analytic = probe.grad.reshape(-1).copy()

    numeric = np.empty_like(analytic)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(base)).item()
        flat[i] = orig - eps
        fm = f(Tensor(base)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return GradCheckResult(
        max_rel_error=float(rel[worst]),
        worst_index=worst,
        analytic=float(analytic[worst]),
        numeric=float(numeric[worst]),
    )


def math_isclose(a, b, rel=1e-12):
    return math.isclose(a, b, rel_tol=rel, abs_tol=rel)
