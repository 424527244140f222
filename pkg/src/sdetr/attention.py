"""Scaled dot-product attention and its instrumented cost accounting.

The two products P = Q.K^T and A = P.V are the only operations counted:
one MAC per scalar multiply-add, and live-element tracking for the P and
A intermediates. Softmax exponentials and the 1/sqrt(d) scaling are not
counted. ``attention_trace`` exposes the raw trilinear traversal of the
same two products with no softmax and no scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionDims:
    """Geometry of one attention call.

    q_rows/kv_rows: token counts of the query and key/value sides;
    qk_width: shared feature width of Q and K; v_width: feature width of
    V (and of the output); n_heads: feature-group count.
    """

    q_rows: int
    kv_rows: int
    qk_width: int
    v_width: int
    n_heads: int = 1

    def validate(self):
        for name in ("q_rows", "kv_rows", "qk_width", "v_width", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"AttentionDims.{name} must be >= 1, got {getattr(self, name)}")
        if self.qk_width % self.n_heads != 0:
            raise ValueError(
                f"head count must divide the Q/K width: width={self.qk_width}, n_heads={self.n_heads}"
            )
        if self.v_width % self.n_heads != 0:
            raise ValueError(
                f"head count must divide the V width: width={self.v_width}, n_heads={self.n_heads}"
            )


class CostCounters:
    """Execution-side tally: MACs plus live/peak P and A elements."""

    def __init__(self):
        self.macs = 0
        self.peak_intermediate = 0
        self.peak_p_elems = 0
        self.peak_a_elems = 0
        self._live_p = 0
        self._live_a = 0

    def add_macs(self, n):
        self.macs += int(n)

    def alloc_p(self, n):
        self._live_p += int(n)
        self.peak_p_elems = max(self.peak_p_elems, self._live_p)
        self._bump()

    def free_p(self, n):
        self._live_p -= int(n)

    def alloc_a(self, n):
        self._live_a += int(n)
        self.peak_a_elems = max(self.peak_a_elems, self._live_a)
        self._bump()

    def free_a(self, n):
        self._live_a -= int(n)

    def _bump(self):
        self.peak_intermediate = max(self.peak_intermediate, self._live_p + self._live_a)

    def __repr__(self):
        return (f"CostCounters(macs={self.macs}, peak_intermediate={self.peak_intermediate}, "
                f"peak_p={self.peak_p_elems}, peak_a={self.peak_a_elems})")


def _counted_matmul(a: Tensor, b: Tensor, counters) -> Tensor:
    """Differentiable matmul whose forward value comes from the active
    counting kernel; MACs land in ``counters``."""
    product, macs = kernels.counted_matmul(a.data, b.data)
    counters.add_macs(macs)
    return T.matmul(a, b, _product=product)


def attention_forward(q, k, v, n_heads=1, counters=None, dims_check=True):
    """Multi-head scaled dot-product attention on 2-D tensors.

    Per head g: softmax(Q_g.K_g^T / sqrt(w/n)).V_g, heads concatenated on
    the feature axis. When ``counters`` is given, the two products run
    through the counting kernel and the per-head P allocations are
    tracked as simultaneously live (heads are batched, as a framework
    would hold them).
    """
    q, k, v = T._as_tensor(q), T._as_tensor(k), T._as_tensor(v)
    h, w = q.shape
    hp, wk = k.shape
    wp = v.shape[1]
    if wk != w:
        raise ValueError(f"Q and K widths differ: {q.shape} vs {k.shape}")
    if v.shape[0] != hp:
        raise ValueError(f"K and V row counts differ: {k.shape} vs {v.shape}")
    if dims_check:
        AttentionDims(h, hp, w, wp, n_heads).validate()

    dk = w // n_heads
    scale = 1.0 / np.sqrt(dk)
    qs = split_heads(q, n_heads)
    ks = split_heads(k, n_heads)
    vs = split_heads(v, n_heads)

    if counters is None:
        scores = [T.matmul(qs[g], T.transpose(ks[g])) * scale for g in range(n_heads)]
        heads = [T.matmul(T.softmax_rows(scores[g]), vs[g]) for g in range(n_heads)]
        return heads[0] if n_heads == 1 else T.concat_cols(heads)

    # Instrumented path: all head P matrices live together, then A.
    scores = []
    for g in range(n_heads):
        counters.alloc_p(h * hp)
        scores.append(_counted_matmul(qs[g], T.transpose(ks[g]), counters) * scale)
    counters.alloc_a(h * wp)
    heads = [_counted_matmul(T.softmax_rows(s), vg, counters) for s, vg in zip(scores, vs)]
    counters.free_p(n_heads * h * hp)
    out = heads[0] if n_heads == 1 else T.concat_cols(heads)
    counters.free_a(h * wp)
    return out


def attention_trace(q, k, v):
    """Raw trilinear product: out[r,c] = sum_j sum_i Q[r,j] K[i,j] V[i,c].

    Literal traversal of the two attention products with no softmax and
    no scaling; numerically a diagnostic, not a training path.
    """
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    k = np.asarray(k.data if isinstance(k, Tensor) else k, dtype=np.float64)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention_trace expects 2-D arrays")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError(
            f"attention_trace shape mismatch: Q {q.shape}, K {k.shape}, V {v.shape}"
        )
    return kernels.trilinear_trace(q, k, v)


def split_heads(x, n):
    """Split the feature axis into ``n`` contiguous column groups."""
    x = T._as_tensor(x)
    t, w = x.shape
    if w % n != 0:
        raise ValueError(f"head count must divide the feature width: width={w}, n_heads={n}")
    if n == 1:
        return [x]
    step = w // n
    return [T.cols(x, g * step, (g + 1) * step) for g in range(n)]


def merge_heads(parts):
    """Inverse of :func:`split_heads`; column-wise concatenation."""
    parts = list(parts)
    if len(parts) == 1:
        return parts[0]
    return T.concat_cols(parts)


def window_partition(h_img, w_img, win):
    """Map row-major pixel tokens of an h x w grid into win x win squares.

    Returns (window_id, within_window_id), one entry per pixel. Window
    ids run row-major over the window grid; within-window ids run
    row-major inside each square.
    """
    if win < 1 or h_img % win != 0 or w_img % win != 0:
        raise ValueError(
            f"window size must divide both image sides: image {h_img}x{w_img}, win {win}"
        )
    rows = np.arange(h_img).repeat(w_img)
    cols_ = np.tile(np.arange(w_img), h_img)
    win_id = (rows // win) * (w_img // win) + cols_ // win
    within_id = (rows % win) * win + cols_ % win
    return win_id, within_id


def window_permutation(h_img, w_img, win):
    """Permutation p with grouped[i] = tokens[p[i]]: window-contiguous order."""
    win_id, within_id = window_partition(h_img, w_img, win)
    return np.argsort(win_id * (win * win) + within_id, kind="stable")


def window_departition(h_img, w_img, win):
    """Inverse permutation restoring row-major order from grouped order."""
    perm = window_permutation(h_img, w_img, win)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv
