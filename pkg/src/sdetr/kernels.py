"""Hot numeric kernels: numba-jitted loops with a pure-numpy fallback.

The active backend is picked once at import time from the SDETR_KERNELS
environment variable:

    SDETR_KERNELS=numba   require numba (ImportError if missing)
    SDETR_KERNELS=numpy   force the numpy fallback
    SDETR_KERNELS=auto    numba when importable, numpy otherwise (default)

Both implementations of every kernel stay importable regardless of the
active choice, so tests and ``benchmarks/bench_kernels.py`` can compare
them directly.
"""

from __future__ import annotations

import os

import numpy as np

_REQUESTED = os.environ.get("SDETR_KERNELS", "auto").strip().lower()
if _REQUESTED not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"SDETR_KERNELS must be 'auto', 'numba' or 'numpy', got {_REQUESTED!r}"
    )

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

if _REQUESTED == "numba" and not HAVE_NUMBA:  # pragma: no cover
    raise ImportError("SDETR_KERNELS=numba but numba is not installed")

USING_NUMBA = HAVE_NUMBA and _REQUESTED != "numpy"
BACKEND = "numba" if USING_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# loop bodies (plain python, numba-compilable as-is)
# ---------------------------------------------------------------------------

def _counted_matmul_loops(a, b, out):
    # Counts one MAC per executed scalar multiply-add.
    n, k = a.shape
    m = b.shape[1]
    macs = 0
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
                macs += 1
            out[i, j] = acc
    return macs


def _trilinear_trace_loops(q, k, v, out):
    # out[r, c] = sum_j sum_i q[r, j] * k[i, j] * v[i, c]
    # Literal traversal: no softmax, no scaling, no intermediate matrix.
    h, w = q.shape
    hp = k.shape[0]
    wp = v.shape[1]
    for r in range(h):
        for c in range(wp):
            acc = 0.0
            for j in range(w):
                for i in range(hp):
                    acc += q[r, j] * k[i, j] * v[i, c]
            out[r, c] = acc


def _scatter_add_loops(values, index, out):
    for n in range(values.shape[0]):
        out[index[n]] += values[n]


if HAVE_NUMBA:
    _counted_matmul_jit = njit(cache=True)(_counted_matmul_loops)
    _trilinear_trace_jit = njit(cache=True)(_trilinear_trace_loops)
    _scatter_add_jit = njit(cache=True)(_scatter_add_loops)


# ---------------------------------------------------------------------------
# counted matmul: returns (product, executed MAC count)
# ---------------------------------------------------------------------------

def counted_matmul_numpy(a, b):
    """BLAS matmul; the count covers the h*k*m multiply-adds the call runs."""
    out = a @ b
    return out, a.shape[0] * a.shape[1] * b.shape[1]


def counted_matmul_numba(a, b):
    """Explicit triple loop that increments the counter per multiply-add."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    macs = _counted_matmul_jit(a, b, out)
    return out, macs


# ---------------------------------------------------------------------------
# raw trilinear attention trace (the un-normalized Q.K^T.V traversal)
# ---------------------------------------------------------------------------

def trilinear_trace_numpy(q, k, v):
    # einsum with optimize=False performs the same quadruple traversal
    # without factoring through the intermediate product matrix.
    return np.einsum("rj,ij,ic->rc", q, k, v, optimize=False)


def trilinear_trace_numba(q, k, v):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    out = np.empty((q.shape[0], v.shape[1]), dtype=np.float64)
    _trilinear_trace_jit(q, k, v, out)
    return out


# ---------------------------------------------------------------------------
# scatter-add (col2im style accumulation for conv backward)
# ---------------------------------------------------------------------------

def scatter_add_numpy(values, index, out):
    np.add.at(out, index, values)


def scatter_add_numba(values, index, out):
    _scatter_add_jit(values, index, out)


if USING_NUMBA:
    counted_matmul = counted_matmul_numba
    trilinear_trace = trilinear_trace_numba
    scatter_add = scatter_add_numba
else:
    counted_matmul = counted_matmul_numpy
    trilinear_trace = trilinear_trace_numpy
    scatter_add = scatter_add_numpy


def implementations(name):
    """All available implementations of a kernel, keyed by backend name."""
    table = {
        "counted_matmul": {"numpy": counted_matmul_numpy},
        "trilinear_trace": {"numpy": trilinear_trace_numpy},
        "scatter_add": {"numpy": scatter_add_numpy},
    }
    if HAVE_NUMBA:
        table["counted_matmul"]["numba"] = counted_matmul_numba
        table["trilinear_trace"]["numba"] = trilinear_trace_numba
        table["scatter_add"]["numba"] = scatter_add_numba
    return table[name]
