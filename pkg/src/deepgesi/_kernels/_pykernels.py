"""NumPy implementations of the filterbank kernels.

Same contracts as the compiled module, but dtype-generic (float64 inputs stay
float64), which is what the gradient checks run on.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"

_CHUNK = 4096


def _pad(x, L):
    M = L // 2
    return np.concatenate([np.zeros(M, x.dtype), x, np.zeros(L - 1 - M, x.dtype)])


def conv_same(x, h):
    """Return y[c, t] = sum_k h[c, k] * x[t + k - L//2] for t in [0, n)."""
    x = np.asarray(x)
    h = np.asarray(h, dtype=x.dtype)
    n = x.shape[0]
    L = h.shape[1]
    xp = _pad(x, L)
    y = np.empty((h.shape[0], n), dtype=x.dtype)
    for s in range(0, n, _CHUNK):
        e = min(n, s + _CHUNK)
        cols = np.ascontiguousarray(sliding_window_view(xp[s:e + L - 1], L))
        y[:, s:e] = h @ cols.T
    return y


def _frame_starts(n, win, hop):
    T = 1 + (n - win) // hop
    return np.arange(T) * hop


def abs_pool(y, win, hop):
    """Mean of |y| over frames of `win` samples spaced `hop` apart."""
    n = y.shape[1]
    starts = _frame_starts(n, win, hop)
    cs = np.zeros((y.shape[0], n + 1), dtype=np.float64)
    np.cumsum(np.abs(y), axis=1, dtype=np.float64, out=cs[:, 1:])
    pooled = (cs[:, starts + win] - cs[:, starts]) / win
    return pooled.astype(y.dtype)


def lfb_forward(x, h, win, hop, keep=True):
    y = conv_same(x, h)
    return (y if keep else None), abs_pool(y, win, hop)


def spread(y, dpooled, win, hop):
    """Per-sample gradient of sum(dpooled * abs_pool(y)) with respect to y."""
    C, n = y.shape
    T = dpooled.shape[1]
    prefix = np.zeros((C, T + 1), dtype=np.float64)
    np.cumsum(dpooled, axis=1, dtype=np.float64, out=prefix[:, 1:])
    t = np.arange(n)
    hi = np.minimum(t // hop, T - 1)
    lo = np.where(t - win + 1 <= 0, 0, (t - win + hop) // hop)
    valid = lo <= hi
    lo = np.minimum(lo, T)
    total = np.where(valid, prefix[:, hi + 1] - prefix[:, lo], 0.0)
    return (np.sign(y) * total / win).astype(y.dtype)


def lfb_backward(x, y, dpooled, L, win, hop):
    """Gradient of sum(dpooled * pooled) with respect to the kernels."""
    x = np.asarray(x)
    g = spread(y, dpooled, win, hop)
    n = x.shape[0]
    xp = _pad(x, L)
    dh = np.zeros((y.shape[0], L), dtype=np.float64 if x.dtype == np.float64 else np.float32)
    for s in range(0, n, _CHUNK):
        e = min(n, s + _CHUNK)
        cols = np.ascontiguousarray(sliding_window_view(xp[s:e + L - 1], L))
        dh += g[:, s:e] @ cols
    return dh.astype(x.dtype)


def softmax_last(x, out=None):
    """Softmax along the last axis; ``out`` may be ``x`` itself."""
    out = np.subtract(x, x.max(axis=-1, keepdims=True), out=out)
    np.exp(out, out=out)
    out *= 1.0 / out.sum(axis=-1, keepdims=True)
    return out
