# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled filterbank and softmax kernels (float32 only)."""
import numpy as np

cdef extern from "lfb.h" nogil:
    int LFB_BLOCK
    int LFB_TAP_GROUP
    int LFB_ROWS
    void lfb_conv(const float *xpad, const float *h, Py_ssize_t C,
                  Py_ssize_t L, float *y, Py_ssize_t ldy, Py_ssize_t n)
    void lfb_conv_pool(const float *xpad, const float *h, Py_ssize_t C,
                       Py_ssize_t L, float *y, Py_ssize_t ldy, Py_ssize_t n,
                       Py_ssize_t win, Py_ssize_t hop, Py_ssize_t T,
                       double *seg, float *scratch, float *pooled)
    Py_ssize_t lfb_chunk_stride(Py_ssize_t win, Py_ssize_t hop)
    void lfb_abs_pool(const float *y, Py_ssize_t C, Py_ssize_t ldy,
                      Py_ssize_t win, Py_ssize_t hop, Py_ssize_t T,
                      double *seg, float *pooled)
    void lfb_spread(const float *y, const float *dpooled, Py_ssize_t C,
                    Py_ssize_t ldy, Py_ssize_t n, Py_ssize_t win,
                    Py_ssize_t hop, Py_ssize_t T, double *prefix,
                    Py_ssize_t *edges, float *g)
    void lfb_kernel_grad(const float *xpad, const float *g, Py_ssize_t C,
                         Py_ssize_t ldg, Py_ssize_t L, Py_ssize_t n,
                         double *dh)

cdef extern from "softmax.h" nogil:
    void softmax_rows(const float *x, float *y, Py_ssize_t rows, Py_ssize_t n)

BACKEND = "cython"


cdef Py_ssize_t _stride(Py_ssize_t n):
    return (n + LFB_BLOCK - 1) // LFB_BLOCK * LFB_BLOCK


cdef Py_ssize_t _round4(Py_ssize_t n):
    return (n + 3) // 4 * 4


cdef Py_ssize_t _taps(Py_ssize_t L):
    return (L + LFB_TAP_GROUP - 1) // LFB_TAP_GROUP * LFB_TAP_GROUP


def _pad(const float[::1] x, Py_ssize_t L):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t M = L // 2
    out = np.zeros(_stride(n) + _taps(L) + LFB_BLOCK, dtype=np.float32)
    out[M:M + n] = x
    return out


def _pad_rows(a, Py_ssize_t rows):
    if a.shape[0] == rows:
        return a
    out = np.zeros((rows, a.shape[1]), dtype=a.dtype)
    out[:a.shape[0]] = a
    return out


def conv_same(x, h):
    """Return y[c, t] = sum_k h[c, k] * x[t + k - L//2] for t in [0, n)."""
    cdef const float[::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef Py_ssize_t C = h.shape[0]
    cdef Py_ssize_t Cr = (C + LFB_ROWS - 1) // LFB_ROWS * LFB_ROWS
    cdef const float[:, ::1] hv = _pad_rows(np.ascontiguousarray(h, dtype=np.float32), Cr)
    cdef Py_ssize_t n = xv.shape[0], L = hv.shape[1]
    cdef Py_ssize_t ldy = _stride(n)
    cdef float[::1] xp = _pad(xv, L)
    y = np.empty((Cr, ldy), dtype=np.float32)
    cdef float[:, ::1] yv = y
    with nogil:
        lfb_conv(&xp[0], &hv[0, 0], Cr, L, &yv[0, 0], ldy, n)
    return y[:C, :n]


def abs_pool(y, Py_ssize_t win, Py_ssize_t hop):
    """Mean of |y| over frames of `win` samples spaced `hop` apart."""
    cdef const float[:, :] yv = y
    if yv.strides[1] != sizeof(float):
        yv = np.ascontiguousarray(y, dtype=np.float32)
    cdef Py_ssize_t C = yv.shape[0], n = yv.shape[1]
    cdef Py_ssize_t T = 1 + (n - win) // hop
    cdef Py_ssize_t ldy = yv.strides[0] // sizeof(float)
    pooled = np.empty((C, T), dtype=np.float32)
    cdef float[:, ::1] pv = pooled
    cdef double[::1] seg = np.empty(n + 1, dtype=np.float64)
    with nogil:
        lfb_abs_pool(&yv[0, 0], C, ldy, win, hop, T, &seg[0], &pv[0, 0])
    return pooled


def lfb_forward(x, h, Py_ssize_t win, Py_ssize_t hop, bint keep=True):
    """Convolve, rectify and pool in one sweep; returns (y, pooled).

    With ``keep=False`` the convolution output is discarded as it is
    consumed and ``y`` is returned as None.
    """
    cdef const float[::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef Py_ssize_t C = h.shape[0]
    cdef Py_ssize_t Cr = (C + LFB_ROWS - 1) // LFB_ROWS * LFB_ROWS
    cdef const float[:, ::1] hv = _pad_rows(np.ascontiguousarray(h, dtype=np.float32), Cr)
    cdef Py_ssize_t n = xv.shape[0], L = hv.shape[1]
    if n < win:
        raise ValueError(f"signal of {n} samples is shorter than one frame ({win})")
    cdef Py_ssize_t T = 1 + (n - win) // hop
    cdef Py_ssize_t ldy = _stride(n)
    cdef float[::1] xp = _pad(xv, L)
    cdef float *yp = NULL
    cdef float[:, ::1] yv
    y = None
    if keep:
        y = np.empty((Cr, ldy), dtype=np.float32)
        yv = y
        yp = &yv[0, 0]
    cdef float[::1] scratch = np.empty(LFB_ROWS * lfb_chunk_stride(win, hop), dtype=np.float32)
    pooled = np.empty((Cr, T), dtype=np.float32)
    cdef float[:, ::1] pv = pooled
    cdef double[::1] seg = np.empty(LFB_ROWS * (n + 1), dtype=np.float64)
    with nogil:
        lfb_conv_pool(&xp[0], &hv[0, 0], Cr, L, yp, ldy, n, win, hop, T,
                      &seg[0], &scratch[0], &pv[0, 0])
    return (y[:C, :n] if keep else None), pooled[:C]


def lfb_backward(x, y, dpooled, Py_ssize_t L, Py_ssize_t win, Py_ssize_t hop):
    """Gradient of sum(dpooled * pooled) with respect to the kernels."""
    cdef const float[::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t ldy = _stride(n)
    # y may already be a view into a row-padded buffer
    cdef const float[:, :] yv = y
    if yv.strides[1] != sizeof(float) or yv.strides[0] != ldy * sizeof(float):
        ybuf = np.zeros((y.shape[0], ldy), dtype=np.float32)
        ybuf[:, :n] = y
        yv = ybuf
    cdef const float[:, ::1] dv = np.ascontiguousarray(dpooled, dtype=np.float32)
    cdef Py_ssize_t C = dv.shape[0], T = dv.shape[1]
    cdef Py_ssize_t Cr = _round4(C), Lr = _taps(L)
    cdef float[::1] xp = _pad(xv, L)
    g = np.zeros((Cr, ldy), dtype=np.float32)
    cdef float[:, ::1] gv = g
    cdef double[::1] prefix = np.empty(T + 1, dtype=np.float64)
    cdef Py_ssize_t[::1] edges = np.empty(2 * T + 2, dtype=np.intp)
    dh = np.empty((Cr, Lr), dtype=np.float64)
    cdef double[:, ::1] dhv = dh
    with nogil:
        lfb_spread(&yv[0, 0], &dv[0, 0], C, ldy, n, win, hop, T, &prefix[0],
                   &edges[0], &gv[0, 0])
        lfb_kernel_grad(&xp[0], &gv[0, 0], Cr, ldy, Lr, n, &dhv[0, 0])
    return dh[:C, :L].astype(np.float32)


def softmax_last(x, out=None):
    """Softmax along the last axis; ``out`` may be ``x`` itself."""
    xc = np.ascontiguousarray(x, dtype=np.float32)
    if out is None:
        out = np.empty_like(xc)
    elif out.shape != xc.shape or out.dtype != np.float32 or not out.flags.c_contiguous:
        raise ValueError("softmax_last: out must be a C-contiguous float32 array shaped like x")
    if xc.size == 0:
        return out
    cdef Py_ssize_t n = xc.shape[xc.ndim - 1]
    cdef Py_ssize_t rows = xc.size // n
    cdef const float[:, ::1] xv = xc.reshape(rows, n)
    cdef float[:, ::1] ov = out.reshape(rows, n)
    with nogil:
        softmax_rows(&xv[0, 0], &ov[0, 0], rows, n)
    return out
