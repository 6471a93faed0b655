# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: conv patch packing and the CTC recursions.

API mirrors ``_fallback.py`` exactly; selection happens in the package
``__init__``.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()

ctypedef fused real_t:
    float
    double


def im2col(x, int kh, int kw, int sh, int sw, int ph, int pw):
    x = np.ascontiguousarray(x)
    if x.dtype != np.float32 and x.dtype != np.float64:
        x = x.astype(np.float64)
    return _im2col_impl(x, kh, kw, sh, sw, ph, pw)


def col2im(cols, int h, int w, int kh, int kw, int sh, int sw, int ph, int pw):
    cols = np.ascontiguousarray(cols)
    if cols.dtype != np.float32 and cols.dtype != np.float64:
        cols = cols.astype(np.float64)
    return _col2im_impl(cols, h, w, kh, kw, sh, sw, ph, pw)


def _im2col_impl(real_t[:, :, :, ::1] x, int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    out_arr = np.zeros((b, c * kh * kw, oh * ow), dtype=np.asarray(x).dtype)
    cdef real_t[:, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, oy, ox, iy, ix, row
    for bi in range(b):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    for oy in range(oh):
                        iy = oy * sh + i - ph
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * sw + j - pw
                            if 0 <= ix < w:
                                out[bi, row, oy * ow + ox] = x[bi, ci, iy, ix]
    return out_arr


def _col2im_impl(real_t[:, :, ::1] cols, int h, int w, int kh, int kw, int sh, int sw, int ph, int pw):
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t c = cols.shape[1] // (kh * kw)
    cdef Py_ssize_t oh = (h + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t ow = (w + 2 * pw - kw) // sw + 1
    out_arr = np.zeros((b, c, h, w), dtype=np.asarray(cols).dtype)
    cdef real_t[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, i, j, oy, ox, iy, ix, row
    for bi in range(b):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    for oy in range(oh):
                        iy = oy * sh + i - ph
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * sw + j - pw
                            if 0 <= ix < w:
                                out[bi, ci, iy, ix] += cols[bi, row, oy * ow + ox]
    return out_arr


cdef inline double _lse3(double a, double b, double c) nogil:
    cdef double m = a
    if b > m:
        m = b
    if c > m:
        m = c
    if m == -INFINITY:
        return -INFINITY
    cdef double s = 0.0
    if a != -INFINITY:
        s += exp(a - m)
    if b != -INFINITY:
        s += exp(b - m)
    if c != -INFINITY:
        s += exp(c - m)
    return m + log(s)


def ctc_forward_backward(cnp.ndarray[double, ndim=2] log_probs, labels):
    """CTC loss and gradient w.r.t. log-softmax rows; see the fallback docstring."""
    cdef cnp.ndarray[long, ndim=1] lab = np.asarray(labels, dtype=np.int64)
    cdef Py_ssize_t t_len = log_probs.shape[0]
    cdef Py_ssize_t v = log_probs.shape[1]
    cdef Py_ssize_t n = lab.shape[0]
    cdef Py_ssize_t s_len = 2 * n + 1
    cdef cnp.ndarray[long, ndim=1] ext = np.zeros(s_len, dtype=np.int64)
    ext[1::2] = lab
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] allow = np.zeros(s_len, dtype=np.uint8)
    cdef Py_ssize_t s, t
    for s in range(2, s_len):
        if ext[s] != 0 and ext[s] != ext[s - 2]:
            allow[s] = 1

    cdef cnp.ndarray[double, ndim=2] alpha = np.full((t_len, s_len), -INFINITY)
    cdef cnp.ndarray[double, ndim=2] beta = np.full((t_len, s_len), -INFINITY)
    alpha[0, 0] = log_probs[0, 0]
    if s_len > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    cdef double stay, left, skip
    for t in range(1, t_len):
        for s in range(s_len):
            stay = alpha[t - 1, s]
            left = alpha[t - 1, s - 1] if s >= 1 else -INFINITY
            skip = alpha[t - 1, s - 2] if (s >= 2 and allow[s]) else -INFINITY
            alpha[t, s] = _lse3(stay, left, skip) + log_probs[t, ext[s]]

    cdef double log_p = alpha[t_len - 1, s_len - 1]
    if s_len > 1:
        log_p = _lse3(log_p, alpha[t_len - 1, s_len - 2], -INFINITY)
    if log_p == -INFINITY:
        return float("inf"), np.zeros((t_len, v))

    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    cdef double right
    for t in range(t_len - 2, -1, -1):
        for s in range(s_len):
            stay = beta[t + 1, s] + log_probs[t + 1, ext[s]]
            right = beta[t + 1, s + 1] + log_probs[t + 1, ext[s + 1]] if s + 1 < s_len else -INFINITY
            skip = -INFINITY
            if s + 2 < s_len and allow[s + 2]:
                skip = beta[t + 1, s + 2] + log_probs[t + 1, ext[s + 2]]
            beta[t, s] = _lse3(stay, right, skip)

    cdef cnp.ndarray[double, ndim=2] grad = np.zeros((t_len, v))
    cdef double g
    for t in range(t_len):
        for s in range(s_len):
            g = alpha[t, s] + beta[t, s] - log_p
            if g != -INFINITY:
                grad[t, ext[s]] -= exp(g)
    return float(-log_p), grad
