# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core: fused dense forward/backward, Adam, pairwise distances.

Same contracts as kernels_py; selected by dailoc.backend when importable.
The loops are written row-contiguous so the compiler can vectorize them; at
the layer sizes this project trains (16..256 wide, batch ~32) this beats the
numpy fallback mostly by dodging per-call dispatch overhead.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log1p, sqrt

cnp.import_array()

IDENTITY = 0
RELU = 1
SIGMOID = 2
SOFTPLUS = 3

NAME = "c"

cdef int _IDENTITY = 0
cdef int _RELU = 1
cdef int _SIGMOID = 2
cdef int _SOFTPLUS = 3


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _softplus(double x) noexcept nogil:
    if x > 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _act(double x, int act) noexcept nogil:
    if act == _RELU:
        return x if x > 0.0 else 0.0
    if act == _SIGMOID:
        return _sigmoid(x)
    if act == _SOFTPLUS:
        return _softplus(x)
    return x


cdef inline double _act_deriv(double x, int act) noexcept nogil:
    cdef double s
    if act == _RELU:
        return 1.0 if x > 0.0 else 0.0
    if act == _SIGMOID:
        s = _sigmoid(x)
        return s * (1.0 - s)
    if act == _SOFTPLUS:
        return _sigmoid(x)
    return 1.0


def dense_forward(double[:, ::1] x, double[:, ::1] w, double[::1] b, int act):
    """Forward pass: out = act(x @ w.T + b). Returns (out, pre)."""
    cdef Py_ssize_t n = x.shape[0], din = x.shape[1], dout = w.shape[0]
    cdef cnp.ndarray out_arr = np.empty((n, dout), dtype=np.float64)
    cdef cnp.ndarray pre_arr = np.empty((n, dout), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] pre = pre_arr
    cdef Py_ssize_t i, j, k
    cdef double acc
    with nogil:
        for i in range(n):
            for j in range(dout):
                acc = b[j]
                for k in range(din):
                    acc += x[i, k] * w[j, k]
                pre[i, j] = acc
                out[i, j] = _act(acc, act)
    return out_arr, pre_arr


def dense_backward(double[:, ::1] x, double[:, ::1] pre, double[:, ::1] w, int act,
                   double[:, ::1] upstream):
    """Chain rule through one dense layer; returns (dx, dw, db)."""
    cdef Py_ssize_t n = x.shape[0], din = x.shape[1], dout = w.shape[0]
    cdef cnp.ndarray dx_arr = np.zeros((n, din), dtype=np.float64)
    cdef cnp.ndarray dw_arr = np.zeros((dout, din), dtype=np.float64)
    cdef cnp.ndarray db_arr = np.zeros(dout, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t i, j, k
    cdef double dp
    with nogil:
        for i in range(n):
            for j in range(dout):
                dp = upstream[i, j] * _act_deriv(pre[i, j], act)
                db[j] += dp
                for k in range(din):
                    dw[j, k] += dp * x[i, k]
                    dx[i, k] += dp * w[j, k]
    return dx_arr, dw_arr, db_arr


def adam_step_inplace(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                      long t, double lr, double beta1, double beta2, double eps):
    """Bias-corrected Adam update in place; t is 1-based including this step."""
    cdef Py_ssize_t n = p.shape[0]
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    cdef Py_ssize_t i
    cdef double gi, mhat, vhat
    with nogil:
        for i in range(n):
            gi = g[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
            mhat = m[i] / c1
            vhat = v[i] / c2
            p[i] -= lr * mhat / (sqrt(vhat) + eps)


def pairwise_sq_dists(double[:, ::1] a, double[:, ::1] b):
    """Squared Euclidean distances between rows of a and rows of b."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    cdef cnp.ndarray out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    acc += diff * diff
                out[i, j] = acc
    return out_arr
