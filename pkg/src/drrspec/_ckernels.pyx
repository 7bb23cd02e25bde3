# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_kernels_py``.

Loop order keeps the innermost index contiguous. Accumulation order is fixed,
so results are deterministic (but not bit-equal to the numpy fallback).
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef extern from "_ckernels_impl.h":
    void drr_axpy(double *y, double a, const double *x, Py_ssize_t n) nogil
    double drr_dot(const double *a, const double *b, Py_ssize_t n) nogil


def conv1d_forward(const double[:, :, ::1] x, const double[:, :, ::1] K, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], n = x.shape[2]
    cdef Py_ssize_t Co = K.shape[0], w = K.shape[2]
    cdef Py_ssize_t n_out = n + 2 * pad - w + 1
    out = np.zeros((B, Co, n_out))
    cdef double[:, :, ::1] y = out
    cdef Py_ssize_t b, o, c, j, t, shift, lo, hi
    cdef double k
    for b in range(B):
        for o in range(Co):
            for c in range(Ci):
                for j in range(w):
                    k = K[o, c, j]
                    shift = j - pad
                    lo = -shift if shift < 0 else 0
                    hi = n - shift if n - shift < n_out else n_out
                    if hi > lo:
                        drr_axpy(&y[b, o, lo], k, &x[b, c, lo + shift], hi - lo)
    return out


def conv1d_input_grad(const double[:, :, ::1] g, const double[:, :, ::1] K,
                      Py_ssize_t pad, Py_ssize_t n):
    cdef Py_ssize_t B = g.shape[0], Co = g.shape[1], n_out = g.shape[2]
    cdef Py_ssize_t Ci = K.shape[1], w = K.shape[2]
    out = np.zeros((B, Ci, n))
    cdef double[:, :, ::1] gx = out
    cdef Py_ssize_t b, o, c, j, t, shift, lo, hi
    cdef double k
    for b in range(B):
        for c in range(Ci):
            for o in range(Co):
                for j in range(w):
                    k = K[o, c, j]
                    shift = j - pad
                    lo = -shift if shift < 0 else 0
                    hi = n - shift if n - shift < n_out else n_out
                    if hi > lo:
                        drr_axpy(&gx[b, c, lo + shift], k, &g[b, o, lo], hi - lo)
    return out


def conv1d_kernel_grad(const double[:, :, ::1] x, const double[:, :, ::1] g,
                       Py_ssize_t w, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], n = x.shape[2]
    cdef Py_ssize_t Co = g.shape[1], n_out = g.shape[2]
    out = np.zeros((Co, Ci, w))
    cdef double[:, :, ::1] gK = out
    cdef Py_ssize_t b, o, c, j, t, shift, lo, hi
    cdef double acc
    for o in range(Co):
        for c in range(Ci):
            for j in range(w):
                shift = j - pad
                lo = -shift if shift < 0 else 0
                hi = n - shift if n - shift < n_out else n_out
                acc = 0.0
                if hi > lo:
                    for b in range(B):
                        acc += drr_dot(&g[b, o, lo], &x[b, c, lo + shift], hi - lo)
                gK[o, c, j] = acc
    return out


def lc_forward(const double[:, :, ::1] x, const double[:, :, :, ::1] W, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t L = W.shape[0], Co = W.shape[1], Ci = W.shape[2], w = W.shape[3]
    out = np.zeros((B, Co, L))
    cdef double[:, :, ::1] y = out
    cdef Py_ssize_t b, l, o, c, j, base
    cdef double acc
    for b in range(B):
        for l in range(L):
            base = l * stride
            for o in range(Co):
                acc = 0.0
                for c in range(Ci):
                    for j in range(w):
                        acc += W[l, o, c, j] * x[b, c, base + j]
                y[b, o, l] = acc
    return out


def lc_input_grad(const double[:, :, ::1] g, const double[:, :, :, ::1] W,
                  Py_ssize_t stride, Py_ssize_t n):
    cdef Py_ssize_t B = g.shape[0]
    cdef Py_ssize_t L = W.shape[0], Co = W.shape[1], Ci = W.shape[2], w = W.shape[3]
    out = np.zeros((B, Ci, n))
    cdef double[:, :, ::1] gx = out
    cdef Py_ssize_t b, l, o, c, j, base
    cdef double gv
    for b in range(B):
        for l in range(L):
            base = l * stride
            for o in range(Co):
                gv = g[b, o, l]
                for c in range(Ci):
                    for j in range(w):
                        gx[b, c, base + j] += W[l, o, c, j] * gv
    return out


def lc_weight_grad(const double[:, :, ::1] x, const double[:, :, ::1] g,
                   Py_ssize_t w, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1]
    cdef Py_ssize_t Co = g.shape[1], L = g.shape[2]
    out = np.zeros((L, Co, Ci, w))
    cdef double[:, :, :, ::1] gW = out
    cdef Py_ssize_t b, l, o, c, j, base
    cdef double gv
    for b in range(B):
        for l in range(L):
            base = l * stride
            for o in range(Co):
                gv = g[b, o, l]
                for c in range(Ci):
                    for j in range(w):
                        gW[l, o, c, j] += gv * x[b, c, base + j]
    return out
