# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col + BLAS convolution, max-pooling, unpooling.

Same contracts as ``_fallback``; see there for layouts.
"""
import numpy as np
from scipy.linalg.cython_blas cimport dgemm

NAME = "compiled"


cdef void _gemm(char ta, char tb, int m, int n, int k, double alpha,
                const double* a, int lda, const double* b, int ldb,
                double beta, double* c, int ldc) noexcept nogil:
    # row-major C(m, n) = alpha * op(A) op(B) + beta * C via column-major BLAS
    dgemm(&tb, &ta, &n, &m, &k, &alpha, <double*>b, &ldb, <double*>a, &lda,
          &beta, c, &ldc)


cdef void _im2col(const double[:, :, ::1] x, int f, int ho, int wo,
                  double[:, ::1] cols) noexcept nogil:
    cdef Py_ssize_t ci, j, k, h, w, r
    for ci in range(x.shape[0]):
        for j in range(f):
            for k in range(f):
                r = (ci * f + j) * f + k
                for h in range(ho):
                    for w in range(wo):
                        cols[r, h * wo + w] = x[ci, h + j, w + k]


cdef void _col2im(const double[:, ::1] cols, int f, int ho, int wo,
                  double[:, :, ::1] x) noexcept nogil:
    cdef Py_ssize_t ci, j, k, h, w, r
    for ci in range(x.shape[0]):
        for j in range(f):
            for k in range(f):
                r = (ci * f + j) * f + k
                for h in range(ho):
                    for w in range(wo):
                        x[ci, h + j, w + k] += cols[r, h * wo + w]


def conv_valid(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] w):
    cdef int nb = xp.shape[0], ci = xp.shape[1]
    cdef int co = w.shape[0], f = w.shape[2]
    cdef int ho = xp.shape[2] - f + 1, wo = xp.shape[3] - f + 1
    cdef int kk = ci * f * f, hw = ho * wo
    out_arr = np.empty((nb, co, ho, wo))
    cols_arr = np.empty((kk, hw))
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b
    if nb == 0 or hw == 0:
        return out_arr
    with nogil:
        for b in range(nb):
            _im2col(xp[b], f, ho, wo, cols)
            _gemm(b'N', b'N', co, hw, kk, 1.0, &w[0, 0, 0, 0], kk,
                  &cols[0, 0], hw, 0.0, &out[b, 0, 0, 0], hw)
    return out_arr


def conv_input_grad(const double[:, :, :, ::1] w, const double[:, :, :, ::1] g):
    cdef int nb = g.shape[0], co = w.shape[0], ci = w.shape[1], f = w.shape[2]
    cdef int ho = g.shape[2], wo = g.shape[3]
    cdef int kk = ci * f * f, hw = ho * wo
    dx_arr = np.zeros((nb, ci, ho + f - 1, wo + f - 1))
    cols_arr = np.empty((kk, hw))
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b
    if nb == 0 or hw == 0:
        return dx_arr
    with nogil:
        for b in range(nb):
            _gemm(b'T', b'N', kk, hw, co, 1.0, &w[0, 0, 0, 0], kk,
                  &g[b, 0, 0, 0], hw, 0.0, &cols[0, 0], hw)
            _col2im(cols, f, ho, wo, dx[b])
    return dx_arr


def conv_weight_grad(const double[:, :, :, ::1] xp, const double[:, :, :, ::1] g):
    cdef int nb = g.shape[0], co = g.shape[1], ci = xp.shape[1]
    cdef int ho = g.shape[2], wo = g.shape[3]
    cdef int f = xp.shape[2] - ho + 1
    cdef int kk = ci * f * f, hw = ho * wo
    dw_arr = np.zeros((co, ci, f, f))
    cols_arr = np.empty((kk, hw))
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b
    if nb == 0 or hw == 0:
        return dw_arr
    with nogil:
        for b in range(nb):
            _im2col(xp[b], f, ho, wo, cols)
            _gemm(b'N', b'T', co, kk, hw, 1.0, &g[b, 0, 0, 0], hw,
                  &cols[0, 0], hw, 1.0, &dw[0, 0, 0, 0], kk)
    return dw_arr


def maxpool(const double[:, :, :, ::1] x, int f):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // f, wo = x.shape[3] // f
    vals_arr = np.empty((nb, nc, ho, wo))
    idx_arr = np.empty((nb, nc, ho, wo), dtype=np.int8)
    cdef double[:, :, :, ::1] vals = vals_arr
    cdef signed char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, h, w, i, j
    cdef double best, v
    cdef signed char arg
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for h in range(ho):
                    for w in range(wo):
                        best = x[b, c, h * f, w * f]
                        arg = 0
                        # strict comparison keeps the first maximum in row-major order
                        for i in range(f):
                            for j in range(f):
                                v = x[b, c, h * f + i, w * f + j]
                                if v > best:
                                    best = v
                                    arg = <signed char>(i * f + j)
                        vals[b, c, h, w] = best
                        idx[b, c, h, w] = arg
    return vals_arr, idx_arr


def pool_gather(const double[:, :, :, ::1] x, const signed char[:, :, :, ::1] idx, int f):
    cdef Py_ssize_t nb = idx.shape[0], nc = idx.shape[1]
    cdef Py_ssize_t ho = idx.shape[2], wo = idx.shape[3]
    out_arr = np.empty((nb, nc, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, h, w
    cdef int k
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for h in range(ho):
                    for w in range(wo):
                        k = idx[b, c, h, w]
                        out[b, c, h, w] = x[b, c, h * f + k // f, w * f + k % f]
    return out_arr


def unpool(const double[:, :, :, ::1] y, const signed char[:, :, :, ::1] idx,
           int f, int hh, int ww):
    cdef Py_ssize_t nb = y.shape[0], nc = y.shape[1]
    cdef Py_ssize_t ho = y.shape[2], wo = y.shape[3]
    out_arr = np.zeros((nb, nc, hh, ww))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, h, w
    cdef int k
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for h in range(ho):
                    for w in range(wo):
                        k = idx[b, c, h, w]
                        out[b, c, h * f + k // f, w * f + k % f] = y[b, c, h, w]
    return out_arr
