# Compiled hot kernels: same-padded 1D convolution and 2-wide max pooling.
# Convolutions pack an im2col buffer with tight C loops and call BLAS dgemm
# directly, skipping the temporary views and Python dispatch of the numpy
# fallback. Results match the fallback to rounding error (summation order
# inside the GEMM may differ).

import numpy as np

from scipy.linalg.cython_blas cimport dgemm

BACKEND = "compiled"


cdef void _gemm_nn(int m, int n, int k, double* a, double* b, double* c) noexcept nogil:
    # row-major C(m,n) = A(m,k) @ B(k,n)
    cdef char tn = b'N'
    cdef double one = 1.0, zero = 0.0
    dgemm(&tn, &tn, &n, &m, &k, &one, b, &n, a, &k, &zero, c, &n)


cdef void _gemm_nt(int m, int n, int k, double* a, double* b, double* c) noexcept nogil:
    # row-major C(m,n) = A(m,k) @ B(n,k)^T
    cdef char tt = b'T', tn = b'N'
    cdef double one = 1.0, zero = 0.0
    dgemm(&tt, &tn, &n, &m, &k, &one, b, &k, a, &k, &zero, c, &n)


cdef void _gemm_tn(int m, int n, int k, double* a, double* b, double* c) noexcept nogil:
    # row-major C(m,n) = A(k,m)^T @ B(k,n)
    cdef char tt = b'T', tn = b'N'
    cdef double one = 1.0, zero = 0.0
    dgemm(&tn, &tt, &n, &m, &k, &one, b, &n, a, &m, &zero, c, &n)


cdef void _pack_cols(const double[:, :, ::1] x, double[:, ::1] cols, int K, int pad) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t b, ci, kk, l, row, lo, hi, s
    for ci in range(Ci):
        for kk in range(K):
            row = ci * K + kk
            s = kk - pad
            lo = -s if s < 0 else 0
            hi = L - s if s > 0 else L
            for b in range(B):
                for l in range(lo, hi):
                    cols[row, b * L + l] = x[b, ci, l + s]


def conv1d_forward(const double[:, :, ::1] x, const double[:, :, ::1] w, const double[::1] bias):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t Co = w.shape[0], K = w.shape[2]
    cdef int pad = (<int> K - 1) // 2
    cols_arr = np.zeros((Ci * K, B * L), dtype=np.float64)
    out2_arr = np.empty((Co, B * L), dtype=np.float64)
    out_arr = np.empty((B, Co, L), dtype=np.float64)
    wmat_arr = np.ascontiguousarray(np.asarray(w).reshape(Co, Ci * K))
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, ::1] out2 = out2_arr
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] wmat = wmat_arr
    cdef Py_ssize_t b, co, l
    with nogil:
        _pack_cols(x, cols, <int> K, pad)
        _gemm_nn(<int> Co, <int> (B * L), <int> (Ci * K), &wmat[0, 0], &cols[0, 0], &out2[0, 0])
        for b in range(B):
            for co in range(Co):
                for l in range(L):
                    out[b, co, l] = out2[co, b * L + l] + bias[co]
    return out_arr


def conv1d_backward(const double[:, :, ::1] x, const double[:, :, ::1] w, const double[:, :, ::1] g):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t Co = w.shape[0], K = w.shape[2]
    cdef int pad = (<int> K - 1) // 2
    cols_arr = np.zeros((Ci * K, B * L), dtype=np.float64)
    gpack_arr = np.empty((Co, B * L), dtype=np.float64)
    dwmat_arr = np.empty((Co, Ci * K), dtype=np.float64)
    dcols_arr = np.empty((Ci * K, B * L), dtype=np.float64)
    dx_arr = np.zeros((B, Ci, L), dtype=np.float64)
    db_arr = np.zeros(Co, dtype=np.float64)
    wmat_arr = np.ascontiguousarray(np.asarray(w).reshape(Co, Ci * K))
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, ::1] gpack = gpack_arr
    cdef double[:, ::1] dwmat = dwmat_arr
    cdef double[:, ::1] dcols = dcols_arr
    cdef double[:, :, ::1] dx = dx_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] wmat = wmat_arr
    cdef Py_ssize_t b, co, ci, kk, l, row, lo, hi, s
    cdef double acc
    with nogil:
        _pack_cols(x, cols, <int> K, pad)
        for co in range(Co):
            acc = 0.0
            for b in range(B):
                for l in range(L):
                    gpack[co, b * L + l] = g[b, co, l]
                    acc += g[b, co, l]
            db[co] = acc
        _gemm_nt(<int> Co, <int> (Ci * K), <int> (B * L), &gpack[0, 0], &cols[0, 0], &dwmat[0, 0])
        _gemm_tn(<int> (Ci * K), <int> (B * L), <int> Co, &wmat[0, 0], &gpack[0, 0], &dcols[0, 0])
        for ci in range(Ci):
            for kk in range(K):
                row = ci * K + kk
                s = kk - pad
                lo = -s if s < 0 else 0
                hi = L - s if s > 0 else L
                for b in range(B):
                    for l in range(lo, hi):
                        dx[b, ci, l + s] += dcols[row, b * L + l]
    dw_arr = dwmat_arr.reshape(Co, Ci, K)
    return dx_arr, dw_arr, db_arr


def maxpool1d_forward(const double[:, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t H = L // 2
    out_arr = np.empty((B, C, H), dtype=np.float64)
    idx_arr = np.empty((B, C, H), dtype=np.int8)
    cdef double[:, :, ::1] out = out_arr
    cdef signed char[:, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, h
    cdef double a0, a1
    with nogil:
        for b in range(B):
            for c in range(C):
                for h in range(H):
                    a0 = x[b, c, 2 * h]
                    a1 = x[b, c, 2 * h + 1]
                    if a1 > a0:  # ties keep the lower index
                        out[b, c, h] = a1
                        idx[b, c, h] = 1
                    else:
                        out[b, c, h] = a0
                        idx[b, c, h] = 0
    return out_arr, idx_arr


def maxpool1d_backward(const double[:, :, ::1] g, const signed char[:, :, ::1] idx, Py_ssize_t L):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], H = g.shape[2]
    dx_arr = np.zeros((B, C, L), dtype=np.float64)
    cdef double[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, c, h
    with nogil:
        for b in range(B):
            for c in range(C):
                for h in range(H):
                    dx[b, c, 2 * h + idx[b, c, h]] = g[b, c, h]
    return dx_arr
