# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv/pool kernels.

Convolution runs as a fused padded im2col into a BLAS GEMM, one sample at a
time so the scratch column buffer stays small. The im2col row order is
(ci, dx, dy, dz) and the column order is (i, j, k), matching the layout the
numpy backend produces, so both backends feed identical operands to the same
BLAS and return identical bits.
"""

import numpy as np

cimport numpy as cnp
from cython cimport floating
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef Py_ssize_t idx


cdef inline void _gemm_rm_nn(const floating* a, const floating* b, floating* c,
                             int m, int n, int k, floating beta) noexcept nogil:
    # row-major C(m,n) = A(m,k) @ B(k,n) + beta * C
    cdef float a32 = 1.0, b32
    cdef double a64 = 1.0, b64
    if floating is float:
        b32 = <float> beta
        sgemm("N", "N", &n, &m, &k, &a32, <float*> b, &n, <float*> a, &k,
              &b32, <float*> c, &n)
    else:
        b64 = <double> beta
        dgemm("N", "N", &n, &m, &k, &a64, <double*> b, &n, <double*> a, &k,
              &b64, <double*> c, &n)


cdef inline void _gemm_rm_nt(const floating* a, const floating* b, floating* c,
                             int m, int n, int k, floating beta) noexcept nogil:
    # row-major C(m,n) = A(m,k) @ B(n,k)^T + beta * C
    cdef float a32 = 1.0, b32
    cdef double a64 = 1.0, b64
    if floating is float:
        b32 = <float> beta
        sgemm("T", "N", &n, &m, &k, &a32, <float*> b, &k, <float*> a, &k,
              &b32, <float*> c, &n)
    else:
        b64 = <double> beta
        dgemm("T", "N", &n, &m, &k, &a64, <double*> b, &k, <double*> a, &k,
              &b64, <double*> c, &n)


cdef void _im2col(const floating[:, :, :, ::1] xpad, floating[:, ::1] cols,
                  idx sx, idx sy, idx sz) noexcept nogil:
    cdef idx ci = xpad.shape[0]
    cdef idx c, dx, dy, dz, i, j, k, row, p
    for c in range(ci):
        for dx in range(3):
            for dy in range(3):
                for dz in range(3):
                    row = ((c * 3 + dx) * 3 + dy) * 3 + dz
                    p = 0
                    for i in range(sx):
                        for j in range(sy):
                            for k in range(sz):
                                cols[row, p] = xpad[c, i + dx, j + dy, k + dz]
                                p += 1


def _conv_fwd(const floating[:, :, :, :, ::1] xpad, const floating[:, ::1] wf,
              const floating[::1] b, floating[:, ::1] cols,
              floating[:, :, ::1] out, idx sx, idx sy, idx sz):
    cdef idx n = xpad.shape[0]
    cdef int co = <int> wf.shape[0]
    cdef int kk = <int> wf.shape[1]
    cdef int pp = <int> cols.shape[1]
    cdef idx s, c, p
    with nogil:
        for s in range(n):
            _im2col(xpad[s], cols, sx, sy, sz)
            _gemm_rm_nn(&wf[0, 0], &cols[0, 0], &out[s, 0, 0], co, pp, kk,
                        <floating> 0.0)
            for c in range(co):
                for p in range(pp):
                    out[s, c, p] += b[c]


def _conv_bwd_w(const floating[:, :, :, :, ::1] xpad,
                const floating[:, :, ::1] dyf,
                floating[:, ::1] cols, floating[:, ::1] dw,
                idx sx, idx sy, idx sz):
    cdef idx n = xpad.shape[0]
    cdef int co = <int> dyf.shape[1]
    cdef int kk = <int> dw.shape[1]
    cdef int pp = <int> cols.shape[1]
    cdef idx s
    with nogil:
        for s in range(n):
            _im2col(xpad[s], cols, sx, sy, sz)
            _gemm_rm_nt(&dyf[s, 0, 0], &cols[0, 0], &dw[0, 0], co, kk, pp,
                        <floating> 1.0)


def _pool_fwd(const floating[:, :, :, :, ::1] x,
              floating[:, :, :, :, ::1] out,
              cnp.uint8_t[:, :, :, :, ::1] arg):
    cdef idx n = x.shape[0], c = x.shape[1]
    cdef idx hx = out.shape[2], hy = out.shape[3], hz = out.shape[4]
    cdef idx s, ch, i, j, k, dx, dy, dz
    cdef floating best, v
    cdef int code
    with nogil:
        for s in range(n):
            for ch in range(c):
                for i in range(hx):
                    for j in range(hy):
                        for k in range(hz):
                            best = x[s, ch, 2 * i, 2 * j, 2 * k]
                            code = 0
                            for dx in range(2):
                                for dy in range(2):
                                    for dz in range(2):
                                        v = x[s, ch, 2 * i + dx, 2 * j + dy,
                                              2 * k + dz]
                                        if v > best:
                                            best = v
                                            code = dx * 4 + dy * 2 + dz
                            out[s, ch, i, j, k] = best
                            arg[s, ch, i, j, k] = <cnp.uint8_t> code


def _pool_bwd(const cnp.uint8_t[:, :, :, :, ::1] arg,
              const floating[:, :, :, :, ::1] dy,
              floating[:, :, :, :, ::1] dx):
    cdef idx n = dy.shape[0], c = dy.shape[1]
    cdef idx hx = dy.shape[2], hy = dy.shape[3], hz = dy.shape[4]
    cdef idx s, ch, i, j, k
    cdef int code
    with nogil:
        for s in range(n):
            for ch in range(c):
                for i in range(hx):
                    for j in range(hy):
                        for k in range(hz):
                            code = arg[s, ch, i, j, k]
                            dx[s, ch, 2 * i + (code >> 2),
                               2 * j + ((code >> 1) & 1),
                               2 * k + (code & 1)] += dy[s, ch, i, j, k]


def conv3d_forward(x, w, b):
    n, ci, sx, sy, sz = x.shape
    co = w.shape[0]
    dt = x.dtype
    xpad = np.zeros((n, ci, sx + 2, sy + 2, sz + 2), dtype=dt)
    xpad[:, :, 1:-1, 1:-1, 1:-1] = x
    cols = np.empty((ci * 27, sx * sy * sz), dtype=dt)
    out = np.empty((n, co, sx * sy * sz), dtype=dt)
    _conv_fwd(xpad, np.ascontiguousarray(w.reshape(co, ci * 27)), b, cols,
              out, sx, sy, sz)
    return out.reshape(n, co, sx, sy, sz)


def conv3d_backward(x, w, dy, need_dx=True):
    n, ci, sx, sy, sz = x.shape
    co = w.shape[0]
    dt = x.dtype
    xpad = np.zeros((n, ci, sx + 2, sy + 2, sz + 2), dtype=dt)
    xpad[:, :, 1:-1, 1:-1, 1:-1] = x
    cols = np.empty((ci * 27, sx * sy * sz), dtype=dt)
    dw = np.zeros((co, ci * 27), dtype=dt)
    dyf = np.ascontiguousarray(dy.reshape(n, co, sx * sy * sz))
    _conv_bwd_w(xpad, dyf, cols, dw, sx, sy, sz)
    db = dy.sum(axis=(0, 2, 3, 4))
    dx = None
    if need_dx:
        wswap = np.ascontiguousarray(
            w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        dx = conv3d_forward(dy, wswap, np.zeros(ci, dtype=dt))
    return dx, dw.reshape(w.shape), db


def maxpool3d_forward(x):
    n, c, sx, sy, sz = x.shape
    out = np.empty((n, c, sx // 2, sy // 2, sz // 2), dtype=x.dtype)
    arg = np.empty(out.shape, dtype=np.uint8)
    _pool_fwd(x, out, arg)
    return out, arg


def maxpool3d_backward(arg, dy, spatial):
    sx, sy, sz = spatial
    n, c = dy.shape[0], dy.shape[1]
    dx = np.zeros((n, c, sx, sy, sz), dtype=dy.dtype)
    _pool_bwd(arg, np.ascontiguousarray(dy), dx)
    return dx
