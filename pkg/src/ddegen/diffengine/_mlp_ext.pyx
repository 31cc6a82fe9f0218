# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for residual softplus MLPs.

Same contracts as ``_mlp_py`` but restricted to residual nets. Matrix
products go straight to BLAS through ``scipy.linalg.cython_blas``; the
softplus / sigmoid / tangent-scaling passes are fused into single loops so
each pre-activation is touched once and ``exp``/``log1p`` run once per
element.

Stacked row layout as in the numpy backend: rows ``[0, B)`` are values,
rows ``[B(1+j), B(2+j))`` are tangents along input coordinate ``j``.
"""

import threading

import numpy as np

from libc.math cimport exp, fabs, log1p
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm

BACKEND = "native"

_local = threading.local()


cdef double[::1] _workspace(Py_ssize_t size):
    # grow-only per-thread scratch, avoids faulting fresh pages every call
    buf = getattr(_local, "buf", None)
    if buf is None or buf.shape[0] < size:
        buf = np.empty(max(size, 1), dtype=np.float64)
        _local.buf = buf
    return buf


cdef inline void mm(bint ta, bint tb, int m, int n, int k, double alpha,
                    const double* A, const double* B, double beta, double* C) noexcept nogil:
    """Row-major C[m, n] = alpha * op(A) @ op(B) + beta * C."""
    cdef int lda = m if ta else k
    cdef int ldb = k if tb else n
    cdef char ca = b'T' if tb else b'N'
    cdef char cb = b'T' if ta else b'N'
    if m == 0 or n == 0:
        return
    dgemm(&ca, &cb, &n, &m, &k, &alpha, <double*>B, &ldb, <double*>A, &lda, &beta, C, &n)


cdef inline void act_forward(double* Z, const double* bias, double* V, double* sig,
                             int B, int C, int ntan) noexcept nogil:
    """Z value rows get ``bias`` added in place; V = [softplus(u); sig * Tu]."""
    cdef Py_ssize_t b, c, j, idx, stride = <Py_ssize_t>B * C
    cdef double u, e, r, s
    for b in range(B):
        for c in range(C):
            idx = <Py_ssize_t>b * C + c
            u = Z[idx] + bias[c]
            Z[idx] = u
            e = exp(-fabs(u))
            r = 1.0 / (1.0 + e)
            s = r if u >= 0.0 else e * r
            V[idx] = (u if u > 0.0 else 0.0) + log1p(e)
            sig[idx] = s
            for j in range(ntan):
                V[idx + (j + 1) * stride] = s * Z[idx + (j + 1) * stride]


cdef inline void act_backward(const double* Vbar, const double* Z, const double* sig,
                              double* Zbar, int B, int C, int ntan) noexcept nogil:
    cdef Py_ssize_t b, c, j, idx, t, stride = <Py_ssize_t>B * C
    cdef double s, sbar, tv
    for b in range(B):
        for c in range(C):
            idx = <Py_ssize_t>b * C + c
            s = sig[idx]
            sbar = 0.0
            for j in range(ntan):
                t = idx + (j + 1) * stride
                tv = Vbar[t]
                sbar += tv * Z[t]
                Zbar[t] = s * tv
            Zbar[idx] = Vbar[idx] * s + sbar * s * (1.0 - s)


cdef inline void input_stream(const double* W, const double* bvec, const double* x,
                              double* H, int B, int C, int n, int ntan) noexcept nogil:
    cdef Py_ssize_t b, c, j, k
    cdef double acc
    for b in range(B):
        for c in range(C):
            acc = bvec[c]
            for k in range(n):
                acc += W[c * n + k] * x[b * n + k]
            H[b * C + c] = acc
    for j in range(ntan):
        for b in range(B):
            for c in range(C):
                H[(<Py_ssize_t>(j + 1) * B + b) * C + c] = W[c * n + j]


cdef inline void add_rowsum(double* out, const double* M, int rows, int C) noexcept nogil:
    cdef Py_ssize_t r, c
    for r in range(rows):
        for c in range(C):
            out[c] += M[r * C + c]


cdef inline void add_bias_rows(double* M, const double* bias, int rows, int C) noexcept nogil:
    cdef Py_ssize_t r, c
    for r in range(rows):
        for c in range(C):
            M[r * C + c] += bias[c]


cdef Py_ssize_t _check(int n, int C, int L, int out_dim, Py_ssize_t P) except -1:
    cdef Py_ssize_t want = <Py_ssize_t>C * n + C + <Py_ssize_t>L * (2 * C * C + 2 * C) + out_dim * C + out_dim
    if P != want:
        raise ValueError(f"parameter vector has {P} entries, layout needs {want}")
    return want


cdef void _forward(const double* th, const double* x, double* ws, int B, int n, int C,
                   int L, int ntan) noexcept nogil:
    """Fill the tape: H_0..H_L, then Z_i, V_i (stacked) and sig_i for each block."""
    cdef Py_ssize_t rows = <Py_ssize_t>(1 + ntan) * B
    cdef Py_ssize_t S = rows * C
    cdef Py_ssize_t blk = 2 * C * C + 2 * C
    cdef Py_ssize_t base = <Py_ssize_t>C * n + C
    cdef double* Hs = ws
    cdef double* Zs = ws + (L + 1) * S
    cdef double* Vs = Zs + L * S
    cdef double* sigs = Vs + L * S
    cdef const double* W1
    cdef int i
    input_stream(th, th + C * n, x, Hs, B, C, n, ntan)
    for i in range(L):
        W1 = th + base + i * blk
        mm(0, 1, <int>rows, C, C, 1.0, Hs + i * S, W1, 0.0, Zs + i * S)
        act_forward(Zs + i * S, W1 + C * C, Vs + i * S, sigs + <Py_ssize_t>i * B * C, B, C, ntan)
        memcpy(Hs + (i + 1) * S, Hs + i * S, S * sizeof(double))
        mm(0, 1, <int>rows, C, C, 1.0, Vs + i * S, W1 + C * C + C, 1.0, Hs + (i + 1) * S)
        add_bias_rows(Hs + (i + 1) * S, W1 + 2 * C * C + C, B, C)


cdef void _backward(const double* th, double* g, const double* x, double* ws, double* Hbar,
                    double* scratch, int B, int n, int C, int L, int ntan) noexcept nogil:
    cdef Py_ssize_t rows = <Py_ssize_t>(1 + ntan) * B
    cdef Py_ssize_t S = rows * C
    cdef Py_ssize_t blk = 2 * C * C + 2 * C
    cdef Py_ssize_t base = <Py_ssize_t>C * n + C
    cdef double* Hs = ws
    cdef double* Zs = ws + (L + 1) * S
    cdef double* Vs = Zs + L * S
    cdef double* sigs = Vs + L * S
    cdef double* Vbar = scratch
    cdef double* Zbar = scratch + S
    cdef const double* W1
    cdef double* G1
    cdef int i
    cdef Py_ssize_t b, c, j
    for i in range(L - 1, -1, -1):
        W1 = th + base + i * blk
        G1 = g + base + i * blk
        # h' = h + V W2^T + b2
        mm(1, 0, C, C, <int>rows, 1.0, Hbar, Vs + i * S, 1.0, G1 + C * C + C)
        add_rowsum(G1 + 2 * C * C + C, Hbar, B, C)
        mm(0, 0, <int>rows, C, C, 1.0, Hbar, W1 + C * C + C, 0.0, Vbar)
        act_backward(Vbar, Zs + i * S, sigs + <Py_ssize_t>i * B * C, Zbar, B, C, ntan)
        # Z = h W1^T + b1
        mm(1, 0, C, C, <int>rows, 1.0, Zbar, Hs + i * S, 1.0, G1)
        add_rowsum(G1 + C * C, Zbar, B, C)
        mm(0, 0, <int>rows, C, C, 1.0, Zbar, W1, 1.0, Hbar)
    # input adapter: value rows see x, tangent rows see the unit vectors
    for b in range(B):
        for c in range(C):
            g[C * n + c] += Hbar[b * C + c]
            for j in range(n):
                g[c * n + j] += Hbar[b * C + c] * x[b * n + j]
    for j in range(ntan):
        for b in range(B):
            for c in range(C):
                g[c * n + j] += Hbar[(<Py_ssize_t>(j + 1) * B + b) * C + c]


def forward(int channels, int layers, const double[::1] theta, const double[:, ::1] x, int out_dim):
    cdef int B = x.shape[0], n = x.shape[1], C = channels, L = layers
    _check(n, C, L, out_dim, theta.shape[0])
    cdef Py_ssize_t S = <Py_ssize_t>B * C
    cdef double[::1] ws = _workspace((L + 1) * S + 2 * L * S + L * S)
    y = np.empty((B, out_dim))
    cdef double[:, ::1] yv = y
    cdef Py_ssize_t off = <Py_ssize_t>C * n + C + <Py_ssize_t>L * (2 * C * C + 2 * C)
    cdef Py_ssize_t b, o
    if B == 0:
        return y
    with nogil:
        _forward(&theta[0], &x[0, 0], &ws[0], B, n, C, L, 0)
        mm(0, 1, B, out_dim, C, 1.0, &ws[0] + L * S, &theta[0] + off, 0.0, &yv[0, 0])
        for b in range(B):
            for o in range(out_dim):
                yv[b, o] += theta[off + out_dim * C + o]
    return y


def value_and_input_grad(int channels, int layers, const double[::1] theta, const double[:, ::1] x):
    cdef int B = x.shape[0], n = x.shape[1], C = channels, L = layers
    _check(n, C, L, 1, theta.shape[0])
    cdef Py_ssize_t S = <Py_ssize_t>(1 + n) * B * C
    cdef double[::1] ws = _workspace((L + 1) * S + 2 * L * S + <Py_ssize_t>L * B * C)
    s = np.empty(B)
    g = np.empty((B, n))
    cdef double[::1] sv = s
    cdef double[:, ::1] gv = g
    cdef Py_ssize_t off = <Py_ssize_t>C * n + C + <Py_ssize_t>L * (2 * C * C + 2 * C)
    cdef const double* w
    cdef const double* H
    cdef Py_ssize_t b, c, j
    cdef double acc
    if B == 0:
        return s, g
    with nogil:
        _forward(&theta[0], &x[0, 0], &ws[0], B, n, C, L, n)
        w = &theta[0] + off
        H = &ws[0] + L * S
        for b in range(B):
            acc = theta[off + C]
            for c in range(C):
                acc += H[b * C + c] * w[c]
            sv[b] = acc
            for j in range(n):
                acc = 0.0
                for c in range(C):
                    acc += H[((j + 1) * B + b) * C + c] * w[c]
                gv[b, j] = acc
    return s, g


def dde_loss_and_grad(int channels, int layers, const double[::1] theta,
                      const double[:, ::1] x, const double[:, ::1] target):
    cdef int B = x.shape[0], n = x.shape[1], C = channels, L = layers
    cdef Py_ssize_t P = _check(n, C, L, 1, theta.shape[0])
    if target.shape[0] != B or target.shape[1] != n:
        raise ValueError("target shape must match x")
    if B == 0:
        raise ValueError("empty batch")
    cdef Py_ssize_t S = <Py_ssize_t>(1 + n) * B * C
    cdef Py_ssize_t tape = (L + 1) * S + 2 * L * S + <Py_ssize_t>L * B * C
    cdef double[::1] ws = _workspace(tape + 3 * S)
    grad = np.zeros(P)
    cdef double[::1] gv = grad
    cdef Py_ssize_t off = <Py_ssize_t>C * n + C + <Py_ssize_t>L * (2 * C * C + 2 * C)
    cdef double* Hbar = &ws[0] + tape
    cdef double* scratch = Hbar + S
    cdef const double* w
    cdef const double* H
    cdef double loss = 0.0, acc, rb
    cdef Py_ssize_t b, c, j, row
    with nogil:
        _forward(&theta[0], &x[0, 0], &ws[0], B, n, C, L, n)
        w = &theta[0] + off
        H = &ws[0] + L * S
        memset(Hbar, 0, B * C * sizeof(double))
        for j in range(n):
            for b in range(B):
                row = ((j + 1) * B + b) * C
                acc = 0.0
                for c in range(C):
                    acc += H[row + c] * w[c]
                rb = acc - target[b, j]
                loss += rb * rb
                rb = 2.0 * rb / B
                for c in range(C):
                    gv[off + c] += rb * H[row + c]
                    Hbar[row + c] = rb * w[c]
        loss /= B
        _backward(&theta[0], &gv[0], &x[0, 0], &ws[0], Hbar, scratch, B, n, C, L, n)
    return loss, grad
