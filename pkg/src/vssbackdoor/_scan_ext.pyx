# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selective-scan kernel; same contract as ``_scan_py``.

State and gradient accumulators are kept in double precision regardless of
the input dtype.
"""

import numpy as np

from cython cimport floating
from libc.math cimport exp, fabs

cdef double ZOH_EPS = 1e-8
cdef double EXPM1_EPS = 1e-5
cdef double SERIES_EPS = 1e-3


cdef inline double _gain(double a, double ea, double d, double A) noexcept nogil:
    # expm1(a) / A from a precomputed exp(a); series where ea - 1 cancels
    if fabs(a) < ZOH_EPS:
        return d
    if fabs(a) < EXPM1_EPS:
        return d * (1.0 + a * (0.5 + a / 6.0))
    return (ea - 1.0) / A


cdef inline double _gain_grad_A(double a, double ea, double d, double A) noexcept nogil:
    if fabs(a) < SERIES_EPS:
        return d * d * (0.5 + a / 3.0 + a * a / 8.0)
    return (a * ea - (ea - 1.0)) / (A * A)


def selective_scan_fwd(floating[:, :, ::1] u, floating[:, :, ::1] delta,
                       floating[:, ::1] A, floating[:, :, ::1] Bm,
                       floating[:, :, ::1] Cm):
    cdef Py_ssize_t bt = u.shape[0], L = u.shape[1], E = u.shape[2]
    cdef Py_ssize_t N = A.shape[1]
    cdef Py_ssize_t b, t, e, n
    cdef double d, x, a, Aen, ea, acc

    dtype = np.float32 if floating is float else np.float64
    hs_arr = np.empty((bt, L, E, N), dtype=dtype)
    y_arr = np.empty((bt, L, E), dtype=dtype)
    cdef floating[:, :, :, ::1] hs = hs_arr
    cdef floating[:, :, ::1] y = y_arr
    cdef double[::1] h = np.zeros(N, dtype=np.float64)

    with nogil:
        for b in range(bt):
            for e in range(E):
                for n in range(N):
                    h[n] = 0.0
                for t in range(L):
                    d = delta[b, t, e]
                    x = u[b, t, e]
                    acc = 0.0
                    for n in range(N):
                        Aen = A[e, n]
                        a = d * Aen
                        ea = exp(a)
                        h[n] = ea * h[n] + _gain(a, ea, d, Aen) * Bm[b, t, n] * x
                        hs[b, t, e, n] = <floating>h[n]
                        acc += Cm[b, t, n] * h[n]
                    y[b, t, e] = <floating>acc
    return y_arr, hs_arr


def selective_scan_bwd(floating[:, :, ::1] u, floating[:, :, ::1] delta,
                       floating[:, ::1] A, floating[:, :, ::1] Bm,
                       floating[:, :, ::1] Cm, floating[:, :, :, ::1] hs,
                       floating[:, :, ::1] dy):
    cdef Py_ssize_t bt = u.shape[0], L = u.shape[1], E = u.shape[2]
    cdef Py_ssize_t N = A.shape[1]
    cdef Py_ssize_t b, t, e, n
    cdef double d, x, a, Aen, ea, g, dg_dd, dyt, h_prev, bv, d_ea, d_g
    cdef double acc_u, acc_d

    dtype = np.float32 if floating is float else np.float64
    du_arr = np.empty((bt, L, E), dtype=dtype)
    dd_arr = np.empty((bt, L, E), dtype=dtype)
    dB_arr = np.zeros((bt, L, N), dtype=np.float64)
    dC_arr = np.zeros((bt, L, N), dtype=np.float64)
    dA_arr = np.zeros((E, N), dtype=np.float64)
    cdef floating[:, :, ::1] du = du_arr
    cdef floating[:, :, ::1] ddelta = dd_arr
    cdef double[:, :, ::1] dB = dB_arr
    cdef double[:, :, ::1] dC = dC_arr
    cdef double[:, ::1] dA = dA_arr
    cdef double[::1] dh = np.zeros(N, dtype=np.float64)

    with nogil:
        for b in range(bt):
            for e in range(E):
                for n in range(N):
                    dh[n] = 0.0
                for t in range(L - 1, -1, -1):
                    d = delta[b, t, e]
                    x = u[b, t, e]
                    dyt = dy[b, t, e]
                    acc_u = 0.0
                    acc_d = 0.0
                    for n in range(N):
                        Aen = A[e, n]
                        a = d * Aen
                        ea = exp(a)
                        g = _gain(a, ea, d, Aen)
                        dg_dd = 1.0 if fabs(a) < ZOH_EPS else ea
                        bv = Bm[b, t, n]
                        dh[n] += Cm[b, t, n] * dyt
                        dC[b, t, n] += dyt * hs[b, t, e, n]
                        h_prev = hs[b, t - 1, e, n] if t > 0 else 0.0
                        d_ea = dh[n] * h_prev
                        d_g = dh[n] * bv * x
                        acc_u += dh[n] * g * bv
                        dB[b, t, n] += dh[n] * g * x
                        acc_d += d_ea * ea * Aen + d_g * dg_dd
                        dA[e, n] += d_ea * ea * d + d_g * _gain_grad_A(a, ea, d, Aen)
                        dh[n] = dh[n] * ea
                    du[b, t, e] = <floating>acc_u
                    ddelta[b, t, e] = <floating>acc_d
    return (du_arr, dd_arr, dA_arr.astype(dtype), dB_arr.astype(dtype),
            dC_arr.astype(dtype))
