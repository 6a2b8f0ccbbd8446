"""Pure numpy selective-scan kernel.

Reference implementation of the batched forward/backward pass; the compiled
``_scan_ext`` module implements the same two functions with the same
signatures. Shapes:

    u, delta : (batch, length, channels)
    A        : (channels, state)
    Bm, Cm   : (batch, length, state)
    hs       : (batch, length, channels, state)   saved hidden states
"""

import numpy as np

ZOH_EPS = 1e-8
SERIES_EPS = 1e-3


def zoh_gain(a, d, A):
    """Input gain of the ZOH rule, ``expm1(d*A) / A``; equals ``d`` as ``d*A -> 0``."""
    small = np.abs(a) < ZOH_EPS
    safe_A = np.where(small, 1.0, A)
    return np.where(small, d, np.expm1(a) / safe_A)


def zoh_gain_grad_A(a, d, A):
    # d/dA [expm1(dA)/A] = d^2 * (a e^a - expm1(a)) / a^2, series near a = 0
    small = np.abs(a) < SERIES_EPS
    safe_A = np.where(small, 1.0, A)
    exact = (a * np.exp(a) - np.expm1(a)) / (safe_A * safe_A)
    series = d * d * (0.5 + a / 3.0 + a * a / 8.0)
    return np.where(small, series, exact)


def selective_scan_fwd(u, delta, A, Bm, Cm):
    bt, L, E = u.shape
    N = A.shape[1]
    hs = np.empty((bt, L, E, N), dtype=u.dtype)
    y = np.empty((bt, L, E), dtype=u.dtype)
    h = np.zeros((bt, E, N), dtype=np.float64)
    A64 = A.astype(np.float64)[None]
    for t in range(L):
        d = delta[:, t, :, None].astype(np.float64)
        a = d * A64
        g = zoh_gain(a, d, A64)
        h = np.exp(a) * h + g * (Bm[:, t, None, :] * u[:, t, :, None])
        hs[:, t] = h
        y[:, t] = np.einsum("ben,bn->be", h, Cm[:, t].astype(np.float64))
    return y, hs


def selective_scan_bwd(u, delta, A, Bm, Cm, hs, dy):
    bt, L, E = u.shape
    N = A.shape[1]
    du = np.empty_like(u)
    ddelta = np.empty_like(delta)
    dB = np.empty_like(Bm)
    dC = np.empty_like(Cm)
    dA = np.zeros((E, N), dtype=np.float64)
    dh = np.zeros((bt, E, N), dtype=np.float64)
    A64 = A.astype(np.float64)[None]
    for t in range(L - 1, -1, -1):
        d = delta[:, t, :, None].astype(np.float64)
        a = d * A64
        ea = np.exp(a)
        small = np.abs(a) < ZOH_EPS
        g = zoh_gain(a, d, A64)
        dg_dd = np.where(small, 1.0, ea)
        dg_dA = zoh_gain_grad_A(a, d, A64)

        h_t = hs[:, t].astype(np.float64)
        dyt = dy[:, t].astype(np.float64)
        dh = dh + Cm[:, t, None, :] * dyt[:, :, None]
        dC[:, t] = np.einsum("ben,be->bn", h_t, dyt)

        h_prev = hs[:, t - 1].astype(np.float64) if t > 0 else 0.0
        x = u[:, t, :, None].astype(np.float64)
        b = Bm[:, t, None, :].astype(np.float64)
        d_ea = dh * h_prev
        d_g = dh * b * x

        du[:, t] = np.sum(dh * g * b, axis=2)
        dB[:, t] = np.sum(dh * g * x, axis=1)
        ddelta[:, t] = np.sum(d_ea * ea * A64 + d_g * dg_dd, axis=2)
        dA += np.sum(d_ea * ea * d + d_g * dg_dA, axis=0)
        dh = dh * ea
    return du, ddelta, dA.astype(A.dtype), dB, dC
