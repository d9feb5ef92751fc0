"""Compiled inner loops for the per-slot hot path.

Each kernel has a plain numpy counterpart elsewhere in the package that the
tests compare it against.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def lstm_last_hidden(X, Wx, Wh, b):
    """Final hidden state of the LSTM over one (T, D) window, zero initial state."""
    T = X.shape[0]
    H = Wh.shape[0]
    h = np.zeros(H)
    c = np.zeros(H)
    zx = X @ Wx
    for t in range(T):
        z = zx[t] + b + h @ Wh
        for j in range(H):
            i = 1.0 / (1.0 + np.exp(-z[j]))
            f = 1.0 / (1.0 + np.exp(-z[H + j]))
            o = 1.0 / (1.0 + np.exp(-z[2 * H + j]))
            c[j] = f * c[j] + i * np.tanh(z[3 * H + j])
            h[j] = o * np.tanh(c[j])
    return h


@numba.njit(cache=True)
def multipath_channel(gains, sin_angles, spacing, M):
    """h[k, m] = sum_l gains[k, l] * exp(j 2 pi spacing m sin_angles[k, l])."""
    K, L = gains.shape
    h = np.zeros((K, M), dtype=np.complex128)
    for k in range(K):
        for l in range(L):
            w = 2.0 * np.pi * spacing * sin_angles[k, l]
            g = gains[k, l]
            for m in range(M):
                h[k, m] += g * np.exp(1j * (w * m))
    return h
