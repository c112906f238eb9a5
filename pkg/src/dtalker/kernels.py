"""Recurrent sequence kernels (GRU / LSTM) with a compiled and a numpy path.

The time-stepped recurrences are the only loops in the package that are hot
enough to matter, so they are written once in a numba-compatible subset of
numpy and either compiled with ``@njit`` or run as-is.  Input projections
(``x @ W_ih + b_ih``) are precomputed by the caller as one large matmul so
the kernels only carry the unavoidable sequential dependency.

Gate layouts follow the usual convention: GRU rows are ``[r, z, n]`` with the
candidate using ``r * (W_hn h + b_hn)``; LSTM rows are ``[i, f, g, o]``.

Scalar constants inside the kernels are materialised from the input dtype
(``np.ones(1, dtype)[0]``) so a float32 call does not silently promote the
whole recurrence to float64 under numba's literal typing rules.
"""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np

from .backend import USE_NUMBA


def _gru_fwd(xproj, h0, w_hh, b_hh):
    """Run a GRU over ``xproj`` [F, 3H]; returns h_all plus gate stashes.

    h0 [H], w_hh [3H, H], b_hh [3H].  The stashes (r, z, n and the recurrent
    candidate pre-gate term) are exactly what the backward pass needs.
    """
    F = xproj.shape[0]
    H = h0.shape[0]
    one = np.ones(1, xproj.dtype)[0]
    h_all = np.empty((F, H), xproj.dtype)
    r_all = np.empty((F, H), xproj.dtype)
    z_all = np.empty((F, H), xproj.dtype)
    n_all = np.empty((F, H), xproj.dtype)
    hn_all = np.empty((F, H), xproj.dtype)
    h = h0.copy()
    for t in range(F):
        hh = np.dot(w_hh, h) + b_hh
        r = one / (one + np.exp(-(xproj[t, :H] + hh[:H])))
        z = one / (one + np.exp(-(xproj[t, H:2 * H] + hh[H:2 * H])))
        hn = hh[2 * H:]
        n = np.tanh(xproj[t, 2 * H:] + r * hn)
        h = (one - z) * n + z * h
        r_all[t] = r
        z_all[t] = z
        n_all[t] = n
        hn_all[t] = hn
        h_all[t] = h
    return h_all, r_all, z_all, n_all, hn_all


def _gru_bwd(dh_all, h_all, h0, r_all, z_all, n_all, hn_all, w_hh):
    """Backprop through :func:`_gru_fwd`; returns (dxproj, dw_hh, db_hh)."""
    F = dh_all.shape[0]
    H = dh_all.shape[1]
    one = np.ones(1, dh_all.dtype)[0]
    dxproj = np.empty((F, 3 * H), dh_all.dtype)
    dw_hh = np.zeros(w_hh.shape, dh_all.dtype)
    db_hh = np.zeros(3 * H, dh_all.dtype)
    w_hh_t = np.ascontiguousarray(w_hh.T)
    carry = np.zeros(H, dh_all.dtype)
    g = np.empty(3 * H, dh_all.dtype)
    for t in range(F - 1, -1, -1):
        dh = dh_all[t] + carry
        if t > 0:
            h_prev = h_all[t - 1]
        else:
            h_prev = h0
        r = r_all[t]
        z = z_all[t]
        n = n_all[t]
        dn = dh * (one - z)
        dz = dh * (h_prev - n)
        dpn = dn * (one - n * n)
        dr = dpn * hn_all[t]
        dhn = dpn * r
        dpr = dr * r * (one - r)
        dpz = dz * z * (one - z)
        dxproj[t, :H] = dpr
        dxproj[t, H:2 * H] = dpz
        dxproj[t, 2 * H:] = dpn
        g[:H] = dpr
        g[H:2 * H] = dpz
        g[2 * H:] = dhn
        dw_hh += g.reshape(-1, 1) * h_prev.reshape(1, -1)
        db_hh += g
        carry = dh * z + np.dot(w_hh_t, g)
    return dxproj, dw_hh, db_hh


def _lstm_fwd(xproj, h0, c0, w_hh, b_hh):
    """Run an LSTM over ``xproj`` [F, 4H]; returns h_all, c_all and gates."""
    F = xproj.shape[0]
    H = h0.shape[0]
    one = np.ones(1, xproj.dtype)[0]
    h_all = np.empty((F, H), xproj.dtype)
    c_all = np.empty((F, H), xproj.dtype)
    i_all = np.empty((F, H), xproj.dtype)
    f_all = np.empty((F, H), xproj.dtype)
    g_all = np.empty((F, H), xproj.dtype)
    o_all = np.empty((F, H), xproj.dtype)
    h = h0.copy()
    c = c0.copy()
    for t in range(F):
        p = xproj[t] + np.dot(w_hh, h) + b_hh
        i = one / (one + np.exp(-p[:H]))
        f = one / (one + np.exp(-p[H:2 * H]))
        gg = np.tanh(p[2 * H:3 * H])
        o = one / (one + np.exp(-p[3 * H:]))
        c = f * c + i * gg
        h = o * np.tanh(c)
        i_all[t] = i
        f_all[t] = f
        g_all[t] = gg
        o_all[t] = o
        c_all[t] = c
        h_all[t] = h
    return h_all, c_all, i_all, f_all, g_all, o_all


def _lstm_bwd(dh_all, h_all, c_all, i_all, f_all, g_all, o_all, h0, c0, w_hh):
    """Backprop through :func:`_lstm_fwd`; returns (dxproj, dw_hh, db_hh)."""
    F = dh_all.shape[0]
    H = dh_all.shape[1]
    one = np.ones(1, dh_all.dtype)[0]
    dxproj = np.empty((F, 4 * H), dh_all.dtype)
    dw_hh = np.zeros(w_hh.shape, dh_all.dtype)
    db_hh = np.zeros(4 * H, dh_all.dtype)
    w_hh_t = np.ascontiguousarray(w_hh.T)
    carry_h = np.zeros(H, dh_all.dtype)
    carry_c = np.zeros(H, dh_all.dtype)
    gp = np.empty(4 * H, dh_all.dtype)
    for t in range(F - 1, -1, -1):
        dh = dh_all[t] + carry_h
        tc = np.tanh(c_all[t])
        i = i_all[t]
        f = f_all[t]
        gg = g_all[t]
        o = o_all[t]
        do = dh * tc
        dc = carry_c + dh * o * (one - tc * tc)
        if t > 0:
            c_prev = c_all[t - 1]
            h_prev = h_all[t - 1]
        else:
            c_prev = c0
            h_prev = h0
        di = dc * gg
        df = dc * c_prev
        dg = dc * i
        carry_c = dc * f
        gp[:H] = di * i * (one - i)
        gp[H:2 * H] = df * f * (one - f)
        gp[2 * H:3 * H] = dg * (one - gg * gg)
        gp[3 * H:] = do * o * (one - o)
        dxproj[t] = gp
        dw_hh += gp.reshape(-1, 1) * h_prev.reshape(1, -1)
        db_hh += gp
        carry_h = np.dot(w_hh_t, gp)
    return dxproj, dw_hh, db_hh


_PY_KERNELS = {
    "gru_fwd": _gru_fwd,
    "gru_bwd": _gru_bwd,
    "lstm_fwd": _lstm_fwd,
    "lstm_bwd": _lstm_bwd,
}

_BUILT: dict = {}


def build_kernels(use_numba: bool) -> SimpleNamespace:
    """Return the kernel set for one backend; compiled lazily and memoised."""
    key = bool(use_numba)
    if key not in _BUILT:
        if key:
            from numba import njit

            wrapped = {k: njit(cache=True)(f) for k, f in _PY_KERNELS.items()}
        else:
            wrapped = dict(_PY_KERNELS)
        _BUILT[key] = SimpleNamespace(**wrapped)
    return _BUILT[key]


active = build_kernels(USE_NUMBA)
