"""Compiled particle/grid transfer loops and their reverse-mode counterparts.

Weights are recomputed on the fly from positions instead of being stored, so
the loops need no per-particle stencil arrays. Loops run serially in particle
order, which keeps accumulation order (and hence rounding) fixed.
"""

import numba as nb
import numpy as np

_jit = nb.njit(cache=True, fastmath=False, nogil=True)


@_jit
def _axis_weights(x, n, w, dw, ddw):
    """Fill (3, 3) per-axis weights/derivatives; return the base node."""
    base = np.empty(3, np.int64)
    for a in range(3):
        xs = x[a] * n
        b = int(np.floor(xs - 0.5))
        fx = xs - b
        base[a] = b
        w[a, 0] = 0.5 * (1.5 - fx) ** 2
        w[a, 1] = 0.75 - (fx - 1.0) ** 2
        w[a, 2] = 0.5 * (fx - 0.5) ** 2
        dw[a, 0] = (fx - 1.5) * n
        dw[a, 1] = -2.0 * (fx - 1.0) * n
        dw[a, 2] = (fx - 0.5) * n
        ddw[a, 0] = n * n
        ddw[a, 1] = -2.0 * n * n
        ddw[a, 2] = n * n
    return base


@_jit
def _node(base, i, j, k, m):
    return ((base[0] + i) * m + base[1] + j) * m + base[2] + k


@_jit
def _grad(w, dw, i, j, k, g):
    g[0] = dw[0, i] * w[1, j] * w[2, k]
    g[1] = w[0, i] * dw[1, j] * w[2, k]
    g[2] = w[0, i] * w[1, j] * dw[2, k]


@_jit
def _hess(w, dw, ddw, i, j, k, H):
    H[0, 0] = ddw[0, i] * w[1, j] * w[2, k]
    H[1, 1] = w[0, i] * ddw[1, j] * w[2, k]
    H[2, 2] = w[0, i] * w[1, j] * ddw[2, k]
    H[0, 1] = H[1, 0] = dw[0, i] * dw[1, j] * w[2, k]
    H[0, 2] = H[2, 0] = dw[0, i] * w[1, j] * dw[2, k]
    H[1, 2] = H[2, 1] = w[0, i] * dw[1, j] * dw[2, k]


@_jit
def p2g(pos, vel, mass, vol, tau, affine, use_affine, n, m_out, mom_out, f_out):
    """Accumulate grid mass, momentum and internal force (outputs pre-zeroed)."""
    m = n + 1
    h = 1.0 / n
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    ddw = np.empty((3, 3))
    g = np.empty(3)
    for p in range(pos.shape[0]):
        base = _axis_weights(pos[p], n, w, dw, ddw)
        M = mass[p]
        V = vol[p]
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    b = _node(base, i, j, k, m)
                    wt = w[0, i] * w[1, j] * w[2, k]
                    _grad(w, dw, i, j, k, g)
                    m_out[b] += wt * M
                    d0 = d1 = d2 = 0.0
                    if use_affine:
                        d0 = (base[0] + i) * h - pos[p, 0]
                        d1 = (base[1] + j) * h - pos[p, 1]
                        d2 = (base[2] + k) * h - pos[p, 2]
                    for a in range(3):
                        mv = vel[p, a]
                        if use_affine:
                            mv += affine[p, a, 0] * d0 + affine[p, a, 1] * d1 + affine[p, a, 2] * d2
                        mom_out[b, a] += wt * M * mv
                        f_out[b, a] -= V * (tau[p, a, 0] * g[0] + tau[p, a, 1] * g[1]
                                            + tau[p, a, 2] * g[2])


@_jit
def g2p(pos, vg, n, use_affine, v_out, G_out, C_out):
    """Interpolate velocity and velocity gradient (and APIC affine matrix)."""
    m = n + 1
    h = 1.0 / n
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    ddw = np.empty((3, 3))
    g = np.empty(3)
    for p in range(pos.shape[0]):
        base = _axis_weights(pos[p], n, w, dw, ddw)
        for a in range(3):
            v_out[p, a] = 0.0
            for c in range(3):
                G_out[p, a, c] = 0.0
                if use_affine:
                    C_out[p, a, c] = 0.0
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    b = _node(base, i, j, k, m)
                    wt = w[0, i] * w[1, j] * w[2, k]
                    _grad(w, dw, i, j, k, g)
                    d0 = d1 = d2 = 0.0
                    if use_affine:
                        d0 = (base[0] + i) * h - pos[p, 0]
                        d1 = (base[1] + j) * h - pos[p, 1]
                        d2 = (base[2] + k) * h - pos[p, 2]
                    for a in range(3):
                        vb = vg[b, a]
                        v_out[p, a] += wt * vb
                        for c in range(3):
                            G_out[p, a, c] += vb * g[c]
                        if use_affine:
                            s = 4.0 * n * n * wt * vb
                            C_out[p, a, 0] += s * d0
                            C_out[p, a, 1] += s * d1
                            C_out[p, a, 2] += s * d2


@_jit
def g2p_vjp(pos, vg, n, vbar, Gbar, vg_bar, p_bar):
    """Cotangents of g2p: accumulate into vg_bar (grid) and p_bar (particles)."""
    m = n + 1
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    ddw = np.empty((3, 3))
    g = np.empty(3)
    H = np.empty((3, 3))
    r = np.empty(3)
    for p in range(pos.shape[0]):
        base = _axis_weights(pos[p], n, w, dw, ddw)
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    b = _node(base, i, j, k, m)
                    wt = w[0, i] * w[1, j] * w[2, k]
                    _grad(w, dw, i, j, k, g)
                    _hess(w, dw, ddw, i, j, k, H)
                    vdot = 0.0
                    for a in range(3):
                        vg_bar[b, a] += wt * vbar[p, a] + (Gbar[p, a, 0] * g[0]
                                                          + Gbar[p, a, 1] * g[1]
                                                          + Gbar[p, a, 2] * g[2])
                        vdot += vg[b, a] * vbar[p, a]
                    # r = Gbar^T vg_b
                    for c in range(3):
                        r[c] = (Gbar[p, 0, c] * vg[b, 0] + Gbar[p, 1, c] * vg[b, 1]
                                + Gbar[p, 2, c] * vg[b, 2])
                    for d in range(3):
                        p_bar[p, d] += vdot * g[d] + H[d, 0] * r[0] + H[d, 1] * r[1] + H[d, 2] * r[2]


@_jit
def p2g_vjp(pos, vel, mass, vol, tau, n, m_bar, mom_bar, f_bar, p_bar, v_bar, tau_bar):
    """Cotangents of p2g (PIC form) given grid mass/momentum/force cotangents."""
    m = n + 1
    w = np.empty((3, 3))
    dw = np.empty((3, 3))
    ddw = np.empty((3, 3))
    g = np.empty(3)
    H = np.empty((3, 3))
    s = np.empty(3)
    for p in range(pos.shape[0]):
        base = _axis_weights(pos[p], n, w, dw, ddw)
        M = mass[p]
        V = vol[p]
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    b = _node(base, i, j, k, m)
                    wt = w[0, i] * w[1, j] * w[2, k]
                    _grad(w, dw, i, j, k, g)
                    _hess(w, dw, ddw, i, j, k, H)
                    coef = m_bar[b]
                    for a in range(3):
                        v_bar[p, a] += wt * M * mom_bar[b, a]
                        coef += mom_bar[b, a] * vel[p, a]
                        for c in range(3):
                            tau_bar[p, a, c] -= V * f_bar[b, a] * g[c]
                    # s_c = sum_a fbar_a tau_ac
                    for c in range(3):
                        s[c] = (f_bar[b, 0] * tau[p, 0, c] + f_bar[b, 1] * tau[p, 1, c]
                                + f_bar[b, 2] * tau[p, 2, c])
                    for d in range(3):
                        p_bar[p, d] += (M * coef * g[d]
                                        - V * (H[d, 0] * s[0] + H[d, 1] * s[1] + H[d, 2] * s[2]))
