"""Jitted kernels for the chain-method ODE system.

State layout ``z = (x_r, v_r, r, s, v_0, v_1..v_N, w_1..w_N)`` with time
measured in units of the delay. Two integrators live here: an adaptive,
event-driven DOPRI5 for simulation and a fixed-step DOPRI5 with variational
equations for shooting. The fixed-step map is a smooth function of its
inputs, so Newton iterations on it converge quadratically.
"""

import math

import numpy as np
from numba import njit

from ._dopri import (
    A21, A31, A32, A41, A42, A43, A51, A52, A53, A54, A61, A62, A63, A64, A65,
    A71, A73, A74, A75, A76, C2, C3, C4, C5, E1, E3, E4, E5, E6, E7,
    dense_eval1, fill_dense, grow2, grow3, grow_i2,
)

OK, UNDERFLOW, EVENT_STORM = 0, 1, 3
SURF_IMPACT, SURF_STICK, SURF_RELEASE = 0, 1, 2
N_SUB = 4
_A_TAB = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [A21, 0.0, 0.0, 0.0, 0.0],
    [A31, A32, 0.0, 0.0, 0.0],
    [A41, A42, A43, 0.0, 0.0],
    [A51, A52, A53, A54, 0.0],
    [A61, A62, A63, A64, A65],
])
# parameter indices that have a sensitivity column
P_OMEGA, P_ALPHA, P_K, P_TAUD = 0, 1, 6, 7


@njit(cache=True)
def chain_rhs(z, par, N, contact, motion, out):
    omega, alpha, zeta, delta, beta, gamma, K, tau_d = (
        par[0], par[1], par[2], par[3], par[4], par[5], par[6], par[7])
    xr = z[0]
    vr = z[1]
    r = z[2]
    s = z[3]
    imp = beta * (xr - delta) if contact == 1 else 0.0
    ubar = K * (z[4 + N] - z[4])
    a0 = alpha * s + ubar - xr - 2.0 * zeta * vr - imp
    f = xr + 2.0 * zeta * vr + imp
    rho2 = r * r + s * s
    out[0] = tau_d * vr
    out[1] = tau_d * (a0 - abs(motion) * (f - motion) / gamma)
    out[2] = r + omega * tau_d * s - r * rho2
    out[3] = s - omega * tau_d * r - s * rho2
    out[4] = tau_d * a0
    n2 = 2.0 * N * N
    for i in range(1, N + 1):
        out[4 + i] = z[4 + N + i]
        out[4 + N + i] = n2 * (z[3 + i] - z[4 + i] - z[4 + N + i] / N)


@njit(cache=True)
def fmc(z, par, contact):
    imp = par[4] * (z[0] - par[3]) if contact == 1 else 0.0
    return z[0] + 2.0 * par[2] * z[1] + imp


@njit(cache=True)
def jac_mul(z, par, N, contact, motion, X, out):
    """out = J(z) @ X for the chain vector field."""
    omega, alpha, zeta, beta, gamma, K, tau_d = (
        par[0], par[1], par[2], par[4], par[5], par[6], par[7])
    hb = beta if contact == 1 else 0.0
    am = abs(motion)
    r = z[2]
    s = z[3]
    rho2 = r * r + s * s
    j40 = tau_d * (-1.0 - hb)
    j41 = -2.0 * zeta * tau_d
    j10 = j40 - tau_d * am * (1.0 + hb) / gamma
    j11 = j41 - tau_d * am * 2.0 * zeta / gamma
    ja = tau_d * alpha
    jk = tau_d * K
    a22 = 1.0 - rho2 - 2.0 * r * r
    a23 = omega * tau_d - 2.0 * r * s
    a32 = -omega * tau_d - 2.0 * r * s
    a33 = 1.0 - rho2 - 2.0 * s * s
    n2 = 2.0 * N * N
    n1 = 2.0 * N
    for c in range(X.shape[1]):
        common = ja * X[3, c] - jk * X[4, c] + jk * X[4 + N, c]
        out[0, c] = tau_d * X[1, c]
        out[1, c] = j10 * X[0, c] + j11 * X[1, c] + common
        out[2, c] = a22 * X[2, c] + a23 * X[3, c]
        out[3, c] = a32 * X[2, c] + a33 * X[3, c]
        out[4, c] = j40 * X[0, c] + j41 * X[1, c] + common
        for i in range(1, N + 1):
            out[4 + i, c] = X[4 + N + i, c]
            out[4 + N + i, c] = n2 * (X[3 + i, c] - X[4 + i, c]) - n1 * X[4 + N + i, c]


@njit(cache=True)
def dfdp(z, par, N, contact, motion, k, out):
    """Derivative of the vector field with respect to parameter ``k``."""
    for j in range(out.shape[0]):
        out[j] = 0.0
    omega, alpha, zeta, delta, beta, gamma, K, tau_d = (
        par[0], par[1], par[2], par[3], par[4], par[5], par[6], par[7])
    if k == P_OMEGA:
        out[2] = tau_d * z[3]
        out[3] = -tau_d * z[2]
    elif k == P_ALPHA:
        out[1] = tau_d * z[3]
        out[4] = tau_d * z[3]
    elif k == P_K:
        d = tau_d * (z[4 + N] - z[4])
        out[1] = d
        out[4] = d
    elif k == P_TAUD:
        imp = beta * (z[0] - delta) if contact == 1 else 0.0
        a0 = alpha * z[3] + K * (z[4 + N] - z[4]) - z[0] - 2.0 * zeta * z[1] - imp
        f = z[0] + 2.0 * zeta * z[1] + imp
        out[0] = z[1]
        out[1] = a0 - abs(motion) * (f - motion) / gamma
        out[2] = omega * z[3]
        out[3] = -omega * z[2]
        out[4] = a0


@njit(cache=True)
def _var_rhs(z, X, par, N, contact, motion, pidx, dz, dX, fp):
    chain_rhs(z, par, N, contact, motion, dz)
    jac_mul(z, par, N, contact, motion, X, dX)
    n = z.shape[0]
    for q in range(pidx.shape[0]):
        dfdp(z, par, N, contact, motion, pidx[q], fp)
        c = n + q
        for j in range(n):
            dX[j, c] += fp[j]


@njit(cache=True)
def flow_fixed(z0, par, N, contact, motion, T, nsteps, with_var, pidx):
    """Fixed-step DOPRI5 over duration ``T`` in one mode.

    Returns ``(z_end, X, peaks, guard)``. With ``with_var`` the matrix ``X`` holds
    d z_end / d z0 in its first n columns and d z_end / d par[pidx] after;
    otherwise it is empty. ``peaks`` lists interior maxima of x_r (value
    and time) located by cubic Hermite interpolation where v_r turns from
    positive to negative. ``guard`` holds the smallest interior values of
    the contact guard (``x_r - delta`` signed to be positive in the mode)
    and the motion guard (``motion * v_c``, or ``1 - |f_mc|`` at rest).
    """
    n = z0.shape[0]
    npar = pidx.shape[0]
    h = T / nsteps
    z = z0.copy()
    ncol = n + npar if with_var else 0
    X = np.zeros((n, ncol))
    if with_var:
        for j in range(n):
            X[j, j] = 1.0
    k = np.empty((6, n))
    kX = np.empty((6, n, ncol))
    zs = np.empty(n)
    Xs = np.empty((n, ncol))
    fp = np.empty(n)
    dzt = np.empty(n)
    dXt = np.empty((n, ncol))
    peaks = np.empty((0, 2))
    npk = 0
    pk = np.empty((8, 2))
    a = _A_TAB
    tau_d = par[7]
    guard = np.array([np.inf, np.inf])
    csign = 1.0 if contact == 1 else -1.0
    for step in range(nsteps):
        x_a = z[0]
        v_a = z[1]
        for st in range(6):
            for j in range(n):
                acc = z[j]
                for q in range(st):
                    acc += h * a[st, q] * k[q, j]
                zs[j] = acc
            if with_var:
                for j in range(n):
                    for c in range(ncol):
                        acc = X[j, c]
                        for q in range(st):
                            acc += h * a[st, q] * kX[q, j, c]
                        Xs[j, c] = acc
                _var_rhs(zs, Xs, par, N, contact, motion, pidx, dzt, dXt, fp)
                for j in range(n):
                    k[st, j] = dzt[j]
                    for c in range(ncol):
                        kX[st, j, c] = dXt[j, c]
            else:
                chain_rhs(zs, par, N, contact, motion, dzt)
                for j in range(n):
                    k[st, j] = dzt[j]
        for j in range(n):
            z[j] += h * (A71 * k[0, j] + A73 * k[2, j] + A74 * k[3, j] + A75 * k[4, j] + A76 * k[5, j])
        if with_var:
            for j in range(n):
                for c in range(ncol):
                    X[j, c] += h * (A71 * kX[0, j, c] + A73 * kX[2, j, c] + A74 * kX[3, j, c]
                                    + A75 * kX[4, j, c] + A76 * kX[5, j, c])
        if step < nsteps - 1:
            gc = csign * (z[0] - par[3])
            if gc < guard[0]:
                guard[0] = gc
            if motion == 0:
                gm = 1.0 - abs(fmc(z, par, contact))
            else:
                gm = motion * (z[4] - z[1])
            if gm < guard[1]:
                guard[1] = gm
        v_b = z[1]
        if v_a > 0.0 and v_b <= 0.0:
            # Hermite cubic for x_r with slopes tau_d * v_r
            x_b = z[0]
            d_a = h * tau_d * v_a
            d_b = h * tau_d * v_b
            # p'(th) = 0 for p = h00 x_a + h10 d_a + h01 x_b + h11 d_b
            c2 = 6.0 * x_a + 3.0 * d_a - 6.0 * x_b + 3.0 * d_b
            c1 = -6.0 * x_a - 4.0 * d_a + 6.0 * x_b - 2.0 * d_b
            c0 = d_a
            th = 0.5
            if abs(c2) > 1e-300:
                disc = c1 * c1 - 4.0 * c2 * c0
                if disc < 0.0:
                    disc = 0.0
                sq = math.sqrt(disc)
                r1 = (-c1 + sq) / (2.0 * c2)
                r2 = (-c1 - sq) / (2.0 * c2)
                th = r1 if 0.0 <= r1 <= 1.0 else r2
            elif abs(c1) > 1e-300:
                th = -c0 / c1
            th = min(1.0, max(0.0, th))
            t2 = th * th
            t3 = t2 * th
            xm = ((2 * t3 - 3 * t2 + 1) * x_a + (t3 - 2 * t2 + th) * d_a
                  + (-2 * t3 + 3 * t2) * x_b + (t3 - t2) * d_b)
            if npk >= pk.shape[0]:
                pk2 = np.empty((2 * pk.shape[0], 2))
                pk2[:npk] = pk[:npk]
                pk = pk2
            pk[npk, 0] = xm
            pk[npk, 1] = (step + th) * h
            npk += 1
    peaks = pk[:npk].copy()
    if contact == 0:
        for q in range(npk):
            if 0.0 < pk[q, 1] < T and par[3] - pk[q, 0] < guard[0]:
                guard[0] = par[3] - pk[q, 0]
    return z, X, peaks, guard


@njit(cache=True)
def _surface(surf, z, par, contact, motion):
    if surf == SURF_IMPACT:
        return z[0] - par[3]
    if surf == SURF_STICK:
        return motion * (z[4] - z[1])
    return abs(fmc(z, par, contact)) - 1.0


@njit(cache=True)
def _triggered(surf, g, contact):
    if surf == SURF_IMPACT:
        return g >= 0.0 if contact == 0 else g < 0.0
    if surf == SURF_STICK:
        return g <= 0.0
    return g > 0.0


@njit(cache=True)
def _dense_core(coef, th, tmp):
    for j in range(5):
        tmp[j] = dense_eval1(coef, th, j)


@njit(cache=True)
def _refine(surf, coef, a, b, par, contact, motion, eps, tmp):
    for _ in range(200):
        _dense_core(coef, b, tmp)
        gb = _surface(surf, tmp, par, contact, motion)
        if abs(gb) <= eps or (b - a) <= 1e-15:
            break
        m = 0.5 * (a + b)
        _dense_core(coef, m, tmp)
        gm = _surface(surf, tmp, par, contact, motion)
        if _triggered(surf, gm, contact):
            b = m
        else:
            a = m
    return b


@njit(cache=True)
def _vr_zero(coef, a, b, sign_a):
    for _ in range(60):
        m = 0.5 * (a + b)
        if dense_eval1(coef, m, 1) * sign_a > 0:
            a = m
        else:
            b = m
    return 0.5 * (a + b)


@njit(cache=True)
def chain_run(par, N, t0, tf, z0, contact, motion, t_rec, nstore,
              T0, TE, HP, C, MD, n, EVT, EVI, EVZ, nev, rtol, atol, eps_ev, hmax, h0):
    """Adaptive event-driven integration of the chain system.

    Steps ending after ``t_rec`` are stored with their first ``nstore``
    dense components. Events store the full state at the switch in EVZ.
    """
    dim = z0.shape[0]
    z = z0.copy()
    t = t0
    k1 = np.empty(dim)
    k2 = np.empty(dim)
    k3 = np.empty(dim)
    k4 = np.empty(dim)
    k5 = np.empty(dim)
    k6 = np.empty(dim)
    k7 = np.empty(dim)
    ys = np.empty(dim)
    yn = np.empty(dim)
    coef = np.empty((5, dim))
    tmp = np.empty(5)
    prev = np.empty(5)
    h = min(hmax, h0)
    fsal = False
    stall = 0
    status = OK
    info = -1
    tend_tol = 1e-13 * max(1.0, abs(tf))
    while t < tf - tend_tol:
        if not fsal:
            chain_rhs(z, par, N, contact, motion, k1)
        h = min(h, hmax, tf - t)
        if h <= 1e-14 * max(1.0, abs(t)):
            status = UNDERFLOW
            break
        for j in range(dim):
            ys[j] = z[j] + h * A21 * k1[j]
        chain_rhs(ys, par, N, contact, motion, k2)
        for j in range(dim):
            ys[j] = z[j] + h * (A31 * k1[j] + A32 * k2[j])
        chain_rhs(ys, par, N, contact, motion, k3)
        for j in range(dim):
            ys[j] = z[j] + h * (A41 * k1[j] + A42 * k2[j] + A43 * k3[j])
        chain_rhs(ys, par, N, contact, motion, k4)
        for j in range(dim):
            ys[j] = z[j] + h * (A51 * k1[j] + A52 * k2[j] + A53 * k3[j] + A54 * k4[j])
        chain_rhs(ys, par, N, contact, motion, k5)
        for j in range(dim):
            ys[j] = z[j] + h * (A61 * k1[j] + A62 * k2[j] + A63 * k3[j] + A64 * k4[j] + A65 * k5[j])
        chain_rhs(ys, par, N, contact, motion, k6)
        for j in range(dim):
            yn[j] = z[j] + h * (A71 * k1[j] + A73 * k3[j] + A74 * k4[j] + A75 * k5[j] + A76 * k6[j])
        chain_rhs(yn, par, N, contact, motion, k7)
        err = 0.0
        for j in range(dim):
            sc = atol + rtol * max(abs(z[j]), abs(yn[j]))
            e = h * (E1 * k1[j] + E3 * k3[j] + E4 * k4[j] + E5 * k5[j] + E6 * k6[j] + E7 * k7[j]) / sc
            err += e * e
        err = math.sqrt(err / dim)
        if err != err:
            status = UNDERFLOW
            break
        if err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2)
            continue
        fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        h_next = h * fac
        fill_dense(z, yn, k1, k3, k4, k5, k6, k7, h, coef)
        th_e = 2.0
        redo = False
        s_e = -1
        for j in range(5):
            prev[j] = z[j]
        th_prev = 0.0
        for isub in range(1, N_SUB + 1):
            th = isub / N_SUB
            _dense_core(coef, th, tmp)
            g0 = tmp[0] - par[3]
            cand_hi = -1.0
            if _triggered(SURF_IMPACT, g0, contact):
                cand_hi = th
            else:
                vp = prev[1]
                vn = tmp[1]
                if contact == 0 and vp > 0.0 and vn <= 0.0:
                    ts = _vr_zero(coef, th_prev, th, 1.0)
                    if dense_eval1(coef, ts, 0) - par[3] >= 0.0:
                        cand_hi = ts
                elif contact == 1 and vp < 0.0 and vn >= 0.0:
                    ts = _vr_zero(coef, th_prev, th, -1.0)
                    if dense_eval1(coef, ts, 0) - par[3] < 0.0:
                        cand_hi = ts
            if cand_hi >= 0.0:
                r = _refine(SURF_IMPACT, coef, th_prev, cand_hi, par, contact, motion, eps_ev, ys)
                if r < th_e:
                    th_e = r
                    s_e = SURF_IMPACT
            if motion != 0:
                gv = motion * (tmp[4] - tmp[1])
                if _triggered(SURF_STICK, gv, contact):
                    gvp = motion * (prev[4] - prev[1])
                    lo = th_prev
                    if gvp <= 0.0:
                        lo = -1.0
                        for jj in range(1, 65):
                            thj = th_prev + (th - th_prev) * jj / 64.0
                            if motion * (dense_eval1(coef, thj, 4) - dense_eval1(coef, thj, 1)) > 0.0:
                                lo = thj
                            elif lo >= 0.0:
                                break
                    if lo >= 0.0:
                        hi = th
                        if lo > th_prev:
                            for jj in range(1, 65):
                                thj = lo + (th - lo) * jj / 64.0
                                if motion * (dense_eval1(coef, thj, 4) - dense_eval1(coef, thj, 1)) <= 0.0:
                                    hi = thj
                                    break
                        r = _refine(SURF_STICK, coef, lo, hi, par, contact, motion, eps_ev, ys)
                    elif h > 1e-9 * max(1.0, abs(t)):
                        # excursion shorter than the scan resolution: retry smaller
                        redo = True
                        break
                    else:
                        r = th
                    if r < th_e:
                        th_e = r
                        s_e = SURF_STICK
            else:
                gr = abs(fmc(tmp, par, contact)) - 1.0
                if gr > 0.0:
                    r = _refine(SURF_RELEASE, coef, th_prev, th, par, contact, motion, eps_ev, ys)
                    if r < th_e:
                        th_e = r
                        s_e = SURF_RELEASE
            if s_e >= 0:
                break
            for j in range(5):
                prev[j] = tmp[j]
            th_prev = th
        if redo:
            h *= 0.0625
            continue
        t_new = t + h if s_e < 0 else t + th_e * h
        if t_new > t and t_new > t_rec:
            if n >= T0.shape[0]:
                m = 2 * T0.shape[0] + 16
                T0 = grow2(T0, m)
                TE = grow2(TE, m)
                HP = grow2(HP, m)
                C = grow3(C, m)
                MD = grow_i2(MD, m)
            T0[n] = t
            TE[n] = t_new
            HP[n] = h
            for q in range(5):
                for j in range(nstore):
                    C[n, q, j] = coef[q, j]
            MD[n, 0] = contact
            MD[n, 1] = motion
            n += 1
        if s_e < 0:
            t = t_new
            for j in range(dim):
                z[j] = yn[j]
                k1[j] = k7[j]
            fsal = True
            h = h_next
            stall = 0
            continue
        for j in range(dim):
            z[j] = dense_eval1(coef, th_e, j)
        pre_c, pre_m = contact, motion
        if s_e == SURF_IMPACT:
            contact = 1 - contact
        elif s_e == SURF_STICK:
            z[1] = z[4]
            f = fmc(z, par, contact)
            if abs(f) <= 1.0:
                motion = 0
            else:
                motion = 1 if f > 0 else -1
        else:
            f = fmc(z, par, contact)
            motion = 1 if f > 0 else -1
        if t_new > t_rec:
            if nev >= EVT.shape[0]:
                m = 2 * EVT.shape[0] + 16
                EVT = grow2(EVT, m)
                EVI = grow_i2(EVI, m)
                EVZ2 = np.empty((m, dim))
                EVZ2[:nev] = EVZ[:nev]
                EVZ = EVZ2
            EVT[nev] = t_new
            EVI[nev, 0] = s_e
            EVI[nev, 1] = pre_c
            EVI[nev, 2] = pre_m
            EVI[nev, 3] = contact
            EVI[nev, 4] = motion
            for j in range(dim):
                EVZ[nev, j] = z[j]
            nev += 1
        if t_new - t <= 1e-12 * max(1.0, abs(t)):
            stall += 1
            if stall > 20:
                status = EVENT_STORM
                info = s_e
                break
        else:
            stall = 0
        t = t_new
        fsal = False
        h = h_next
    return (status, t, z, contact, motion, n, nev, T0, TE, HP, C, MD, EVT, EVI, EVZ, info)
