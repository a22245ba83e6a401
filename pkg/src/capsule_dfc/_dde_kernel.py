"""Jitted event-driven DOPRI5 integrator for the capsule DDE.

Internal coordinates are ``w = (x1 - x2, y1, x2, y2)`` so that the relative
displacement keeps full precision while the capsule drifts far from 0.
Accepted steps are appended to flat storage arrays that double as the
history buffer for the delayed velocity.
"""

import math

import numpy as np
from numba import njit

from ._dopri import (
    A21, A31, A32, A41, A42, A43, A51, A52, A53, A54, A61, A62, A63, A64, A65,
    A71, A73, A74, A75, A76, C2, C3, C4, C5, E1, E3, E4, E5, E6, E7,
    dense_eval, dense_eval1, fill_dense, grow2, grow3, grow_i2,
)

OK, UNDERFLOW, HISTORY_GAP, EVENT_STORM = 0, 1, 2, 3
SURF_IMPACT, SURF_STICK, SURF_RELEASE = 0, 1, 2
N_SUB = 4


@njit(cache=True)
def rhs(t, w, y1d, par, contact, motion, kon, out):
    omega, alpha, zeta, delta, beta, gamma, K = par[0], par[1], par[2], par[3], par[4], par[5], par[6]
    xr = w[0]
    y1 = w[1]
    y2 = w[3]
    vr = y1 - y2
    imp = beta * (xr - delta) if contact == 1 else 0.0
    u = K * (y1d - y1) if kon else 0.0
    out[0] = vr
    out[1] = alpha * math.cos(omega * t) + u - xr - 2.0 * zeta * vr - imp
    if motion == 0:
        out[2] = 0.0
        out[3] = 0.0
    else:
        f = xr + 2.0 * zeta * vr + imp
        out[2] = y2
        out[3] = (f - motion) / gamma


@njit(cache=True)
def fmc(w, par, contact):
    zeta, delta, beta = par[2], par[3], par[4]
    xr = w[0]
    imp = beta * (xr - delta) if contact == 1 else 0.0
    return xr + 2.0 * zeta * (w[1] - w[3]) + imp


@njit(cache=True)
def surface_value(surf, w, par, contact, motion):
    if surf == SURF_IMPACT:
        return w[0] - par[3]
    if surf == SURF_STICK:
        return motion * w[3]
    return abs(fmc(w, par, contact)) - 1.0


@njit(cache=True)
def triggered(surf, g, contact):
    if surf == SURF_IMPACT:
        return g >= 0.0 if contact == 0 else g < 0.0
    if surf == SURF_STICK:
        return g <= 0.0
    return g > 0.0


@njit(cache=True)
def refine(surf, coef, a, b, par, contact, motion, eps, hstep, tscale, tmp):
    """Bisection on [a, b] (theta units); ``b`` is on the triggered side."""
    gb = 1.0
    for _ in range(200):
        dense_eval(coef, b, tmp)
        gb = surface_value(surf, tmp, par, contact, motion)
        if abs(gb) <= eps or (b - a) * hstep <= 4e-16 * tscale:
            break
        m = 0.5 * (a + b)
        dense_eval(coef, m, tmp)
        gm = surface_value(surf, tmp, par, contact, motion)
        if triggered(surf, gm, contact):
            b = m
        else:
            a = m
    return b


@njit(cache=True)
def vr_zero(coef, a, b, sign_a):
    """theta where y1 - y2 changes sign in [a, b]."""
    for _ in range(60):
        m = 0.5 * (a + b)
        v = dense_eval1(coef, m, 1) - dense_eval1(coef, m, 3)
        if v * sign_a > 0:
            a = m
        else:
            b = m
    return 0.5 * (a + b)


@njit(cache=True)
def y1_lookup(td, T0, TE, HP, C, n, y1c, hint):
    if n == 0 or td <= T0[0]:
        return y1c, hint
    i = hint
    if i >= n:
        i = n - 1
    if i < 0:
        i = 0
    while i < n - 1 and TE[i] < td:
        i += 1
    while i > 0 and T0[i] > td:
        i -= 1
    if td > TE[i] + 1e-12 * max(1.0, abs(td)):
        return np.nan, i
    return dense_eval1(C[i], (td - T0[i]) / HP[i], 1), i


@njit(cache=True)
def dde_run(par, kon_from, t_break, y1c, t0, tf, w0, contact, motion,
            T0, TE, HP, C, MD, n, EVT, EVI, nev,
            rtol, atol, eps_ev, hmax, h0):
    """Integrate from t0 to tf, appending to the storage arrays.

    Returns ``(status, t, w, contact, motion, n, nev, T0, TE, HP, C, MD,
    EVT, EVI, info)``; ``info`` is the offending surface id on failure.
    """
    tau_d = par[7]
    kon_any = par[6] > 0.0
    w = w0.copy()
    t = t0
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    k5 = np.empty(4)
    k6 = np.empty(4)
    k7 = np.empty(4)
    ys = np.empty(4)
    yn = np.empty(4)
    tmp = np.empty(4)
    prev = np.empty(4)
    coef = np.empty((5, 4))
    h = min(hmax, h0)
    fsal = False
    hint = n - 1
    stall = 0
    status = OK
    info = -1
    tend_tol = 1e-13 * max(1.0, abs(tf))
    while t < tf - tend_tol:
        kon = kon_any and t >= kon_from - 1e-14
        if not fsal:
            y1d = 0.0
            if kon:
                y1d, hint = y1_lookup(t - tau_d, T0, TE, HP, C, n, y1c, hint)
            rhs(t, w, y1d, par, contact, motion, kon, k1)
        h = min(h, hmax, tf - t)
        if t_break > t + 1e-14 and t + h > t_break:
            h = t_break - t
        if h <= 1e-14 * max(1.0, abs(t)):
            status = UNDERFLOW
            break
        # stages
        for j in range(4):
            ys[j] = w[j] + h * A21 * k1[j]
        y1d = 0.0
        if kon:
            y1d, hint = y1_lookup(t + C2 * h - tau_d, T0, TE, HP, C, n, y1c, hint)
        rhs(t + C2 * h, ys, y1d, par, contact, motion, kon, k2)
        for j in range(4):
            ys[j] = w[j] + h * (A31 * k1[j] + A32 * k2[j])
        if kon:
            y1d, hint = y1_lookup(t + C3 * h - tau_d, T0, TE, HP, C, n, y1c, hint)
        rhs(t + C3 * h, ys, y1d, par, contact, motion, kon, k3)
        for j in range(4):
            ys[j] = w[j] + h * (A41 * k1[j] + A42 * k2[j] + A43 * k3[j])
        if kon:
            y1d, hint = y1_lookup(t + C4 * h - tau_d, T0, TE, HP, C, n, y1c, hint)
        rhs(t + C4 * h, ys, y1d, par, contact, motion, kon, k4)
        for j in range(4):
            ys[j] = w[j] + h * (A51 * k1[j] + A52 * k2[j] + A53 * k3[j] + A54 * k4[j])
        if kon:
            y1d, hint = y1_lookup(t + C5 * h - tau_d, T0, TE, HP, C, n, y1c, hint)
        rhs(t + C5 * h, ys, y1d, par, contact, motion, kon, k5)
        for j in range(4):
            ys[j] = w[j] + h * (A61 * k1[j] + A62 * k2[j] + A63 * k3[j] + A64 * k4[j] + A65 * k5[j])
        if kon:
            y1d, hint = y1_lookup(t + h - tau_d, T0, TE, HP, C, n, y1c, hint)
        rhs(t + h, ys, y1d, par, contact, motion, kon, k6)
        for j in range(4):
            yn[j] = w[j] + h * (A71 * k1[j] + A73 * k3[j] + A74 * k4[j] + A75 * k5[j] + A76 * k6[j])
        rhs(t + h, yn, y1d, par, contact, motion, kon, k7)
        err = 0.0
        for j in range(4):
            sc = atol + rtol * max(abs(w[j]), abs(yn[j]))
            e = h * (E1 * k1[j] + E3 * k3[j] + E4 * k4[j] + E5 * k5[j] + E6 * k6[j] + E7 * k7[j]) / sc
            err += e * e
        err = math.sqrt(err / 4.0)
        if err != err:
            status = HISTORY_GAP if kon else UNDERFLOW
            break
        if err > 1.0:
            h *= max(0.2, 0.9 * err ** -0.2)
            continue
        fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        h_next = h * fac
        fill_dense(w, yn, k1, k3, k4, k5, k6, k7, h, coef)
        # event search over sub-samples of the accepted step
        th_e = 2.0
        s_e = -1
        redo = False
        for j in range(4):
            prev[j] = w[j]
        th_prev = 0.0
        for isub in range(1, N_SUB + 1):
            th = isub / N_SUB
            dense_eval(coef, th, tmp)
            g0 = tmp[0] - par[3]
            cand_hi = -1.0
            if triggered(SURF_IMPACT, g0, contact):
                cand_hi = th
            else:
                vp = prev[1] - prev[3]
                vn = tmp[1] - tmp[3]
                if contact == 0 and vp > 0.0 and vn <= 0.0:
                    ts = vr_zero(coef, th_prev, th, 1.0)
                    if dense_eval1(coef, ts, 0) - par[3] >= 0.0:
                        cand_hi = ts
                elif contact == 1 and vp < 0.0 and vn >= 0.0:
                    ts = vr_zero(coef, th_prev, th, -1.0)
                    if dense_eval1(coef, ts, 0) - par[3] < 0.0:
                        cand_hi = ts
            if cand_hi >= 0.0:
                r = refine(SURF_IMPACT, coef, th_prev, cand_hi, par, contact, motion,
                           eps_ev, h, max(1.0, abs(t)), ys)
                if r < th_e:
                    th_e = r
                    s_e = SURF_IMPACT
            if motion != 0:
                gv = motion * tmp[3]
                if triggered(SURF_STICK, gv, contact):
                    gvp = motion * prev[3]
                    lo = th_prev
                    if gvp <= 0.0:
                        # motion starting from rest: find the excursion before the return
                        lo = -1.0
                        for jj in range(1, 65):
                            thj = th_prev + (th - th_prev) * jj / 64.0
                            if motion * dense_eval1(coef, thj, 3) > 0.0:
                                lo = thj
                            elif lo >= 0.0:
                                break
                    if lo >= 0.0:
                        hi = th
                        if lo > th_prev:
                            for jj in range(1, 65):
                                thj = lo + (th - lo) * jj / 64.0
                                if motion * dense_eval1(coef, thj, 3) <= 0.0:
                                    hi = thj
                                    break
                        r = refine(SURF_STICK, coef, lo, hi, par, contact, motion,
                                   eps_ev, h, max(1.0, abs(t)), ys)
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
                    r = refine(SURF_RELEASE, coef, th_prev, th, par, contact, motion,
                               eps_ev, h, max(1.0, abs(t)), ys)
                    if r < th_e:
                        th_e = r
                        s_e = SURF_RELEASE
            if s_e >= 0:
                break
            for j in range(4):
                prev[j] = tmp[j]
            th_prev = th
        if redo:
            h *= 0.0625
            continue
        t_new = t + h if s_e < 0 else t + th_e * h
        if t_new > t:
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
            C[n] = coef
            MD[n, 0] = contact
            MD[n, 1] = motion
            n += 1
        if s_e < 0:
            t = t_new
            for j in range(4):
                w[j] = yn[j]
                k1[j] = k7[j]
            fsal = True
            h = h_next
            stall = 0
            continue
        # event
        dense_eval(coef, th_e, w)
        pre_c, pre_m = contact, motion
        if s_e == SURF_IMPACT:
            contact = 1 - contact
        elif s_e == SURF_STICK:
            w[3] = 0.0
            f = fmc(w, par, contact)
            if abs(f) <= 1.0:
                motion = 0
            else:
                motion = 1 if f > 0 else -1
        else:
            f = fmc(w, par, contact)
            motion = 1 if f > 0 else -1
        if nev >= EVT.shape[0]:
            m = 2 * EVT.shape[0] + 16
            EVT = grow2(EVT, m)
            EVI = grow_i2(EVI, m)
        EVT[nev] = t_new
        EVI[nev, 0] = s_e
        EVI[nev, 1] = pre_c
        EVI[nev, 2] = pre_m
        EVI[nev, 3] = contact
        EVI[nev, 4] = motion
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
    return (status, t, w, contact, motion, n, nev, T0, TE, HP, C, MD, EVT, EVI, info)
