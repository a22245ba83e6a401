"""Chain-method approximation of the delayed capsule system.

The delayed velocity is carried by a cascade ``v_i ~ y1(tau - i tau_d / N)``
closed by a second-order Taylor expansion with auxiliary derivatives
``w_i``. Time is rescaled by the delay, so one unit of chain time equals
``tau_d`` of physical time, and the harmonic forcing is generated by an
embedded oscillator ``(r, s)`` whose unit circle is attracting.

Layout of a chain state vector (length ``2N + 5``)::

    z = (x_r, v_r, r, s, v_0, v_1, ..., v_N, w_1, ..., w_N)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _chain_kernel as _ck
from ._dopri import dense_eval_np
from ._io import write_csv
from .integrator import (
    IntegrationError,
    IntegrationSettings,
    StepUnderflowError,
    Trajectory,
    integrate,
)
from .model import Mode, ModeError, Params, State

__all__ = [
    "ChainConfig",
    "ChainState",
    "ChainTrajectory",
    "DiscrepancyReport",
    "chain_rhs",
    "chain_mode",
    "lift",
    "integrate_chain",
    "recover_capsule_position",
    "compare_with_dde",
]

SURFACES = ("impact", "stick", "release")


@dataclass(frozen=True)
class ChainConfig:
    """Chain length ``N`` and Taylor order ``M`` (only 2 is supported)."""

    N: int = 30
    M: int = 2

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValueError("N must be an integer >= 2")
        if self.M != 2:
            raise ValueError("only the second-order closure M = 2 is implemented")

    @property
    def dim(self) -> int:
        return 2 * self.N + 5


class ChainState:
    """Named views on a chain state vector."""

    def __init__(self, z, N: int):
        z = np.asarray(z, dtype=float)
        if z.shape != (2 * N + 5,):
            raise ValueError(f"chain state must have length {2 * N + 5}")
        self.z = z
        self.N = N

    @classmethod
    def build(cls, x_r, v_r, r, s, v, w) -> "ChainState":
        v = np.asarray(v, dtype=float)
        w = np.asarray(w, dtype=float)
        N = len(v) - 1
        if len(w) != N:
            raise ValueError("need N + 1 chain velocities and N derivatives")
        return cls(np.concatenate([[x_r, v_r, r, s], v, w]), N)

    x_r = property(lambda self: self.z[0])
    v_r = property(lambda self: self.z[1])
    r = property(lambda self: self.z[2])
    s = property(lambda self: self.z[3])
    v = property(lambda self: self.z[4:5 + self.N])
    w = property(lambda self: self.z[5 + self.N:])

    @property
    def capsule_velocity(self) -> float:
        return float(self.z[4] - self.z[1])

    def physical(self, x2: float = 0.0) -> State:
        """Original coordinates, given the capsule position ``x2``."""
        y1 = float(self.z[4])
        return State(float(self.z[0]) + x2, y1, x2, y1 - float(self.z[1]))


def _as_vector(z, N: int) -> np.ndarray:
    if isinstance(z, ChainState):
        return z.z
    z = np.asarray(z, dtype=float)
    if z.shape != (2 * N + 5,):
        raise ValueError(f"chain state must have length {2 * N + 5}")
    return z


def chain_mode(z, p: Params, N: int, vel_tol: float = 1e-10) -> Mode:
    """Operating mode from ``(x_r, v_r, v_0)`` by the contact/motion rules."""
    z = _as_vector(z, N)
    contact = int(z[0] - p.delta >= 0.0)
    vc = z[4] - z[1]
    f = _ck.fmc(z, p.as_array(), contact)
    if abs(vc) <= vel_tol:
        motion = 0 if abs(f) <= 1.0 else (1 if f > 0 else -1)
    else:
        motion = 1 if vc > 0 else -1
    return Mode(contact, motion)


def chain_rhs(tau: float, z, p: Params, mode: Mode, cfg: ChainConfig = ChainConfig(),
              stick_tol: float = 1e-8) -> np.ndarray:
    """Vector field of the chain system in chain time.

    ``tau`` is accepted for interface symmetry; the system is autonomous.

    Raises
    ------
    ModeError
        If the contact flag disagrees with the side of the impact surface,
        or a stationary mode is requested with ``|f_mc| > 1``.
    """
    z = _as_vector(z, cfg.N)
    par = p.as_array()
    gap = z[0] - p.delta
    if (mode.contact == 1 and gap < -stick_tol) or (mode.contact == 0 and gap > stick_tol):
        raise ModeError(f"contact flag {mode.contact} inconsistent with x_r - delta = {gap:.3g}")
    if mode.motion == 0 and abs(_ck.fmc(z, par, mode.contact)) > 1.0 + stick_tol:
        raise ModeError("stationary mode outside the friction cone")
    out = np.empty_like(z)
    _ck.chain_rhs(z, par, cfg.N, int(mode.contact), int(mode.motion), out)
    return out


def lift(history: Trajectory, cfg: ChainConfig, p: Params, tau: float | None = None) -> ChainState:
    """Chain state equivalent to ``history`` at physical time ``tau``.

    ``v_i`` samples y1 at ``tau - i tau_d / N`` (constant pre-history before
    the trajectory start) and ``w_i`` is the chain-time derivative
    ``tau_d * dy1/dtau`` there. Where the sample falls in the constant
    pre-history the derivative is zero. The oscillator is placed on its
    unit circle in phase with ``alpha cos(omega tau)``.

    Raises
    ------
    ValueError
        If ``tau_d`` is not positive or ``tau`` lies outside the trajectory.
    """
    if p.tau_d <= 0:
        raise ValueError("the chain system needs tau_d > 0")
    a, b = history.span
    tau = b if tau is None else float(tau)
    if tau > b + 1e-9 or tau < a:
        raise ValueError("lift time outside the history span")
    N = cfg.N
    ti = tau - np.arange(N + 1) * p.tau_d / N
    v = history.y1(ti)
    w = np.zeros(N)
    inside = ti[1:] >= a
    if np.any(inside):
        w[inside] = p.tau_d * history.derivative(ti[1:][inside])[:, 1]
    s = history.evaluate(tau)
    return ChainState.build(s[0] - s[2], s[1] - s[3], math.sin(p.omega * tau),
                            math.cos(p.omega * tau), v, w)


def lift_state(state, cfg: ChainConfig, p: Params, tau: float = 0.0) -> ChainState:
    """Chain state for a single phase point with constant velocity history."""
    x1, y1, x2, y2 = map(float, state)
    return ChainState.build(x1 - x2, y1 - y2, math.sin(p.omega * tau), math.cos(p.omega * tau),
                            np.full(cfg.N + 1, y1), np.zeros(cfg.N))


@dataclass(frozen=True)
class ChainEvent:
    t: float
    surface: str
    pre: Mode
    post: Mode
    z: np.ndarray


class ChainTrajectory:
    """Dense solution of the chain system in chain time.

    Only the recorded window is kept. ``coef`` holds the first ``nstore``
    components of each step (5 for the core, ``2N + 5`` for full storage).
    """

    def __init__(self, params: Params, cfg: ChainConfig, t0, te, hp, coef, modes,
                 events: Sequence[ChainEvent], end_state, end_mode: Mode, x2_start: float = 0.0):
        self.params = params
        self.cfg = cfg
        self.t0 = t0
        self.te = te
        self.hp = hp
        self.coef = coef
        self.modes = modes
        self.events = list(events)
        self.end_state = np.asarray(end_state)
        self.end_mode = end_mode
        self.x2_start = float(x2_start)

    def __repr__(self):
        a, b = self.span
        return f"ChainTrajectory(span=({a:.6g}, {b:.6g}), steps={len(self.t0)})"

    @property
    def span(self) -> tuple[float, float]:
        return float(self.t0[0]), float(self.te[-1])

    @property
    def full(self) -> bool:
        return self.coef.shape[2] == self.cfg.dim

    def _index(self, t):
        a, b = self.span
        tol = 1e-12 * max(1.0, abs(b))
        if np.any(t < a - tol) or np.any(t > b + tol):
            raise ValueError(f"t outside recorded span [{a}, {b}]")
        return np.clip(np.searchsorted(self.te, t, side="left"), 0, len(self.te) - 1)

    def evaluate(self, t) -> np.ndarray:
        """Stored components at chain times ``t``."""
        t_arr = np.asarray(t, dtype=float)
        tt = np.atleast_1d(t_arr)
        i = self._index(tt)
        out = dense_eval_np(self.coef[i], (tt - self.t0[i]) / self.hp[i])
        return out[0] if t_arr.ndim == 0 else out

    def mode_at(self, t) -> np.ndarray:
        return self.modes[self._index(np.atleast_1d(np.asarray(t, dtype=float)))]

    def physical_time(self, t):
        return np.asarray(t) * self.params.tau_d

    def chain_time(self, tau):
        return np.asarray(tau) / self.params.tau_d

    def strobe_times(self) -> np.ndarray:
        """Chain times at which the forcing phase is a multiple of 2 pi."""
        Tc = self.params.period / self.params.tau_d
        a, b = self.span
        n0 = int(math.ceil(a / Tc - 1e-9))
        n1 = int(math.floor(b / Tc + 1e-9))
        return np.arange(n0, n1 + 1) * Tc

    def relative(self, t) -> np.ndarray:
        """``(x_r, v_r)`` at chain times ``t``."""
        return np.atleast_2d(self.evaluate(t))[:, :2]

    def impact_count(self, t_from: float, t_to: float) -> int:
        return sum(1 for e in self.events
                   if e.surface == "impact" and e.post.contact == 1 and t_from <= e.t < t_to)

    def to_csv(self, path, samples_per_period: int = 64, with_chain: bool = False):
        """Export ``tau,x1,y1,x2,y2,mode,u`` with optional ``v0..vN`` columns.

        ``tau`` is physical time. With ``with_chain`` the trajectory must
        have been recorded with full storage.
        """
        if with_chain and not self.full:
            raise ValueError("chain columns need a trajectory recorded with full storage")
        p = self.params
        a, b = self.span
        dt = p.period / p.tau_d / samples_per_period
        t = a + dt * np.arange(int(math.floor((b - a) / dt + 1e-9)) + 1)
        zz = np.atleast_2d(self.evaluate(t))
        x2 = recover_capsule_position(self, t)
        md = self.mode_at(t)
        header = ["tau", "x1", "y1", "x2", "y2", "mode", "u"]
        N = self.cfg.N
        if with_chain:
            header += [f"v{i}" for i in range(N + 1)]
        rows = []
        for k in range(len(t)):
            z = zz[k]
            row = [t[k] * p.tau_d, z[0] + x2[k], z[4], x2[k], z[4] - z[1],
                   Mode(int(md[k, 0]), int(md[k, 1])).label]
            row.append(p.gain_K * (z[4 + N] - z[4]) if self.full else float("nan"))
            if with_chain:
                row += list(z[4:5 + N])
            rows.append(row)
        return write_csv(path, header, rows)


def integrate_chain(z0, p: Params, cfg: ChainConfig, span, settings: IntegrationSettings | None = None,
                    record_from: float | None = None, full: bool = False,
                    mode: Mode | None = None) -> ChainTrajectory:
    """Event-driven integration of the chain system over chain-time ``span``.

    Parameters
    ----------
    z0 : ChainState or array
        Initial chain state.
    span : (float, float)
        Chain-time interval; one unit is ``tau_d`` of physical time.
    record_from : float, optional
        Discard steps ending before this chain time (transient).
    full : bool
        Store all ``2N + 5`` components instead of the core five.

    Raises
    ------
    StepUnderflowError
        Step collapse or an accumulation of events.
    """
    if p.tau_d <= 0:
        raise ValueError("the chain system needs tau_d > 0")
    settings = settings or IntegrationSettings()
    N = cfg.N
    z = _as_vector(z0, N).copy()
    t0, tf = float(span[0]), float(span[1])
    if not tf > t0:
        raise ValueError("span must be non-empty")
    m = mode or chain_mode(z, p, N)
    if m.motion == 0:
        z[1] = z[4]
    t_rec = t0 if record_from is None else float(record_from)
    if t_rec >= tf:
        raise ValueError("record_from must precede the end of the span")
    nstore = cfg.dim if full else 5
    hmax = settings.max_step / p.tau_d
    est = int((tf - max(t0, t_rec)) / min(hmax, 0.03 / p.tau_d)) + 64
    T0 = np.empty(est)
    TE = np.empty(est)
    HP = np.empty(est)
    C = np.empty((est, 5, nstore))
    MD = np.empty((est, 2), dtype=np.int64)
    ne = max(16, est // 20)
    EVT = np.empty(ne)
    EVI = np.empty((ne, 5), dtype=np.int64)
    EVZ = np.empty((ne, cfg.dim))
    res = _ck.chain_run(p.as_array(), N, t0, tf, z, int(m.contact), int(m.motion), t_rec, nstore,
                        T0, TE, HP, C, MD, 0, EVT, EVI, EVZ, 0,
                        settings.rel_tol, settings.abs_tol, settings.eps_event, hmax,
                        min(hmax, 0.01 / p.tau_d))
    status, t, zf, c, mo, n, nev, T0, TE, HP, C, MD, EVT, EVI, EVZ, info = res
    if status != _ck.OK:
        where = SURFACES[info] if info >= 0 else None
        raise StepUnderflowError(f"chain integration failed at t={t:.12g}", tau=t * p.tau_d,
                                 surface=where)
    if n == 0:
        raise IntegrationError("no steps recorded in the requested window")
    events = []
    for i in range(nev):
        s, pc, pm, qc, qm = (int(v) for v in EVI[i])
        events.append(ChainEvent(float(EVT[i]), SURFACES[s], Mode(pc, pm), Mode(qc, qm),
                                 EVZ[i].copy()))
    return ChainTrajectory(p, cfg, T0[:n].copy(), TE[:n].copy(), HP[:n].copy(), C[:n].copy(),
                           MD[:n].copy(), events, zf, Mode(int(c), int(mo)))


def _dense_integral(coef, theta):
    """Integral over [0, theta] (in step units) of the dense polynomial."""
    th = theta[:, None]
    c0, c1, c2, c3, c4 = (coef[:, k] for k in range(5))
    t2 = th * th
    t3 = t2 * th
    t4 = t3 * th
    return (th * c0 + t2 / 2 * c1 + (t2 / 2 - t3 / 3) * c2 + (t3 / 3 - t4 / 4) * c3
            + (t3 / 3 - t4 / 2 + t4 * th / 5) * c4)


def recover_capsule_position(traj: ChainTrajectory, t, x_c_star: float | None = None) -> np.ndarray:
    """Capsule position ``x_c(t) = x_c* + int (v_0 - v_r) dtau`` along the chain trajectory.

    The integral runs in physical time from the start of the recorded
    window and is exact on the dense output polynomials.
    """
    x_c_star = traj.x2_start if x_c_star is None else float(x_c_star)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    traj._index(t)
    vc = (traj.coef[:, :, 4] - traj.coef[:, :, 1])[:, :, None]
    # a step cut at an event ends before its polynomial length
    th_end = (traj.te - traj.t0) / traj.hp
    full_steps = _dense_integral(vc, th_end)[:, 0] * traj.hp
    cum = np.concatenate([[0.0], np.cumsum(full_steps)])
    i = np.clip(np.searchsorted(traj.te, t, side="left"), 0, len(traj.te) - 1)
    part = _dense_integral(vc[i], (t - traj.t0[i]) / traj.hp[i])[:, 0] * traj.hp[i]
    return x_c_star + traj.params.tau_d * (cum[i] + part)


@dataclass(frozen=True)
class DiscrepancyReport:
    """Distance between DDE and chain attractors in the (x_r, v_r) plane."""

    tau_d: float
    N: int
    sup_distance: float
    periods_compared: int
    dde_period: int
    chain_period: int


def _attractor_period(strobe: np.ndarray, tol: float, kmax: int = 12) -> int:
    for k in range(1, kmax + 1):
        if len(strobe) > k and np.max(np.abs(strobe[k:] - strobe[:-k])) < tol:
            return k
    return 0


def compare_with_dde(p: Params, cfg: ChainConfig = ChainConfig(), horizon: int = 300,
                     compare_periods: int = 12, samples_per_period: int = 256,
                     settings: IntegrationSettings | None = None,
                     initial_state=(0.0, 0.0, 0.0, 0.0)) -> DiscrepancyReport:
    """Sup-norm distance between the DDE and chain attractors.

    Both systems start from the same data: the DDE runs from
    ``initial_state`` with the control on; the chain state is lifted from the
    DDE history after ``horizon // 3`` periods. Both then run until
    ``horizon`` periods, and the last ``compare_periods`` periods are
    compared in ``(x_r, v_r)`` after aligning the stroboscopic phase (the
    chain trajectory is shifted by whole forcing periods to minimise the
    distance).
    """
    settings = settings or IntegrationSettings()
    if p.tau_d <= 0:
        raise ValueError("tau_d must be positive")
    T = p.period
    n_lift = max(2, horizon // 3)
    tr = integrate(p, initial_state, (0.0, horizon * T), settings)
    z0 = lift(tr, cfg, p, n_lift * T)
    Tc = T / p.tau_d
    tail0 = (horizon - compare_periods) * T
    ch = integrate_chain(z0, p, cfg, (n_lift * Tc, horizon * Tc), settings,
                         record_from=tail0 / p.tau_d - Tc * compare_periods)
    # reference: DDE over the last compare_periods
    m = compare_periods * samples_per_period
    tau = tail0 + np.arange(m + 1) * T / samples_per_period
    sd = tr.evaluate(tau)
    ref = np.column_stack([sd[:, 0] - sd[:, 2], sd[:, 1] - sd[:, 3]])
    best = math.inf
    for shift in range(compare_periods + 1):
        tc = tau / p.tau_d - shift * Tc
        if tc[0] < ch.span[0] - 1e-9:
            break
        cur = ch.relative(tc)
        best = min(best, float(np.max(np.abs(cur - ref))))
    dde_strobe = tr.strobe(horizon - 40)
    ch_strobe = np.atleast_2d(ch.evaluate(ch.strobe_times()))
    tol = 1e-4
    kd = _attractor_period(np.column_stack([dde_strobe[:, 0] - dde_strobe[:, 2], dde_strobe[:, 1]]), tol)
    kc = _attractor_period(np.column_stack([ch_strobe[:, 0], ch_strobe[:, 4]]), tol)
    return DiscrepancyReport(p.tau_d, cfg.N, best, compare_periods, kd, kc)
