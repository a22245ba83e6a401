"""Event-driven integration of the capsule system with delayed feedback.

The scheme is Dormand-Prince 5(4) with its 4th-order continuous extension.
Every accepted step is kept, so a :class:`Trajectory` is both the dense
solution and the history buffer read by the delayed term (method of
steps). Steps never straddle a discontinuity surface: crossings are located
on the dense output and the step is cut there, the mode is switched and the
integration restarts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import _dde_kernel as _k
from ._dopri import dense_deriv_np, dense_eval_np
from ._io import write_csv
from .model import Mode, Params, State, classify_mode, event_residuals

__all__ = [
    "IntegrationSettings",
    "IntegrationError",
    "StepUnderflowError",
    "HistoryGapError",
    "EventRecord",
    "HistorySegment",
    "Trajectory",
    "EventLocation",
    "integrate",
    "evaluate",
    "locate_event",
    "switch_on_control",
    "SURFACES",
]

SURFACES = ("impact", "stick", "release")


class IntegrationError(RuntimeError):
    """Integration could not proceed; carries the time and surface."""

    def __init__(self, msg: str, tau: float | None = None, surface: str | None = None):
        super().__init__(msg)
        self.tau = tau
        self.surface = surface


class StepUnderflowError(IntegrationError):
    pass


class HistoryGapError(IntegrationError):
    pass


@dataclass(frozen=True)
class IntegrationSettings:
    """Tolerances and recording options."""

    rel_tol: float = 1e-9
    abs_tol: float = 1e-11
    eps_event: float = 1e-10
    max_step: float = 0.1
    strobe_count: int = 50
    transient_count: int = 300

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0 or self.eps_event <= 0 or self.max_step <= 0:
            raise ValueError("tolerances and max_step must be positive")
        if self.strobe_count < 0 or self.transient_count < 0:
            raise ValueError("cycle counts must be non-negative")

    def step_cap(self, p: Params) -> float:
        """Largest admissible step; a quarter delay keeps lookups in finished history."""
        cap = self.max_step
        if p.gain_K > 0:
            cap = min(cap, p.tau_d / 4.0)
        return cap


@dataclass(frozen=True)
class EventRecord:
    tau: float
    surface: str
    pre: Mode
    post: Mode


@dataclass(frozen=True)
class HistorySegment:
    """Maximal run of accepted steps sharing one mode."""

    span: tuple[float, float]
    mode: Mode
    t0: np.ndarray = field(repr=False)
    hp: np.ndarray = field(repr=False)
    coef: np.ndarray = field(repr=False)

    def evaluate(self, tau):
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        i = np.clip(np.searchsorted(self.t0, tau, side="right") - 1, 0, len(self.t0) - 1)
        w = dense_eval_np(self.coef[i], (tau - self.t0[i]) / self.hp[i])
        return _to_state(w)


def _to_state(w: np.ndarray) -> np.ndarray:
    out = w.copy()
    out[..., 0] = w[..., 0] + w[..., 2]
    return out


def _to_internal(s) -> np.ndarray:
    x1, y1, x2, y2 = (float(v) for v in s)
    return np.array([x1 - x2, y1, x2, y2])


class Trajectory:
    """Piecewise dense solution with its event log.

    Parameters mirror the kernel storage: step starts ``t0``, step ends
    ``te``, polynomial step lengths ``hp``, dense coefficients ``coef``
    (internal coordinates) and per-step ``modes``.
    """

    def __init__(self, params: Params, settings: IntegrationSettings, t0, te, hp, coef, modes,
                 events: Sequence[EventRecord], y1_history: float,
                 epochs: Sequence[tuple[float, float, float]], end_state, end_mode: Mode):
        self.params = params
        self.settings = settings
        self.t0 = t0
        self.te = te
        self.hp = hp
        self.coef = coef
        self.modes = modes
        self.events = list(events)
        self.y1_history = float(y1_history)
        self.epochs = tuple(epochs)
        self.end_state = State(*map(float, end_state))
        self.end_mode = end_mode

    def __repr__(self):
        a, b = self.span
        return f"Trajectory(span=({a:.6g}, {b:.6g}), steps={len(self.t0)}, events={len(self.events)})"

    @property
    def span(self) -> tuple[float, float]:
        return float(self.t0[0]), float(self.te[-1])

    @property
    def n_steps(self) -> int:
        return len(self.t0)

    @cached_property
    def segments(self) -> list[HistorySegment]:
        md = self.modes
        change = np.flatnonzero(np.any(md[1:] != md[:-1], axis=1)) + 1
        bounds = np.concatenate([[0], change, [len(md)]])
        segs = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            segs.append(HistorySegment(
                span=(float(self.t0[a]), float(self.te[b - 1])),
                mode=Mode(int(md[a, 0]), int(md[a, 1])),
                t0=self.t0[a:b], hp=self.hp[a:b], coef=self.coef[a:b],
            ))
        return segs

    def _index(self, tau: np.ndarray) -> np.ndarray:
        a, b = self.span
        tol = 1e-12 * max(1.0, abs(b))
        if np.any(tau < a - tol) or np.any(tau > b + tol):
            raise ValueError(f"tau outside trajectory span [{a}, {b}]")
        return np.clip(np.searchsorted(self.te, tau, side="left"), 0, len(self.te) - 1)

    def evaluate(self, tau) -> np.ndarray:
        """States at ``tau`` (scalar or array) as rows ``(x1, y1, x2, y2)``."""
        tau_arr = np.asarray(tau, dtype=float)
        t = np.atleast_1d(tau_arr)
        i = self._index(t)
        w = dense_eval_np(self.coef[i], (t - self.t0[i]) / self.hp[i])
        out = _to_state(w)
        return out[0] if tau_arr.ndim == 0 else out

    def derivative(self, tau) -> np.ndarray:
        """Time derivative of the dense output, in the same coordinates."""
        tau_arr = np.asarray(tau, dtype=float)
        t = np.atleast_1d(tau_arr)
        i = self._index(t)
        d = dense_deriv_np(self.coef[i], (t - self.t0[i]) / self.hp[i], self.hp[i])
        d = _to_state(d)
        return d[0] if tau_arr.ndim == 0 else d

    def mode_at(self, tau) -> np.ndarray:
        t = np.atleast_1d(np.asarray(tau, dtype=float))
        return self.modes[self._index(t)]

    def y1(self, tau) -> np.ndarray:
        """Mass velocity, continued by the constant pre-history before the start."""
        t = np.atleast_1d(np.asarray(tau, dtype=float))
        out = np.full(t.shape, self.y1_history)
        inside = t >= self.t0[0]
        if np.any(inside):
            out[inside] = self.evaluate(t[inside])[:, 1]
        return out

    def gain_schedule(self, tau) -> tuple[np.ndarray, np.ndarray]:
        """Active (gain, delay) at each ``tau``."""
        t = np.atleast_1d(np.asarray(tau, dtype=float))
        starts = np.array([e[0] for e in self.epochs])
        j = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(starts) - 1)
        K = np.array([e[1] for e in self.epochs])[j]
        d = np.array([e[2] for e in self.epochs])[j]
        return K, d

    def control(self, tau) -> np.ndarray:
        """Control signal u(tau) along the trajectory."""
        t = np.atleast_1d(np.asarray(tau, dtype=float))
        K, d = self.gain_schedule(t)
        u = np.zeros_like(t)
        on = K > 0
        if np.any(on):
            u[on] = K[on] * (self.y1(t[on] - d[on]) - self.y1(t[on]))
        return u

    def strobe_times(self, first_cycle: int = 0, count: int | None = None) -> np.ndarray:
        T = self.params.period
        a, b = self.span
        n0 = max(first_cycle, int(math.ceil(a / T - 1e-9)))
        n1 = int(math.floor(b / T + 1e-9))
        if count is not None:
            n1 = min(n1, n0 + count - 1)
        return np.arange(n0, n1 + 1) * T

    def strobe(self, first_cycle: int = 0, count: int | None = None) -> np.ndarray:
        """States at tau = 2 n pi / omega, n >= ``first_cycle``."""
        return self.evaluate(self.strobe_times(first_cycle, count))

    def last_strobe(self, count: int) -> np.ndarray:
        times = self.strobe_times()
        return self.evaluate(times[-count:])

    def truncate(self, tau_end: float) -> "Trajectory":
        """Copy restricted to ``[start, tau_end]``."""
        a, b = self.span
        if tau_end > b + 1e-12 * max(1.0, abs(b)) or tau_end <= a:
            raise ValueError("truncation time outside span")
        if tau_end >= b:
            return self
        k = int(np.searchsorted(self.te, tau_end, side="left"))
        te = self.te[: k + 1].copy()
        te[-1] = tau_end
        end = self.evaluate(tau_end)
        ev = [e for e in self.events if e.tau <= tau_end]
        md = self.modes[k]
        return Trajectory(self.params, self.settings, self.t0[: k + 1].copy(), te,
                          self.hp[: k + 1].copy(), self.coef[: k + 1].copy(),
                          self.modes[: k + 1].copy(), ev, self.y1_history,
                          [e for e in self.epochs if e[0] <= tau_end], end,
                          Mode(int(md[0]), int(md[1])))

    def tail(self, tau_start: float, shift: float = 0.0) -> "Trajectory":
        """Copy restricted to the steps reaching past ``tau_start``, with all
        times moved by ``shift``.

        Used to hand a short history to the next run of a sweep. The
        constant pre-history becomes the mass velocity at the new start.
        """
        a, b = self.span
        if not a <= tau_start < b:
            raise ValueError("tail start outside span")
        k = int(np.searchsorted(self.te, tau_start, side="right"))
        k = min(k, len(self.te) - 1)
        y1_start = float(self.evaluate(self.t0[k])[1])
        t_k = float(self.t0[k])
        prior = [e for e in self.epochs if e[0] <= t_k]
        head = [(t_k, *prior[-1][1:])] if prior else []
        epochs = [(e[0] + shift, e[1], e[2]) for e in head + [e for e in self.epochs if e[0] > t_k]]
        ev = [replace(e, tau=e.tau + shift) for e in self.events if e.tau >= self.t0[k]]
        return Trajectory(self.params, self.settings, self.t0[k:] + shift, self.te[k:] + shift,
                          self.hp[k:].copy(), self.coef[k:].copy(), self.modes[k:].copy(), ev,
                          y1_start, epochs, self.end_state, self.end_mode)

    def sample(self, samples_per_period: int = 64, start: float | None = None) -> np.ndarray:
        a, b = self.span
        if start is not None:
            a = max(a, start)
        dt = self.params.period / samples_per_period
        n = int(math.floor((b - a) / dt + 1e-9)) + 1
        return a + dt * np.arange(n)

    def to_csv(self, path, samples_per_period: int = 64, start: float | None = None):
        """Export ``tau,x1,y1,x2,y2,mode,u`` on a uniform grid."""
        tau = self.sample(samples_per_period, start)
        st = self.evaluate(tau)
        md = self.mode_at(tau)
        u = self.control(tau)
        rows = ((t, *s, Mode(int(m[0]), int(m[1])).label, uu) for t, s, m, uu in zip(tau, st, md, u))
        return write_csv(path, ["tau", "x1", "y1", "x2", "y2", "mode", "u"], rows)

    def events_to_csv(self, path):
        rows = ((e.tau, e.surface, e.pre.label, e.post.label) for e in self.events)
        return write_csv(path, ["tau", "surface", "pre_mode", "post_mode"], rows)


def _storage(capacity: int, hist: Trajectory | None):
    n = 0 if hist is None else hist.n_steps
    cap = n + capacity
    T0 = np.empty(cap)
    TE = np.empty(cap)
    HP = np.empty(cap)
    C = np.empty((cap, 5, 4))
    MD = np.empty((cap, 2), dtype=np.int64)
    if hist is not None:
        T0[:n] = hist.t0
        TE[:n] = hist.te
        HP[:n] = hist.hp
        C[:n] = hist.coef
        MD[:n] = hist.modes
    return T0, TE, HP, C, MD, n


def integrate(p: Params, history, span, settings: IntegrationSettings | None = None) -> Trajectory:
    """Integrate the controlled capsule system over ``span``.

    Parameters
    ----------
    p : Params
        Parameters in force on the whole span.
    history : Trajectory or state-like
        Either a previous trajectory reaching ``span[0]`` (it is truncated
        there and continued) or a single state held constant for all
        earlier times.
    span : (float, float)
        Start and end time.

    Returns
    -------
    Trajectory
        Includes the steps of a trajectory given as history.

    Raises
    ------
    StepUnderflowError
        Step size collapsed, typically at an accumulation of events.
    HistoryGapError
        The history does not reach ``span[0]`` or a delayed value is missing.
    """
    settings = settings or IntegrationSettings()
    tau0, tauf = float(span[0]), float(span[1])
    if not tauf > tau0:
        raise ValueError("span must be non-empty")
    if isinstance(history, Trajectory):
        a, b = history.span
        if b < tau0 - 1e-12 * max(1.0, abs(tau0)) or a > tau0:
            raise HistoryGapError("history does not reach the start time", tau=tau0)
        hist = history.truncate(tau0) if b > tau0 else history
        w0 = _to_internal(hist.end_state)
        mode = hist.end_mode
        y1c = hist.y1_history
        epochs = list(hist.epochs)
        if (epochs[-1][1], epochs[-1][2]) != (p.gain_K, p.tau_d):
            epochs.append((tau0, p.gain_K, p.tau_d))
    else:
        hist = None
        s0 = State(*map(float, history))
        if not all(math.isfinite(v) for v in s0):
            raise ValueError("initial state must be finite")
        w0 = _to_internal(s0)
        mode = classify_mode(s0, p)
        if mode.motion == 0:
            w0[3] = 0.0
        y1c = s0.y1
        epochs = [(tau0, p.gain_K, p.tau_d)]
    cap = settings.step_cap(p)
    est = int((tauf - tau0) / min(cap, 0.03)) + 64
    T0, TE, HP, C, MD, n = _storage(est, hist)
    EVT = np.empty(max(16, est // 20))
    EVI = np.empty((EVT.shape[0], 5), dtype=np.int64)
    t_break = tau0 + p.tau_d if p.gain_K > 0 else -1.0
    res = _k.dde_run(p.as_array(), tau0, t_break, y1c, tau0, tauf, w0,
                     int(mode.contact), int(mode.motion), T0, TE, HP, C, MD, n, EVT, EVI, 0,
                     settings.rel_tol, settings.abs_tol, settings.eps_event, cap, min(cap, 0.01))
    status, t, w, contact, motion, n, nev, T0, TE, HP, C, MD, EVT, EVI, info = res
    if status == _k.UNDERFLOW:
        raise StepUnderflowError(f"step size underflow at tau={t:.12g}", tau=t,
                                 surface=SURFACES[info] if info >= 0 else None)
    if status == _k.EVENT_STORM:
        raise StepUnderflowError(f"event accumulation at tau={t:.12g} on {SURFACES[info]} surface",
                                 tau=t, surface=SURFACES[info])
    if status == _k.HISTORY_GAP:
        raise HistoryGapError(f"delayed value unavailable at tau={t:.12g}", tau=t)
    events = list(hist.events) if hist is not None else []
    for i in range(nev):
        s, pc, pm, qc, qm = (int(v) for v in EVI[i])
        events.append(EventRecord(float(EVT[i]), SURFACES[s], Mode(pc, pm), Mode(qc, qm)))
    end = _to_state(np.asarray(w)[None, :])[0]
    return Trajectory(p, settings, T0[:n].copy(), TE[:n].copy(), HP[:n].copy(), C[:n].copy(),
                      MD[:n].copy(), events, y1c, epochs, end, Mode(int(contact), int(motion)))


def evaluate(traj: Trajectory, tau):
    """State of ``traj`` at ``tau``; raises ValueError outside the span."""
    return traj.evaluate(tau)


@dataclass(frozen=True)
class EventLocation:
    tau: float
    residual: float
    kind: str  # "crossing" or "grazing"


def _residual_fn(traj: Trajectory, surface: int):
    p = traj.params

    def g(t):
        return float(event_residuals(traj.evaluate(t), p)[surface])

    return g


def locate_event(bracket, surface, traj: Trajectory, eps: float | None = None) -> EventLocation:
    """Locate a zero of a discontinuity-surface residual on the dense output.

    A sign change gives a ``"crossing"``. Without one, an interior extremum
    touching zero within ``eps`` is reported as ``"grazing"``.

    Raises
    ------
    ValueError
        No sign change and no tangential touch in the bracket.
    """
    eps = traj.settings.eps_event if eps is None else eps
    sid = SURFACES.index(surface) if isinstance(surface, str) else int(surface)
    a, b = map(float, bracket)
    g = _residual_fn(traj, sid)
    ga, gb = g(a), g(b)
    if abs(ga) <= eps:
        return EventLocation(a, ga, "crossing")
    if abs(gb) <= eps:
        return EventLocation(b, gb, "crossing")
    if ga * gb < 0:
        t = brentq(g, a, b, xtol=1e-15, rtol=1e-15, maxiter=200)
        # brentq stops on x-tolerance; tighten on the residual if needed
        lo, hi = (a, b) if ga < 0 else (b, a)
        for _ in range(100):
            gt = g(t)
            if abs(gt) <= eps:
                break
            if gt < 0:
                lo = t
            else:
                hi = t
            t = 0.5 * (lo + hi)
        return EventLocation(t, g(t), "crossing")
    sgn = 1.0 if ga > 0 else -1.0
    res = minimize_scalar(lambda t: sgn * g(t), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-13})
    gm = g(res.x)
    if abs(gm) <= eps or gm * sgn < 0:
        return EventLocation(float(res.x), gm, "grazing")
    raise ValueError("residual does not change sign or touch zero in the bracket")


def switch_on_control(traj: Trajectory, tau_c: float, gain_K: float, tau_end: float,
                      tau_d: float | None = None,
                      settings: IntegrationSettings | None = None) -> Trajectory:
    """Continue ``traj`` from ``tau_c`` with the feedback gain switched to ``gain_K``.

    The part of ``traj`` before ``tau_c`` serves as the control history.
    ``tau_d`` defaults to the forcing period.
    """
    p = traj.params
    tau_d = p.period if tau_d is None else tau_d
    a, b = traj.span
    if tau_c > b + 1e-12 * max(1.0, abs(b)):
        raise HistoryGapError("trajectory ends before the switch time", tau=tau_c)
    if gain_K > 0 and tau_c - tau_d < a - 1e-9:
        raise HistoryGapError("insufficient history before the switch time", tau=tau_c)
    q = p.replace(gain_K=gain_K, tau_d=tau_d if gain_K > 0 else p.tau_d)
    return integrate(q, traj, (tau_c, tau_end), settings or traj.settings)
