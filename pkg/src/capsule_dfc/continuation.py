"""Continuation of periodic orbits of the chain system.

Orbits are represented by multiple shooting over fixed-mode segments. Each
segment is integrated with a fixed-step DOPRI5 map and its variational
equations; adjacent segments are joined by state continuity and by the
event condition of the junction surface. Because every junction lies on a
switching surface, the event conditions also fix the phase of the orbit.

Stability follows from the monodromy matrix, built from segment
fundamental matrices and saltation matrices at the junctions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import _chain_kernel as _ck
from ._io import write_csv
from .chain import ChainConfig, ChainState, chain_mode, integrate_chain, lift
from .integrator import IntegrationError, IntegrationSettings, integrate
from .model import Mode, Params

__all__ = [
    "ContinuationError",
    "InadmissibleOrbitError",
    "ConvergenceError",
    "ContinuationSettings",
    "SegmentedOrbit",
    "BranchPoint",
    "Branch",
    "GrazingInfo",
    "orbit_from_simulation",
    "orbit_from_dde",
    "resegment",
    "bvp_residual",
    "newton_correct",
    "floquet_multipliers",
    "nontrivial_multipliers",
    "detect_grazing",
    "continue_branch",
    "continue_grazing_locus",
    "continue_pd_locus",
    "PARAM_INDEX",
]

log = logging.getLogger(__name__)

PARAM_INDEX = {"omega": 0, "alpha": 1, "gain_K": 6, "tau_d": 7}
_JUNCTIONS = ("impact", "stick", "release", "apex")
_GUARD_TOL = 1e-9


class ContinuationError(RuntimeError):
    """Base class for continuation failures."""


class InadmissibleOrbitError(ContinuationError):
    """The mode sequence does not describe the orbit it was solved for."""


class ConvergenceError(ContinuationError):
    """Newton iterations failed to reach the tolerance."""

    def __init__(self, msg: str, norms: Sequence[float] = ()):
        super().__init__(msg)
        self.norms = list(norms)


@dataclass(frozen=True)
class ContinuationSettings:
    """Step bounds, tolerances and discretisation of the shooting map."""

    ds: float = 0.02
    ds_min: float = 1e-5
    ds_max: float = 0.05
    max_points: int = 400
    newton_tol: float = 1e-10
    newton_maxiter: int = 12
    locate_tol: float = 1e-5
    h_phys: float = 0.01
    grazing_tol: float = 1e-8


def junction_kind(pre: Mode, post: Mode) -> str:
    """Switching surface separating two consecutive modes."""
    if pre.contact != post.contact:
        if pre.motion != post.motion:
            raise InadmissibleOrbitError(f"{pre.label} -> {post.label} changes both flags")
        return "impact"
    if pre.motion != 0 and post.motion != pre.motion:
        return "stick"
    if pre.motion == 0 and post.motion != 0:
        return "release"
    raise InadmissibleOrbitError(f"no switching surface between {pre.label} and {post.label}")


@dataclass
class SegmentedOrbit:
    """Periodic orbit as a cyclic list of fixed-mode segments.

    ``starts[j]`` is the chain state at the start of segment ``j`` and
    ``durations[j]`` its length in chain time. ``junctions[j]`` names the
    condition closing segment ``j``: a switching surface, or ``"apex"``
    (``v_r = 0``) for an auxiliary split inside one mode.
    """

    params: Params
    cfg: ChainConfig
    modes: tuple[Mode, ...]
    junctions: tuple[str, ...]
    starts: np.ndarray
    durations: np.ndarray
    nsteps: np.ndarray = field(default=None)

    def __post_init__(self):
        m = len(self.modes)
        self.starts = np.asarray(self.starts, dtype=float).reshape(m, self.cfg.dim)
        self.durations = np.asarray(self.durations, dtype=float).reshape(m)
        if len(self.junctions) != m:
            raise ValueError("one junction per segment")
        for j in range(m):
            kind = self.junctions[j]
            if kind not in _JUNCTIONS:
                raise ValueError(f"unknown junction {kind!r}")
            nxt = self.modes[(j + 1) % m]
            if kind == "apex":
                if nxt != self.modes[j]:
                    raise InadmissibleOrbitError("apex junction must keep the mode")
            elif junction_kind(self.modes[j], nxt) != kind:
                raise InadmissibleOrbitError(
                    f"junction {j} is {kind} but modes {self.modes[j].label} -> {nxt.label}")
        if self.nsteps is None:
            self.rediscretize()
        self.nsteps = np.asarray(self.nsteps, dtype=np.int64)

    def rediscretize(self, h_phys: float = 0.01):
        h = min(h_phys / self.params.tau_d, 1.5 / self.cfg.N)
        self.nsteps = np.maximum(2, np.ceil(np.abs(self.durations) / h)).astype(np.int64)

    def copy(self, **changes) -> "SegmentedOrbit":
        kw = dict(params=self.params, cfg=self.cfg, modes=self.modes, junctions=self.junctions,
                  starts=self.starts.copy(), durations=self.durations.copy(),
                  nsteps=self.nsteps.copy())
        kw.update(changes)
        return SegmentedOrbit(**kw)

    @property
    def n_segments(self) -> int:
        return len(self.modes)

    @property
    def period(self) -> float:
        """Period in chain time."""
        return float(np.sum(self.durations))

    @property
    def physical_period(self) -> float:
        return self.period * self.params.tau_d

    @property
    def impacts(self) -> int:
        """Impacts with the secondary spring per period."""
        return sum(1 for j, k in enumerate(self.junctions) if k == "impact" and self.modes[j].contact == 0)

    @property
    def contact_time(self) -> float:
        """Physical time per period spent in contact with the secondary spring."""
        return float(sum(d for d, m in zip(self.durations, self.modes) if m.contact)) * self.params.tau_d

    @property
    def mode_sequence(self) -> tuple[str, ...]:
        return tuple(m.label for m in self.modes)

    def repeated(self, k: int) -> "SegmentedOrbit":
        """The same cycle traversed ``k`` times."""
        return self.copy(modes=self.modes * k, junctions=self.junctions * k,
                         starts=np.tile(self.starts, (k, 1)), durations=np.tile(self.durations, k),
                         nsteps=np.tile(self.nsteps, k))

    def split_at(self, j: int, t: float) -> "SegmentedOrbit":
        """Insert an apex junction at chain time ``t`` inside segment ``j``."""
        if not 0 < t < self.durations[j]:
            raise ValueError("split time must lie inside the segment")
        z_mid = _flow(self, j, t)[0]
        starts = np.insert(self.starts, j + 1, z_mid, axis=0)
        durs = np.insert(self.durations, j + 1, self.durations[j] - t)
        durs[j] = t
        modes = self.modes[: j + 1] + (self.modes[j],) + self.modes[j + 1:]
        junc = self.junctions[:j] + ("apex",) + self.junctions[j:]
        o = SegmentedOrbit(self.params, self.cfg, modes, junc, starts, durs)
        return o

    def sample(self, per_segment: int = 50) -> tuple[np.ndarray, np.ndarray]:
        """Chain times and full states along one period."""
        ts, zs = [], []
        t0 = 0.0
        for j in range(self.n_segments):
            for k in range(per_segment):
                t = self.durations[j] * k / per_segment
                z = _flow(self, j, t)[0] if k else self.starts[j]
                ts.append(t0 + t)
                zs.append(z)
            t0 += self.durations[j]
        return np.array(ts), np.array(zs)


def _par(orbit: SegmentedOrbit) -> np.ndarray:
    return orbit.params.as_array()


def _flow(orbit: SegmentedOrbit, j: int, t: float | None = None, with_var: bool = False,
          pidx: np.ndarray = np.zeros(0, dtype=np.int64)):
    m = orbit.modes[j]
    T = orbit.durations[j] if t is None else t
    ns = int(orbit.nsteps[j]) if t is None else max(2, int(math.ceil(orbit.nsteps[j] * abs(t) / max(abs(orbit.durations[j]), 1e-300))))
    return _ck.flow_fixed(orbit.starts[j], _par(orbit), orbit.cfg.N, int(m.contact), int(m.motion),
                          float(T), ns, with_var, pidx)


def _rhs(z, orbit: SegmentedOrbit, mode: Mode) -> np.ndarray:
    out = np.empty_like(z)
    _ck.chain_rhs(z, _par(orbit), orbit.cfg.N, int(mode.contact), int(mode.motion), out)
    return out


def _event(kind: str, z, p: Params, pre: Mode, post: Mode) -> tuple[float, np.ndarray]:
    """Junction residual and its gradient with respect to z."""
    g = np.zeros_like(z)
    if kind == "impact":
        g[0] = 1.0
        return z[0] - p.delta, g
    if kind == "stick":
        g[4], g[1] = 1.0, -1.0
        return z[4] - z[1], g
    if kind == "release":
        hb = p.beta if pre.contact else 0.0
        g[0] = 1.0 + hb
        g[1] = 2.0 * p.zeta
        f = z[0] + 2.0 * p.zeta * z[1] + hb * (z[0] - p.delta)
        return f - post.motion, g
    g[1] = 1.0
    return z[1], g


def _extra_apex_gap(orbit: SegmentedOrbit) -> list[int]:
    return [j for j, k in enumerate(orbit.junctions) if k == "apex"]


class _Problem:
    """Shooting system in the unknowns (starts, durations, free parameters)."""

    def __init__(self, orbit: SegmentedOrbit, free: Sequence[str], tangency: bool = False):
        self.template = orbit
        self.free = tuple(free)
        self.pidx = np.array([PARAM_INDEX[f] for f in self.free], dtype=np.int64)
        self.tangency = tangency
        self.m = orbit.n_segments
        self.n = orbit.cfg.dim
        self.nx = self.m * (self.n + 1)

    def pack(self, orbit: SegmentedOrbit) -> np.ndarray:
        pv = [getattr(orbit.params, f) for f in self.free]
        return np.concatenate([orbit.starts.ravel(), orbit.durations, pv])

    def unpack(self, Y: np.ndarray) -> SegmentedOrbit:
        o = self.template
        p = o.params.replace(**{f: float(v) for f, v in zip(self.free, Y[self.nx:])})
        return SegmentedOrbit(p, o.cfg, o.modes, o.junctions, Y[: self.m * self.n].reshape(self.m, self.n),
                              Y[self.m * self.n: self.nx], o.nsteps)

    def evaluate(self, Y: np.ndarray, jac: bool = True):
        orbit = self.unpack(Y)
        m, n = self.m, self.n
        p = orbit.params
        rows = m * (n + 1) + (1 if self.tangency else 0)
        F = np.zeros(rows)
        J = np.zeros((rows, len(Y))) if jac else None
        flows = []
        for j in range(m):
            z_end, X, peaks, guard = _flow(orbit, j, with_var=jac, pidx=self.pidx)
            flows.append((z_end, X, peaks, guard))
            jn = (j + 1) % m
            r0 = j * n
            F[r0: r0 + n] = z_end - orbit.starts[jn]
            pre, post = orbit.modes[j], orbit.modes[jn]
            ev, grad = _event(orbit.junctions[j], z_end, p, pre, post)
            re = m * n + j
            F[re] = ev
            if jac:
                f_end = _rhs(z_end, orbit, pre)
                Phi = X[:, :n]
                Psi = X[:, n:]
                J[r0: r0 + n, j * n: (j + 1) * n] = Phi
                J[r0: r0 + n, jn * n: (jn + 1) * n] -= np.eye(n)
                J[r0: r0 + n, m * n + j] = f_end
                J[r0: r0 + n, self.nx:] = Psi
                J[re, j * n: (j + 1) * n] = grad @ Phi
                J[re, m * n + j] = grad @ f_end
                J[re, self.nx:] = grad @ Psi
            if self.tangency and orbit.junctions[j] == "apex":
                F[-1] = z_end[0] - p.delta
                if jac:
                    J[-1, j * n: (j + 1) * n] = Phi[0]
                    J[-1, m * n + j] = f_end[0]
                    J[-1, self.nx:] = Psi[0]
        return F, J, orbit, flows


def bvp_residual(orbit: SegmentedOrbit, p: Params | None = None, free: Sequence[str] = (),
                 tangency: bool = False) -> np.ndarray:
    """Stacked residual of the multi-segment periodic boundary-value problem.

    Rows ``j*n .. j*n+n-1`` hold the continuity defect at the end of segment
    ``j`` (the last block closes the cycle); the next ``m`` rows hold the
    junction event conditions. With ``tangency`` a final row demands
    ``x_r = delta`` at the apex junction.

    Raises
    ------
    InadmissibleOrbitError
        If the mode sequence has no consistent switching surfaces.
    """
    if p is not None:
        orbit = orbit.copy(params=p)
    prob = _Problem(orbit, free, tangency)
    return prob.evaluate(prob.pack(orbit), jac=False)[0]


def check_admissible(orbit: SegmentedOrbit, flows=None, tol: float = _GUARD_TOL) -> list[str]:
    """Violations of the mode guards along the orbit (empty if admissible)."""
    problems = []
    if np.any(orbit.durations <= 0):
        problems.append("non-positive segment duration")
    for j in range(orbit.n_segments):
        guard = flows[j][3] if flows is not None else _flow(orbit, j)[3]
        if guard[0] < -tol:
            problems.append(f"segment {j} ({orbit.modes[j].label}) crosses the impact surface")
        if guard[1] < -tol:
            problems.append(f"segment {j} ({orbit.modes[j].label}) violates its motion guard")
    # velocity-surface junctions must be consistent with the friction law
    par = orbit.params.as_array()
    m = orbit.n_segments
    for j, kind in enumerate(orbit.junctions):
        if kind not in ("stick", "release"):
            continue
        pre, post = orbit.modes[j], orbit.modes[(j + 1) % m]
        z = flows[j][0] if flows is not None else _flow(orbit, j)[0]
        f = _ck.fmc(z, par, pre.contact)
        if post.motion == 0:
            ok = abs(f) <= 1.0 + tol
        else:
            ok = post.motion * f >= 1.0 - tol
        if not ok:
            problems.append(f"junction {j} ({pre.label} -> {post.label}) violates the friction law")
    return problems


@dataclass(frozen=True)
class NewtonInfo:
    iterations: int
    norms: tuple[float, ...]


def _newton(prob: _Problem, Y: np.ndarray, tol: float, maxiter: int,
            arclength: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None):
    """Newton iteration; ``arclength`` = (Y_pred, tangent, weights) adds one row."""
    norms = []
    for it in range(maxiter + 1):
        F, J, orbit, flows = prob.evaluate(Y)
        if arclength is not None:
            Yp, tv, wts = arclength
            F = np.append(F, np.dot(wts * tv, Y - Yp))
            J = np.vstack([J, wts * tv])
        nrm = float(np.max(np.abs(F)))
        norms.append(nrm)
        if not math.isfinite(nrm):
            raise ConvergenceError("non-finite residual", norms)
        if nrm < tol:
            return Y, orbit, flows, NewtonInfo(it, tuple(norms)), J
        if it == maxiter:
            break
        if J.shape[0] != J.shape[1]:
            raise ConvergenceError("underdetermined system: free a parameter with arclength", norms)
        try:
            dY = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular Jacobian: {exc}", norms) from exc
        if it >= 4 and nrm > 0.5 * norms[-2]:
            raise ConvergenceError("Newton iteration stagnates", norms)
        Y = Y + dY
    raise ConvergenceError(f"no convergence in {maxiter} iterations (|F| = {norms[-1]:.3g})", norms)


def newton_correct(orbit: SegmentedOrbit, p: Params | None = None, tol: float = 1e-10,
                   maxiter: int = 12, check: bool = True, return_info: bool = False):
    """Correct an orbit guess at fixed parameters.

    Raises
    ------
    ConvergenceError
        Maximum iterations reached, stagnation or a singular Jacobian.
    InadmissibleOrbitError
        The converged solution violates its mode sequence.
    """
    if p is not None:
        orbit = orbit.copy(params=p)
    prob = _Problem(orbit, ())
    Y, out, flows, info, _ = _newton(prob, prob.pack(orbit), tol, maxiter)
    if check:
        bad = check_admissible(out, flows)
        if bad:
            raise InadmissibleOrbitError("; ".join(bad))
    return (out, info) if return_info else out


def _saltation(z, f_pre, f_post, grad) -> np.ndarray:
    denom = grad @ f_pre
    S = np.eye(len(z))
    if abs(denom) > 0:
        S += np.outer(f_post - f_pre, grad) / denom
    return S


def monodromy(orbit: SegmentedOrbit) -> np.ndarray:
    """Monodromy matrix at the start of segment 0."""
    n = orbit.cfg.dim
    m = orbit.n_segments
    M = np.eye(n)
    p = orbit.params
    for j in range(m):
        z_end, X, _, _ = _flow(orbit, j, with_var=True)
        pre, post = orbit.modes[j], orbit.modes[(j + 1) % m]
        _, grad = _event(orbit.junctions[j], z_end, p, pre, post)
        S = _saltation(z_end, _rhs(z_end, orbit, pre), _rhs(z_end, orbit, post), grad)
        M = S @ X[:, :n] @ M
    return M


def floquet_multipliers(orbit: SegmentedOrbit) -> np.ndarray:
    """Floquet multipliers sorted by decreasing modulus.

    Saltation matrices ``I + (f+ - f-) g^T / (g^T f-)`` account for the
    junction-time variation; they are the identity at impacts and releases
    (continuous vector field) and project out the capsule velocity when the
    capsule sticks.
    """
    mu = np.linalg.eigvals(monodromy(orbit))
    return mu[np.argsort(-np.abs(mu))]


def nontrivial_multipliers(mu: np.ndarray) -> np.ndarray:
    """Drop the multiplier closest to 1 (time-shift direction)."""
    k = int(np.argmin(np.abs(mu - 1.0)))
    return np.delete(mu, k)


def pd_test(mu: np.ndarray) -> float:
    """Smooth period-doubling indicator: mu + 1 for the real multiplier nearest -1."""
    real = mu[np.abs(mu.imag) < 1e-7 * np.maximum(1.0, np.abs(mu))].real
    if real.size == 0:
        return math.nan
    return float(real[np.argmin(np.abs(real + 1.0))] + 1.0)


@dataclass(frozen=True)
class GrazingInfo:
    """Tangential approach of a no-contact segment to ``x_r = delta``."""

    flagged: bool
    segment: int
    time: float
    gap: float
    velocity: float
    impacts: int


def grazing_gap(orbit: SegmentedOrbit, flows=None) -> tuple[float, int, float]:
    """Largest interior peak of ``x_r - delta`` over no-contact segments.

    Returns ``(gap, segment, time)``; ``gap`` is ``-inf`` without peaks.
    """
    best = (-math.inf, -1, math.nan)
    for j in range(orbit.n_segments):
        if orbit.modes[j].contact:
            continue
        peaks = flows[j][2] if flows is not None else _flow(orbit, j)[2]
        for xm, t in peaks:
            if 0.0 < t < orbit.durations[j] and xm - orbit.params.delta > best[0]:
                best = (float(xm - orbit.params.delta), j, float(t))
    return best


def detect_grazing(orbit: SegmentedOrbit, tol: float = 1e-8) -> GrazingInfo:
    """Flag an interior point with ``v_r = 0`` and ``x_r = delta``.

    Apex junctions (segment splits at ``v_r = 0``) are inspected directly;
    otherwise the interior maxima of ``x_r`` on no-contact segments are used.
    """
    p = orbit.params
    for j, k in enumerate(orbit.junctions):
        if k == "apex":
            z = _flow(orbit, j)[0]
            gap = float(z[0] - p.delta)
            flag = abs(gap) <= tol and abs(z[1]) <= tol
            return GrazingInfo(flag, j, float(orbit.durations[j]), gap, float(z[1]), orbit.impacts)
    gap, j, t = grazing_gap(orbit)
    if j < 0:
        return GrazingInfo(False, -1, math.nan, -math.inf, math.nan, orbit.impacts)
    z = _flow(orbit, j, t)[0]
    return GrazingInfo(abs(gap) <= tol, j, t, gap, float(z[1]), orbit.impacts)


def _segments_from_events(t_start, t_end, events, p, cfg, periods=1):
    if not events:
        raise InadmissibleOrbitError("no switching events over the period")
    P = t_end - t_start
    times = np.array([e.t for e in events])
    starts = np.array([e.z for e in events])
    modes = tuple(e.post for e in events)
    junc = tuple(e.surface for e in events[1:]) + (events[0].surface,)
    durs = np.append(np.diff(times), times[0] + P - times[-1])
    if events[-1].post != events[0].pre:
        raise InadmissibleOrbitError("simulated cycle does not close")
    keep = durs > 1e-12
    if not np.all(keep):
        # zero-length segments: merge the junction into the previous one
        idx = np.flatnonzero(keep)
        starts, durs = starts[idx], durs[idx]
        modes = tuple(modes[i] for i in idx)
        junc = tuple(junction_kind(modes[k], modes[(k + 1) % len(modes)]) for k in range(len(modes)))
    return SegmentedOrbit(p, cfg, modes, junc, starts, durs)


def orbit_from_simulation(p: Params, cfg: ChainConfig = ChainConfig(), z0=None, transient: int = 200,
                          periods: int = 1, settings: IntegrationSettings | None = None,
                          mode: Mode | None = None, correct: bool = True, retries: int = 4,
                          transient_retry: int = 100) -> SegmentedOrbit:
    """Build a segmented orbit from a chain simulation.

    The chain system is integrated for ``transient`` forcing periods from
    ``z0`` (default: rest with the capsule at the origin), then one more
    ``periods``-fold cycle is recorded and cut at its switching events. If
    the recorded cycle does not close (slow transients), the simulation runs
    on for ``transient_retry`` periods and tries again, ``retries`` times.
    """
    settings = settings or IntegrationSettings(rel_tol=1e-10, abs_tol=1e-12, eps_event=1e-12)
    Tc = p.period / p.tau_d
    if z0 is None:
        from .chain import lift_state
        z0 = lift_state((0.0, 0.0, 0.0, 0.0), cfg, p)
    z0 = z0.z if isinstance(z0, ChainState) else np.asarray(z0, dtype=float)
    t_a = 0.0
    if transient > 0:
        t_a = transient * Tc
        tr = integrate_chain(z0, p, cfg, (0.0, t_a), settings, record_from=t_a - Tc, mode=mode)
        z0, mode = tr.end_state, tr.end_mode
    for attempt in range(retries + 1):
        t_b = t_a + periods * Tc
        tr = integrate_chain(z0, p, cfg, (t_a, t_b), settings, mode=mode)
        try:
            orbit = _segments_from_events(t_a, t_b, tr.events, p, cfg, periods)
            break
        except InadmissibleOrbitError:
            if attempt == retries:
                raise
            # not yet settled: run on and try again
            z0, mode = tr.end_state, tr.end_mode
            t_a = t_b
            tr = integrate_chain(z0, p, cfg, (t_a, t_a + transient_retry * Tc), settings,
                                 record_from=t_a + (transient_retry - 1) * Tc, mode=mode)
            z0, mode = tr.end_state, tr.end_mode
            t_a += transient_retry * Tc
    return newton_correct(orbit) if correct else orbit


def orbit_from_dde(p: Params, cfg: ChainConfig = ChainConfig(), state=(0.0, 0.0, 0.0, 0.0),
                   transient: int = 200, periods: int = 1, correct: bool = True) -> SegmentedOrbit:
    """Segmented chain orbit seeded from a DDE simulation of the original system."""
    T = p.period
    tr = integrate(p, state, (0.0, transient * T))
    z0 = lift(tr, cfg, p, transient * T)
    return orbit_from_simulation(p, cfg, z0, transient=20, periods=periods, correct=correct)


def resegment(orbit: SegmentedOrbit, p: Params | None = None, correct: bool = True) -> SegmentedOrbit:
    """Rebuild the mode sequence by simulating one cycle from inside segment 0."""
    p = p or orbit.params
    o = orbit.copy(params=p)
    half = 0.5 * o.durations[0]
    z_mid = _flow(o, 0, half)[0]
    settings = IntegrationSettings(rel_tol=1e-11, abs_tol=1e-13, eps_event=1e-12)
    start = half
    tr = integrate_chain(z_mid, p, o.cfg, (start, start + o.period), settings, mode=o.modes[0])
    new = _segments_from_events(start, start + o.period, tr.events, p, o.cfg)
    return newton_correct(new) if correct else new


# --------------------------------------------------------------------------- branches


@dataclass
class BranchPoint:
    orbit: SegmentedOrbit
    values: dict
    multipliers: np.ndarray
    stable: bool
    tag: str = ""

    @property
    def max_multiplier(self) -> float:
        nt = nontrivial_multipliers(self.multipliers)
        return float(np.max(np.abs(nt))) if nt.size else 0.0


@dataclass
class Branch:
    free: tuple[str, ...]
    points: list[BranchPoint]
    settings: ContinuationSettings
    status: str = "ok"

    def special(self, tag: str) -> list[BranchPoint]:
        return [q for q in self.points if q.tag == tag]

    def values(self, name: str) -> np.ndarray:
        return np.array([q.values[name] for q in self.points])

    def to_csv(self, path):
        """Branch table: free parameters, period, impacts, contact time, max |mu|, tag."""
        header = list(self.free) + ["period_chain", "period", "impacts", "contact_time",
                                    "contact_fraction", "max_abs_multiplier", "stable", "tag"]
        rows = []
        for q in self.points:
            o = q.orbit
            rows.append([*(q.values[f] for f in self.free), o.period, o.physical_period, o.impacts,
                         o.contact_time, o.contact_time / o.physical_period, q.max_multiplier,
                         int(q.stable), q.tag])
        return write_csv(path, header, rows)

    def locus_csv(self, path):
        """Two-parameter locus table ``tau_d,gain_K,tag``."""
        rows = [[q.values["tau_d"], q.values["gain_K"], q.tag] for q in self.points]
        return write_csv(path, ["tau_d", "gain_K", "tag"], rows)


def _point(orbit: SegmentedOrbit, free, tag="") -> BranchPoint:
    mu = floquet_multipliers(orbit)
    nt = nontrivial_multipliers(mu)
    stable = bool(np.all(np.abs(nt) < 1.0))
    return BranchPoint(orbit, {f: getattr(orbit.params, f) for f in free}, mu, stable, tag)


def _weights(prob: _Problem) -> np.ndarray:
    w = np.full(prob.nx + len(prob.free), 1.0)
    w[: prob.nx] = 1.0 / prob.nx
    return w


def _tangent(J: np.ndarray, wts: np.ndarray, prev: np.ndarray | None) -> np.ndarray:
    """Null vector of the (k, k+1) Jacobian, oriented along ``prev``."""
    if prev is None:
        _, _, vt = np.linalg.svd(J)
        t = vt[-1]
    else:
        A = np.vstack([J, prev])
        rhs = np.zeros(A.shape[0])
        rhs[-1] = 1.0
        t = np.linalg.solve(A, rhs)
    t = t / math.sqrt(np.dot(wts * t, t))
    if prev is not None and np.dot(wts * t, prev) < 0:
        t = -t
    return t


class _Continuer:
    """Pseudo-arclength stepping for a shooting problem with k+1 free parameters."""

    def __init__(self, prob: _Problem, settings: ContinuationSettings):
        self.prob = prob
        self.s = settings
        self.wts = _weights(prob)

    def start(self, orbit: SegmentedOrbit, direction: np.ndarray | None = None):
        Y = self.prob.pack(orbit)
        F, J, orbit, flows = self.prob.evaluate(Y)
        t = _tangent(J, self.wts, None)
        if direction is not None and np.dot(t[self.prob.nx:], direction) < 0:
            t = -t
        return Y, t, orbit, flows, J

    def step(self, Y, t, ds):
        Yp = Y + ds * t
        Yn, orbit, flows, info, Jaug = _newton(self.prob, Yp, self.s.newton_tol, self.s.newton_maxiter,
                                               arclength=(Yp, t, self.wts))
        tn = _tangent(Jaug[:-1], self.wts, self.wts * t)
        return Yn, tn, orbit, flows, info


def _refresh(orbit: SegmentedOrbit, free, tangency: bool, settings: ContinuationSettings):
    orbit = orbit.copy()
    orbit.rediscretize(settings.h_phys)
    return _Problem(orbit, free, tangency)


def continue_branch(seed: SegmentedOrbit, free: str, bounds: tuple[float, float],
                    settings: ContinuationSettings = ContinuationSettings(),
                    direction: int = 1, callback: Callable | None = None) -> Branch:
    """Pseudo-arclength continuation of a periodic orbit in one parameter.

    Every point carries Floquet multipliers. Period-doubling (real multiplier
    through -1), folds (turning of the free parameter) and grazing (a
    no-contact segment touching ``x_r = delta``) are located by bisection
    on the arclength to ``settings.locate_tol`` in the parameter. After a
    grazing point, or whenever the mode guards fail, the orbit is re-cut
    from a one-cycle simulation and the branch continues with the new mode
    sequence.

    Raises
    ------
    ConvergenceError
        If the seed cannot be corrected.
    """
    lo, hi = bounds
    s = settings
    seed.rediscretize(s.h_phys)
    seed = newton_correct(seed)
    prob = _Problem(seed, (free,))
    cont = _Continuer(prob, s)
    Y, t, orbit, flows, _ = cont.start(seed, np.array([float(direction)]))
    pts = [_point(orbit, (free,))]
    branch = Branch((free,), pts, s)
    ds = s.ds
    pd_prev = pd_test(pts[0].multipliers)
    gr_prev = grazing_gap(orbit, flows)[0]
    fold_prev = t[-1]
    while len(pts) < s.max_points:
        lam = Y[-1]
        if not (lo - 1e-12 <= lam <= hi + 1e-12):
            break
        try:
            Yn, tn, on, fl, info = cont.step(Y, t, ds)
        except (ConvergenceError, IntegrationError, np.linalg.LinAlgError) as exc:
            ds *= 0.5
            if ds < s.ds_min:
                branch.status = f"step size underflow: {exc}"
                log.warning("branch stopped at %s=%.6g: %s", free, lam, exc)
                break
            continue
        bad = check_admissible(on, fl)
        gr_new = grazing_gap(on, fl)[0]
        mu = floquet_multipliers(on)
        pd_new = pd_test(mu)
        fold_new = tn[-1]
        tag = ""
        # special points between Y and Yn
        events = []
        if math.isfinite(pd_prev) and math.isfinite(pd_new) and pd_prev * pd_new < 0:
            events.append(("PD", lambda o, tt: pd_test(floquet_multipliers(o))))
        if gr_prev < 0 <= gr_new:
            events.append(("GR", lambda o, tt: grazing_gap(o)[0]))
        if fold_prev * fold_new < 0:
            events.append(("FOLD", lambda o, tt: tt[-1]))
        found = set()
        for name, fn in events:
            try:
                q = _locate(cont, Y, t, ds, fn, s.locate_tol)
            except (ContinuationError, IntegrationError, np.linalg.LinAlgError) as exc:
                log.warning("could not locate %s: %s", name, exc)
                continue
            pts.append(q[0])
            q[0].tag = name
            found.add(name)
            log.info("%s located at %s=%.8g", name, free, q[0].values[free])
        regrazed = gr_new >= 0 or any("impact surface" in b for b in bad)
        if bad or regrazed:
            # mode sequence changed: rebuild from simulation at the new parameter
            try:
                new = resegment(on)
            except (ContinuationError, IntegrationError) as exc:
                branch.status = f"lost admissible mode sequence: {exc}"
                log.warning("branch stopped at %s=%.6g: %s", free, Yn[-1], exc)
                break
            prob = _refresh(new, (free,), False, s)
            cont = _Continuer(prob, s)
            dirn = np.array([np.sign(tn[-1]) or 1.0])
            lam_a = Y[-1]
            Y, t, orbit, flows, _ = cont.start(new, dirn)
            pts.append(_point(orbit, (free,)))
            pd_b = pd_test(pts[-1].multipliers)
            if ("PD" not in found and math.isfinite(pd_prev) and math.isfinite(pd_b)
                    and pd_prev * pd_b < 0 and abs(t[-1]) > 1e-12):
                # the sign change was hidden by the change of mode sequence:
                # bisect backwards along the new sequence
                back = (lam_a - Y[-1]) / t[-1]
                try:
                    q = _locate(cont, Y, t, back, lambda o, tt: pd_test(floquet_multipliers(o)),
                                s.locate_tol)
                    q[0].tag = "PD"
                    pts.append(q[0])
                    log.info("PD located at %s=%.8g", free, q[0].values[free])
                except (ContinuationError, ConvergenceError, IntegrationError,
                        np.linalg.LinAlgError) as exc:
                    log.warning("could not locate PD: %s", exc)
            pd_prev = pd_b
            gr_prev = grazing_gap(orbit, flows)[0]
            fold_prev = t[-1]
            continue
        pt = _point(on, (free,))
        pts.append(pt)
        if callback:
            callback(pt)
        Y, t = Yn, tn
        pd_prev, gr_prev, fold_prev = pd_new, gr_new, fold_new
        if info.iterations <= 3:
            ds = min(ds * 1.5, s.ds_max)
        elif info.iterations >= 6:
            ds = max(ds * 0.5, s.ds_min)
        # keep the discretisation matched to the current delay
        if free == "tau_d":
            prob = _refresh(on, (free,), False, s)
            cont = _Continuer(prob, s)
    pts.sort(key=lambda q: q.values[free] if direction > 0 else -q.values[free])
    return branch


def _locate(cont: _Continuer, Y, t, ds, fn, tol):
    """Bisection in arclength on a scalar test function between Y and Y + ds t."""
    prob = cont.prob
    orbit0 = prob.unpack(Y)
    f_lo = fn(orbit0, t)
    a, b = 0.0, ds
    best = None
    for _ in range(60):
        mid = 0.5 * (a + b)
        Yn, tn, on, fl, info = cont.step(Y, t, mid)
        f_mid = fn(on, tn)
        best = (on, Yn)
        if f_lo * f_mid <= 0:
            b = mid
        else:
            a = mid
        lam_a = (Y + a * t)[prob.nx:]
        lam_b = (Y + b * t)[prob.nx:]
        if np.max(np.abs(lam_b - lam_a)) < tol:
            break
    Yn, tn, on, fl, info = cont.step(Y, t, 0.5 * (a + b))
    return _point(on, prob.free), Yn, tn


def locate_special(branch: Branch, tag: str) -> BranchPoint | None:
    pts = branch.special(tag)
    return pts[0] if pts else None


# --------------------------------------------------------------------------- loci


def merge_apex(orbit: SegmentedOrbit) -> SegmentedOrbit:
    """Undo :meth:`SegmentedOrbit.split_at` by joining segments across apex junctions."""
    starts, durs, modes, junc = [], [], [], []
    m = orbit.n_segments
    for j in range(m):
        if j > 0 and orbit.junctions[j - 1] == "apex":
            durs[-1] += orbit.durations[j]
            junc[-1] = orbit.junctions[j]
            continue
        starts.append(orbit.starts[j])
        durs.append(orbit.durations[j])
        modes.append(orbit.modes[j])
        junc.append(orbit.junctions[j])
    if orbit.junctions[-1] == "apex":
        # the last segment continues into segment 0
        durs[0] += durs.pop()
        starts[0] = starts.pop()
        modes.pop()
        junc.pop()
    return SegmentedOrbit(orbit.params, orbit.cfg, tuple(modes), tuple(junc), np.array(starts),
                          np.array(durs))


def _grazing_seed(orbit: SegmentedOrbit, settings: ContinuationSettings,
                  offset: float = 2e-3) -> SegmentedOrbit:
    """Regular orbit on the no-grazing side near ``orbit``, split at its peak and
    corrected onto the grazing condition with ``tau_d`` free."""
    base = merge_apex(orbit) if "apex" in orbit.junctions else orbit
    p = orbit.params
    last = None
    for shift in (-offset, offset, -4 * offset, 4 * offset):
        try:
            reg = resegment(base, p.replace(tau_d=p.tau_d + shift))
        except (ContinuationError, IntegrationError) as exc:
            last = exc
            continue
        gap, j, tg = grazing_gap(reg)
        if j < 0 or gap >= 0:
            continue
        split = reg.split_at(j, tg)
        split.rediscretize(settings.h_phys)
        sub = _Problem(split, ("tau_d",), tangency=True)
        _, out, flows, _, _ = _newton(sub, sub.pack(split), settings.newton_tol, settings.newton_maxiter)
        if not check_admissible(out, flows, tol=1e-7):
            return out
    raise InadmissibleOrbitError(f"could not rebuild a grazing orbit near tau_d={p.tau_d:.6g}: {last}")


def continue_grazing_locus(seed: SegmentedOrbit, bounds_K: tuple[float, float] = (0.3, 0.8),
                           bounds_tau: tuple[float, float] = (0.3, 4.0),
                           settings: ContinuationSettings = ContinuationSettings(ds=0.02, ds_max=0.04),
                           directions: Sequence[int] = (1, -1)) -> Branch:
    """Two-parameter curve of grazing period-1 orbits in (tau_d, gain_K).

    The no-contact segment carrying the grazing peak is split at ``v_r = 0``
    (an extra segment whose terminal point satisfies ``v_r = 0``) and the
    auxiliary condition ``x_r - delta = 0`` is imposed there; ``tau_d`` and
    ``gain_K`` are both free.
    """
    s = settings
    orbit = _grazing_seed(seed, s)
    free = ("tau_d", "gain_K")
    all_pts: list[BranchPoint] = []
    status = "ok"
    for d in directions:
        prob = _Problem(orbit, free, tangency=True)
        cont = _Continuer(prob, s)
        Y, t, o, fl, _ = cont.start(orbit, np.array([0.0, float(d)]))
        pts = [_point(o, free, "GR")]
        ds = s.ds
        rebuilt = 0
        while len(pts) < s.max_points:
            tau, K = Y[-2], Y[-1]
            if not (bounds_K[0] <= K <= bounds_K[1] and bounds_tau[0] <= tau <= bounds_tau[1]):
                break
            try:
                Yn, tn, on, fl, info = cont.step(Y, t, ds)
            except (ConvergenceError, IntegrationError, np.linalg.LinAlgError) as exc:
                ds *= 0.5
                if ds < s.ds_min:
                    status = f"corrector failure at tau_d={tau:.6g}, K={K:.6g}: {exc}"
                    break
                continue
            bad = check_admissible(on, fl, tol=1e-7)
            if bad:
                # mode sequence changed along the locus: rebuild and restart here
                try:
                    fresh = _grazing_seed(on, s)
                except (ContinuationError, IntegrationError, np.linalg.LinAlgError) as exc:
                    status = f"grazing orbit lost admissibility at tau_d={Yn[-2]:.6g}, K={Yn[-1]:.6g}: {exc}"
                    break
                rebuilt += 1
                if rebuilt > 20:
                    status = "too many mode-sequence changes along the locus"
                    break
                prob = _Problem(fresh, free, tangency=True)
                cont = _Continuer(prob, s)
                Y, t, o, fl, _ = cont.start(fresh, t[-2:])
                pts.append(_point(o, free, "GR"))
                continue
            pts.append(_point(on, free, "GR"))
            Y, t = Yn, tn
            if info.iterations <= 3:
                ds = min(ds * 1.5, s.ds_max)
            prob = _refresh(on, free, True, s)
            cont = _Continuer(prob, s)
        all_pts.extend(pts if not all_pts else pts[1:])
    all_pts.sort(key=lambda q: q.values["gain_K"])
    return Branch(free, all_pts, s, status)


def _pd_value(orbit: SegmentedOrbit, tau_d: float, K: float):
    o = newton_correct(orbit, orbit.params.replace(tau_d=tau_d, gain_K=K), check=False)
    mu = floquet_multipliers(o)
    val = pd_test(mu)
    if not math.isfinite(val):
        raise ContinuationError("no real multiplier near -1 (multiplier collision)")
    return val, o


def continue_pd_locus(seed: SegmentedOrbit, bounds_K: tuple[float, float] = (0.3, 0.8),
                      bounds_tau: tuple[float, float] = (0.2, 4.0), ds: float = 0.02,
                      max_points: int = 60, tol: float = 1e-9, fd_step: float = 1e-5,
                      directions: Sequence[int] = (1, -1)) -> Branch:
    """Curve in (tau_d, gain_K) along which a real multiplier equals -1.

    The reduced test ``phi(tau_d, K) = mu + 1`` (``mu`` the real multiplier
    nearest -1 of the corrected period-1 orbit) is followed by
    pseudo-arclength steps with a finite-difference gradient; each
    evaluation corrects the orbit by Newton's method.
    """
    free = ("tau_d", "gain_K")
    p = seed.params
    tau, K = p.tau_d, p.gain_K
    val, orbit = _pd_value(seed, tau, K)

    def grad(o, tau, K):
        g1 = (_pd_value(o, tau + fd_step, K)[0] - _pd_value(o, tau - fd_step, K)[0]) / (2 * fd_step)
        g2 = (_pd_value(o, tau, K + fd_step)[0] - _pd_value(o, tau, K - fd_step)[0]) / (2 * fd_step)
        return np.array([g1, g2])

    def correct(o, x):
        g = grad(o, *x)
        for _ in range(20):
            v, o = _pd_value(o, *x)
            if abs(v) < tol:
                return x, o, g
            x = x - v * g / np.dot(g, g)
        raise ConvergenceError("PD locus corrector did not converge")

    x, orbit, g = correct(orbit, np.array([tau, K]))
    pts = [_point(orbit, free, "PD")]
    status = "ok"
    for d in directions:
        xc, oc, gc = x.copy(), orbit, g
        h = ds
        count = 0
        prev = None
        while count < max_points:
            tv = np.array([-gc[1], gc[0]])
            tv /= np.linalg.norm(tv)
            if prev is None:
                tv *= d * (1.0 if tv[1] >= 0 else -1.0)
            elif np.dot(tv, prev) < 0:
                tv = -tv
            try:
                xn, on, gn = correct(oc, xc + h * tv)
            except (ContinuationError, IntegrationError, np.linalg.LinAlgError) as exc:
                h *= 0.5
                if h < 1e-4:
                    status = f"PD locus stopped at tau_d={xc[0]:.6g}, K={xc[1]:.6g}: {exc}"
                    break
                continue
            if check_admissible(on):
                try:
                    on = resegment(on)
                except ContinuationError:
                    status = f"PD locus lost admissibility at tau_d={xn[0]:.6g}"
                    break
            xc, oc, gc = xn, on, gn
            prev = tv
            count += 1
            pts.append(_point(oc, free, "PD"))
            if not (bounds_K[0] <= xc[1] <= bounds_K[1] and bounds_tau[0] <= xc[0] <= bounds_tau[1]):
                break
    pts.sort(key=lambda q: q.values["gain_K"])
    return Branch(free, pts, ContinuationSettings(ds=ds), status)
