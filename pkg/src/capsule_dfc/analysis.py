"""Sweeps, basins of attraction, spectra, attractor labels and the
control-performance functionals.

All functionals work on :class:`~capsule_dfc.integrator.Trajectory`
objects and read the dense output directly. Integrals of the control
signal use Gauss-Legendre quadrature on the merged step grid of ``y1(tau)``
and ``y1(tau - tau_d)``, which is exact for the quartic dense output.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.signal import periodogram
from scipy.spatial.distance import directed_hausdorff

from ._io import write_csv
from .integrator import IntegrationError, IntegrationSettings, Trajectory, integrate, switch_on_control
from .model import Params, State

__all__ = [
    "SweepPoint",
    "SweepResult",
    "BasinGrid",
    "Measures",
    "classify_attractor",
    "attractor_points",
    "hausdorff",
    "stroboscopic_sweep",
    "basin_grid",
    "reference_attractors",
    "basin_state",
    "psd",
    "trajectory_psd",
    "average_velocity",
    "control_energy",
    "convergence_time",
    "desired_trajectory",
    "max_velocity_difference",
    "invasiveness",
    "controlled_run",
    "measure_control",
]

log = logging.getLogger(__name__)

SEEDINGS = ("zero", "forward", "backward", "both", "all", "local")
_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)


# --------------------------------------------------------------------------- labels


def classify_attractor(points, tol: float = 1e-5, max_period: int | None = None) -> str:
    """Label a stroboscopic point sequence as ``period-k`` or ``chaotic``.

    The smallest ``k`` for which the sequence repeats with lag ``k`` and
    every one of the ``k`` interleaved groups has diameter below ``tol``
    (max-norm) wins.

    Parameters
    ----------
    points : array_like, shape (n,) or (n, d)
        Consecutive stroboscopic samples after transients; ``n >= 30``.
    tol : float
        Cluster diameter.
    max_period : int, optional
        Largest period tried; default ``n // 3``.
    """
    z = np.asarray(points, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    n = z.shape[0]
    if n < 30:
        raise ValueError("need at least 30 stroboscopic points")
    kmax = max_period or n // 3
    for k in range(1, kmax + 1):
        if np.max(np.abs(z[k:] - z[:-k])) >= tol:
            continue
        if all(np.max(np.ptp(z[j::k], axis=0)) < tol for j in range(k)):
            return f"period-{k}"
    return "chaotic"


def attractor_points(traj: Trajectory, count: int) -> np.ndarray:
    """Last ``count`` stroboscopic points as rows ``(x1 - x2, y1, y2)``.

    The capsule position drifts and is left out.
    """
    s = traj.last_strobe(count)
    return np.column_stack([s[:, 0] - s[:, 2], s[:, 1], s[:, 3]])


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance between two point sets."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 1 and a.shape[1] != b.shape[1]:
        a = a.T
    if b.shape[0] == 1 and b.shape[1] != a.shape[1]:
        b = b.T
    return max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])


# --------------------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SweepPoint:
    value: float
    direction: str
    y1: np.ndarray = field(repr=False)
    label: str
    error: str = ""


@dataclass
class SweepResult:
    """Stroboscopic ``y1`` samples per grid value and seeding direction."""

    axis: str
    grid: np.ndarray
    points: list[SweepPoint]
    params: Params
    settings: IntegrationSettings

    def runs(self, direction: str) -> list[SweepPoint]:
        return sorted((q for q in self.points if q.direction == direction), key=lambda q: q.value)

    def at(self, index: int) -> list[SweepPoint]:
        v = self.grid[index]
        return [q for q in self.points if q.value == v]

    def attractors(self, index: int, tol: float = 1e-2) -> list[SweepPoint]:
        """Distinct attractors found at one grid value.

        Periodic runs are told apart by label and Hausdorff distance on
        ``y1``; chaotic runs by label only.
        """
        found: list[SweepPoint] = []
        for q in self.at(index):
            if q.error:
                continue
            if not any(_same_attractor(q, r, tol) for r in found):
                found.append(q)
        return found

    def attractor_count(self, tol: float = 1e-2) -> np.ndarray:
        return np.array([len(self.attractors(i, tol)) for i in range(len(self.grid))])

    def to_csv(self, path):
        """Rows ``param,strobe_index,y1,label,direction``."""
        rows = []
        for q in sorted(self.points, key=lambda q: (q.direction, q.value)):
            for i, y in enumerate(q.y1):
                rows.append([q.value, i, y, q.label, q.direction])
            if q.error:
                rows.append([q.value, -1, math.nan, "failed", q.direction])
        return write_csv(path, [self.axis, "strobe_index", "y1", "label", "direction"], rows)


def _run_cycles(p: Params, history, cycles: int, settings: IntegrationSettings) -> Trajectory:
    """Integrate ``cycles`` forcing periods; a trajectory history is moved so
    that it ends at ``tau = 0`` (whole periods keep the forcing phase)."""
    T = p.period
    if isinstance(history, Trajectory):
        a, b = history.span
        keep = max(b - (p.tau_d + 2 * T), a)
        history = history.tail(keep, shift=-b)
    return integrate(p, history, (0.0, cycles * T), settings)


def _same_attractor(q: SweepPoint, r: SweepPoint, tol: float) -> bool:
    if q.label != r.label:
        return False
    if q.label == "chaotic":
        return True
    return hausdorff(q.y1[:, None], r.y1[:, None]) < tol


def _sweep_one(p: Params, seed, direction: str, settings: IntegrationSettings,
               tol: float, axis: str, v: float, keep_tail: bool = False):
    n_rec = settings.strobe_count
    try:
        tr = _run_cycles(p, seed, settings.transient_count + n_rec, settings)
    except IntegrationError as exc:
        log.warning("sweep %s=%.8g (%s) failed: %s", axis, v, direction, exc)
        return SweepPoint(float(v), direction, np.empty(0), "failed", str(exc)), None
    y1 = tr.last_strobe(n_rec)[:, 1]
    label = classify_attractor(attractor_points(tr, n_rec), tol) if n_rec >= 30 else "unknown"
    if keep_tail:
        a, b = tr.span
        tr = tr.tail(max(b - (p.tau_d + 2 * p.period), a))
    return SweepPoint(float(v), direction, y1, label), tr


def _at(base: Params, axis: str, v: float, lock_delay: bool) -> Params:
    p = base.replace(**{axis: float(v)})
    return p.replace(tau_d=p.period) if lock_delay else p


def _sweep_chain(base: Params, axis: str, values: Sequence[float], direction: str,
                 initial_state, settings: IntegrationSettings, tol: float,
                 lock_delay: bool, keep_tail: bool = False):
    out = []
    prev = None
    for v in values:
        seed = prev if (prev is not None and direction != "zero") else initial_state
        q, tr = _sweep_one(_at(base, axis, v, lock_delay), seed, direction, settings, tol, axis, v,
                           keep_tail or direction != "zero")
        out.append((q, tr) if keep_tail else q)
        prev = tr
    return out


def _sweep_job(args):
    return _sweep_chain(*args)


def _trace_local(base: Params, axis: str, grid: np.ndarray, starts: list[list[tuple]],
                 settings: IntegrationSettings, tol: float, atol: float,
                 lock_delay: bool) -> list[SweepPoint]:
    """Follow every attractor found at a grid value to the neighbouring values
    until it merges with one already followed in that direction or is lost."""
    out = []
    n = len(grid)
    for direction, order, step in (("forward", range(n), 1), ("backward", range(n - 1, -1, -1), -1)):
        seen: list[list[SweepPoint]] = [[] for _ in range(n)]
        for i in order:
            for q0, tr0 in starts[i]:
                if tr0 is None or any(_same_attractor(q0, r, atol) for r in seen[i]):
                    continue
                seen[i].append(q0)
                j, tr = i + step, tr0
                while 0 <= j < n:
                    q, tr = _sweep_one(_at(base, axis, grid[j], lock_delay), tr, direction,
                                       settings, tol, axis, grid[j], True)
                    if q.error:
                        out.append(q)
                        break
                    if any(_same_attractor(q, r, atol) for r in seen[j]):
                        break
                    seen[j].append(q)
                    out.append(q)
                    j += step
    return out


def stroboscopic_sweep(p: Params, axis: str, value_range: tuple[float, float], grid_count: int,
                       transient_cycles: int | None = None, record_cycles: int | None = None,
                       seeding: str = "zero", initial_state=(0.0, 0.0, 0.0, 0.0),
                       settings: IntegrationSettings | None = None, tol: float = 1e-5,
                       lock_delay: bool = False, jobs: int = 1,
                       attractor_tol: float = 1e-2) -> SweepResult:
    """Brute-force bifurcation diagram of stroboscopic ``y1`` samples.

    Each grid value is integrated for ``transient_cycles + record_cycles``
    forcing periods and ``y1`` is recorded at ``tau = 2 n pi / omega`` over
    the last ``record_cycles``.

    Parameters
    ----------
    axis : str
        Name of a :class:`Params` field.
    seeding : {"zero", "forward", "backward", "both", "all", "local"}
        ``zero`` starts every value from the initial state(s); ``forward``
        and ``backward`` continue from the previous value's end (the last
        stretch of trajectory is handed over as history); ``both`` runs the
        two continued sweeps and ``all`` adds the fresh one. ``local`` runs
        the fresh sweep and then follows every distinct attractor it found
        up and down the grid until it merges with one already followed.
    initial_state : array_like, shape (4,) or (m, 4), or Trajectory
        One seed state or several; every seed gets its own fresh runs. A
        trajectory (or a list of them) is used as history: its last
        stretch is moved to end at ``tau = 0`` and every run continues it.
    jobs : int
        Worker processes. Fresh runs are split into chunks; each continued
        sweep is one job.
    lock_delay : bool
        Keep ``tau_d`` equal to the forcing period at every grid value.
    attractor_tol : float
        Hausdorff distance below which two periodic runs count as the same
        attractor (``local`` seeding).
    """
    if grid_count < 2:
        raise ValueError("grid_count must be at least 2")
    if seeding not in SEEDINGS:
        raise ValueError(f"seeding must be one of {SEEDINGS}")
    if axis not in {f.name for f in fields(Params)}:
        raise ValueError(f"unknown parameter {axis!r}")
    if isinstance(initial_state, Trajectory):
        seeds = [initial_state]
    elif isinstance(initial_state, (list, tuple)) and any(isinstance(x, Trajectory) for x in initial_state):
        seeds = list(initial_state)
    else:
        seeds = np.atleast_2d(np.asarray(initial_state, dtype=float))
        if seeds.shape[1] != 4:
            raise ValueError("initial states need four components")
    base = settings or IntegrationSettings()
    settings = IntegrationSettings(
        rel_tol=base.rel_tol, abs_tol=base.abs_tol, eps_event=base.eps_event, max_step=base.max_step,
        strobe_count=base.strobe_count if record_cycles is None else record_cycles,
        transient_count=base.transient_count if transient_cycles is None else transient_cycles,
    )
    grid = np.linspace(value_range[0], value_range[1], grid_count)
    dirs = {"zero": ["zero"], "forward": ["forward"], "backward": ["backward"],
            "both": ["forward", "backward"], "all": ["zero", "forward", "backward"],
            "local": ["zero"]}[seeding]
    local = seeding == "local"
    tasks = []
    for seed in seeds:
        s0 = seed if isinstance(seed, Trajectory) else tuple(seed)
        for d in dirs:
            if d == "zero":
                chunks = np.array_split(grid, max(1, min(jobs, grid_count)))
                tasks += [(p, axis, list(c), d, s0, settings, tol, lock_delay, local)
                          for c in chunks if len(c)]
            else:
                vals = list(grid) if d == "forward" else list(grid[::-1])
                tasks.append((p, axis, vals, d, s0, settings, tol, lock_delay))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, tasks))
    else:
        results = [_sweep_job(t) for t in tasks]
    if local:
        pairs = [qt for r in results for qt in r]
        starts = [[] for _ in grid]
        index = {float(v): i for i, v in enumerate(grid)}
        for q, tr in pairs:
            starts[index[q.value]].append((q, tr))
        points = [q for q, _ in pairs]
        points += _trace_local(p, axis, grid, starts, settings, tol, attractor_tol, lock_delay)
        order = ["zero", "forward", "backward"]
    else:
        points = [q for r in results for q in r]
        order = dirs
    points.sort(key=lambda q: (order.index(q.direction), q.value))
    return SweepResult(axis, grid, points, p, settings)


# --------------------------------------------------------------------------- basins


@dataclass
class BasinGrid:
    """Attractor label per initial condition on a plane of the state space."""

    plane: tuple[str, str]
    xs: np.ndarray
    ys: np.ndarray
    labels: np.ndarray  # (len(ys), len(xs)) of str
    blocks: np.ndarray  # integration blocks used per cell

    @property
    def resolution(self) -> tuple[int, int]:
        return len(self.xs), len(self.ys)

    def fractions(self) -> dict[str, float]:
        names, counts = np.unique(self.labels, return_counts=True)
        return {str(k): c / self.labels.size for k, c in zip(names, counts)}

    def to_csv(self, path):
        rows = [[x, y, self.labels[j, i]] for j, y in enumerate(self.ys) for i, x in enumerate(self.xs)]
        return write_csv(path, [self.plane[0], self.plane[1], "label"], rows)


_PLANE_INDEX = {"x_r": 0, "x1": 0, "y1": 1, "x2": 2, "y2": 3}


def basin_state(plane: tuple[str, str], a: float, b: float) -> State:
    """Initial state on the plane with the other coordinates (and x2) at zero.

    ``x_r`` is the relative displacement ``x1 - x2``; with ``x2 = 0`` it
    equals ``x1``.
    """
    s = [0.0, 0.0, 0.0, 0.0]
    for name, v in zip(plane, (a, b)):
        s[_PLANE_INDEX[name]] = float(v)
    return State(*s)


def _basin_cell(args):
    p, state, references, settings, tol, max_blocks = args
    hist = state
    count = settings.strobe_count
    for block in range(1, max_blocks + 1):
        try:
            tr = _run_cycles(p, hist, settings.transient_count + count, settings)
        except IntegrationError:
            return "unresolved", block
        pts = attractor_points(tr, count)
        best, dist = None, math.inf
        for name, ref in references.items():
            d = hausdorff(pts, ref)
            if d < dist:
                best, dist = name, d
        if dist < tol:
            return best, block
        hist = tr
    return "unresolved", max_blocks


def _basin_job(chunk):
    return [_basin_cell(a) for a in chunk]


def reference_attractors(p: Params, states, settings: IntegrationSettings | None = None,
                         tol: float = 1e-5, distinct_tol: float = 1e-2) -> dict[str, np.ndarray]:
    """Attractors reached from a few seed states, keyed by their label.

    Every seed runs ``transient_count + strobe_count`` periods; runs landing
    on an attractor already found (Hausdorff distance below
    ``distinct_tol``) are dropped and repeated labels get a suffix.
    """
    settings = settings or IntegrationSettings()
    count = settings.strobe_count
    out: dict[str, np.ndarray] = {}
    for s in np.atleast_2d(np.asarray(states, dtype=float)):
        tr = _run_cycles(p, tuple(s), settings.transient_count + count, settings)
        pts = attractor_points(tr, count)
        if any(hausdorff(pts, r) < distinct_tol for r in out.values()):
            continue
        name = classify_attractor(pts, tol)
        base, k = name, 2
        while name in out:
            name = f"{base}-{k}"
            k += 1
        out[name] = pts
    return out


def basin_grid(p: Params, references: dict[str, np.ndarray],
               window: tuple[tuple[float, float], tuple[float, float]] = ((-2.0, 2.0), (-2.0, 2.0)),
               resolution: tuple[int, int] = (51, 51), plane: tuple[str, str] = ("x_r", "y1"),
               settings: IntegrationSettings | None = None, tol: float = 1e-2,
               max_blocks: int = 3, jobs: int = 1) -> BasinGrid:
    """Label a grid of initial conditions by the attractor they reach.

    Every cell is integrated for ``settings.transient_count`` periods and
    its last ``settings.strobe_count`` stroboscopic points are compared with
    each reference set (rows ``(x1 - x2, y1, y2)``, see
    :func:`attractor_points`). The nearest reference within Hausdorff
    distance ``tol`` names the cell; otherwise the run continues for
    another block, up to ``max_blocks``, and is marked ``unresolved``.
    """
    settings = settings or IntegrationSettings()
    nx, ny = resolution
    xs = np.linspace(window[0][0], window[0][1], nx)
    ys = np.linspace(window[1][0], window[1][1], ny)
    refs = {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in references.items()}
    cells = [(p, basin_state(plane, x, y), refs, settings, tol, max_blocks) for y in ys for x in xs]
    if jobs > 1:
        chunks = [list(c) for c in np.array_split(np.arange(len(cells)), jobs * 4) if len(c)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_basin_job, [[cells[i] for i in c] for c in chunks]))
        res = [r for part in parts for r in part]
    else:
        res = [_basin_cell(c) for c in cells]
    labels = np.array([r[0] for r in res], dtype=object).reshape(ny, nx)
    blocks = np.array([r[1] for r in res]).reshape(ny, nx)
    return BasinGrid(tuple(plane), xs, ys, labels, blocks)


# --------------------------------------------------------------------------- spectra


def psd(signal, sample_rate: float, min_samples: int = 2 ** 12) -> tuple[np.ndarray, np.ndarray]:
    """One-sided power spectral density (Hann-windowed periodogram).

    ``sample_rate`` is in samples per unit dimensionless time, so the
    frequency axis is in cycles per unit time and the drive sits at
    ``omega / (2 pi)``.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or x.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {x.size}")
    f, pxx = periodogram(x, fs=sample_rate, window="hann", detrend="constant", scaling="density")
    return f, pxx


_COMPONENT = {"x1": 0, "y1": 1, "x2": 2, "y2": 3}


def trajectory_psd(traj: Trajectory, component: str = "y2", samples_per_period: int = 64,
                   n_samples: int = 2 ** 14) -> tuple[np.ndarray, np.ndarray]:
    """PSD of one state component over the last ``n_samples`` uniform samples."""
    T = traj.params.period
    dt = T / samples_per_period
    b = traj.span[1]
    t = b - dt * np.arange(n_samples)[::-1]
    if t[0] < traj.span[0]:
        raise ValueError("trajectory too short for the requested number of samples")
    x = traj.evaluate(t)[:, _COMPONENT[component]]
    return psd(x, 1.0 / dt, min_samples=min(n_samples, 2 ** 12))


# --------------------------------------------------------------------------- measures


def average_velocity(traj: Trajectory, n_p: int = 1, start: float | None = None) -> float:
    """Mean capsule velocity over whole cycles of ``n_p`` forcing periods.

    The integral of ``y2`` over a cycle is the capsule displacement, read
    from the dense output at the strobe times.
    """
    if n_p < 1:
        raise ValueError("n_p must be at least 1")
    T = traj.params.period
    times = traj.strobe_times()
    if start is not None:
        times = times[times >= start - 1e-9 * T]
    cycles = (len(times) - 1) // n_p
    if cycles < 1:
        raise ValueError("trajectory shorter than one cycle")
    ta, tb = times[-1 - cycles * n_p], times[-1]
    xa, xb = traj.evaluate(np.array([ta, tb]))[:, 2]
    return float((xb - xa) / (tb - ta))


def _quad_breaks(traj: Trajectory, a: float, b: float, delays: Sequence[float]) -> np.ndarray:
    pts = [traj.t0, traj.te]
    for d in delays:
        pts += [traj.t0 + d, traj.te + d]
    pts += [np.array([e[0] for e in traj.epochs])]
    x = np.concatenate(pts)
    x = x[(x > a) & (x < b)]
    return np.unique(np.concatenate([[a], x, [b]]))


def _integrate_signal(traj: Trajectory, a: float, b: float, fn, delays) -> float:
    br = _quad_breaks(traj, a, b, delays)
    lo, hi = br[:-1], br[1:]
    keep = hi - lo > 1e-14 * max(1.0, abs(b))
    lo, hi = lo[keep], hi[keep]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    t = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    vals = fn(t).reshape(len(lo), -1)
    return float(np.sum(half * (vals @ _GL_W)))


def control_energy(traj: Trajectory, tau_c: float, tau_f: float) -> float:
    """``E_u``: integral of ``u(tau)^2`` over ``[tau_c, tau_f]``."""
    if tau_f <= tau_c:
        return 0.0
    delays = sorted({e[2] for e in traj.epochs if e[1] > 0})
    return _integrate_signal(traj, tau_c, tau_f, lambda t: traj.control(t) ** 2, delays)


def invasiveness(traj: Trajectory, tau_d: float, gain_K: float, tau_start: float,
                 delta_tau: float) -> float:
    """``q_c``: mean of ``K^2 (y1(tau - tau_d) - y1(tau))^2`` over
    ``[tau_start, tau_start + delta_tau]``.

    ``tau_d`` and ``gain_K`` are explicit, so the functional can be applied
    to a frozen signal with other values.
    """
    if delta_tau <= 0:
        raise ValueError("delta_tau must be positive")

    def sq(t):
        return (gain_K * (traj.y1(t - tau_d) - traj.y1(t))) ** 2

    b = tau_start + delta_tau
    return _integrate_signal(traj, tau_start, b, sq, [tau_d]) / delta_tau


def max_velocity_difference(traj: Trajectory, tau_stab: float, period: float | None = None,
                            tau_f: float | None = None, samples_per_period: int = 256) -> float:
    """``mvd``: max of ``|y1(tau - T) - y1(tau)|`` for ``tau`` in ``[tau_stab, tau_f]``."""
    T = traj.params.period if period is None else period
    tau_f = traj.span[1] if tau_f is None else tau_f
    n = int(math.ceil((tau_f - tau_stab) / T * samples_per_period)) + 1
    t = np.linspace(tau_stab, tau_f, n)
    return float(np.max(np.abs(traj.y1(t - T) - traj.y1(t))))


def _distance(traj: Trajectory, desired: Trajectory, t: np.ndarray, shift: float = 0.0) -> np.ndarray:
    a = traj.evaluate(t)
    d = desired.evaluate(t - shift)
    # capsule positions are compared through x1 - x2 (common drift removed)
    diff = np.column_stack([(a[:, 0] - a[:, 2]) - (d[:, 0] - d[:, 2]), a[:, 1] - d[:, 1],
                            a[:, 3] - d[:, 3]])
    return np.max(np.abs(diff), axis=1)


def convergence_time(traj: Trajectory, desired: Trajectory, tau_c: float, tau_f: float,
                     eps_b: float = 1e-3, n_p: int = 1, samples_per_period: int = 64) -> float | None:
    """``T_conv``: first time after ``tau_c`` at which the distance to the
    desired trajectory drops below ``eps_b`` and stays below for one period.

    The distance is the max-norm over ``(x1 - x2, y1, y2)``, so a constant
    offset between the capsule positions is ignored. For a period-``n_p``
    target the desired trajectory is tried at each of its ``n_p`` phases
    (it must then reach ``(n_p - 1) T`` before ``tau_c``).

    Returns
    -------
    float or None
        The time (absolute, like ``tau_c``), or None when not converged.
    """
    T = traj.params.period
    n = int(math.ceil((tau_f - tau_c) / T * samples_per_period)) + 1
    t = np.linspace(tau_c, tau_f, n)
    tail = t[t >= tau_f - T]
    shifts = [k * T for k in range(n_p)]
    shift = min(shifts, key=lambda s: float(np.max(_distance(traj, desired, tail, s))))
    d = _distance(traj, desired, t, shift)
    below = d < eps_b
    if not below[-1]:
        return None
    # start of the final run of samples below the threshold
    bad = np.flatnonzero(~below)
    i = 0 if bad.size == 0 else bad[-1] + 1
    if t[-1] - t[i] < T - 1e-9:
        return None
    if i == 0:
        return float(t[0])
    g = lambda s: float(_distance(traj, desired, np.array([s]), shift)[0]) - eps_b
    try:
        return float(brentq(g, t[i - 1], t[i], xtol=1e-10))
    except ValueError:
        return float(t[i])


def desired_trajectory(p: Params, state, tau_start: float, tau_end: float,
                       settings: IntegrationSettings | None = None) -> Trajectory:
    """Uncontrolled run from ``state`` at ``tau_start`` (a point of the target
    attractor at that forcing phase) up to ``tau_end``."""
    return integrate(p.replace(gain_K=0.0), state, (tau_start, tau_end), settings)


@dataclass(frozen=True)
class Measures:
    """Control-performance functionals of one controlled run."""

    E_u: float
    T_conv: float | None
    mvd: float
    q_c: float
    v_avg: float
    eps_b: float = 1e-3

    def as_dict(self) -> dict[str, float]:
        return {"E_u": self.E_u, "T_conv": math.nan if self.T_conv is None else self.T_conv,
                "mvd": self.mvd, "q_c": self.q_c, "v_avg": self.v_avg, "eps_b": self.eps_b}

    def to_csv(self, path, settings_hash: str = ""):
        rows = [[k, v, settings_hash] for k, v in self.as_dict().items()]
        return write_csv(path, ["name", "value", "settings_hash"], rows)


def controlled_run(p: Params, state, switch_cycle: int, gain_K: float, tau_d: float,
                   stab_cycles: int = 100, measure_cycles: int = 200,
                   settings: IntegrationSettings | None = None) -> tuple[Trajectory, float]:
    """Uncontrolled run from ``state`` for ``switch_cycle`` periods, then
    control ``(gain_K, tau_d)`` switched on for ``stab_cycles + measure_cycles``.

    Returns the trajectory and the switch time ``tau_c``.
    """
    settings = settings or IntegrationSettings()
    T = p.period
    tau_c = switch_cycle * T
    free = integrate(p.replace(gain_K=0.0), state, (0.0, tau_c), settings)
    tau_f = tau_c + (stab_cycles + measure_cycles) * T
    return switch_on_control(free, tau_c, gain_K, tau_f, tau_d=tau_d, settings=settings), tau_c


def measure_control(p: Params, state, switch_cycle: int = 81, stab_cycles: int = 100,
                    measure_cycles: int = 200, eps_b: float = 1e-3, n_p: int = 1,
                    desired_state=None, settings: IntegrationSettings | None = None,
                    traj: Trajectory | None = None) -> tuple[Measures, Trajectory]:
    """All five functionals for control ``(p.gain_K, p.tau_d)`` switched on
    after ``switch_cycle`` periods of free motion from ``state``.

    ``tau_stab = tau_c + stab_cycles T``; ``mvd`` and ``v_avg`` use
    ``[tau_stab, tau_f]`` and ``q_c`` averages over the whole controlled
    span ``[tau_c, tau_f]``. The desired trajectory for ``T_conv`` starts
    from ``desired_state`` at ``tau_c``; by default the controlled run's
    final strobe point is used, which is right whenever the run has
    settled on the target.
    """
    settings = settings or IntegrationSettings()
    T = p.period
    if traj is None:
        traj, tau_c = controlled_run(p, state, switch_cycle, p.gain_K, p.tau_d, stab_cycles,
                                     measure_cycles, settings)
    else:
        tau_c = switch_cycle * T
    tau_f = tau_c + (stab_cycles + measure_cycles) * T
    tau_stab = tau_c + stab_cycles * T
    E_u = control_energy(traj, tau_c, tau_f)
    if desired_state is None:
        desired_state = traj.evaluate(traj.strobe_times()[-1])
        desired_state = State(desired_state[0] - desired_state[2], desired_state[1], 0.0, desired_state[3])
    t0 = tau_c - (n_p - 1) * T
    desired = desired_trajectory(p, desired_state, t0, tau_f, settings)
    T_conv = convergence_time(traj, desired, tau_c, tau_f, eps_b, n_p)
    mvd = max_velocity_difference(traj, tau_stab, T, tau_f)
    q_c = invasiveness(traj, p.tau_d, p.gain_K, tau_c, tau_f - tau_c)
    v = average_velocity(traj, n_p, start=tau_stab)
    return Measures(E_u, T_conv, mvd, q_c, v, eps_b), traj
