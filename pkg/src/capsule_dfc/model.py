"""Vibro-impact capsule model in dimensionless form.

The internal mass (x1, y1) is driven harmonically and interacts with the
capsule shell (x2, y2) through a linear spring/damper and, once the gap
``delta`` is closed, a secondary spring of relative stiffness ``beta``.
The shell moves against Coulomb friction of unit (dimensionless) threshold.
An optional Pyragas-type feedback ``u = K (y1(t - tau_d) - y1(t))`` acts on
the internal mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

__all__ = [
    "Params",
    "DimensionalParams",
    "State",
    "Mode",
    "MODES",
    "ModeError",
    "classify_mode",
    "mass_force_on_capsule",
    "control_signal",
    "vector_field",
    "phase_rhs",
    "filippov_rhs",
    "nondimensionalize",
    "event_residuals",
]

# |y2| below this counts as "capsule at rest" when classifying a raw state
STICK_VELOCITY_TOL = 1e-10


class ModeError(ValueError):
    """Raised when a hybrid mode is inconsistent with the state."""


@dataclass(frozen=True)
class Params:
    """Dimensionless system and control parameters.

    Defaults are the reference values alpha=1.6, zeta=0.01, delta=0.02,
    beta=15, gamma=5 with no control.
    """

    omega: float = 0.95
    alpha: float = 1.6
    zeta: float = 0.01
    delta: float = 0.02
    beta: float = 15.0
    gamma: float = 5.0
    gain_K: float = 0.0
    tau_d: float = 0.0

    def __post_init__(self):
        for name in ("omega", "alpha", "zeta", "delta", "beta", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")
        if not (math.isfinite(self.gain_K) and self.gain_K >= 0):
            raise ValueError(f"gain_K must be >= 0, got {self.gain_K!r}")
        if not math.isfinite(self.tau_d) or self.tau_d < 0:
            raise ValueError(f"tau_d must be >= 0, got {self.tau_d!r}")
        if self.gain_K > 0 and self.tau_d <= 0:
            raise ValueError("tau_d must be > 0 when gain_K > 0")

    @property
    def period(self) -> float:
        """Forcing period 2*pi/omega."""
        return 2.0 * math.pi / self.omega

    def replace(self, **changes) -> "Params":
        return replace(self, **changes)

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.omega, self.alpha, self.zeta, self.delta, self.beta,
             self.gamma, self.gain_K, self.tau_d],
            dtype=float,
        )


@dataclass(frozen=True)
class DimensionalParams:
    """Physical parameters (SI units or any consistent set)."""

    m1: float
    m2: float
    k1: float
    k2: float
    c: float
    G: float
    Pd: float
    Omega: float
    mu: float
    g: float = 9.81

    def __post_init__(self):
        for name, v in vars(self).items():
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")

    @property
    def P_f(self) -> float:
        """Static friction threshold mu (m1 + m2) g."""
        return self.mu * (self.m1 + self.m2) * self.g

    @property
    def Omega0(self) -> float:
        """Natural frequency sqrt(k1/m1) of the internal oscillator."""
        return math.sqrt(self.k1 / self.m1)


class State(NamedTuple):
    """Dimensionless phase point."""

    x1: float
    y1: float
    x2: float
    y2: float


class Mode(NamedTuple):
    """Hybrid operating mode.

    ``contact`` is 1 while the mass compresses the secondary spring.
    ``motion`` is 0 for a stationary capsule, +1/-1 for forward/backward
    sliding.
    """

    contact: int
    motion: int

    @property
    def label(self) -> str:
        side = "Ck2" if self.contact else "NC"
        vel = {0: "Vc0", 1: "Vcp", -1: "Vcn"}[self.motion]
        return f"{side}/{vel}"

    @classmethod
    def from_label(cls, label: str) -> "Mode":
        side, vel = label.split("/")
        return cls(int(side == "Ck2"), {"Vc0": 0, "Vcp": 1, "Vcn": -1}[vel])


MODES = tuple(Mode(c, m) for c in (0, 1) for m in (0, 1, -1))


def _impact_force(xr: float, contact: int, p: Params) -> float:
    return p.beta * (xr - p.delta) if contact else 0.0


def mass_force_on_capsule(s, p: Params, contact: int | None = None) -> float:
    """Force transmitted from the internal mass to the capsule.

    ``(x1 - x2) + 2 zeta (y1 - y2) + H_k2 beta (x1 - x2 - delta)``. The
    contact flag is derived from the state unless given explicitly.
    """
    x1, y1, x2, y2 = s
    xr = x1 - x2
    if contact is None:
        contact = int(xr - p.delta >= 0.0)
    return xr + 2.0 * p.zeta * (y1 - y2) + _impact_force(xr, contact, p)


def classify_mode(s, p: Params, vel_tol: float = STICK_VELOCITY_TOL) -> Mode:
    """Select the operating mode of a state.

    Contact uses the closed boundary ``x1 - x2 - delta >= 0``. The capsule
    is stationary when ``|y2| <= vel_tol`` and the transmitted force lies in
    the friction cone ``|f_mc| <= 1``; otherwise it moves with the sign of
    its velocity or, at rest, the sign of the force.
    """
    x1, y1, x2, y2 = s
    contact = int(x1 - x2 - p.delta >= 0.0)
    if abs(y2) <= vel_tol:
        f = mass_force_on_capsule(s, p, contact)
        if abs(f) <= 1.0:
            motion = 0
        else:
            motion = 1 if f > 0 else -1
    else:
        motion = 1 if y2 > 0 else -1
    return Mode(contact, motion)


def control_signal(y1_now, y1_delayed, gain_K: float):
    """Delayed feedback ``K (y1(t - tau_d) - y1(t))``; works elementwise."""
    if gain_K < 0:
        raise ValueError("gain_K must be >= 0")
    return gain_K * (y1_delayed - y1_now)


def vector_field(tau: float, s, y1_delayed: float, p: Params, m: Mode | None = None,
                 stick_tol: float = 1e-8) -> np.ndarray:
    """Right-hand side of the controlled system in mode ``m``.

    The moving-capsule friction uses ``m.motion`` as the sign, which equals
    sign(y2) between events and sign(f_mc) at the instant of release.

    Raises
    ------
    ModeError
        If a stationary mode is requested while ``|f_mc| > 1``.
    """
    if m is None:
        m = classify_mode(s, p)
    x1, y1, x2, y2 = s
    xr = x1 - x2
    imp = _impact_force(xr, m.contact, p)
    u = p.gain_K * (y1_delayed - y1)
    dy1 = p.alpha * math.cos(p.omega * tau) + u - xr - 2.0 * p.zeta * (y1 - y2) - imp
    if m.motion == 0:
        f = xr + 2.0 * p.zeta * (y1 - y2) + imp
        if abs(f) > 1.0 + stick_tol:
            raise ModeError(f"stationary mode with |f_mc| = {abs(f):.6g} > 1")
        return np.array([y1, dy1, 0.0, 0.0])
    f = xr + 2.0 * p.zeta * (y1 - y2) + imp
    return np.array([y1, dy1, y2, (f - m.motion) / p.gamma])


def phase_rhs(tau: float, s, y1_delayed: float, p: Params, m: Mode) -> np.ndarray:
    """Phase-by-phase equations (no contact/contact x stationary/moving).

    Written term by term as the four dimensionless phases; used as an
    independent check on :func:`vector_field`.
    """
    x1, y1, x2, y2 = s
    u = p.gain_K * (y1_delayed - y1)
    force = p.alpha * math.cos(p.omega * tau)
    if not m.contact:
        dy1 = force + (x2 - x1) + 2 * p.zeta * (y2 - y1) + u
        if m.motion == 0:
            return np.array([y1, dy1, 0.0, 0.0])
        sgn = float(m.motion)
        dy2 = (-sgn - (x2 - x1) - 2 * p.zeta * (y2 - y1)) / p.gamma
        return np.array([y1, dy1, y2, dy2])
    dy1 = force + (x2 - x1) + 2 * p.zeta * (y2 - y1) - p.beta * (x1 - x2 - p.delta) + u
    if m.motion == 0:
        return np.array([y1, dy1, 0.0, 0.0])
    sgn = float(m.motion)
    dy2 = (-sgn - (x2 - x1) - 2 * p.zeta * (y2 - y1) + p.beta * (x1 - x2 - p.delta)) / p.gamma
    return np.array([y1, dy1, y2, dy2])


def _heaviside(x: float, at_zero: float) -> float:
    return 1.0 if x > 0 else (at_zero if x == 0 else 0.0)


def filippov_rhs(tau: float, s, y1_delayed: float, p: Params) -> np.ndarray:
    """Single-formula Filippov form with switching functions H1, H2, H3.

    The contact sign is taken as ``-H3 beta (x1 - x2 - delta)`` so that it
    matches the phase equations. Valid off the sliding surfaces: a moving
    capsule is represented only while |f_mc| >= 1, so this form agrees with
    :func:`vector_field` on stationary states inside the friction cone and
    on moving states outside it.
    """
    x1, y1, x2, y2 = s
    el = (x2 - x1) + 2 * p.zeta * (y2 - y1)
    h3 = _heaviside(x1 - x2 - p.delta, 1.0)
    h1 = _heaviside(abs(el) - 1.0, 0.0)
    h2 = _heaviside(abs(el - p.beta * (x1 - x2 - p.delta)) - 1.0, 0.0)
    u = p.gain_K * (y1_delayed - y1)
    dy1 = el - h3 * p.beta * (x1 - x2 - p.delta) + p.alpha * math.cos(p.omega * tau) + u
    gate = h1 * (1 - h3) + h2 * h3
    sgn = math.copysign(1.0, y2) if y2 != 0 else math.copysign(1.0, -(el - h3 * p.beta * (x1 - x2 - p.delta)))
    dy2 = gate * (-sgn - el + h3 * p.beta * (x1 - x2 - p.delta)) / p.gamma
    return np.array([y1, dy1, y2 * gate, dy2])


def nondimensionalize(d: DimensionalParams, gain_K: float = 0.0, tau_d: float = 0.0) -> Params:
    """Map physical parameters to the dimensionless set.

    ``omega = Omega/Omega0``, ``alpha = Pd/P_f``, ``delta = k1 G / P_f``,
    ``beta = k2/k1``, ``zeta = c / (2 m1 Omega0)``, ``gamma = m2/m1``.
    """
    w0 = d.Omega0
    pf = d.P_f
    return Params(
        omega=d.Omega / w0,
        alpha=d.Pd / pf,
        zeta=d.c / (2.0 * d.m1 * w0),
        delta=d.k1 * d.G / pf,
        beta=d.k2 / d.k1,
        gamma=d.m2 / d.m1,
        gain_K=gain_K,
        tau_d=tau_d,
    )


def event_residuals(s, p: Params) -> np.ndarray:
    """Residuals of the impact, stick and stick-release surfaces.

    Returns ``(x1 - x2 - delta, y2, |f_mc| - 1)``.
    """
    x1, y1, x2, y2 = s
    return np.array([x1 - x2 - p.delta, y2, abs(mass_force_on_capsule(s, p)) - 1.0])
