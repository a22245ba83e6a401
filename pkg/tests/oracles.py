"""Independent reference computations used by the test suite."""

from __future__ import annotations

import numpy as np

from capsule_dfc.chain import integrate_chain
from capsule_dfc.continuation import SegmentedOrbit, _flow
from capsule_dfc.integrator import IntegrationSettings

TIGHT = IntegrationSettings(rel_tol=1e-12, abs_tol=1e-14, eps_event=1e-13, max_step=0.05)


def return_map_jacobian(orbit: SegmentedOrbit, h: float = 1e-6,
                        settings: IntegrationSettings = TIGHT) -> np.ndarray:
    """Central-difference Jacobian of the one-period map of the chain system.

    The base point is the middle of segment 0 and each perturbed state is
    integrated with the adaptive event-driven integrator, so no saltation
    matrix or variational equation enters.
    """
    half = 0.5 * orbit.durations[0]
    z0 = _flow(orbit, 0, half)[0]
    mode = orbit.modes[0]
    P = orbit.period
    n = len(z0)
    J = np.empty((n, n))
    for k in range(n):
        ends = []
        for sgn in (1.0, -1.0):
            z = z0.copy()
            z[k] += sgn * h
            tr = integrate_chain(z, orbit.params, orbit.cfg, (0.0, P), settings,
                                 record_from=P * (1 - 1e-9), mode=mode)
            ends.append(tr.end_state)
        J[:, k] = (ends[0] - ends[1]) / (2 * h)
    return J


def match_multipliers(mu_a: np.ndarray, mu_b: np.ndarray, floor: float = 1e-3) -> float:
    """Largest relative mismatch over multipliers of ``mu_a`` above ``floor`` in modulus."""
    worst = 0.0
    for m in mu_a[np.abs(mu_a) > floor]:
        d = np.min(np.abs(mu_b - m))
        worst = max(worst, d / abs(m))
    return worst


def trapezoid_integral(f, a: float, b: float, n: int = 20001) -> float:
    t = np.linspace(a, b, n)
    return float(np.trapezoid(f(t), t))
