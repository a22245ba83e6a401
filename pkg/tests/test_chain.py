import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from capsule_dfc.chain import (
    ChainConfig, ChainState, chain_mode, chain_rhs, compare_with_dde, integrate_chain, lift,
    recover_capsule_position,
)
from capsule_dfc.chain import lift_state
from capsule_dfc.integrator import IntegrationSettings, integrate
from capsule_dfc.model import MODES, Mode, ModeError, Params, classify_mode

from oracles import trapezoid_integral

P8 = Params(omega=0.97, gain_K=0.5, tau_d=0.6)
CFG = ChainConfig()


def _rest(N):
    return ChainState.build(0.0, 0.0, 0.0, 1.0, np.zeros(N + 1), np.zeros(N))


@pytest.fixture(scope="module")
def orbit06():
    """Chain attractor at K=0.5, omega=0.97, tau_d=0.6 (last 10 forcing periods)."""
    p = P8
    Tc = p.period / p.tau_d
    return integrate_chain(lift_state((0, 0, 0, 0), CFG, p), p, CFG, (0.0, 200 * Tc),
                           record_from=190 * Tc, full=True)


def test_config_validation():
    assert CFG.dim == 65
    with pytest.raises(ValueError):
        ChainConfig(N=1)
    with pytest.raises(ValueError):
        ChainConfig(M=3)


def test_rhs_at_rest_is_the_forcing():
    p = Params(tau_d=0.7)
    d = chain_rhs(0.0, _rest(CFG.N), p, Mode(0, 0))
    assert d[4] == pytest.approx(p.tau_d * p.alpha)
    assert np.all(d[5:] == 0.0)


def test_constant_history_is_a_fixed_point_of_the_chain_block():
    z = ChainState.build(0.0, 0.3, 0.0, 1.0, np.full(CFG.N + 1, 0.3), np.zeros(CFG.N))
    d = chain_rhs(0.0, z, P8, Mode(0, 1))
    assert np.all(d[5:] == 0.0)


def test_rhs_rejects_inconsistent_mode():
    z = ChainState.build(0.5, 0.0, 0.0, 1.0, np.zeros(CFG.N + 1), np.zeros(CFG.N))
    with pytest.raises(ModeError):
        chain_rhs(0.0, z, P8, Mode(0, 1))
    with pytest.raises(ModeError):
        chain_rhs(0.0, z, P8, Mode(1, 0))


def test_no_control_when_the_chain_is_periodic():
    # v_N = v_0 gives u = 0: the y1 row matches the uncontrolled one
    v = np.linspace(0.2, 0.5, CFG.N + 1)
    v[-1] = v[0]
    z = ChainState.build(0.0, 0.1, 0.3, 0.8, v, np.zeros(CFG.N))
    a = chain_rhs(0.0, z, P8, Mode(0, 1))
    b = chain_rhs(0.0, z, P8.replace(gain_K=0.0), Mode(0, 1))
    assert a[4] == pytest.approx(b[4], abs=1e-15)


def test_lift_constant_history():
    p = Params(omega=0.95, gain_K=0.2, tau_d=1.3)
    tr = integrate(p.replace(gain_K=0.0, alpha=1e-300), (0.0, 0.25, 0.0, 0.25), (0.0, 0.0 + 1e-9))
    z = lift(tr, CFG, p, 0.0)
    np.testing.assert_array_equal(z.v, 0.25)
    np.testing.assert_array_equal(z.w, 0.0)
    assert (z.r, z.s) == (0.0, 1.0)


def test_lift_samples_the_history():
    p = P8
    T = p.period
    tr = integrate(p.replace(gain_K=0.0), (0.0, 0.0, 0.0, 0.0), (0.0, 20 * T))
    tau = 17.3
    z = lift(tr, CFG, p, tau)
    ti = tau - np.arange(CFG.N + 1) * p.tau_d / CFG.N
    np.testing.assert_array_equal(z.v, tr.y1(ti))
    np.testing.assert_allclose(z.w, p.tau_d * tr.derivative(ti[1:])[:, 1])
    assert z.r == pytest.approx(math.sin(p.omega * tau))
    assert z.s == pytest.approx(math.cos(p.omega * tau))
    with pytest.raises(ValueError):
        lift(tr, CFG, p, 30 * T)


def test_oscillator_stays_on_the_cosine():
    p = Params(omega=0.95, gain_K=0.1, tau_d=0.8)
    Tc = p.period / p.tau_d
    st_ = IntegrationSettings()
    tr = integrate_chain(_rest(CFG.N), p, CFG, (0.0, Tc), st_)
    t = np.linspace(0.0, Tc, 2001)
    s = tr.evaluate(t)[:, 3]
    assert np.max(np.abs(s - np.cos(p.omega * p.tau_d * t))) <= 10 * st_.rel_tol


def test_time_rescaling(orbit06):
    p = P8
    tc = orbit06.strobe_times()
    np.testing.assert_allclose(np.diff(tc), p.period / p.tau_d, rtol=1e-12)
    assert orbit06.physical_time(1.0) == pytest.approx(p.tau_d)
    # the strobe repeats every chain period; near the flip the approach alternates slowly
    d = np.abs(np.diff(orbit06.evaluate(tc)[:, :2], axis=0)).max(axis=1)
    assert d.max() < 1e-4 and d[-1] < d[0]


def _transport_error(N, tau_d):
    p = Params(omega=0.97, gain_K=0.5, tau_d=tau_d)
    cfg = ChainConfig(N=N)
    W = p.omega * tau_d

    def f(t, u):
        z = np.concatenate([[0.0, 0.0, 0.0, 1.0], [math.sin(W * t)], u])
        return chain_rhs(t, z, p, Mode(0, -1), cfg)[5:]

    s = -np.arange(1, N + 1) / N
    sol = solve_ivp(f, (0.0, 10.0), np.concatenate([np.sin(W * s), W * np.cos(W * s)]),
                    rtol=1e-12, atol=1e-15, dense_output=True)
    t = np.linspace(5.0, 10.0, 500)
    return np.max(np.abs(sol.sol(t)[N - 1] - np.sin(W * (t - 1.0))))


def test_transport_error_is_third_order_per_node():
    # halving the node spacing tau_d/N at fixed N: ~8x (third-order local error)
    e = [_transport_error(16, td) for td in (1.6, 0.8, 0.4)]
    for a, b in zip(e[:-1], e[1:]):
        assert 6.5 < a / b < 9.5
    # doubling N accumulates twice as many local errors: ~4x
    r = _transport_error(16, 0.8) / _transport_error(32, 0.8)
    assert 3.5 < r < 4.5


@settings(max_examples=300, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1), st.floats(-1, 1))
def test_chain_mode_matches_classify_mode(xr, vr, v0, r, s):
    N = 4
    z = ChainState.build(xr, vr, r, s, np.full(N + 1, v0), np.zeros(N))
    assert chain_mode(z, P8, N) == classify_mode(z.physical(0.37), P8)


def test_period1_one_impact_at_small_delay(orbit06):
    Tc = P8.period / P8.tau_d
    a, b = orbit06.span
    counts = [orbit06.impact_count(b - (k + 1) * Tc, b - k * Tc) for k in range(5)]
    assert counts == [1] * 5


def test_two_impacts_after_grazing():
    p = P8.replace(tau_d=2.1)
    Tc = p.period / p.tau_d
    tr = integrate_chain(lift_state((0, 0, 0, 0), CFG, p), p, CFG, (0.0, 300 * Tc),
                         record_from=290 * Tc)
    z = tr.evaluate(tr.strobe_times())
    assert np.max(np.abs(np.diff(z[:, :2], axis=0))) < 1e-4
    b = tr.span[1]
    assert [tr.impact_count(b - (k + 1) * Tc, b - k * Tc) for k in range(5)] == [2] * 5


def test_capsule_position_matches_trapezoid(orbit06):
    p = P8
    Tc = p.period / p.tau_d
    a = orbit06.span[0]
    x = recover_capsule_position(orbit06, np.array([a, a + Tc]), 0.0)
    assert x[0] == 0.0

    def vc(t):
        z = orbit06.evaluate(t)
        return z[:, 4] - z[:, 1]

    ref = p.tau_d * trapezoid_integral(vc, a, a + Tc, 400001)
    assert x[1] == pytest.approx(ref, rel=1e-6)


def test_stationary_capsule_does_not_move():
    p = Params(alpha=1e-12, gain_K=0.1, tau_d=1.0)
    tr = integrate_chain(_rest(CFG.N), p, CFG, (0.0, 5.0))
    x = recover_capsule_position(tr, np.linspace(0.0, 5.0, 11), 0.4)
    np.testing.assert_allclose(x, 0.4, atol=1e-12)


@pytest.fixture(scope="module")
def discrepancies():
    out = {}
    for td in (0.6, 2.1, 2.8, 3.6, 4.4):
        out[td] = compare_with_dde(P8.replace(tau_d=td)).sup_distance
    return out


@pytest.mark.slow
def test_compare_small_delays_close(discrepancies):
    assert discrepancies[0.6] < discrepancies[4.4]
    assert discrepancies[2.1] < discrepancies[4.4]
    assert discrepancies[0.6] < 1e-2
    # truncation error grows with the delay
    assert discrepancies[2.8] < discrepancies[3.6] < discrepancies[4.4]


def test_compare_doubling_N_does_not_hurt():
    a = compare_with_dde(P8, ChainConfig(N=30))
    b = compare_with_dde(P8, ChainConfig(N=60))
    assert a.dde_period == a.chain_period == 1
    assert b.sup_distance <= a.sup_distance
