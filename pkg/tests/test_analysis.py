import math
import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capsule_dfc.analysis import (
    _basin_cell, attractor_points, basin_grid, reference_attractors, average_velocity, classify_attractor, control_energy,
    convergence_time, desired_trajectory, hausdorff, invasiveness, max_velocity_difference, psd,
    stroboscopic_sweep, trajectory_psd,
)
from capsule_dfc.integrator import IntegrationSettings, integrate, switch_on_control
from capsule_dfc.model import Params


@pytest.fixture(scope="module")
def controlled(p95):
    """Control K=0.11, tau_d=T switched on at period 81 from the period-3 seed, run 150 periods."""
    T = p95.period
    free = integrate(p95, (-2.0, 0.0, 0.0, 0.0), (0.0, 81 * T))
    return switch_on_control(free, 81 * T, 0.11, 231 * T)


def test_classify_examples(rng):
    assert classify_attractor(np.full((40, 3), 0.7)) == "period-1"
    cyc = np.array([[0.1, 0.2], [0.5, -0.3], [0.9, 0.0]])
    assert classify_attractor(np.tile(cyc, (15, 1))) == "period-3"
    assert classify_attractor(rng.standard_normal((60, 2))) == "chaotic"
    with pytest.raises(ValueError):
        classify_attractor(np.zeros(10))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(30, 80))
def test_classify_recovers_the_period(k, n):
    g = np.random.default_rng(k * 1000 + n)
    base = g.uniform(-1, 1, (k, 3))
    z = np.tile(base, (n // k + 1, 1))[:n] + 1e-8 * g.standard_normal((n // k + 1) * k)[:n, None]
    if n >= 3 * k:
        assert classify_attractor(z) == f"period-{k}"


def test_hausdorff():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 0.0], [1.0, 0.5], [3.0, 0.0]])
    assert hausdorff(a, b) == pytest.approx(2.0)
    assert hausdorff(a, a) == 0.0


def test_psd_of_a_cosine():
    w = 0.95
    fs = 64 * w / (2 * math.pi)
    t = np.arange(2 ** 14) / fs
    f, pxx = psd(np.cos(w * t), fs)
    assert f[np.argmax(pxx)] == pytest.approx(w / (2 * math.pi), abs=2 * (f[1] - f[0]))
    with pytest.raises(ValueError):
        psd(np.zeros(100), 1.0)


def _harmonic_share(f, pxx, f0, bins=3):
    df = f[1] - f[0]
    near = np.zeros_like(f, dtype=bool)
    for k in range(1, int(f[-1] / f0) + 1):
        near |= np.abs(f - k * f0) <= bins * df
    return pxx[near].sum() / pxx[1:].sum()


def test_psd_line_spectrum_vs_broadband():
    out = {}
    for w in (0.935, 1.0):
        p = Params(omega=w)
        tr = integrate(p, (0, 0, 0, 0), (0.0, 600 * p.period))
        f, pxx = trajectory_psd(tr, "y2", 64, 2 ** 14)
        out[w] = _harmonic_share(f, pxx, w / (2 * math.pi))
    print("power share on drive harmonics", out)
    assert out[0.935] > 0.999
    assert out[1.0] < 0.9


def test_average_velocity_of_the_two_attractors(runs95):
    v1 = average_velocity(runs95["period-1"], 1, start=300 * runs95["period-1"].params.period)
    v3 = average_velocity(runs95["period-3"], 3, start=300 * runs95["period-3"].params.period)
    assert v1 == pytest.approx(0.1753, abs=0.002)
    assert v3 == pytest.approx(0.0926, abs=0.002)
    with pytest.raises(ValueError):
        average_velocity(runs95["period-1"], 0)


def test_stationary_capsule_has_zero_velocity():
    p = Params(alpha=1e-6)
    tr = integrate(p, (0, 0, 0, 0), (0.0, 10 * p.period))
    assert average_velocity(tr, 1) == 0.0


def test_energy_without_control_is_zero(runs95):
    T = runs95["period-1"].params.period
    assert control_energy(runs95["period-1"], 10 * T, 50 * T) == 0.0


def test_energy_is_additive(controlled, rng):
    T = controlled.params.period
    a, c = 81 * T, 231 * T
    for b in rng.uniform(a, c, 5):
        whole = control_energy(controlled, a, c)
        parts = control_energy(controlled, a, b) + control_energy(controlled, b, c)
        assert parts == pytest.approx(whole, rel=1e-12)


def test_energy_matches_dense_trapezoid(controlled):
    T = controlled.params.period
    a, b = 81 * T, 91 * T
    t = np.linspace(a, b, 400001)
    ref = np.trapezoid(controlled.control(t) ** 2, t)
    assert control_energy(controlled, a, b) == pytest.approx(ref, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.001, 2.0), st.floats(0.1, 10.0))
def test_invasiveness_scales_with_gain_squared(K, scale):
    tr = _frozen()
    T = tr.params.period
    a = invasiveness(tr, T, K, 100 * T, 20 * T)
    b = invasiveness(tr, T, scale * K, 100 * T, 20 * T)
    assert b == pytest.approx(scale ** 2 * a, rel=1e-12)
    assert invasiveness(tr, T, 0.0, 100 * T, 20 * T) == 0.0


_FROZEN = {}


def _frozen():
    if "tr" not in _FROZEN:
        p = Params(omega=0.95)
        _FROZEN["tr"] = integrate(p, (-2.0, 0.0, 0.0, 0.0), (0.0, 130 * p.period))
    return _FROZEN["tr"]


def test_mvd_and_period_one_agree(runs95):
    for name, tr in runs95.items():
        T = tr.params.period
        mvd = max_velocity_difference(tr, 300 * T)
        label = classify_attractor(attractor_points(tr, 50))
        assert label == name
        assert (mvd < 1e-6) == (label == "period-1")
        if label != "period-1":
            assert mvd > 0.01


def test_convergence_time_on_the_attractor(runs95):
    tr = runs95["period-1"]
    p = tr.params
    T = p.period
    tau_c = 300 * T
    run = switch_on_control(tr.truncate(tau_c), tau_c, 0.11, 340 * T)
    s = run.evaluate(tau_c)
    desired = desired_trajectory(p, (s[0] - s[2], s[1], 0.0, s[3]), tau_c, 340 * T)
    assert convergence_time(run, desired, tau_c, 340 * T) == pytest.approx(tau_c)


def test_convergence_not_reached(runs95):
    tr = runs95["period-3"]
    T = tr.params.period
    other = runs95["period-1"]
    s = other.evaluate(300 * T)
    desired = desired_trajectory(tr.params, (s[0] - s[2], s[1], 0.0, s[3]), 300 * T, 350 * T)
    assert convergence_time(tr, desired, 300 * T, 350 * T) is None


def test_degenerate_sweep_grid():
    res = stroboscopic_sweep(Params(), "omega", (0.935, 0.935), 2, transient_cycles=30, record_cycles=30)
    a, b = res.points
    assert a.value == b.value
    np.testing.assert_array_equal(a.y1, b.y1)
    with pytest.raises(ValueError):
        stroboscopic_sweep(Params(), "omega", (0.9, 0.95), 1)
    with pytest.raises(ValueError):
        stroboscopic_sweep(Params(), "nope", (0.9, 0.95), 3)


def test_sweep_records_the_requested_count_and_directions_agree():
    res = stroboscopic_sweep(Params(), "omega", (0.93, 0.935), 4, transient_cycles=150,
                             record_cycles=40, seeding="both")
    fw, bw = res.runs("forward"), res.runs("backward")
    assert len(fw) == len(bw) == 4
    for q, r in zip(fw, bw):
        assert len(q.y1) == len(r.y1) == 40
        assert q.label == r.label == "period-1"
        np.testing.assert_allclose(q.y1, r.y1, atol=1e-6)


def test_basin_cell_on_a_reference_point(runs95):
    st_ = IntegrationSettings(transient_count=100, strobe_count=50)
    refs = {k: attractor_points(tr, 50) for k, tr in runs95.items()}
    for name, tr in runs95.items():
        s = tr.evaluate(tr.strobe_times()[-1])
        label, blocks = _basin_cell((tr.params, (s[0] - s[2], s[1], 0.0, s[3]), refs, st_, 1e-2, 3))
        assert (label, blocks) == (name, 1)


# fine grid used as the oracle for the 11 x 11 basin; BASIN_FINE=101 for the full check
BASIN_FINE = int(os.environ.get("BASIN_FINE", "31"))


@pytest.fixture(scope="module")
def basins(p95):
    refs = reference_attractors(p95, [(0, 0, 0, 0), (-2, 0, 0, 0)])
    coarse = basin_grid(p95, refs, resolution=(11, 11))
    fine = basin_grid(p95, refs, resolution=(BASIN_FINE, BASIN_FINE))
    return coarse, fine


def _majority(fine, n):
    step = (fine.shape[0] - 1) // (n - 1)
    h = step // 2
    out = np.empty((n, n), dtype=object)
    for i in range(n):
        for j in range(n):
            block = fine[max(0, i * step - h): i * step + h + 1, max(0, j * step - h): j * step + h + 1]
            out[i, j] = Counter(block.ravel()).most_common(1)[0][0]
    return out


def test_basin_has_two_interleaved_labels(basins):
    coarse, fine = basins
    assert set(fine.labels.ravel()) == {"period-1", "period-3"}
    frac = fine.fractions()
    assert 0.1 < frac["period-3"] < 0.5
    # interleaved: both labels occur along many grid rows
    rows = sum(len(set(r)) == 2 for r in fine.labels)
    assert rows > fine.labels.shape[0] // 2


def test_basin_coarse_cells_match_coincident_fine_cells(basins):
    coarse, fine = basins
    step = (BASIN_FINE - 1) // 10
    np.testing.assert_allclose(fine.xs[::step], coarse.xs)
    assert np.all(fine.labels[::step, ::step] == coarse.labels)


@pytest.mark.xfail(strict=True, reason="basin stripes are thinner than an 11 x 11 cell; "
                   "majority agreement is ~86% at fine resolutions 31 and 101")
def test_basin_coarse_agrees_with_fine_majority(basins):
    coarse, fine = basins
    agree = np.mean(_majority(fine.labels, 11) == coarse.labels)
    print(f"coarse vs fine-majority agreement ({BASIN_FINE}x{BASIN_FINE}):", agree)
    assert agree >= 0.9
