"""Energy model arithmetic, bounds, and calibration bands."""

import numpy as np
import pytest

from ecosignal import energy
from ecosignal.energy import (EVParams, ICEVParams, PowertrainModel,
                              accumulate, ev_battery_power, gasoline_equivalent,
                              icev_fuel_rate, traction_power)


def test_traction_power_zero_speed():
    assert traction_power(0.0, 2.0, ICEVParams()) == 0.0


def test_traction_power_hand_value():
    p = ICEVParams(mass=1500.0, drag_coef=0.32, frontal_area=2.2,
                   rolling_res=0.0125)
    v, a = 10.0, 1.0
    drag = 0.5 * 1.225 * 0.32 * 2.2 * v * v
    rolling = 0.0125 * 1500.0 * 9.81
    expected = (1500.0 * a + drag + rolling) * v
    assert traction_power(v, a, p) == pytest.approx(expected, rel=1e-12)


def test_traction_power_increasing_in_speed_at_cruise():
    p = ICEVParams()
    powers = [traction_power(v, 0.0, p) for v in (5.0, 8.0, 11.0, 13.9)]
    assert all(q > 0 for q in powers)
    assert powers == sorted(powers)


def test_icev_idle_and_decel_clamp():
    p = ICEVParams()
    assert icev_fuel_rate(0.0, 0.0, p) == pytest.approx(p.idle_rate)
    # hard deceleration: traction power clamps away, only idle + speed terms
    rate = icev_fuel_rate(10.0, -4.0, p)
    assert rate == pytest.approx(p.idle_rate + p.speed_coef * 10.0)
    assert rate >= p.idle_rate


def test_icev_rate_never_below_idle_and_monotone_in_power():
    p = ICEVParams()
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = rng.uniform(0, 13.9)
        a = rng.uniform(-4, 3)
        assert icev_fuel_rate(v, a, p) >= p.idle_rate
    base = icev_fuel_rate(10.0, 0.5, p)
    assert icev_fuel_rate(10.0, 1.0, p) > base


def test_ev_regen_bound():
    p = EVParams(aux_power=0.0)
    v, a = 10.0, -2.0
    p_trac = traction_power(v, a, p)
    assert p_trac < 0
    batt_kw = ev_battery_power(v, a, p)
    assert batt_kw < 0
    assert batt_kw * 1000.0 == pytest.approx(p.regen_eff * p_trac)
    assert abs(batt_kw * 1000.0) <= p.regen_eff * abs(p_trac) + 1e-9


def test_gasoline_equivalent_paper_value():
    assert gasoline_equivalent(1.0) == pytest.approx(0.112)
    assert gasoline_equivalent(0.0) == 0.0
    assert gasoline_equivalent(10.0) == pytest.approx(1.12)


def test_accumulate_constant_rate():
    assert accumulate(0.0, 5.0, 10.0) == pytest.approx(50.0)


def test_icev_cumulative_monotone():
    model = PowertrainModel("icev")
    rng = np.random.default_rng(1)
    cum = 0.0
    v = 5.0
    for _ in range(500):
        v2 = float(np.clip(v + rng.uniform(-3, 2), 0, 13.9))
        seg = model.segment_energy_j(v, v2, 1.0)
        assert seg >= 0.0
        cum2 = accumulate(cum, seg, 1.0)
        assert cum2 >= cum
        cum, v = cum2, v2


def test_ev_round_trip_consumes_net_energy():
    model = PowertrainModel("ev", EVParams(aux_power=0.0))
    # symmetric accelerate/brake cycle returning to the start speed
    speeds = [5.0, 7.0, 9.0, 11.0, 9.0, 7.0, 5.0]
    total = model.profile_energy_j(speeds, 1.0)
    assert total > 0.0


def test_segment_energy_grid_matches_scalar():
    for kind in ("icev", "ev"):
        model = PowertrainModel(kind)
        rng = np.random.default_rng(2)
        v0 = rng.uniform(0, 13.9, 50)
        v1 = rng.uniform(0, 13.9, 50)
        grid = model.segment_energy_grid(v0, v1, 1.0)
        for i in range(50):
            assert grid[i] == model.segment_energy_j(v0[i], v1[i], 1.0)


def test_cruise_calibration_bands():
    # steady 13.9 m/s cruise: ICEV in [4, 10] L/100km, EV in [0.10, 0.25] kWh/km
    icev = PowertrainModel("icev")
    rate_l_s = icev.energy_rate_w(13.9, 0.0) / energy.J_PER_LITER
    l_per_100km = rate_l_s / 13.9 * 1e5
    assert 4.0 <= l_per_100km <= 10.0

    ev = PowertrainModel("ev")
    kw = ev.energy_rate_w(13.9, 0.0) / 1000.0
    kwh_per_km = kw / 13.9 * 1000.0 / 3600.0
    assert 0.10 <= kwh_per_km <= 0.25


def test_preset_lookup():
    assert energy.from_preset("icev-default").kind == "icev"
    assert energy.from_preset("ev-default").kind == "ev"
    with pytest.raises(ValueError):
        energy.from_preset("diesel")
