import math
from dataclasses import replace

import numpy as np
import pytest

import oracles
from vvosim.feeder import CapacitorBank, PvSmartInverter, VoltVarCurve, ZipLoad, build_ieee34_modified
from vvosim.powerflow import OperatingPoint, solve, volt_var_q, zip_power


def test_zip_power_nominal():
    ld = ZipLoad(2, 123.0, 45.0, 0.2, 0.5, 0.3)
    assert zip_power(ld, 1.0) == (123.0, 45.0)


def test_zip_power_pure_impedance():
    p, q = zip_power(ZipLoad(2, 100.0, 50.0, 1.0, 0.0, 0.0), 0.95)
    assert p == pytest.approx(0.9025 * 100.0, rel=1e-15)
    assert q == pytest.approx(0.9025 * 50.0, rel=1e-15)


def test_zip_power_mixed():
    p, q = zip_power(ZipLoad(2, 100.0, 50.0, 0.3, 0.4, 0.3), 0.97)
    f = 0.3 * 0.97**2 + 0.4 * 0.97 + 0.3
    assert p == pytest.approx(100.0 * f, rel=1e-15)
    assert q == pytest.approx(50.0 * f, rel=1e-15)


def test_zip_power_rejects_nonpositive_voltage():
    with pytest.raises(ValueError):
        zip_power(ZipLoad(2, 1.0, 1.0), 0.0)


def inverter(p=0.0, s=100.0, curve=None):
    return PvSmartInverter("PV", 2, s, p, curve or VoltVarCurve())


@pytest.mark.parametrize("v", [0.98, 0.995, 1.0, 1.02])
def test_volt_var_deadband(v):
    inv = inverter()
    assert volt_var_q(inv.curve, v, inv) == 0.0


def test_volt_var_full_support_below_v1():
    inv = inverter(p=0.0)
    assert volt_var_q(inv.curve, 0.90, inv) == pytest.approx(0.6 * inv.s_rating)
    assert volt_var_q(inv.curve, inv.curve.v1, inv) == pytest.approx(0.6 * inv.s_rating)


def test_volt_var_midpoint_absorbing_binds_smaller_cap():
    inv = inverter(p=80.0)
    c = inv.curve
    v = 0.5 * (c.v3 + c.v4)
    expect = min(0.5 * c.q_max_frac * inv.s_rating, math.sqrt(inv.s_rating**2 - inv.p_avail**2))
    assert volt_var_q(c, v, inv) == pytest.approx(-expect)
    # at higher output the circle binds instead
    inv2 = inverter(p=99.0)
    assert volt_var_q(c, c.v4 + 0.1, inv2) == pytest.approx(-math.sqrt(100.0**2 - 99.0**2))


def test_two_bus_closed_form():
    m = oracles.two_bus(p_kw=100.0)
    pf = solve(m)
    v = oracles.two_bus_voltage(1.0, 0.01, 0.01, 0.1, 0.0)
    assert pf.converged
    assert pf.v_at(2) == pytest.approx(v, abs=1e-9)
    assert pf.loss_kw == pytest.approx(0.01 * (0.1 / v) ** 2 * 1000.0, rel=1e-6)


def test_two_bus_with_reactive_load():
    m = oracles.two_bus(p_kw=300.0, q_kvar=150.0, r=0.02, x=0.04)
    pf = solve(m)
    assert pf.v_at(2) == pytest.approx(oracles.two_bus_voltage(1.0, 0.02, 0.04, 0.3, 0.15), abs=1e-8)


def test_no_load_identity():
    m = build_ieee34_modified(source_voltage=1.0)
    op = OperatingPoint(load_scale=0.0, taps={"VR1": 0, "VR2": 0}, p_avail_pvsi={"PV1": 0.0})
    pf = solve(m, op)
    assert pf.converged
    assert np.all(pf.v == 1.0)
    assert pf.loss_kw == 0.0


def test_ieee34_monotone_drop_matches_nodal_oracle(ieee34):
    taps = {"VR1": 0, "VR2": 0}
    pf = solve(ieee34, OperatingPoint(taps=taps, q_pvsi={"PV1": 0.0}))
    ref = oracles.nodal_solve(ieee34, taps=taps)
    assert pf.converged
    sub = pf.v_at(ieee34.substation)
    assert ref.v[34] < ref.v[ieee34.substation]
    assert pf.v_at(34) < sub
    # with taps at 0 every bus sits below the source
    assert max(pf.v_at(b) for b in ieee34.bus_ids if b != ieee34.substation) < sub


def test_oracle_equivalence_small_fixtures():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(150):
        m = oracles.random_small_feeder(rng, int(rng.integers(2, 7)))
        if k % 3 == 0:
            m = replace(m, capacitors=(CapacitorBank("C1", m.buses[-1].id, step=1, n_steps=2, step_kvar=50.0),))
        taps = {r.id: int(rng.integers(-8, 9)) for r in m.regulators}
        scale = float(rng.uniform(0.2, 1.5))
        pf = solve(m, OperatingPoint(taps=taps, load_scale=scale))
        ref = oracles.nodal_solve(m, taps=taps, load_scale=scale)
        assert pf.converged
        worst = max(worst, max(abs(pf.v_at(b) - ref.v[b]) for b in m.bus_ids))
        assert pf.loss_kw == pytest.approx(ref.loss_kw, abs=1e-2)
        assert pf.p_sub_kw == pytest.approx(ref.p_sub_kw, abs=1e-2)
    assert worst < 1e-5


def test_sweep_contraction(ieee34):
    pf = solve(ieee34, OperatingPoint(taps={"VR1": 0, "VR2": 0}))
    assert pf.converged
    assert pf.iterations <= 100
    h = pf.history
    assert np.all(np.diff(h[3:]) <= 0.0)
    assert h[-1] < 1e-6


@pytest.mark.parametrize("rid", ["VR1", "VR2"])
@pytest.mark.parametrize("base_tap", [-3, 0, 4])
def test_tap_monotonicity(ieee34, rid, base_tap):
    reg = ieee34.regulator(rid)
    down = ieee34.downstream_of(reg.line[1])
    taps = {"VR1": 1, "VR2": 0, rid: base_tap}
    lo = solve(ieee34, OperatingPoint(taps=dict(taps, **{rid: base_tap - 1})))
    mid = solve(ieee34, OperatingPoint(taps=taps))
    hi = solve(ieee34, OperatingPoint(taps=dict(taps, **{rid: base_tap + 1})))
    for b in down:
        assert lo.v_at(b) < mid.v_at(b) < hi.v_at(b)


def test_energy_balance_on_heavy_load(ieee34):
    for scale in (0.3, 1.0, 1.4):
        pf = solve(ieee34, OperatingPoint(load_scale=scale, p_avail_pvsi={"PV1": 400.0}))
        assert pf.converged
        assert pf.balance_residual <= 1e-6
        assert pf.loss_kw >= 0.0


def test_divergence_is_flagged_not_raised():
    m = oracles.two_bus(p_kw=30000.0, r=0.05, x=0.05)
    pf = solve(m)
    assert not pf.converged
    assert pf.iterations == 100


def test_inverter_q_follows_curve(ieee34):
    pf = solve(ieee34, OperatingPoint(load_scale=1.3, taps={"VR1": -4, "VR2": -4}, p_avail_pvsi={"PV1": 300.0}))
    inv = ieee34.inverter("PV1")
    expect = volt_var_q(inv.curve, pf.v_at(inv.bus), inv, 300.0)
    # Q lags V by one sweep; the 6000 kVAr/p.u. ramp times the 1e-6 V tolerance
    slope = inv.curve.q_max_frac * inv.s_rating / (inv.curve.v2 - inv.curve.v1)
    assert pf.q_pvsi["PV1"] == pytest.approx(expect, abs=slope * 1e-6)
    assert pf.q_pvsi["PV1"] > 0


def test_solve_is_pure(ieee34):
    op = OperatingPoint(load_scale=0.8, taps={"VR1": 2, "VR2": -1})
    a, b = solve(ieee34, op), solve(ieee34, op)
    assert np.array_equal(a.v, b.v)
    assert a.loss_kw == b.loss_kw
