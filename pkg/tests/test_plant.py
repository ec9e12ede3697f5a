import numpy as np
import pytest

from dhflex.errors import ContractViolation
from dhflex.plant import (
    BoilerParams,
    ChpParams,
    PlantState,
    boiler_evaluate,
    boiler_gas_for_heat,
    chp_evaluate,
    reference_dispatch,
)

CHP = ChpParams()
BOILER = BoilerParams()


def oracle_chp(fm, t):
    # coefficients typed in again, evaluated with explicit powers
    a_heat = 3.1537e-5 * t**3 - 7.4162e-3 * t**2 - 0.3258 * t + 704.09
    b_heat = 6.0633e-4 * t**2 - 0.1848 * t + 160.01
    return 600.0 * fm, a_heat * fm + b_heat, 31.250 * fm**2 + 1310.75 * fm + 181.35


def oracle_boiler(fm, t):
    g = 1100.0 * fm
    A = -7.758e-13 * g**2 - 1.119e-10 * g + 3.295e-6
    B = 1.195e-10 * g**2 + 2.911e-8 * g - 4.665e-4
    C = -6.067e-9 * g**2 - 1.558e-6 * g + 1.800e-2
    D = 1.121e-7 * g**2 - 1.503e-5 * g + 7.675e-1
    eff = A * t**3 + B * t**2 + C * t + D
    return eff * g, g


def test_chp_full_load():
    p_el, p_heat, p_gas = chp_evaluate(CHP, 1.0, 70.0)
    assert p_el == 600.0
    assert p_gas == pytest.approx(1523.35, abs=1e-9)
    assert p_heat == pytest.approx(805.8, abs=0.05)


def test_chp_min_load_el():
    assert chp_evaluate(CHP, 0.4, 40.0)[0] == pytest.approx(240.0)


@pytest.mark.parametrize("fm", [0.39, 1.01, 0.0])
def test_chp_out_of_range(fm):
    with pytest.raises(ContractViolation):
        chp_evaluate(CHP, fm, 40.0)


def test_boiler_full_load_matches_oracle():
    out, gas = boiler_evaluate(BOILER, 1.0, 30.0)
    o_out, o_gas = oracle_boiler(1.0, 30.0)
    assert gas == 1100.0
    assert out == pytest.approx(o_out, rel=1e-12)


def test_boiler_min_gas():
    assert boiler_evaluate(BOILER, 0.1, 50.0)[1] == pytest.approx(110.0)
    with pytest.raises(ContractViolation):
        boiler_evaluate(BOILER, 0.05, 50.0)


@pytest.mark.parametrize("fm", [0.1, 0.3, 0.6, 1.0])
def test_boiler_condensing(fm):
    assert boiler_evaluate(BOILER, fm, 30.0)[0] > boiler_evaluate(BOILER, fm, 70.0)[0]


def test_grid_against_oracles():
    fm = np.linspace(0.4, 1.0, 20)
    t = np.linspace(20.0, 90.0, 20)
    F, T = np.meshgrid(fm, t)
    for got, want in zip(chp_evaluate(CHP, F, T), oracle_chp(F, T)):
        np.testing.assert_allclose(got, want, rtol=1e-9)
    fb = np.linspace(0.1, 1.0, 20)
    FB, TB = np.meshgrid(fb, t)
    for got, want in zip(boiler_evaluate(BOILER, FB, TB), oracle_boiler(FB, TB)):
        np.testing.assert_allclose(got, want, rtol=1e-9)


def test_chp_monotone_and_utilisation():
    fm = np.linspace(0.4, 1.0, 61)
    for t in np.linspace(30.0, 80.0, 11):
        p_el, p_heat, p_gas = chp_evaluate(CHP, fm, np.full_like(fm, t))
        assert np.all(np.diff(p_heat) >= 0)
        assert np.all(np.diff(p_gas) >= 0)
        util = (p_el + p_heat) / p_gas
        assert np.all((util >= 0.80) & (util <= 1.00))


def test_boiler_gas_for_heat_inverts():
    q, _ = boiler_evaluate(BOILER, 0.55, 40.0)
    fm, gas = boiler_gas_for_heat(BOILER, q, 40.0)
    assert fm == pytest.approx(0.55, abs=1e-9)
    # cycling below minimum keeps the minimum-load efficiency
    q_min, g_min = boiler_evaluate(BOILER, 0.1, 40.0)
    assert boiler_gas_for_heat(BOILER, q_min / 2, 40.0)[1] == pytest.approx(g_min / 2)


class TestReferenceDispatch:
    def test_boiler_supports_chp_above_max(self):
        s = reference_dispatch(PlantState(), 900.0, 0.0, 60.0, t_in=40.0)
        assert s.chp_on and s.chp_fm == pytest.approx(1.0)
        assert s.chp_heat + s.boiler_heat == pytest.approx(900.0)
        assert s.boiler_heat > 0

    def test_boiler_takes_over_below_chp_min(self):
        running = PlantState(chp_on=True, chp_fm=0.5, since_switch=3600.0)
        s = reference_dispatch(running, 200.0, 5.0, 60.0, t_in=40.0)
        assert not s.chp_on
        assert s.boiler_heat == pytest.approx(200.0)

    def test_min_on_time(self):
        s = PlantState(chp_on=True, chp_fm=0.8, since_switch=300.0)
        on_steps = 0
        while True:
            s = reference_dispatch(s, 0.0, 5.0, 60.0, t_in=40.0)
            if not s.chp_on:
                break
            assert s.chp_fm == pytest.approx(CHP.fm_min)
            on_steps += 1
        assert on_steps == 9  # switched off during the 10th minute: 300 + 600 = 900 s on

    def test_setpoint_from_heating_curve(self):
        assert reference_dispatch(PlantState(), 0.0, -8.0, 60.0).supply_setpoint == pytest.approx(70.0)
        assert reference_dispatch(PlantState(), 0.0, 15.0, 60.0).supply_setpoint == pytest.approx(40.0)
