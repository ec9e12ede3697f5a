"""Acceptance criteria 1 to 10. Each test prints one PASS/FAIL line; the session
summary repeats them under "acceptance criteria"."""
import math
import time

import numpy as np
import pytest
from scipy.linalg import expm

import conftest
from dhflex import building as bld
from dhflex import dispatch as d
from dhflex import storage as sto
from dhflex.constants import CP_WATER
from dhflex.econ import production_terciles, profit_ordering, table5_report
from dhflex.engine import SCENARIOS, ScenarioConfig, Simulation, run_all
from dhflex.plant import BoilerParams, ChpParams, boiler_evaluate, chp_evaluate
from dhflex.thermonet import WATER_WALL_H, propagate

from test_building import cn_trajectory, expm_trajectory
from test_dispatch import TRUE_B, TRUE_S, grid_brute, random_toy, scan_clear, synthetic_trace, vertex_brute
from test_plant import oracle_boiler, oracle_chp
from test_storage import _balance_run, no_loss
from test_thermonet import DN50, fv_oracle, pipe, run as run_pipe, water_mass


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE_LINES[n] = line
    print(line)
    return ok


def _rel(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)) / np.maximum(np.abs(np.asarray(b)), 1e-300)))


# --- 1 ---------------------------------------------------------------------------


def test_criterion_01_plant_polynomials():
    t0 = time.perf_counter()
    el, _, gas = chp_evaluate(ChpParams(), 1.0, 55.0)
    exact = gas == 1523.35 and el == 600.0
    F, T = np.meshgrid(np.linspace(0.4, 1.0, 20), np.linspace(20.0, 90.0, 20))
    err_chp = max(_rel(g, w) for g, w in zip(chp_evaluate(ChpParams(), F, T), oracle_chp(F, T)))
    FB, TB = np.meshgrid(np.linspace(0.1, 1.0, 20), np.linspace(20.0, 90.0, 20))
    err_boiler = max(_rel(g, w) for g, w in zip(boiler_evaluate(BoilerParams(), FB, TB), oracle_boiler(FB, TB)))
    dt = time.perf_counter() - t0
    ok = exact and err_chp < 1e-9 and err_boiler < 1e-9 and dt < 1.0
    assert report(1, ok, f"P_gas={gas} P_el={el}, rel err chp {err_chp:.1e} boiler {err_boiler:.1e}, {dt:.3f} s")


# --- 2 ---------------------------------------------------------------------------


def _week_inputs(p, heated):
    rng = np.random.default_rng(5)
    inputs = []
    for hour in range(168):
        T_a = 6.0 + 5.0 * math.sin(2 * math.pi * hour / 24) + rng.normal(0, 1)
        U, ra, pel = rng.uniform(0, 6), max(0.0, 2.0 * math.sin(math.pi * ((hour % 24) - 7) / 10)), 0.3
        for m in range(60):
            heating = heated and ((hour * 60 + m) // 45) % 2 == 0
            inputs.append((heating, bld.input_vector(p, T_a, U, ra, pel, heating, 55.0)))
    return inputs


def test_criterion_02_building_physics():
    t0 = time.perf_counter()
    p = bld.standard_building()
    errs = {}
    for heated in (False, True):
        inputs = _week_inputs(p, heated)
        T0 = [20.0, 12.0, 20.0]
        errs[heated] = float(np.abs(cn_trajectory(p, T0, inputs, 60.0) - expm_trajectory(p, T0, inputs, 60.0)).max())
    dt = time.perf_counter() - t0
    static = (20.0 + 8.0) / (p.R_ie + p.R_ea)
    checks = {
        "trajectory": max(errs.values()) < 0.05,
        "9.8 kW": round(static, 1) == 9.8,
        "16.0 kW": round(p.design_load, 1) == 16.0,
        "R_h": round(p.R_h, 2) == 2.49,
        "R_ih": round(p.R_ih, 2) == 0.62,
        "R_ia": abs(p.R_ia - 12.32) <= 0.05,
        "runtime": dt < 10.0,
    }
    detail = (f"free-float {errs[False]:.4f} K, heated {errs[True]:.4f} K, static {static:.2f} kW, design {p.design_load:.2f} kW, "
              f"R_h {p.R_h:.3f}, R_ih {p.R_ih:.3f}, R_ia {p.R_ia:.2f} (want 12.32), {dt:.1f} s; failed: "
              f"{[k for k, v in checks.items() if not v] or 'none'}")
    assert report(2, all(checks.values()), detail)


# --- 3 ---------------------------------------------------------------------------


def _zero_flow_fv(t0_temp, minutes, ua=2.0, wall=800.0, length=100.0, d=DN50[0], t_ground=10.0, n=1000):
    # without flow every FV cell evolves alike, so one cell's water/wall pair is solved exactly
    cs = 1000.0 * math.pi * d * d / 4 * length / n * CP_WATER
    cw = wall * length / n / 1000.0
    gw = WATER_WALL_H * math.pi * d * length / n / 1000.0
    gg = ua * length / n / 1000.0
    A = np.array([[-gw / cs, gw / cs, 0.0], [gw / cw, -(gw + gg) / cw, gg * t_ground / cw], [0.0, 0.0, 0.0]])
    Phi = expm(A * 60.0)
    x, out = np.array([t0_temp, t0_temp, 1.0]), []
    for _ in range(minutes):
        x = Phi @ x
        out.append(x[0])
    return np.array(out)


def test_criterion_03_pipe_thermal():
    t0 = time.perf_counter()
    errs = {}
    for residence, steps in ((600.0, 40), (1200.0, 60)):
        q = water_mass() / residence
        inlet = [70.0] * steps
        errs[f"step {residence:.0f}s"] = np.abs(run_pipe(pipe(ua=2.0), inlet, q, 60.0) - fv_oracle(100.0, DN50[0], 2.0, 800.0, 40.0, inlet, q, 60.0)).max()
    q = water_mass() / 1200.0
    ramp = list(np.clip(40.0 + 0.5 * np.arange(120), 40.0, 75.0))
    errs["ramp"] = np.abs(run_pipe(pipe(ua=2.0), ramp, q, 60.0) - fv_oracle(100.0, DN50[0], 2.0, 800.0, 40.0, ramp, q, 60.0)).max()
    s = pipe(ua=2.0, temp=70.0)
    got = np.array([propagate(s, [0.0], [70.0], 10.0, 60.0)[0][0] for _ in range(180)])
    errs["zero flow"] = np.abs(got - _zero_flow_fv(70.0, 180)).max()
    dt = time.perf_counter() - t0
    ok = max(errs.values()) < 0.5 and dt < 30.0
    assert report(3, ok, ", ".join(f"{k} {v:.3f} K" for k, v in errs.items()) + f", {dt:.1f} s")


# --- 4 ---------------------------------------------------------------------------


def test_criterion_04_tank():
    rng = np.random.default_rng(4)
    bank = sto.TankBank([sto.open_tank(), sto.coil_tank(), sto.tank_in_tank()])
    T = np.full((3, sto.LOCAL_LAYERS), 50.0)
    bal = _balance_run(bank, T, T.copy(), rng, 100_000)
    inside = True
    for flow in (0.01, 0.05, 0.2):
        g = no_loss(sto.open_tank())
        s = sto.make_state(g, 40.0)
        for k in range(1, 61):
            s = sto.tank_step(g, s, flow, 70.0, 0.0, 20.0, 60.0).state
            frac = flow * 60.0 * k / 500.0
            mixed, plug = 70.0 - 30.0 * math.exp(-frac), min(40.0 + 30.0 * frac, 70.0)
            inside &= mixed - 1e-9 <= sto.mean_temperature(g, s) <= plug + 1e-9
    mix = 0.0
    for _ in range(2000):
        x = rng.uniform(0, 100, int(rng.integers(2, 60)))
        before = x.sum()
        sto.mix_inversions(x)
        mix = max(mix, abs(x.sum() - before) / before)
    ok = bal < 1e-3 and inside and mix < 1e-9
    assert report(4, ok, f"worst per-step balance {bal:.1e} over 1e5 steps, envelopes {'held' if inside else 'violated'}, mixing {mix:.1e}")


# --- 5 ---------------------------------------------------------------------------


def test_criterion_05_clearing():
    rng = np.random.default_rng(55)
    bad = 0
    for _ in range(1000):
        n = rng.integers(1, 11)
        corners = np.round(rng.uniform(0, 1, n), rng.integers(1, 4))
        levels = rng.integers(0, 5, n) * 5.0
        u = rng.choice([rng.uniform(0, levels.sum() + 5), rng.integers(0, 10) * 5.0])
        agg = d.aggregate_arrays(corners, levels)
        p = d.clear_market(agg, u)
        p_ref, e_ref = scan_clear(corners, levels, u)
        bad += not (p == p_ref and abs(agg(p) - u) == e_ref)
    assert report(5, bad == 0, f"{1000 - bad}/1000 bid sets match the exhaustive scan")


# --- 6 ---------------------------------------------------------------------------


def test_criterion_06_mpc():
    rng = np.random.default_rng(66)
    levels = np.arange(10) * 10.0
    worst_grid = worst_vertex = 0.0
    done = 0
    while done < 100:
        tank, fc, x0, band, p_max = random_toy(rng)
        lossless = d.plan(fc, tank=tank, t_tank=x0, p_max=p_max, tank_band=band, alpha=0.0)
        ramp = d.plan(fc, tank=tank, t_tank=x0, p_max=p_max, tank_band=band)
        if lossless.relaxed or ramp.relaxed:
            continue
        g = grid_brute(tank, x0, fc, band, levels, 0.0)
        worst_grid = max(worst_grid, abs(lossless.objective - g) / max(abs(g), 1e-9))
        v = vertex_brute(tank, x0, fc, band, p_max, d.ALPHA)
        worst_vertex = max(worst_vertex, abs(ramp.objective - v) / max(abs(v), 1e-9))
        done += 1
    ok = worst_grid < 1e-6 and worst_vertex < 1e-6
    assert report(6, ok, f"100 toys: rel gap vs 10-level enumeration {worst_grid:.1e}, vs vertex enumeration (ramp penalty) {worst_vertex:.1e}")


# --- 7 ---------------------------------------------------------------------------


def test_criterion_07_fitting():
    b, s = d.fit_aggregate_models(synthetic_trace())
    errs = [abs(getattr(b, k) / getattr(TRUE_B, k) - 1) for k in ("C_a", "C_m", "U_a", "H_m", "gamma_a", "gamma_m")]
    errs += [abs(getattr(s, k) / getattr(TRUE_S, k) - 1) for k in ("C_s", "U_s", "gamma_s")]
    sim = Simulation(ScenarioConfig(scenario="no_buffer_active"))
    sim.advance(sim.k0)  # pre-run under the reference controller
    day = int(86400 / sim.dt)
    model, _ = d.fit_aggregate_models(sim.fit_trace(day, 7 * day), fit_tank=False)
    rms = d.one_step_rms(model, sim.fit_trace(7 * day, sim.k0))
    ok = max(errs) < 0.01 and rms < 0.5
    assert report(7, ok, f"worst parameter error {100 * max(errs):.3f}%, held-out one-step RMS {rms:.4f} K")


# --- 8 to 10: one full four-scenario run --------------------------------------------


@pytest.fixture(scope="session")
def full_run():
    t0 = time.perf_counter()
    res = run_all(ScenarioConfig(), scenarios=SCENARIOS)
    return res, time.perf_counter() - t0


def test_criterion_08_profit_ordering(full_run):
    res, wall = full_run
    profits = {k: r.profit.profit for k, r in res.items()}
    chk = profit_ordering(profits)
    ok = chk["ordering_holds"] and wall < 900.0
    detail = ", ".join(f"{k} {v:.0f}" for k, v in profits.items()) + f" EUR; {wall:.0f} s; failed: {[k for k, v in chk.items() if not v] or 'none'}"
    assert report(8, ok, detail)


def test_criterion_09_demand_reshaping(full_run):
    res, _ = full_run
    terc = production_terciles(res)
    spread = {k: r.tallies["ti_std_mean"] for k, r in res.items()}
    # the scenarios whose buildings are dispatched; central keeps building thermostats
    actives = ["distributed_active", "no_buffer_active"]
    bimodal = all(terc[k][1] < terc["reference"][1] for k in actives)
    narrow = all(spread[k] < spread["reference"] for k in actives)
    detail = ("middle tercile " + ", ".join(f"{k} {terc[k][1]:.2f}" for k in res)
              + "; T_i std " + ", ".join(f"{k} {spread[k]:.3f}" for k in res))
    assert report(9, bimodal and narrow, detail)


def test_criterion_10_energy_signs(full_run):
    res, _ = full_run
    rows = {r["configuration"]: r for r in table5_report(res)}
    c, dist, nb, ref = rows["central_active"], rows["distributed_active"], rows["no_buffer_active"], rows["reference"]
    checks = {
        "central CHP down": c["chp_delta_pct"] < 0,
        "central boiler up": c["boiler_delta_pct"] > 0,
        "distributed consumption up a few %": 0 < dist["consumed_delta_pct"] < 10,
        "distributed efficiency above reference": dist["grid_efficiency_pct"] > ref["grid_efficiency_pct"],
        "no-buffer efficiency above reference": nb["grid_efficiency_pct"] > ref["grid_efficiency_pct"],
    }
    detail = (f"central CHP {c['chp_delta_pct']:+.1f}% boiler {c['boiler_delta_pct']:+.1f}%, distributed consumed {dist['consumed_delta_pct']:+.2f}%, "
              f"efficiency ref {ref['grid_efficiency_pct']:.2f} dist {dist['grid_efficiency_pct']:.2f} nb {nb['grid_efficiency_pct']:.2f}; "
              f"failed: {[k for k, v in checks.items() if not v] or 'none'}")
    assert report(10, all(checks.values()), detail)


def test_active_capture_price_not_below_reference(full_run):
    from dhflex.econ import capture_price

    res, _ = full_run
    ref = capture_price(res["reference"])
    for name in ("central_active", "distributed_active", "no_buffer_active"):
        assert capture_price(res[name]) >= ref, name
