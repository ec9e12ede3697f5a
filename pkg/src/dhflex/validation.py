"""Quick oracle checks behind ``dhflex validate``.

Each check compares a production routine against an independent evaluation
(retyped polynomials, matrix exponential, brute-force scans) and returns
``(passed, detail)``. The full suites live in the test directory.
"""
from __future__ import annotations

import time

import numpy as np
from scipy.linalg import expm

from . import building as bld
from . import dispatch as dp
from . import storage as sto
from .constants import CP_WATER, MAINS_TEMP
from .plant import ChpParams, chp_evaluate


def check_plant():
    el, heat, gas = chp_evaluate(ChpParams(), 1.0, 40.0)
    exact = gas == 1523.35 and el == 600.0
    worst = 0.0
    for fm in np.linspace(0.5, 1.0, 20):
        for t in np.linspace(20.0, 70.0, 20):
            a = 3.1537e-5 * t**3 - 7.4162e-3 * t**2 - 0.3258 * t + 704.09
            b = 6.0633e-4 * t**2 - 0.1848 * t + 160.01
            ref = np.array([600.0 * fm, a * fm + b, 31.250 * fm**2 + 1310.75 * fm + 181.35])
            got = np.array(chp_evaluate(ChpParams(), fm, t), dtype=float)
            worst = max(worst, float(np.max(np.abs(got - ref) / np.abs(ref))))
    ok = exact and worst < 1e-9
    return ok, f"P_gas(1)={gas}, P_el(1)={el}, grid rel err {worst:.1e}"


def check_building():
    p = bld.standard_building()
    design = round(p.design_load, 1) == 16.0 and round(p.R_h, 2) == 2.49 and round(p.R_ih, 2) == 0.62
    dt, n = 60.0, 1440
    rng = np.random.default_rng(0)
    T = np.array([20.0, 12.0, 20.0])
    M, N = bld.cn_operators([p], dt)
    Tc = T[None, :].copy()
    nxt, q = np.empty_like(Tc), np.empty(1)
    worst = 0.0
    for k in range(n):
        heating = (k // 180) % 2 == 0
        b = bld.input_vector(p, 5.0 + 3 * np.sin(k / 200), 3.0, 0.3 * rng.random(), 0.3, heating, 55.0)
        C, A = bld.system_matrices(p, heating)
        aug = np.zeros((4, 4))
        aug[:3, :3] = A / C[:, None]
        aug[:3, 3] = b / C
        T = (expm(aug * dt) @ np.r_[T, 1.0])[:3]
        bld.cn_step_kernel(M, N, Tc, np.array([heating]), b[None, :], np.array([p.R_h]), np.array([b[2] * p.R_h]), nxt, q)
        Tc = nxt.copy()
        worst = max(worst, float(np.max(np.abs(Tc[0] - T))))
    return design and worst < 0.05, f"design 16.0/2.49/0.62 {'ok' if design else 'off'}, one-day max error {worst:.4f} K"


def check_clearing(n_sets: int = 300):
    rng = np.random.default_rng(1)
    for _ in range(n_sets):
        n = rng.integers(1, 11)
        corners = np.round(rng.uniform(0, 1, n), 2)
        levels = rng.integers(0, 5, n) * 5.0
        u = rng.uniform(0, levels.sum() + 5)
        agg = dp.aggregate_arrays(corners, levels)
        p = dp.clear_market(agg, u)
        cand = np.unique(np.r_[0.0, corners[corners > 0]])
        err = np.abs(np.array([levels[p_ < corners].sum() for p_ in cand]) - u)
        if p != cand[int(np.flatnonzero(err == err.min())[0])]:
            return False, f"mismatch for corners={corners}, levels={levels}, u={u}"
    return True, f"{n_sets} random bid sets match the breakpoint scan"


def check_tank(steps: int = 3000):
    rng = np.random.default_rng(2)
    bank = sto.TankBank([sto.open_tank(), sto.coil_tank(), sto.tank_in_tank()])
    T = np.full((3, sto.LOCAL_LAYERS), 50.0)
    Tin = np.full_like(T, 50.0)
    e0, worst = bank.energy(T, Tin), 0.0
    for _ in range(steps):
        m_ch, t_ch = rng.uniform(0, 0.3, 3), rng.uniform(40, 80, 3)
        m_dis, t_ret = rng.uniform(0, 0.2, 3), rng.uniform(10, 40, 3)
        m_din = rng.uniform(0, 0.2, 3)
        ch, dis, din, loss = bank.step(T, Tin, m_ch, t_ch, m_dis, t_ret, m_din, MAINS_TEMP, np.full(3, 18.0), 60.0)
        inner = np.where(bank.has_inner, m_din * (MAINS_TEMP - din), 0.0)
        flux = CP_WATER * 60.0 * (m_ch * (t_ch - ch) + m_dis * (t_ret - dis) + inner) - loss * 60.0
        e1 = bank.energy(T, Tin)
        worst = max(worst, float(np.max(np.abs(e1 - e0 - flux) / np.maximum(np.abs(flux), bank.c_layer))))
        e0 = e1
    x = rng.uniform(0, 100, 40)
    s = x.sum()
    sto.mix_inversions(x)
    mix = abs(x.sum() - s) / s
    return worst < 1e-3 and mix < 1e-9, f"per-step balance {worst:.1e}, mixing {mix:.1e}"


CHECKS = {
    "plant": check_plant,
    "building": check_building,
    "clearing": check_clearing,
    "tank": check_tank,
}


def run_checks(names=None, echo=print) -> bool:
    ok_all = True
    for name in names or CHECKS:
        t0 = time.perf_counter()
        ok, detail = CHECKS[name]()
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name:<9} {detail}  ({time.perf_counter() - t0:.2f} s)")
    return ok_all
