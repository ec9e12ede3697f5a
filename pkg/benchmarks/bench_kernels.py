"""Time the hot kernels under numba and under the plain numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 3] [--json out.json]

Each backend runs in its own interpreter because the switch is read at import.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

CASES = ("building_cn", "tank_bank", "network_thermal", "engine_2h")


def _best(fn, repeat):
    fn()  # warm-up, includes compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def _cases():
    import numpy as np

    from dhflex import building as bld
    from dhflex import storage as sto
    from dhflex.constants import MAINS_TEMP
    from dhflex.engine import ScenarioConfig, Simulation
    from dhflex.hydronet import TopologyConfig, build_topology, pump_operating_point
    from dhflex.thermonet import NetworkThermal

    pop = bld.sample_population(100, 1)
    M, N = bld.cn_operators(pop, 60.0)
    R_h = np.array([p.R_h for p in pop])

    def building_cn():
        T = np.full((100, 3), 20.0)
        out, q = np.empty_like(T), np.empty(100)
        b = np.tile([1.0, 2.0, 20.0], (100, 1))
        heat = np.ones(100, dtype=bool)
        t_hin = np.full(100, 50.0)
        for _ in range(1440):
            bld.cn_step_kernel(M, N, T, heat, b, R_h, t_hin, out, q)
            T, out = out, T

    kinds = sto.assign_types(100, 1)
    bank = sto.TankBank([sto.local_tank(k) for k in kinds])

    def tank_bank():
        T = np.full((100, bank.layers), 50.0)
        Tin = np.full_like(T, 50.0)
        m = np.full(100, 0.05)
        amb = np.full(100, 20.0)
        for _ in range(60):
            bank.step(T, Tin, m, np.full(100, 65.0), m, np.full(100, 30.0), m, MAINS_TEMP, amb, 60.0)

    graph = build_topology(TopologyConfig())

    qb = np.full(graph.n_buildings, 0.1)
    q, _, _ = pump_operating_point(graph, qb)

    def network_thermal():
        net = NetworkThermal(graph, 60.0, 35.0)
        for _ in range(30):
            net.propagate_supply(q, qb.sum(), 60.0, 60.0)
            net.propagate_return(q, qb, np.full(graph.n_buildings, 35.0), 60.0)

    def engine_2h():
        sim = Simulation(ScenarioConfig(prerun_days=0.0, days=2 / 24))
        sim.advance(sim.n_steps)

    return {"building_cn": building_cn, "tank_bank": tank_bank, "network_thermal": network_thermal, "engine_2h": engine_2h}


def child(repeat):
    from dhflex._accel import backend

    fns = _cases()
    out = {"backend": backend()}
    for name in CASES:
        out[name] = _best(fns[name], repeat)
    print(json.dumps(out))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        child(args.repeat)
        return
    rows = {}
    for flag in ("0", "1"):
        env = dict(os.environ, DHFLEX_DISABLE_JIT=flag)
        res = subprocess.run([sys.executable, __file__, "--child", "--repeat", str(args.repeat)],
                             env=env, capture_output=True, text=True, check=True)
        d = json.loads(res.stdout.strip().splitlines()[-1])
        rows[d.pop("backend")] = d
    print(f"{'case':<18}{'numba s':>10}{'numpy s':>10}{'speed-up':>10}")
    for name in CASES:
        a, b = rows["numba"][name], rows["numpy"][name]
        print(f"{name:<18}{a:>10.4f}{b:>10.4f}{b / a:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
