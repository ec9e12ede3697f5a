import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from dhflex import hydronet as h
from dhflex import thermonet as tn
from dhflex.constants import CP_WATER
from dhflex.errors import ContractViolation

DN50 = h.DN_CATALOGUE[50]


def pipe(length=100.0, d=DN50[0], ua=0.4, wall=800.0, temp=40.0, cell_length=tn.CELL_LENGTH):
    return tn.init_state([length], [d], [ua], [wall], temp, cell_length)


def fv_oracle(length, d, ua, wall, t0, inlet, q, dt, t_ground=10.0, n=1000):
    """Finite-volume pipe at Courant 1; returns the step-averaged outlet temperature."""
    M = 1000.0 * math.pi * d * d / 4 * length
    tau = M / n / q
    sub = dt / tau
    assert abs(sub - round(sub)) < 1e-9
    sub = int(round(sub))
    cw = wall * length / n / 1000.0
    cs = M / n * CP_WATER
    gw = tn.WATER_WALL_H * math.pi * d * length / n / 1000.0
    gg = ua * length / n / 1000.0
    A = np.zeros((3, 3))
    A[0, :] = [-gw / cs, gw / cs, 0.0]
    A[1, :] = [gw / cw, -(gw + gg) / cw, gg * t_ground / cw]
    Phi = expm(A * tau)
    water = np.full(n, t0)
    wallT = np.full(n, t0)
    out = []
    for T_in in inlet:
        acc = 0.0
        for _ in range(sub):
            acc += water[-1]
            water = np.r_[T_in, water[:-1]]
            new = Phi @ np.vstack([water, wallT, np.ones(n)])
            water, wallT = new[0], new[1]
        out.append(acc / sub)
    return np.array(out)


def run(state, inlet, q, dt):
    out = []
    for k, T in enumerate(inlet):
        o, _ = tn.propagate(state, [q], [T], 10.0, dt, t_now=k * dt)
        out.append(o[0])
    return np.array(out)


def water_mass(length=100.0, d=DN50[0]):
    return 1000.0 * math.pi * d * d / 4 * length


def test_zero_flow_standing_loss():
    s = pipe(temp=70.0)
    L, d, wall, ua = 100.0, DN50[0], 800.0, 0.4
    C = water_mass() * CP_WATER
    cw = wall * L / 1000.0
    gw = tn.WATER_WALL_H * math.pi * d * L / 1000.0
    gg = ua * L / 1000.0
    # two-node water/wall model with finite coupling, solved exactly
    A = np.array([[-gw / C, gw / C, 0.0], [gw / cw, -(gw + gg) / cw, gg * 10.0 / cw], [0, 0, 0]])
    prev = 70.0
    for k in range(60):
        out, loss = tn.propagate(s, [0.0], [70.0], 10.0, 60.0)
        assert loss > 0 and out[0] < prev
        prev = out[0]
    want = expm(A * 3600.0) @ np.array([70.0, 70.0, 1.0])
    assert prev == pytest.approx(want[0], abs=0.05)


def test_lossless_plug_delay():
    s = pipe(ua=0.0, wall=0.0)
    q = water_mass() / 600.0
    out = run(s, [70.0] * 15, q, 60.0)
    np.testing.assert_allclose(out[:10], 40.0, atol=1e-9)
    np.testing.assert_allclose(out[10:], 70.0, atol=1e-9)


@pytest.mark.parametrize("residence,steps", [(600.0, 40), (1200.0, 60)])
def test_step_against_finite_volume(residence, steps):
    q = water_mass() / residence
    inlet = [70.0] * steps
    got = run(pipe(ua=2.0), inlet, q, 60.0)
    want = fv_oracle(100.0, DN50[0], 2.0, 800.0, 40.0, inlet, q, 60.0)
    assert np.abs(got - want).max() < 0.5


def test_ramp_against_finite_volume():
    q = water_mass() / 1200.0
    inlet = list(np.clip(40.0 + 0.5 * np.arange(120), 40.0, 75.0))
    got = run(pipe(ua=2.0), inlet, q, 60.0)
    want = fv_oracle(100.0, DN50[0], 2.0, 800.0, 40.0, inlet, q, 60.0)
    assert np.abs(got - want).max() < 0.5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_energy_balance_and_outlet_bounds(seed):
    rng = np.random.default_rng(seed)
    n = 5
    L = rng.uniform(5, 200, n)
    dn = rng.choice(list(h.DN_CATALOGUE), n)
    d = np.array([h.DN_CATALOGUE[x][0] for x in dn])
    s = tn.init_state(L, d, rng.uniform(0, 1, n), rng.uniform(0, 2000, n), rng.uniform(30, 70, n), cell_length=4.0)
    history = [[T] for T in s.buffer_T]
    for k in range(80):
        q = rng.uniform(0, 1.5, n) * (rng.random(n) < 0.8)
        T_in = rng.uniform(20, 80, n)
        e0 = s.energy()
        out, _ = tn.propagate(s, q, T_in, 10.0, 60.0)
        e1 = s.energy()
        loss = e0 + CP_WATER * q * 60.0 * (T_in - out) - e1
        assert np.all(loss >= -1e-6)
        for i in range(n):
            history[i].append(T_in[i])
            assert out[i] <= max(history[i]) + 1e-9
            assert out[i] >= min(10.0, min(history[i])) - 1e-9


def test_reported_loss_closes_balance():
    rng = np.random.default_rng(5)
    s = pipe(length=150.0, ua=0.5)
    for k in range(300):
        q = rng.uniform(0, 1.0)
        T_in = rng.uniform(40, 80)
        e0 = s.energy()[0]
        out, loss_kw = tn.propagate(s, [q], [T_in], 10.0, 60.0)
        e1 = s.energy()[0]
        through = CP_WATER * q * 60.0 * T_in
        resid = e0 + through - CP_WATER * q * 60.0 * out[0] - loss_kw * 60.0 - e1
        assert abs(resid) <= 1e-3 * max(through, 1.0)


def test_parcels_partition_pipe_water():
    s = pipe(length=37.3)
    n = s.n_cells[0]
    assert n == 75 and s.parcel_mass[0] * n == pytest.approx(water_mass(37.3), rel=1e-12)
    rng = np.random.default_rng(2)
    for k in range(200):
        tn.propagate(s, [rng.uniform(0, 0.05)], [rng.uniform(40, 70)], 10.0, 60.0)
        assert 0.0 <= s.phase[0] < 1.0
        assert 0 <= s.head[0] < n


def test_short_pipes_get_two_cells_and_long_pipes_are_capped():
    s = tn.init_state([0.3, 1000.0, 0.0], [DN50[0]] * 3, [0.4] * 3, [800.0] * 3, 50.0)
    assert list(s.n_cells) == [2, tn.MAX_CELLS, 0]
    out, loss = tn.propagate(s, [0.1, 0.1, 0.1], [60.0] * 3, 10.0, 60.0)
    assert out[2] == 60.0


def test_finer_cells_converge():
    q = water_mass() / 1200.0
    inlet = [70.0] * 60
    want = fv_oracle(100.0, DN50[0], 2.0, 800.0, 40.0, inlet, q, 60.0)
    errs = [np.abs(run(pipe(ua=2.0, cell_length=c), inlet, q, 60.0) - want).max() for c in (5.0, 0.5)]
    assert errs[1] < errs[0]


def test_negative_flow_rejected():
    with pytest.raises(ContractViolation):
        tn.propagate(pipe(), [-0.1], [50.0], 10.0, 60.0)


class TestNetwork:
    def setup_method(self):
        self.g = h.build_topology()
        self.net = tn.NetworkThermal(self.g, 60.0, 35.0)

    def test_orders_are_topological(self):
        g = self.g
        seen = {g.supply_root}
        for e in self.net.supply_order:
            assert g.frm[e] in seen
            seen.add(g.to[e])
        # a return edge may only leave a node once every edge into that node is done
        remaining = {}
        for e in self.net.return_order:
            remaining[g.to[e]] = remaining.get(g.to[e], 0) + 1
        for e in self.net.return_order:
            assert remaining.get(g.frm[e], 0) == 0
            remaining[g.to[e]] -= 1

    def test_network_energy_balance(self):
        g, net = self.g, self.net
        qb = g.design_flow[g.sink_edges] * 0.4
        q = h.tree_flows(g, qb)
        for k in range(120):
            e0 = net.stored_energy()
            t_sup = 60.0 + 10.0 * math.sin(k / 10)
            loss_s = net.propagate_supply(q, qb.sum(), t_sup, 60.0, 60.0 * k)
            t_b = net.building_supply_temps()
            loss_r = net.propagate_return(q, qb, t_b - 25.0, 60.0, 60.0 * k)
            e1 = net.stored_energy()
            inflow = CP_WATER * 60.0 * (qb.sum() * t_sup + (qb * (t_b - 25.0)).sum())
            outflow = CP_WATER * 60.0 * ((qb * t_b).sum() + qb.sum() * net.plant_return_temp())
            resid = e0 + inflow - outflow - (loss_s + loss_r) * 60.0 - e1
            assert abs(resid) < 1e-3 * inflow
            assert loss_s > 0 and loss_r > 0

    def test_return_mixing(self):
        g = h.build_topology(h.TopologyConfig(loss_scale=0.0))
        net = tn.NetworkThermal(g, 60.0, 35.0)
        qb = np.zeros(g.n_buildings)
        qb[0], qb[99] = 0.1, 0.3
        q = h.tree_flows(g, qb)
        for k in range(300):
            net.propagate_supply(q, qb.sum(), 60.0, 60.0)
            net.propagate_return(q, qb, np.where(np.arange(100) == 0, 30.0, 40.0), 60.0)
        assert net.plant_return_temp() == pytest.approx(37.5, abs=1e-9)
        assert net.building_supply_temps()[[0, 99]] == pytest.approx([60.0, 60.0], abs=1e-9)

    def test_residence_window_bounds(self):
        g, net = self.g, self.net
        qb = g.design_flow[g.sink_edges] * 0.3
        q = h.tree_flows(g, qb)
        for k in range(100):
            net.propagate_supply(q, qb.sum(), 55.0 + 10.0 * (k % 7 == 0), 60.0)
            t_b = net.building_supply_temps()
            assert np.all(t_b <= 65.0 + 1e-9) and np.all(t_b >= 10.0)

    def test_trace_csv(self, tmp_path):
        g, net = self.g, self.net
        qb = g.design_flow[g.sink_edges] * 0.4
        q = h.tree_flows(g, qb)
        tw = tn.TraceWriter(tmp_path / "trace.csv")
        net.propagate_supply(q, qb.sum(), 60.0, 60.0)
        net.propagate_return(q, qb, np.full(100, 30.0), 60.0)
        tw.write(60.0, net, q, 60.0)
        tw.close()
        rows = list(csv.DictReader((tmp_path / "trace.csv").open()))
        assert list(rows[0]) == ["t", "pipe_id", "T_in", "T_out", "flow", "loss_kW"]
        assert len(rows) == len(g.pipes)
