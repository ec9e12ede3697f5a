"""Pipe temperature propagation: exact plug flow over a heat-capacitive wall.

Each pipe is split into wall cells of about half a metre. Water moves as
parcels of one cell's mass held in a ring buffer; the pipe shifts by one
parcel whenever that much water has entered, so advection is exact and free of
numerical diffusion. Between shift events every parcel exchanges heat with the
wall cell under it while the wall loses heat to the ground; this linear
water/wall/ground system is solved exactly, so a step conserves energy to
rounding. Inflow that does not fill a whole parcel waits in an inlet buffer
while the same mass leaves the outlet parcel.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._accel import jit
from .constants import CP_WATER, GROUND_TEMP, RHO_WATER
from .errors import ContractViolation

CELL_LENGTH = 0.5  # m
MIN_CELLS, MAX_CELLS = 2, 400
WATER_WALL_H = 1000.0  # W/(m2 K)


@dataclass
class PipeThermalState:
    offset: np.ndarray  # start of each pipe in the flat cell arrays
    n_cells: np.ndarray
    parcel_mass: np.ndarray  # kg
    wall_cap: np.ndarray  # kJ/K per wall cell
    g_wall: np.ndarray  # kW/K water to wall per cell
    g_ground: np.ndarray  # kW/K wall to ground per cell (water to ground when there is no wall)
    head: np.ndarray  # ring-buffer slot of the inlet parcel
    phase: np.ndarray  # filled fraction of the inlet buffer parcel
    buffer_T: np.ndarray
    water_T: np.ndarray  # flat, ring-buffered per pipe
    wall_T: np.ndarray  # flat, fixed positions from the inlet

    @property
    def water_mass(self) -> np.ndarray:
        return self.parcel_mass * self.n_cells

    def energy(self) -> np.ndarray:
        """kJ per pipe (water, buffer and wall) relative to 0 degC."""
        out = np.empty(len(self.n_cells))
        _energy_kernel(self.offset, self.n_cells, self.parcel_mass, self.wall_cap, self.head, self.phase,
                       self.buffer_T, self.water_T, self.wall_T, out)
        return out

    def parcels(self, p: int) -> np.ndarray:
        """Water temperatures of pipe ``p`` from inlet to outlet."""
        o, n = self.offset[p], self.n_cells[p]
        return self.water_T[o + (self.head[p] + np.arange(n)) % n]

    def mean_wall_temp(self) -> np.ndarray:
        return np.array([self.wall_T[o:o + n].mean() if n else np.nan for o, n in zip(self.offset, self.n_cells)])


def init_state(length, diameter, loss_ua, wall_cap, temp, cell_length: float = CELL_LENGTH) -> PipeThermalState:
    """Pipes filled with water at ``temp``.

    ``loss_ua`` in W/(m K) and ``wall_cap`` in J/(m K). Entries with zero length
    (valves) get an inert pipe of zero mass.
    """
    length = np.asarray(length, dtype=float)
    n = len(length)
    d = np.asarray(diameter, dtype=float)
    temp = np.broadcast_to(np.asarray(temp, dtype=float), (n,))
    if cell_length <= 0:
        raise ContractViolation("cell length must be positive")
    cells = np.where(length > 0, np.clip(np.ceil(length / cell_length - 1e-9), MIN_CELLS, MAX_CELLS), 0).astype(np.int64)
    seg = np.where(cells > 0, length / np.maximum(cells, 1), 0.0)
    offset = np.r_[0, np.cumsum(cells)[:-1]].astype(np.int64)
    cw = np.asarray(wall_cap, dtype=float) * seg / 1000.0
    gw = WATER_WALL_H * math.pi * d * seg / 1000.0
    ua = np.asarray(loss_ua, dtype=float) * seg / 1000.0
    # without a wall node the water sees wall and ground conductances in series
    with np.errstate(divide="ignore", invalid="ignore"):
        series = np.where((ua > 0) & (gw > 0), 1.0 / (1.0 / np.where(ua > 0, ua, 1.0) + 1.0 / np.where(gw > 0, gw, 1.0)), 0.0)
    gg = np.where(cw > 0, ua, series)
    total = int(cells.sum())
    return PipeThermalState(
        offset=offset,
        n_cells=cells,
        parcel_mass=RHO_WATER * math.pi * d * d / 4.0 * seg,
        wall_cap=cw,
        g_wall=gw,
        g_ground=gg,
        head=np.zeros(n, dtype=np.int64),
        phase=np.zeros(n),
        buffer_T=temp.copy(),
        water_T=np.repeat(temp, cells).astype(float),
        wall_T=np.repeat(temp, cells).astype(float),
    )


# --- kernels --------------------------------------------------------------------


@jit
def _energy_kernel(offset, n_cells, m, cw, head, phase, buffer_T, water_T, wall_T, out):
    for p in range(n_cells.shape[0]):
        o = offset[p]
        n = n_cells[p]
        e = 0.0
        for i in range(n):
            t = water_T[o + (head[p] + i) % n]
            w = m[p] * (1.0 - phase[p]) if i == n - 1 else m[p]
            e += w * t * CP_WATER + cw[p] * wall_T[o + i]
        e += phase[p] * m[p] * buffer_T[p] * CP_WATER
        out[p] = e


@jit
def _pair_map(cs, cw, g_sw, g_wg, tau):
    """exp(A tau) for x = (T_water - T_g, T_wall - T_g), A = [[-a, a], [b, -(b + c)]]."""
    a = g_sw / cs
    b = g_sw / cw
    c = g_wg / cw
    tr = a + b + c
    disc = math.sqrt(max(tr * tr - 4.0 * a * c, 0.0))
    l1 = 0.5 * (-tr + disc)
    l2 = 0.5 * (-tr - disc)
    e1 = math.exp(l1 * tau)
    if disc <= 1e-14 * tr:
        return e1, 0.0, 0.0, e1
    e2 = math.exp(l2 * tau)
    pp = (l1 * e2 - l2 * e1) / (l1 - l2)
    rr = (e1 - e2) / (l1 - l2)
    return pp - rr * a, rr * a, rr * b, pp - rr * (b + c)


@jit
def _exchange(o, n, head, m, cw, gw, gg, phase, water_T, wall_T, t_g, tau):
    """Advance water/wall/ground of one pipe by ``tau`` with parcels frozen; returns ground loss kJ."""
    if tau <= 0.0:
        return 0.0
    cs = m * CP_WATER
    loss = 0.0
    cs_out = cs * (1.0 - phase)
    if cw > 0.0:
        m00, m01, m10, m11 = _pair_map(cs, cw, gw, gg, tau)
        for i in range(n - 1):
            k = o + (head + i) % n
            xs = water_T[k] - t_g
            xw = wall_T[o + i] - t_g
            ns = m00 * xs + m01 * xw
            nw = m10 * xs + m11 * xw
            loss += cs * (xs - ns) + cw * (xw - nw)
            water_T[k] = t_g + ns
            wall_T[o + i] = t_g + nw
        k = o + (head + n - 1) % n
        xs = water_T[k] - t_g
        xw = wall_T[o + n - 1] - t_g
        if cs_out > 1e-9 * cs:
            m00, m01, m10, m11 = _pair_map(cs_out, cw, gw, gg, tau)
            ns = m00 * xs + m01 * xw
            nw = m10 * xs + m11 * xw
        else:
            ns = xs
            nw = xw * math.exp(-gg / cw * tau)
        loss += cs_out * (xs - ns) + cw * (xw - nw)
        water_T[k] = t_g + ns
        wall_T[o + n - 1] = t_g + nw
    elif gg > 0.0:
        f = math.exp(-gg * tau / cs)
        for i in range(n):
            k = o + (head + i) % n
            c = cs_out if i == n - 1 else cs
            new = t_g + (water_T[k] - t_g) * (math.exp(-gg * tau / c) if (i == n - 1 and c > 1e-9 * cs) else (f if i < n - 1 else 1.0))
            loss += c * (water_T[k] - new)
            water_T[k] = new
    return loss


@jit
def pipe_step(p, q, t_in, dt, t_g, offset, n_cells, parcel_mass, wall_cap, g_wall, g_ground, head, phase, buffer_T, water_T, wall_T):
    """Advance pipe ``p`` by ``dt``; returns (mass-averaged outlet temperature, ground loss kJ)."""
    n = n_cells[p]
    if n == 0:
        return t_in, 0.0
    o = offset[p]
    m = parcel_mass[p]
    cw = wall_cap[p]
    gw = g_wall[p]
    gg = g_ground[p]
    r = dt
    e_out = 0.0
    m_out = 0.0
    loss = 0.0
    while True:
        need = (1.0 - phase[p]) * m
        if q > 0.0 and need <= q * r:
            ts = need / q
            loss += _exchange(o, n, head[p], m, cw, gw, gg, phase[p], water_T, wall_T, t_g, ts)
            k = o + (head[p] + n - 1) % n
            e_out += need * water_T[k]
            m_out += need
            water_T[k] = (phase[p] * m * buffer_T[p] + need * t_in) / m
            head[p] = (head[p] + n - 1) % n
            phase[p] = 0.0
            buffer_T[p] = t_in
            r -= ts
        else:
            loss += _exchange(o, n, head[p], m, cw, gw, gg, phase[p], water_T, wall_T, t_g, r)
            dm = q * r
            if dm > 0.0:
                k = o + (head[p] + n - 1) % n
                e_out += dm * water_T[k]
                m_out += dm
                buffer_T[p] = (phase[p] * m * buffer_T[p] + dm * t_in) / (phase[p] * m + dm)
                phase[p] += dm / m
            break
    if m_out > 0.0:
        return e_out / m_out, loss
    return water_T[o + (head[p] + n - 1) % n], loss


@jit
def pipes_kernel(q, t_in, dt, t_g, offset, n_cells, parcel_mass, wall_cap, g_wall, g_ground, head, phase, buffer_T, water_T, wall_T, out_T, out_loss):
    for p in range(q.shape[0]):
        out_T[p], out_loss[p] = pipe_step(p, q[p], t_in[p], dt, t_g, offset, n_cells, parcel_mass, wall_cap, g_wall, g_ground, head, phase, buffer_T, water_T, wall_T)


@jit
def network_kernel(
    edges, frm, to, q, inj_q, inj_T, node_T, dt, t_g,
    offset, n_cells, parcel_mass, wall_cap, g_wall, g_ground, head, phase, buffer_T, water_T, wall_T,
    out_Tin, out_T, out_loss,
):
    """Edges must be in topological order: every edge into a node comes before any edge out of it."""
    acc_q = inj_q.copy()
    acc_e = inj_q * inj_T
    for i in range(edges.shape[0]):
        e = edges[i]
        nd = frm[e]
        if acc_q[nd] > 0.0:
            node_T[nd] = acc_e[nd] / acc_q[nd]
        out_Tin[e] = node_T[nd]
        out_T[e], out_loss[e] = pipe_step(e, q[e], node_T[nd], dt, t_g, offset, n_cells, parcel_mass, wall_cap, g_wall, g_ground, head, phase, buffer_T, water_T, wall_T)
        acc_q[to[e]] += q[e]
        acc_e[to[e]] += q[e] * out_T[e]
    for nd in range(node_T.shape[0]):
        if acc_q[nd] > 0.0:
            node_T[nd] = acc_e[nd] / acc_q[nd]


def _args(state: PipeThermalState):
    return (state.offset, state.n_cells, state.parcel_mass, state.wall_cap, state.g_wall, state.g_ground,
            state.head, state.phase, state.buffer_T, state.water_T, state.wall_T)


def propagate(state: PipeThermalState, flows, inlet_temps, ambient: float = GROUND_TEMP, dt: float = 60.0, t_now: float = 0.0):
    """Advance independent pipes in place; returns (outlet temps, total loss kW)."""
    if dt <= 0:
        raise ContractViolation("dt must be positive")
    q = np.ascontiguousarray(flows, dtype=float)
    if np.any(q < 0):
        raise ContractViolation("pipe flows must be non-negative in edge orientation")
    t_in = np.ascontiguousarray(np.broadcast_to(np.asarray(inlet_temps, dtype=float), q.shape))
    out_T = np.empty_like(q)
    out_loss = np.empty_like(q)
    pipes_kernel(q, t_in, float(dt), float(ambient), *_args(state), out_T, out_loss)
    return out_T, float(out_loss.sum() / dt)


class NetworkThermal:
    """Thermal state of every pipe in a hydraulic graph plus junction temperatures."""

    def __init__(self, graph, supply_temp: float = 60.0, return_temp: float = 35.0, cell_length: float = CELL_LENGTH, ground: float = GROUND_TEMP):
        from .hydronet import RETURN, SUPPLY

        self.graph = graph
        self.ground = ground
        temp = np.where(graph.kind == RETURN, return_temp, supply_temp)
        self.state = init_state(graph.length, graph.diameter, graph.loss_ua, graph.wall_cap, temp, cell_length)
        self.node_T = np.array([return_temp if name.startswith("R") else supply_temp for name in graph.node_names], dtype=float)
        self.supply_order = self._order(SUPPLY)
        self.return_order = self._order(RETURN)
        self.out_Tin = np.zeros(graph.n_edges)
        self.out_T = np.zeros(graph.n_edges)
        self.out_loss = np.zeros(graph.n_edges)

    def _order(self, kind):
        g = self.graph
        edges = np.flatnonzero(g.kind == kind)
        # depth of an edge = number of edges between it and its root
        parent = {}
        for e in edges:
            parent[int(g.to[e] if kind == 0 else g.frm[e])] = e
        depth = {}
        for e in edges:
            d, node = 0, int(g.frm[e] if kind == 0 else g.to[e])
            while node in parent:
                d += 1
                e2 = parent[node]
                node = int(g.frm[e2] if kind == 0 else g.to[e2])
            depth[int(e)] = d
        key = sorted(edges, key=lambda e: depth[int(e)])
        return np.asarray(key if kind == 0 else key[::-1], dtype=np.int64)

    def _run(self, order, flows, injections_q, injections_T, dt, t_now):
        q = np.ascontiguousarray(flows, dtype=float)
        if np.any(q[order] < 0):
            raise ContractViolation("pipe flows must be non-negative in edge orientation")
        network_kernel(
            order, self.graph.frm, self.graph.to, q,
            np.ascontiguousarray(injections_q, dtype=float), np.ascontiguousarray(injections_T, dtype=float),
            self.node_T, float(dt), float(self.ground), *_args(self.state),
            self.out_Tin, self.out_T, self.out_loss,
        )
        return float(self.out_loss[order].sum() / dt)

    def propagate_supply(self, flows, plant_flow: float, plant_temp: float, dt: float, t_now: float = 0.0) -> float:
        """Push plant water through the supply tree; returns loss kW. Building inlet temps are then
        ``node_T[graph.frm[graph.sink_edges]]``."""
        inj_q = np.zeros(self.graph.n_nodes)
        inj_T = np.zeros(self.graph.n_nodes)
        inj_q[self.graph.supply_root] = plant_flow
        inj_T[self.graph.supply_root] = plant_temp
        return self._run(self.supply_order, flows, inj_q, inj_T, dt, t_now)

    def propagate_return(self, flows, building_flows, building_return_temps, dt: float, t_now: float = 0.0) -> float:
        g = self.graph
        inj_q = np.zeros(g.n_nodes)
        inj_T = np.zeros(g.n_nodes)
        nodes = g.to[g.sink_edges]
        np.add.at(inj_q, nodes, building_flows)
        np.add.at(inj_T, nodes, np.asarray(building_flows) * np.asarray(building_return_temps))
        with np.errstate(invalid="ignore", divide="ignore"):
            inj_T = np.where(inj_q > 0, inj_T / np.where(inj_q > 0, inj_q, 1.0), 0.0)
        return self._run(self.return_order, flows, inj_q, inj_T, dt, t_now)

    def building_supply_temps(self) -> np.ndarray:
        return self.node_T[self.graph.frm[self.graph.sink_edges]].copy()

    def plant_return_temp(self) -> float:
        return float(self.node_T[self.graph.return_root])

    def stored_energy(self) -> float:
        return float(self.state.energy().sum())


class TraceWriter:
    """Optional per-step CSV trace ``t,pipe_id,T_in,T_out,flow,loss_kW``."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(["t", "pipe_id", "T_in", "T_out", "flow", "loss_kW"])

    def write(self, t, net: NetworkThermal, flows, dt):
        for e in net.graph.pipes:
            self._w.writerow([f"{t:g}", int(e), f"{net.out_Tin[e]:.4f}", f"{net.out_T[e]:.4f}", f"{flows[e]:.5f}", f"{net.out_loss[e] / dt:.5f}"])

    def close(self):
        self._fh.close()
