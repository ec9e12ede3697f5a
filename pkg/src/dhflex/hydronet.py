"""Network topology, pipe sizing and quadratic hydraulics.

Layout: a supply tree (plant -> street feeders -> taps -> service pipes ->
building), one valve edge per building into the mirrored return tree, and the
pump between return and supply root. Supply edges point away from the plant,
return edges towards it, so design flows are non-negative in edge orientation.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constants import CP_WATER, RHO_WATER
from .errors import ContractViolation, SizingError, SolverError

SUPPLY, RETURN, SINK = 0, 1, 2
CLOSED_RESISTANCE = 1e12
LINEAR_BELOW = 1e-4  # kg/s
VISCOSITY = 4.0e-4  # Pa s, water near 60 degC
ROUGHNESS = 1.0e-4  # m
STEEL_RHO, STEEL_CP = 7850.0, 460.0

# DN: (inner diameter m, wall thickness m, loss conductance W/(m K))
DN_CATALOGUE = {
    25: (0.0285, 0.0026, 0.30),
    32: (0.0372, 0.0026, 0.33),
    40: (0.0431, 0.0026, 0.36),
    50: (0.0545, 0.0029, 0.40),
    65: (0.0703, 0.0029, 0.45),
    80: (0.0825, 0.0032, 0.50),
    100: (0.1071, 0.0036, 0.55),
}


@dataclass(frozen=True)
class TopologyConfig:
    buildings_per_street: tuple[int, ...] = (25, 25, 25, 25)
    feeder_lengths: tuple[float, ...] = (40.0, 70.0, 100.0, 130.0)  # m, plant to first tap
    spacing: float = 10.0  # m between taps along a street
    service_length: float = 8.0  # m, tap to building
    design_flow: float | tuple[float, ...] = 0.192  # kg/s per building
    max_gradient: float = 200.0  # Pa/m
    catalogue: tuple[int, ...] = tuple(DN_CATALOGUE)
    loss_scale: float = 1.0  # multiplies the catalogue loss conductances

    @property
    def n_buildings(self) -> int:
        return int(sum(self.buildings_per_street))

    @property
    def trench_length(self) -> float:
        street = sum(f + (n - 1) * self.spacing for f, n in zip(self.feeder_lengths, self.buildings_per_street))
        return street + self.n_buildings * self.service_length

    @classmethod
    def from_dict(cls, d: dict) -> "TopologyConfig":
        d = dict(d)
        for key in ("buildings_per_street", "feeder_lengths", "catalogue"):
            if key in d:
                d[key] = tuple(d[key])
        if isinstance(d.get("design_flow"), list):
            d["design_flow"] = tuple(d["design_flow"])
        return cls(**d)


def design_flow_for(design_load_kw, delta_t: float = 20.0):
    """Substation design flow (kg/s) for a design load and primary temperature drop."""
    return np.asarray(design_load_kw, dtype=float) / (CP_WATER * delta_t)


def friction_factor(q: float, d: float, roughness: float = ROUGHNESS) -> float:
    """Swamee-Jain turbulent friction factor; laminar 64/Re below Re 2300."""
    re = 4.0 * abs(q) / (math.pi * d * VISCOSITY)
    if re < 2300.0:
        return 64.0 / max(re, 1e-9)
    return 0.25 / math.log10(roughness / (3.7 * d) + 5.74 / re**0.9) ** 2


def resistance(length: float, d: float, q_design: float) -> float:
    """k in Pa/(kg/s)^2 so that dp = k q |q| (Darcy-Weisbach, friction fixed at design flow)."""
    area = math.pi * d * d / 4.0
    return friction_factor(q_design, d) * length / (2.0 * RHO_WATER * d * area * area)


@dataclass
class NetworkGraph:
    node_names: list[str]
    frm: np.ndarray
    to: np.ndarray
    kind: np.ndarray
    length: np.ndarray
    dn: np.ndarray
    diameter: np.ndarray
    k: np.ndarray
    loss_ua: np.ndarray  # W/(m K)
    wall_cap: np.ndarray  # J/(m K)
    design_flow: np.ndarray
    sink_edges: np.ndarray  # edge index per building
    supply_root: int = 0
    return_root: int = 1
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        n_e = len(self.frm)
        n_b = len(self.sink_edges)
        self.n_nodes = len(self.node_names)
        self.pipes = np.flatnonzero(self.kind != SINK)
        # downstream[e, b] = 1 when building b's water passes edge e
        self.downstream = self._downstream(n_e, n_b)
        self.path = self.downstream.T.tocsr()
        self.incidence = sp.csr_matrix(
            (np.r_[np.ones(n_e), -np.ones(n_e)], (np.r_[self.to, self.frm], np.r_[np.arange(n_e), np.arange(n_e)])),
            shape=(self.n_nodes, n_e),
        )
        self._check()

    def _downstream(self, n_e, n_b):
        parent_in = {}  # node -> supply edge feeding it
        ret_out = {}  # node -> return edge leaving it
        for e in range(n_e):
            if self.kind[e] == SUPPLY:
                parent_in[self.to[e]] = e
            elif self.kind[e] == RETURN:
                ret_out[self.frm[e]] = e
        rows, cols = [], []
        for b, se in enumerate(self.sink_edges):
            rows.append(se)
            cols.append(b)
            node = self.frm[se]
            while node in parent_in:
                e = parent_in[node]
                rows.append(e)
                cols.append(b)
                node = self.frm[e]
            node = self.to[se]
            while node in ret_out:
                e = ret_out[node]
                rows.append(e)
                cols.append(b)
                node = self.to[e]
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_e, n_b))

    def _check(self):
        supply_len = self.length[self.kind == SUPPLY].sum()
        return_len = self.length[self.kind == RETURN].sum()
        if not math.isclose(supply_len, return_len, rel_tol=1e-12, abs_tol=1e-9):
            raise ContractViolation("supply and return pipe lengths differ")
        # reachability: every building path must start at the supply root and end at the return root
        n_b = len(self.sink_edges)
        if n_b:
            g = sp.csr_matrix((np.ones(len(self.frm)), (self.frm, self.to)), shape=(self.n_nodes,) * 2)
            g = g + g.T
            n_comp, lab = sp.csgraph.connected_components(g, directed=False)
            if n_comp != 1:
                raise ContractViolation("network graph is not connected")

    @property
    def n_buildings(self) -> int:
        return len(self.sink_edges)

    @property
    def n_edges(self) -> int:
        return len(self.frm)

    def gradients(self, flows=None) -> np.ndarray:
        """Pa/m along every pipe edge (NaN for valves)."""
        q = self.design_flow if flows is None else np.asarray(flows, dtype=float)
        g = np.full(self.n_edges, np.nan)
        p = self.pipes
        g[p] = self.k[p] * q[p] ** 2 / self.length[p]
        return g


def _size(length, q, catalogue, limit, label):
    for dn in sorted(catalogue):
        d = DN_CATALOGUE[dn][0]
        k = resistance(length, d, q)
        if k * q * q / length <= limit:
            return dn, k
    raise SizingError(f"no diameter in the catalogue keeps segment {label} below {limit} Pa/m at {q:.3f} kg/s")


def build_topology(config: TopologyConfig | None = None) -> NetworkGraph:
    cfg = config or TopologyConfig()
    if len(cfg.feeder_lengths) != len(cfg.buildings_per_street):
        raise ContractViolation("one feeder length per street is required")
    if any(n < 1 for n in cfg.buildings_per_street):
        raise ContractViolation("every street needs at least one building")
    n_b = cfg.n_buildings
    q_b = np.broadcast_to(np.asarray(cfg.design_flow, dtype=float), (n_b,))
    if np.any(q_b <= 0):
        raise ContractViolation("design flows must be positive")

    names = ["S:plant", "R:plant"]
    segs = []  # (supply_from, supply_to, length, label, buildings downstream)

    def node(tag):
        names.append("S:" + tag)
        names.append("R:" + tag)
        return len(names) - 2

    sink_nodes = []
    b = 0
    for s, (feeder, n) in enumerate(zip(cfg.feeder_lengths, cfg.buildings_per_street)):
        prev = 0
        members = list(range(b, b + n))
        for i in range(n):
            tap = node(f"s{s}t{i}")
            seg_len = feeder if i == 0 else cfg.spacing
            segs.append((prev, tap, seg_len, f"street{s}/seg{i}", members[i:]))
            if cfg.service_length > 0:
                bn = node(f"b{b}")
                segs.append((tap, bn, cfg.service_length, f"street{s}/service{b}", [b]))
            else:
                bn = tap
            sink_nodes.append(bn)
            prev = tap
            b += 1

    frm, to, kind, length, dn, diam, k, ua, wall, qd, labels = ([] for _ in range(11))
    for f, t, L, label, members in segs:
        if L <= 0:
            raise ContractViolation(f"segment {label} has non-positive length")
        q = float(q_b[members].sum())
        size, kk = _size(L, q, cfg.catalogue, cfg.max_gradient, label)
        d, wt, u = DN_CATALOGUE[size]
        wc = STEEL_RHO * math.pi * (d + wt) * wt * STEEL_CP
        for direction in (SUPPLY, RETURN):
            if direction == SUPPLY:
                frm.append(f)
                to.append(t)
            else:  # return mirror: child -> parent
                frm.append(t + 1)
                to.append(f + 1)
            kind.append(direction)
            length.append(L)
            dn.append(size)
            diam.append(d)
            k.append(kk)
            ua.append(u * cfg.loss_scale)
            wall.append(wc)
            qd.append(q)
            labels.append(("supply/" if direction == SUPPLY else "return/") + label)
    sink_edges = []
    for bi, bn in enumerate(sink_nodes):
        sink_edges.append(len(frm))
        frm.append(bn)
        to.append(bn + 1)
        kind.append(SINK)
        length.append(0.0)
        dn.append(0)
        diam.append(0.0)
        k.append(CLOSED_RESISTANCE)
        ua.append(0.0)
        wall.append(0.0)
        qd.append(float(q_b[bi]))
        labels.append(f"valve/b{bi}")
    arr = lambda x, t=float: np.asarray(x, dtype=t)
    return NetworkGraph(
        names, arr(frm, np.int64), arr(to, np.int64), arr(kind, np.int64), arr(length), arr(dn, np.int64),
        arr(diam), arr(k), arr(ua), arr(wall), arr(qd), arr(sink_edges, np.int64), labels=labels,
    )


def simple_graph(pipe_edges, sink_pairs, n_nodes=2) -> NetworkGraph:
    """Hand-built graph for tests and toy cases.

    ``pipe_edges`` are (from, to, k, kind) tuples; ``sink_pairs`` are (from, to)
    valve edges. Node 0 is the supply root, node 1 the return root.
    """
    frm = [e[0] for e in pipe_edges] + [s[0] for s in sink_pairs]
    to = [e[1] for e in pipe_edges] + [s[1] for s in sink_pairs]
    kind = [e[3] for e in pipe_edges] + [SINK] * len(sink_pairs)
    k = [e[2] for e in pipe_edges] + [CLOSED_RESISTANCE] * len(sink_pairs)
    n_e = len(frm)
    length = [1.0 if kd != SINK else 0.0 for kd in kind]
    z = np.zeros(n_e)
    return NetworkGraph(
        [f"n{i}" for i in range(n_nodes)], np.array(frm), np.array(to), np.array(kind), np.array(length),
        np.zeros(n_e, dtype=np.int64), z.copy(), np.array(k, dtype=float), z.copy(), z.copy(), z.copy(),
        np.arange(len(pipe_edges), n_e),
    )


@dataclass
class FlowSolution:
    flows: np.ndarray  # kg/s per edge, positive in edge orientation
    pressures: np.ndarray  # Pa per node
    iterations: int = 0
    residual: float = 0.0


def _flow_of(dp, k):
    """Inverse of the smoothed law dp = k q|q| (linear below LINEAR_BELOW)."""
    lin = k * LINEAR_BELOW
    thresh = lin * LINEAR_BELOW
    big = np.abs(dp) >= thresh
    q = np.where(big, np.sign(dp) * np.sqrt(np.abs(dp) / k), dp / lin)
    dq = np.where(big, 0.5 / np.sqrt(np.maximum(np.abs(dp), thresh) * k), 1.0 / lin)
    return q, dq


def solve_flows(graph: NetworkGraph, valve_resistances, pump_head: float, tol: float = 1e-6, max_iter: int = 100) -> FlowSolution:
    """Newton iteration on nodal pressures with the pump as a fixed head between the roots."""
    if not pump_head > 0:
        raise ContractViolation("pump head must be positive")
    rv = np.asarray(valve_resistances, dtype=float)
    if rv.shape != (graph.n_buildings,):
        raise ContractViolation("one valve resistance per building is required")
    if np.any(rv < 0) or np.any(np.isnan(rv)):
        raise ContractViolation("valve resistances must be non-negative")
    rv = np.clip(rv, 1e-6, CLOSED_RESISTANCE)
    n = graph.n_nodes
    if graph.n_buildings and np.all(rv >= CLOSED_RESISTANCE):
        p = np.zeros(n)
        p[graph.supply_root] = pump_head
        return FlowSolution(np.zeros(graph.n_edges), p, 0, 0.0)

    k = graph.k.copy()
    k[graph.sink_edges] = rv
    fixed = np.zeros(n, dtype=bool)
    fixed[[graph.supply_root, graph.return_root]] = True
    free = np.flatnonzero(~fixed)
    A = graph.incidence  # +1 at the edge head, -1 at its tail: row sum = inflow - outflow

    p = np.zeros(n)
    p[graph.supply_root] = pump_head
    # initial guess: linear network with conductance 1/k, exact for the linearised law
    if len(free):
        G = sp.diags(1.0 / k)
        L = (A @ G @ A.T).tocsr()
        rhs = -L[free][:, fixed] @ p[fixed]
        p[free] = spla.spsolve(L[free][:, free].tocsc(), rhs)

    def residual(pp):
        dp = pp[graph.frm] - pp[graph.to]
        q, dq = _flow_of(dp, k)
        return q, dq, A @ q

    q, dq, F = residual(p)
    it = 0
    norm = np.abs(F[free]).max() if len(free) else 0.0
    while norm > tol:
        if it >= max_iter:
            raise SolverError(f"hydraulic Newton iteration did not converge in {max_iter} steps", norm)
        J = (A @ sp.diags(dq) @ A.T).tocsr()[free][:, free]
        step = spla.spsolve(J.tocsc(), F[free])
        lam = 1.0
        while True:
            trial = p.copy()
            trial[free] = p[free] + lam * step
            q_t, dq_t, F_t = residual(trial)
            n_t = np.abs(F_t[free]).max()
            if n_t < norm or lam < 1e-6:
                break
            lam *= 0.5
        p, q, dq, F, norm = trial, q_t, dq_t, F_t, n_t
        it += 1
    return FlowSolution(q, p, it, float(norm))


def tree_flows(graph: NetworkGraph, building_flows) -> np.ndarray:
    """Edge flows when every building draws exactly its demanded flow."""
    return graph.downstream @ np.asarray(building_flows, dtype=float)


def pump_operating_point(graph: NetworkGraph, building_flows, dp_substation: float = 30e3):
    """Head needed to give the worst-placed consumer ``dp_substation`` and the
    valve resistances that realise ``building_flows`` at that head.

    Returns (edge_flows, pump_head, valve_resistances)."""
    qb = np.asarray(building_flows, dtype=float)
    q = tree_flows(graph, qb)
    drop = graph.k * q * np.abs(q)
    drop[graph.sink_edges] = 0.0
    path_drop = graph.path @ drop
    head = float(path_drop.max() + dp_substation) if len(qb) else dp_substation
    with np.errstate(divide="ignore"):
        rv = np.where(qb > 0, (head - path_drop) / np.maximum(qb, 1e-300) ** 2, CLOSED_RESISTANCE)
    return q, head, np.minimum(rv, CLOSED_RESISTANCE)


def pump_power(head: float, total_flow: float, efficiency: float = 0.7) -> float:
    """Electrical pump power in kW."""
    return head * total_flow / RHO_WATER / efficiency / 1000.0


def dump_edges_csv(graph: NetworkGraph, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_from", "node_to", "length_m", "dn", "k"])
        for e in range(graph.n_edges):
            w.writerow([graph.node_names[graph.frm[e]], graph.node_names[graph.to[e]], f"{graph.length[e]:g}", int(graph.dn[e]), f"{graph.k[e]:.6g}"])
    return path
