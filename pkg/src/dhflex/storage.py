"""Multi-node stratified storage tanks.

Layers are indexed bottom (0) to top. One batched kernel advances any number
of tanks with the same layer count; the variants differ only in how the
district-heating water reaches the store:

* ``open``: DH water enters the top and leaves the bottom; building heating
  and DHW draw from the top and return to the bottom.
* ``coil``: DH water passes an immersed coil in the lower half; the store
  holds DHW (draw from the top, mains water refills the bottom).
* ``tank_in_tank``: DH water flows through the outer jacket; the inner DHW
  tank is heated through the shared wall.
* ``central``: same as ``open``, 50 layers, sits next to the plant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._accel import jit
from .constants import CP_WATER, MAINS_TEMP, RHO_WATER
from .errors import ContractViolation

VARIANTS = ("open", "coil", "tank_in_tank", "central")
LOCAL_LAYERS = 15
CENTRAL_LAYERS = 50
LOCAL_LOSS_REF = 2.5  # W/K for a 500 l vessel, other sizes scale with area
EFFECTIVE_CONDUCTIVITY = 1.5e-3  # kW/(m K), water plus wall conduction
HX_UA = 0.5  # kW/K for coil and tank-in-tank walls

MODE_DIRECT, MODE_COIL = 0, 1


@dataclass(frozen=True)
class TankGeometry:
    volume: float  # l, the vessel DH water flows through (outer jacket for tank-in-tank)
    layers: int
    height: float  # m
    loss_conductance: float  # W/K
    variant: str
    hx_ua: float = 0.0  # kW/K
    inner_volume: float = 0.0  # l, tank-in-tank DHW vessel

    def __post_init__(self):
        if self.layers < 2:
            raise ContractViolation("a stratified tank needs at least two layers")
        if not self.volume > 0:
            raise ContractViolation("tank volume must be positive")
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown tank variant {self.variant!r}")

    @property
    def total_volume(self) -> float:
        return self.volume + self.inner_volume

    @property
    def heat_capacity(self) -> float:
        """kWh/K"""
        return self.total_volume * RHO_WATER / 1000.0 * CP_WATER / 3600.0

    @property
    def stores_space_heating(self) -> bool:
        return self.variant in ("open", "central")


@dataclass
class TankState:
    layers: np.ndarray  # degC, bottom -> top
    inner: np.ndarray | None = None


class TankStepResult(NamedTuple):
    state: TankState
    t_charge_out: float  # DH water leaving the tank (bottom or coil outlet)
    t_discharge_out: float  # water leaving the top towards the consumer
    t_dhw_out: float  # tank-in-tank inner draw temperature
    loss: float  # kW to ambient, step average


def _scaled_loss(volume_l: float) -> float:
    return LOCAL_LOSS_REF * (volume_l / 500.0) ** (2.0 / 3.0)


def open_tank() -> TankGeometry:
    return TankGeometry(500.0, LOCAL_LAYERS, 1.6, _scaled_loss(500.0), "open")


def coil_tank() -> TankGeometry:
    return TankGeometry(200.0, LOCAL_LAYERS, 1.2, _scaled_loss(200.0), "coil", hx_ua=HX_UA)


def tank_in_tank() -> TankGeometry:
    return TankGeometry(39.0, LOCAL_LAYERS, 1.2, _scaled_loss(203.0), "tank_in_tank", hx_ua=HX_UA, inner_volume=164.0)


def central_tank(volume_l: float, mean_local_volume_l: float = 500.0) -> TankGeometry:
    """Central vessel with height twice its diameter and losses scaled from the local tanks by area."""
    v = volume_l / 1000.0
    d = (2.0 * v / math.pi) ** (1.0 / 3.0)
    ua = LOCAL_LOSS_REF * (volume_l / mean_local_volume_l) ** (2.0 / 3.0) * (mean_local_volume_l / 500.0) ** (2.0 / 3.0)
    return TankGeometry(volume_l, CENTRAL_LAYERS, 2.0 * d, ua, "central")


def make_state(geom: TankGeometry, temp: float | np.ndarray) -> TankState:
    layers = np.broadcast_to(np.asarray(temp, dtype=float), (geom.layers,)).copy()
    inner = layers.copy() if geom.variant == "tank_in_tank" else None
    return TankState(layers, inner)


def mean_temperature(geom: TankGeometry, state: TankState) -> float:
    t = float(np.mean(state.layers)) * geom.volume
    if state.inner is not None:
        t += float(np.mean(state.inner)) * geom.inner_volume
    return t / geom.total_volume


def stored_energy(geom: TankGeometry, state: TankState) -> float:
    """kJ relative to 0 degC."""
    e = state.layers.sum() * geom.volume / geom.layers * RHO_WATER / 1000.0 * CP_WATER
    if state.inner is not None:
        e += state.inner.sum() * geom.inner_volume / geom.layers * RHO_WATER / 1000.0 * CP_WATER
    return float(e)


def state_of_charge(geom: TankGeometry, state: TankState, t_min: float, t_max: float) -> float:
    if not t_min < t_max:
        raise ContractViolation("T_min must be below T_max")
    return float(np.clip((mean_temperature(geom, state) - t_min) / (t_max - t_min), 0.0, 1.0))


# --- kernels --------------------------------------------------------------------


@jit
def mix_inversions(T):
    """Pool adjacent violators: smallest-change monotone (bottom <= top) profile
    with equal layer masses; conserves the layer sum exactly up to rounding."""
    n = T.shape[0]
    sums = np.empty(n)
    counts = np.empty(n, dtype=np.int64)
    nb = 0
    for i in range(n):
        sums[nb] = T[i]
        counts[nb] = 1
        nb += 1
        while nb > 1 and sums[nb - 2] / counts[nb - 2] > sums[nb - 1] / counts[nb - 1]:
            sums[nb - 2] += sums[nb - 1]
            counts[nb - 2] += counts[nb - 1]
            nb -= 1
    i = 0
    for b in range(nb):
        mean = sums[b] / counts[b]
        for _ in range(counts[b]):
            T[i] = mean
            i += 1


@jit
def _advect(T, m_layer, m_down, t_top_in, m_up, t_bottom_in, h, work):
    """Explicit upwind step of one column; returns (T_bottom_out, T_top_out) of the old profile."""
    n = T.shape[0]
    t_bot_out = T[0]
    t_top_out = T[n - 1]
    net = m_down - m_up
    for i in range(n):
        q = 0.0
        if i == n - 1:
            q += m_down * t_top_in - m_up * T[i]
        if i == 0:
            q += m_up * t_bottom_in - m_down * T[i]
        if i < n - 1:  # interface with the layer above
            q += net * T[i + 1] if net >= 0 else net * T[i]
        if i > 0:  # interface with the layer below
            q -= net * T[i] if net >= 0 else net * T[i - 1]
        work[i] = T[i] + q * h / m_layer
    for i in range(n):
        T[i] = work[i]
    return t_bot_out, t_top_out


@jit
def _conduct(T, cond, c_layer, h, work):
    n = T.shape[0]
    for i in range(n):
        q = 0.0
        if i > 0:
            q += cond * (T[i - 1] - T[i])
        if i < n - 1:
            q += cond * (T[i + 1] - T[i])
        work[i] = T[i] + q * h / c_layer
    for i in range(n):
        T[i] = work[i]


@jit
def tanks_step_kernel(
    T, Tin, m_layer, m_layer_in, ua_loss, cond, cond_in, ua_hx, ua_couple, mode, has_inner,
    m_ch, t_ch, m_dis, t_dis_ret, m_din, t_din_ret, t_amb, dt,
    out_ch, out_dis, out_din, out_loss,
):
    K, L = T.shape
    work = np.empty(L)
    for k in range(K):
        m_direct = m_ch[k] if mode[k] == MODE_DIRECT else 0.0
        ratio = max(m_direct, m_dis[k]) * dt / m_layer[k]
        if has_inner[k]:
            ratio = max(ratio, m_din[k] * dt / m_layer_in[k])
        n_sub = max(1, int(math.ceil(ratio - 1e-12)))
        h = dt / n_sub
        c_layer = m_layer[k] * CP_WATER
        c_layer_in = m_layer_in[k] * CP_WATER
        acc_ch = 0.0
        acc_dis = 0.0
        acc_din = 0.0
        loss = 0.0
        for _ in range(n_sub):
            t_bot, t_top = _advect(T[k], m_layer[k], m_direct, t_ch[k], m_dis[k], t_dis_ret[k], h, work)
            acc_dis += t_top
            if mode[k] == MODE_DIRECT:
                acc_ch += t_bot
            else:
                # coil: fluid passes the exchanger layers from the top of the coil down
                tf = t_ch[k]
                if m_ch[k] > 0.0:
                    cap = m_ch[k] * CP_WATER
                    for i in range(L - 1, -1, -1):
                        if ua_hx[k, i] > 0.0:
                            eff = 1.0 - math.exp(-ua_hx[k, i] / cap)
                            q = cap * eff * (tf - T[k, i])
                            tf -= q / cap
                            T[k, i] += q * h / c_layer
                acc_ch += tf
            _conduct(T[k], cond[k], c_layer, h, work)
            if has_inner[k]:
                t_bi, t_ti = _advect(Tin[k], m_layer_in[k], 0.0, 0.0, m_din[k], t_din_ret[k], h, work)
                acc_din += t_ti
                _conduct(Tin[k], cond_in[k], c_layer_in, h, work)
                for i in range(L):
                    ua = ua_couple[k] / L
                    teq = (c_layer * T[k, i] + c_layer_in * Tin[k, i]) / (c_layer + c_layer_in)
                    f = math.exp(-ua * h * (1.0 / c_layer + 1.0 / c_layer_in))
                    T[k, i] = teq + (T[k, i] - teq) * f
                    Tin[k, i] = teq + (Tin[k, i] - teq) * f
                mix_inversions(Tin[k])
            ua = ua_loss[k] / L
            f = math.exp(-ua * h / c_layer)
            for i in range(L):
                new = t_amb[k] + (T[k, i] - t_amb[k]) * f
                loss += (T[k, i] - new) * c_layer
                T[k, i] = new
            mix_inversions(T[k])
        out_ch[k] = acc_ch / n_sub
        out_dis[k] = acc_dis / n_sub
        out_din[k] = acc_din / n_sub if has_inner[k] else 0.0
        out_loss[k] = loss / dt


class TankBank:
    """Struct-of-arrays view of several tanks with equal layer count."""

    def __init__(self, geoms: list[TankGeometry]):
        if not geoms:
            raise ContractViolation("empty tank bank")
        L = geoms[0].layers
        if any(g.layers != L for g in geoms):
            raise ContractViolation("all tanks in a bank need the same layer count")
        K = len(geoms)
        self.geoms = geoms
        self.layers = L
        self.m_layer = np.array([g.volume * RHO_WATER / 1000.0 / L for g in geoms])
        self.m_layer_in = np.array([max(g.inner_volume, 1e-9) * RHO_WATER / 1000.0 / L for g in geoms])
        self.ua_loss = np.array([g.loss_conductance / 1000.0 for g in geoms])
        area = np.array([g.volume / 1000.0 / g.height for g in geoms])
        self.cond = np.array([EFFECTIVE_CONDUCTIVITY * a * L / g.height for a, g in zip(area, geoms)])
        area_in = np.array([g.inner_volume / 1000.0 / g.height for g in geoms])
        self.cond_in = np.array([EFFECTIVE_CONDUCTIVITY * a * L / g.height for a, g in zip(area_in, geoms)])
        self.mode = np.array([MODE_COIL if g.variant == "coil" else MODE_DIRECT for g in geoms], dtype=np.int64)
        self.has_inner = np.array([g.variant == "tank_in_tank" for g in geoms])
        self.ua_hx = np.zeros((K, L))
        for k, g in enumerate(geoms):
            if g.variant == "coil":
                span = L // 2  # coil occupies the lower half
                self.ua_hx[k, :span] = g.hx_ua / span
        self.ua_couple = np.array([g.hx_ua if g.variant == "tank_in_tank" else 0.0 for g in geoms])
        self.c_layer = self.m_layer * CP_WATER
        self.c_layer_in = np.where(self.has_inner, self.m_layer_in * CP_WATER, 0.0)

    def energy(self, T, Tin) -> np.ndarray:
        """kJ per tank relative to 0 degC."""
        return T.sum(axis=1) * self.c_layer + Tin.sum(axis=1) * self.c_layer_in

    def step(self, T, Tin, m_ch, t_ch, m_dis, t_dis_ret, m_din, t_din_ret, t_amb, dt):
        """Advance all tanks in place; returns (t_charge_out, t_discharge_out, t_dhw_out, loss_kW)."""
        for arr in (m_ch, m_dis, m_din):
            if np.any(np.asarray(arr) < 0):
                raise ContractViolation("tank flows must be non-negative")
        if dt <= 0:
            raise ContractViolation("dt must be positive")
        K = len(self.geoms)
        out = [np.empty(K) for _ in range(4)]
        f = lambda x: np.ascontiguousarray(np.broadcast_to(np.asarray(x, dtype=float), (K,)))
        tanks_step_kernel(
            T, Tin, self.m_layer, self.m_layer_in, self.ua_loss, self.cond, self.cond_in, self.ua_hx,
            self.ua_couple, self.mode, self.has_inner,
            f(m_ch), f(t_ch), f(m_dis), f(t_dis_ret), f(m_din), f(t_din_ret), f(t_amb), float(dt),
            *out,
        )
        return tuple(out)


def tank_step(
    geom: TankGeometry,
    state: TankState,
    charge_flow: float,
    charge_temp: float,
    discharge_flow: float,
    ambient: float,
    dt: float,
    discharge_return_temp: float | None = None,
    dhw_flow: float = 0.0,
) -> TankStepResult:
    """Advance one tank by ``dt`` seconds.

    ``charge_flow`` (kg/s) at ``charge_temp`` is the DH side. ``discharge_flow``
    leaves the top of the (outer/only) vessel and comes back at the bottom at
    ``discharge_return_temp`` (mains temperature by default). ``dhw_flow`` is the
    draw from the inner vessel of a tank-in-tank.
    """
    bank = TankBank([geom])
    T = state.layers[None, :].astype(float).copy()
    Tin = (state.inner if state.inner is not None else np.zeros(geom.layers))[None, :].astype(float).copy()
    ret = MAINS_TEMP if discharge_return_temp is None else discharge_return_temp
    ch, dis, din, loss = bank.step(T, Tin, charge_flow, charge_temp, discharge_flow, ret, dhw_flow, MAINS_TEMP, ambient, dt)
    new = TankState(T[0], Tin[0] if state.inner is not None else None)
    return TankStepResult(new, float(ch[0]), float(dis[0]), float(din[0]), float(loss[0]))


def assign_types(n: int, seed: int) -> list[str]:
    """Uniform random local tank type per building."""
    rng = np.random.default_rng(seed)
    kinds = ("open", "coil", "tank_in_tank")
    return [kinds[i] for i in rng.integers(0, 3, size=n)]


def local_tank(kind: str) -> TankGeometry:
    return {"open": open_tank, "coil": coil_tank, "tank_in_tank": tank_in_tank}[kind]()
