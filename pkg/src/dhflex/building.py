"""Three-node RC building model, infiltration linearisation, population sampling
and the reference thermostat.

Resistances are in degC/kW, capacitances in kWh/degC, powers in kW. Internally
capacitances are converted to kJ/K so that ``C dT/dt`` with ``dt`` in seconds
balances powers in kW.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from ._accel import jit
from .constants import CP_WATER, MAINS_TEMP
from .errors import ContractViolation

RHO_AIR = 1.2  # kg/m3
CP_AIR = 1.005  # kJ/(kg K)
# leakage area enters the flow formula in cm2 and yields L/s
LEAKAGE_FLOW_FACTOR = 1e4 / 1e3

T_INSIDE_DESIGN = 20.0
T_AMBIENT_DESIGN = -8.0
ENVELOPE_RESISTANCE = 2.87  # degC/kW, R_ie + R_ea of the standard building
DESIGN_SUPPLY, DESIGN_RETURN = 70.0, 30.0
INFIL_DT0, INFIL_U0 = 12.5, 3.5
# reheat + margin; closes the sizing sum of the standard building at 16.04 kW
STANDARD_DESIGN_LOAD = 16.04

SUBSTATION_EFFECTIVENESS = 0.9
SECONDARY_CURVE_OFFSET = 5.0  # building circuit runs this far below the network curve
THERMOSTAT_LOW, THERMOSTAT_HIGH = 19.5, 20.5


@dataclass(frozen=True)
class BuildingParams:
    R_h: float
    R_ih: float
    R_ie: float
    R_ea: float
    R_ia: float
    C_i: float
    C_h: float
    C_e: float
    A_piv: float
    B_piv: float
    C_S: float = 4.35e-4
    C_W: float = 1.61e-4
    A_L: float = 621e-4  # m2
    design_load: float = STANDARD_DESIGN_LOAD

    def __post_init__(self):
        for name in ("R_h", "R_ih", "R_ie", "R_ea", "R_ia", "C_i", "C_h", "C_e"):
            if not getattr(self, name) > 0:
                raise ContractViolation(f"{name} must be strictly positive")

    @property
    def max_primary_flow(self) -> float:
        """Fully open valve flow, kg/s (1.5x the secondary circuit capacity flow)."""
        return 1.5 / (self.R_h * CP_WATER)


@dataclass(frozen=True)
class BuildingState:
    T_i: float = 20.0
    T_e: float = 15.0
    T_hout: float = 20.0
    valve: float = 0.0
    heating: bool = False
    dhw: float = 0.0


@dataclass(frozen=True)
class Disturbances:
    T_a: float
    U: float = 0.0
    Ra: float = 0.0
    P_el: float = 0.0
    dhw: float = 0.0

    def __post_init__(self):
        if self.Ra < 0 or self.dhw < 0:
            raise ContractViolation("solar gain and DHW draw must be non-negative")


@dataclass(frozen=True)
class ValveCommand:
    heating: bool
    secondary_setpoint: float
    dhw_forced: bool


def infiltration_linearize(C_S, C_W, A_L, dT0=INFIL_DT0, U0=INFIL_U0, rho=RHO_AIR, cp=CP_AIR):
    """Linearise the stack/wind infiltration loss around (dT0, U0).

    The exact loss is ``K dT sqrt(C_S dT + C_W U^2)`` with ``K = A_L rho cp``.
    A first-order expansion gives ``dT/R_ia - A_piv U - B_piv`` so that, as a
    gain into the indoor node, infiltration reads ``(T_a - T_i)/R_ia + A_piv U + B_piv``.
    Returns ``(R_ia, A_piv, B_piv)``; ``R_ia`` is ``inf`` for an airtight building.
    """
    rad = C_S * dT0 + C_W * U0**2
    if not rad > 0:
        raise ContractViolation(f"non-positive radicand {rad!r} in infiltration formula")
    if A_L == 0:
        return math.inf, 0.0, 0.0
    K = A_L * LEAKAGE_FLOW_FACTOR * rho * cp
    s0 = math.sqrt(rad)
    g_dt = K * (3 * C_S * dT0 + 2 * C_W * U0**2) / (2 * s0)
    g_u = K * C_W * U0 * dT0 / s0
    c = -K * dT0 * (C_S * dT0 + 2 * C_W * U0**2) / (2 * s0)
    return 1.0 / g_dt, -g_u, -c


def infiltration_exact(C_S, C_W, A_L, dT, U, rho=RHO_AIR, cp=CP_AIR):
    """Exact infiltration loss (kW) for an indoor-outdoor difference ``dT``."""
    return A_L * LEAKAGE_FLOW_FACTOR * rho * cp * dT * np.sqrt(C_S * dT + C_W * U**2)


def _infil_design(R_ia, A_piv, B_piv):
    dT = T_INSIDE_DESIGN - T_AMBIENT_DESIGN
    return dT / R_ia - A_piv * INFIL_U0 - B_piv


STANDARD = dict(C_i=20.13, C_e=21.23, C_h=0.17, R_ie=1.0, C_S=4.35e-4, C_W=1.61e-4)
STANDARD["R_ea"] = ENVELOPE_RESISTANCE - STANDARD["R_ie"]
STATIC_DESIGN_LOAD = (T_INSIDE_DESIGN - T_AMBIENT_DESIGN) / ENVELOPE_RESISTANCE
_STD_INFIL = infiltration_linearize(STANDARD["C_S"], STANDARD["C_W"], 621e-4)
REHEAT_ALLOWANCE = STANDARD_DESIGN_LOAD - STATIC_DESIGN_LOAD - _infil_design(*_STD_INFIL)


def derive_params(C_i, C_e, C_h, R_ie, R_ea, C_S, C_W, A_L=621e-4) -> BuildingParams:
    """Complete a parameter set with infiltration terms and radiator sizing."""
    R_ia, A_piv, B_piv = infiltration_linearize(C_S, C_W, A_L)
    static = (T_INSIDE_DESIGN - T_AMBIENT_DESIGN) / (R_ie + R_ea)
    infil = _infil_design(R_ia, A_piv, B_piv) if A_L > 0 else 0.0
    design = static + infil + REHEAT_ALLOWANCE
    return BuildingParams(
        R_h=(DESIGN_SUPPLY - DESIGN_RETURN) / design,
        R_ih=(DESIGN_RETURN - T_INSIDE_DESIGN) / design,
        R_ie=R_ie,
        R_ea=R_ea,
        R_ia=R_ia,
        C_i=C_i,
        C_h=C_h,
        C_e=C_e,
        A_piv=A_piv,
        B_piv=B_piv,
        C_S=C_S,
        C_W=C_W,
        A_L=A_L,
        design_load=design,
    )


def standard_building() -> BuildingParams:
    return derive_params(**STANDARD)


def sample_population(n: int, seed: int, spread: float = 0.2) -> list[BuildingParams]:
    """Draw ``n`` buildings around the standard one (normal, relative std ``spread``)."""
    if n < 1:
        raise ContractViolation("population needs at least one building")
    rng = np.random.default_rng(seed)
    keys = ("C_i", "C_e", "C_h", "C_W", "C_S", "R_ie", "R_ea")
    draws = {}
    for key in keys:
        mu = STANDARD[key]
        x = rng.normal(mu, spread * mu, size=n)
        bad = x <= 0
        while bad.any():
            x[bad] = rng.normal(mu, spread * mu, size=bad.sum())
            bad = x <= 0
        draws[key] = x
    return [derive_params(**{k: float(draws[k][j]) for k in keys}) for j in range(n)]


def population_table(pop: list[BuildingParams]) -> dict[str, np.ndarray]:
    return {f.name: np.array([getattr(p, f.name) for p in pop]) for f in fields(BuildingParams)}


# --- time integration ---------------------------------------------------------


def system_matrices(p: BuildingParams, heating: bool):
    """Capacitance diagonal (kJ/K) and conductance matrix of the linear system
    ``C dT/dt = A T + b`` with states (T_i, T_e, T_hout)."""
    g_ih, g_ie, g_ea, g_h = 1 / p.R_ih, 1 / p.R_ie, 1 / p.R_ea, 1 / p.R_h
    g_ia = 0.0 if math.isinf(p.R_ia) else 1 / p.R_ia
    A = np.array(
        [
            [-(g_ih + g_ie + g_ia), g_ie, g_ih],
            [g_ie, -(g_ie + g_ea), 0.0],
            [g_ih, 0.0, -(g_ih + (g_h if heating else 0.0))],
        ]
    )
    C = np.array([p.C_i, p.C_e, p.C_h]) * 3600.0
    return C, A


def input_vector(p: BuildingParams, T_a, U, Ra, P_el, heating, T_hin):
    g_ia = 0.0 if math.isinf(p.R_ia) else 1 / p.R_ia
    p_iv = p.A_piv * U + p.B_piv
    return np.array([T_a * g_ia + p_iv + P_el + Ra, T_a / p.R_ea, (T_hin / p.R_h) if heating else 0.0])


def cn_operators(pop: list[BuildingParams], dt: float):
    """Per-building Crank-Nicolson operators, shape (n, 2, 3, 3) indexed by heating flag."""
    n = len(pop)
    M = np.empty((n, 2, 3, 3))
    N = np.empty((n, 2, 3, 3))
    for j, p in enumerate(pop):
        for h in (0, 1):
            C, A = system_matrices(p, bool(h))
            Cd = np.diag(C / dt)
            M[j, h] = np.linalg.inv(Cd - 0.5 * A)
            N[j, h] = Cd + 0.5 * A
    return M, N


@jit
def cn_step_kernel(M, N, T, heating, b, R_h, T_hin, out_T, out_q):
    """Advance every building one step; ``out_q`` gets the radiator heat input (kW)."""
    n = T.shape[0]
    rhs = np.empty(3)
    for j in range(n):
        h = 1 if heating[j] else 0
        for r in range(3):
            acc = b[j, r]
            for c in range(3):
                acc += N[j, h, r, c] * T[j, c]
            rhs[r] = acc
        for r in range(3):
            acc = 0.0
            for c in range(3):
                acc += M[j, h, r, c] * rhs[c]
            out_T[j, r] = acc
        if h == 1:
            out_q[j] = (T_hin[j] - 0.5 * (T[j, 2] + out_T[j, 2])) / R_h[j]
        else:
            out_q[j] = 0.0


def secondary_supply(p: BuildingParams, T_s, T_hout, flow, setpoint):
    """Radiator inlet temperature reachable through the substation exchanger."""
    if flow <= 0 or T_s <= T_hout:
        return T_hout
    c_sec = 1.0 / p.R_h
    q = SUBSTATION_EFFECTIVENESS * min(flow * CP_WATER, c_sec) * (T_s - T_hout)
    return min(setpoint, T_hout + q / c_sec)


def requested_flow(p: BuildingParams, T_s, T_hout, setpoint) -> float:
    """Primary flow (kg/s) needed to bring the radiator inlet to ``setpoint``."""
    need = (setpoint - T_hout) / p.R_h
    if need <= 0:
        return 0.0
    dT = SUBSTATION_EFFECTIVENESS * (T_s - T_hout)
    if dT <= 1.0:
        return p.max_primary_flow
    return min(need / (CP_WATER * dT), p.max_primary_flow)


def dhw_flow(T_s, q_dhw) -> float:
    if q_dhw <= 0:
        return 0.0
    dT = SUBSTATION_EFFECTIVENESS * max(T_s - MAINS_TEMP, 1.0)
    return q_dhw / (CP_WATER * dT)


def step(
    params: BuildingParams,
    state: BuildingState,
    disturbances: Disturbances,
    supply_temp: float,
    supply_flow: float,
    dt: float,
    secondary_setpoint: float = 60.0,
):
    """Advance one building by ``dt`` seconds.

    ``supply_flow`` is the primary flow into the space-heating side of the
    substation. Returns the new state and the heat drawn from the network (kW)
    for space heating and DHW together.
    """
    if dt > 60.0 + 1e-9:
        raise ContractViolation("building step must not exceed 60 s")
    if supply_flow < 0:
        raise ContractViolation("supply flow must be non-negative")
    heating = state.heating and supply_flow > 0
    T_hin = secondary_supply(params, supply_temp, state.T_hout, supply_flow, secondary_setpoint)
    b = input_vector(params, disturbances.T_a, disturbances.U, disturbances.Ra, disturbances.P_el, heating, T_hin)
    M, N = cn_operators([params], dt)
    T = np.array([[state.T_i, state.T_e, state.T_hout]])
    out_T = np.empty_like(T)
    out_q = np.empty(1)
    cn_step_kernel(M, N, T, np.array([heating]), b[None, :], np.array([params.R_h]), np.array([T_hin]), out_T, out_q)
    new = replace(
        state,
        T_i=float(out_T[0, 0]),
        T_e=float(out_T[0, 1]),
        T_hout=float(out_T[0, 2]),
        valve=min(supply_flow / params.max_primary_flow, 1.0),
        dhw=disturbances.dhw,
    )
    return new, float(out_q[0]) + disturbances.dhw


def reference_thermostat(
    state: BuildingState,
    setpoints: tuple[float, float] = (THERMOSTAT_LOW, THERMOSTAT_HIGH),
    network_setpoint: float = 60.0,
) -> ValveCommand:
    """Hysteresis thermostat plus heating curve for the radiator circuit."""
    low, high = setpoints
    if not low < high:
        raise ContractViolation("lower setpoint must be below upper setpoint")
    heating = state.heating
    if state.T_i < low:
        heating = True
    elif state.T_i > high:
        heating = False
    return ValveCommand(
        heating=heating,
        secondary_setpoint=network_setpoint - SECONDARY_CURVE_OFFSET,
        dhw_forced=state.dhw > 0,
    )


# --- synthetic occupant inputs --------------------------------------------------


def dhw_profile(n_buildings: int, n_steps: int, dt: float, seed: int, litres_per_day: float = 120.0, start_hour: float = 0.0):
    """Tapping profile (kW) per step and building: ~``litres_per_day`` at 45 degC
    equivalent, clustered in morning and evening peaks."""
    rng = np.random.default_rng(seed)
    out = np.zeros((n_steps, n_buildings))
    kwh_per_day = litres_per_day * CP_WATER * (45.0 - MAINS_TEMP) / 3600.0
    horizon_h = n_steps * dt / 3600.0
    n_days = int(math.ceil((start_hour + horizon_h) / 24.0)) + 1
    for j in range(n_buildings):
        for day in range(n_days):
            k = max(rng.poisson(6), 1)
            shares = rng.dirichlet(np.ones(k))
            which = rng.choice(3, size=k, p=[0.4, 0.45, 0.15])
            hours = np.where(
                which == 0,
                rng.normal(7.5, 1.0, k),
                np.where(which == 1, rng.normal(19.0, 1.5, k), rng.uniform(9.0, 17.0, k)),
            )
            for share, hour in zip(shares, hours):
                dur = rng.uniform(3.0, 10.0) * 60.0
                t0 = (day * 24.0 + hour - start_hour) * 3600.0
                i0 = int(t0 // dt)
                i1 = int(math.ceil((t0 + dur) / dt))
                if i1 <= 0 or i0 >= n_steps:
                    continue
                power = share * kwh_per_day * 3600.0 / dur
                for i in range(max(i0, 0), min(i1, n_steps)):
                    lo = max(t0, i * dt)
                    hi = min(t0 + dur, (i + 1) * dt)
                    out[i, j] += power * (hi - lo) / dt
    return out


def electrical_gain_profile(hours, mean_kw: float = 0.3):
    """Diurnal internal electrical gain (kW) with morning and evening bumps, mean ``mean_kw``."""
    h = np.mod(np.asarray(hours, dtype=float), 24.0)
    shape = 0.6 + 0.5 * np.exp(-0.5 * ((h - 7.5) / 1.2) ** 2) + 1.0 * np.exp(-0.5 * ((h - 19.5) / 2.0) ** 2)
    grid = np.mod(np.arange(0, 24, 0.01), 24.0)
    ref = 0.6 + 0.5 * np.exp(-0.5 * ((grid - 7.5) / 1.2) ** 2) + 1.0 * np.exp(-0.5 * ((grid - 19.5) / 2.0) ** 2)
    return mean_kw * shape / ref.mean()


SOLAR_PEAK = 2.0  # kW per building


def solar_gain(irradiance_kw_m2, peak_kw: float = SOLAR_PEAK):
    """Solar gain (kW) following the irradiance shape, scaled so its largest value is ``peak_kw``."""
    g = np.maximum(np.asarray(irradiance_kw_m2, dtype=float), 0.0)
    top = g.max() if g.size else 0.0
    return g * (peak_kw / top) if top > 0 else g
