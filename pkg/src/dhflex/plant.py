"""CHP and gas boiler black-box models and the heat-driven production controller."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .constants import heating_curve
from .errors import ContractViolation


@dataclass(frozen=True)
class ChpParams:
    p_el_max: float = 600.0  # kW
    fm_min: float = 0.4
    t_on_min: float = 15 * 60.0  # s
    t_off_min: float = 15 * 60.0  # s
    alpha_gas: float = 31.250
    beta_gas: float = 1310.75
    gamma_gas: float = 181.35
    alpha_heat: float = 3.1537e-5
    beta_heat: float = -7.4162e-3
    gamma_heat: float = -0.3258
    delta_heat: float = 704.09
    epsilon_heat: float = 6.0633e-4
    zeta_heat: float = -0.1848
    eta_heat: float = 160.01


@dataclass(frozen=True)
class BoilerParams:
    p_gas_nom: float = 1100.0  # kW
    fm_min: float = 0.1
    alpha: float = -7.758e-13
    beta: float = -1.119e-10
    gamma: float = 3.295e-6
    delta: float = 1.195e-10
    epsilon: float = 2.911e-8
    zeta: float = -4.665e-4
    eta: float = -6.067e-9
    theta: float = -1.558e-6
    iota: float = 1.800e-2
    kappa: float = 1.121e-7
    mu: float = -1.503e-5
    nu: float = 7.675e-1


@dataclass(frozen=True)
class PlantState:
    chp_on: bool = False
    chp_fm: float = 0.0
    boiler_fm: float = 0.0
    since_switch: float = 1e9  # s since the last CHP on/off change
    supply_setpoint: float = 55.0
    chp_heat: float = 0.0
    boiler_heat: float = 0.0


def _check_fm(f_m, lo, hi=1.0):
    f = np.asarray(f_m, dtype=float)
    if np.any(f < lo - 1e-12) or np.any(f > hi + 1e-12):
        raise ContractViolation(f"modulation factor {f_m} outside [{lo}, {hi}]")


def chp_heat_coefficients(params: ChpParams, t_in):
    """Return (A_heat, B_heat) so that P_heat = A * f_m + B."""
    t = np.asarray(t_in, dtype=float)
    a = ((params.alpha_heat * t + params.beta_heat) * t + params.gamma_heat) * t + params.delta_heat
    b = (params.epsilon_heat * t + params.zeta_heat) * t + params.eta_heat
    return a, b


def chp_evaluate(params: ChpParams, f_m, t_in):
    """Electrical, thermal and gas power (kW) at modulation ``f_m`` and return temperature ``t_in``."""
    _check_fm(f_m, params.fm_min)
    f = np.asarray(f_m, dtype=float)
    a, b = chp_heat_coefficients(params, t_in)
    p_el = params.p_el_max * f
    p_heat = a * f + b
    p_gas = (params.alpha_gas * f + params.beta_gas) * f + params.gamma_gas
    if np.ndim(p_heat) == 0:
        return float(p_el), float(p_heat), float(p_gas)
    return p_el, p_heat, p_gas


def chp_heat_range(params: ChpParams, t_in) -> tuple[float, float]:
    a, b = chp_heat_coefficients(params, t_in)
    return float(a * params.fm_min + b), float(a + b)


def chp_fm_for_heat(params: ChpParams, heat, t_in) -> float:
    """Modulation factor delivering ``heat`` kW, clipped to the modulation range."""
    a, b = chp_heat_coefficients(params, t_in)
    return float(np.clip((heat - b) / a, params.fm_min, 1.0))


def boiler_efficiency(params: BoilerParams, p_gas, t_in):
    g = np.asarray(p_gas, dtype=float)
    t = np.asarray(t_in, dtype=float)
    A = (params.alpha * g + params.beta) * g + params.gamma
    B = (params.delta * g + params.epsilon) * g + params.zeta
    C = (params.eta * g + params.theta) * g + params.iota
    D = (params.kappa * g + params.mu) * g + params.nu
    return ((A * t + B) * t + C) * t + D


def boiler_evaluate(params: BoilerParams, f_m, t_in):
    """Heat output and gas input (kW) of the boiler."""
    _check_fm(f_m, params.fm_min)
    p_gas = params.p_gas_nom * np.asarray(f_m, dtype=float)
    p_out = boiler_efficiency(params, p_gas, t_in) * p_gas
    if np.ndim(p_out) == 0:
        return float(p_out), float(p_gas)
    return p_out, p_gas


def boiler_max_heat(params: BoilerParams, t_in) -> float:
    return boiler_evaluate(params, 1.0, t_in)[0]


def boiler_gas_for_heat(params: BoilerParams, heat: float, t_in: float) -> tuple[float, float]:
    """Return (f_m, P_gas) for a time-averaged heat output.

    Below the minimum modulation the boiler cycles at ``fm_min``; the
    returned gas is then the duty-cycle average.
    """
    if heat <= 0.0:
        return 0.0, 0.0
    q_min, g_min = boiler_evaluate(params, params.fm_min, t_in)
    if heat <= q_min:
        return params.fm_min, heat * g_min / q_min
    q_max = boiler_max_heat(params, t_in)
    if heat >= q_max:
        return 1.0, params.p_gas_nom
    lo, hi = params.fm_min, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if boiler_evaluate(params, mid, t_in)[0] < heat:
            lo = mid
        else:
            hi = mid
    fm = 0.5 * (lo + hi)
    return fm, params.p_gas_nom * fm


def step_chp_timer(params: ChpParams, state: PlantState, want_on: bool, dt: float) -> tuple[bool, float]:
    """Apply minimum on/off times; returns (chp_on, since_switch) after this step."""
    since = state.since_switch + dt
    on = state.chp_on
    if want_on != on:
        limit = params.t_on_min if on else params.t_off_min
        if since >= limit - 1e-9:
            on = want_on
            since = dt
    return on, since


def reference_dispatch(
    plant_state: PlantState,
    demand: float,
    t_a_24h: float,
    dt: float,
    t_in: float = 40.0,
    chp: ChpParams | None = None,
    boiler: BoilerParams | None = None,
) -> PlantState:
    """Heat-driven control: CHP first, boiler as backup above CHP max or below CHP min."""
    if demand < 0:
        raise ContractViolation("demand must be non-negative")
    chp = chp or ChpParams()
    boiler = boiler or BoilerParams()
    heat_min, heat_max = chp_heat_range(chp, t_in)
    on, since = step_chp_timer(chp, plant_state, demand >= heat_min, dt)
    if on:
        chp_heat = float(np.clip(demand, heat_min, heat_max))
        chp_fm = chp_fm_for_heat(chp, chp_heat, t_in)
    else:
        chp_heat, chp_fm = 0.0, 0.0
    boiler_heat = min(max(demand - chp_heat, 0.0), boiler_max_heat(boiler, t_in))
    boiler_fm, _ = boiler_gas_for_heat(boiler, boiler_heat, t_in)
    return replace(
        plant_state,
        chp_on=on,
        chp_fm=chp_fm,
        boiler_fm=boiler_fm,
        since_switch=since,
        supply_setpoint=heating_curve(t_a_24h),
        chp_heat=chp_heat,
        boiler_heat=boiler_heat,
    )
