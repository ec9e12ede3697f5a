import numpy as np

CP_WATER = 4.18  # kJ/(kg K), so kg/s * CP * K = kW
RHO_WATER = 1000.0  # kg/m3
GROUND_TEMP = 10.0  # degC
MAINS_TEMP = 10.0  # degC, cold water entering DHW tanks

# heating curve: 70 degC at -8 degC down to 40 degC at 15 degC (24 h mean ambient)
CURVE_T_COLD, CURVE_SUPPLY_COLD = -8.0, 70.0
CURVE_T_WARM, CURVE_SUPPLY_WARM = 15.0, 40.0


def heating_curve(t_ambient_24h):
    """Supply setpoint (degC) from the 24 h mean ambient temperature."""
    frac = (np.asarray(t_ambient_24h, dtype=float) - CURVE_T_COLD) / (CURVE_T_WARM - CURVE_T_COLD)
    out = CURVE_SUPPLY_COLD + np.clip(frac, 0.0, 1.0) * (CURVE_SUPPLY_WARM - CURVE_SUPPLY_COLD)
    return float(out) if out.ndim == 0 else out
