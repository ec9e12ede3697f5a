"""Active controller: bids and clearing, aggregate-model fitting, LP planner, PI trim, source choice.

Units: power kW, energy kWh, capacities kWh/K, conductances kW/K, time in hours
inside the aggregate models, prices EUR/MWh.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import linprog, lsq_linear

from .errors import ContractViolation, FittingError, SolverError
from .plant import BoilerParams, ChpParams, boiler_evaluate, chp_evaluate

GAS_PRICE = 39.9  # EUR/MWh
CONTROL_STEP = 900.0  # s
HORIZON_STEPS = 96
ALPHA = 5.0  # EUR per MW of step-to-step change
COMFORT_BAND = (19.5, 21.5)
TANK_BAND = (40.0, 80.0)
KP, KI = 0.3, 0.5
SLACK_PENALTY = 1e4  # EUR per K per step

# ---------------------------------------------------------------------------
# bids


@dataclass(frozen=True)
class BidFunction:
    level: float
    corner: float

    def __call__(self, p_r):
        return np.where(np.asarray(p_r) < self.corner, self.level, 0.0)


def build_bid(soc: float, level: float, force: bool = False) -> BidFunction:
    """Step bid of a storage device: full ``level`` below priority 1 - SoC.

    ``force`` (an active hot-water draw) bids at corner 1 whatever the charge.
    """
    if not 0.0 <= soc <= 1.0:
        raise ContractViolation(f"SoC {soc} outside [0, 1]")
    if level < 0:
        raise ContractViolation("bid level must be non-negative")
    return BidFunction(float(level), 1.0 if force else 1.0 - float(soc))


@dataclass(frozen=True)
class AggregateBid:
    """Sum of step bids, stored as sorted distinct corners and the level on each interval.

    ``values[j]`` is the aggregate on ``[breaks[j], breaks[j+1])`` with
    ``breaks = [0, corners..]``; the last value (beyond every corner) is 0.
    """

    breaks: np.ndarray
    values: np.ndarray
    corners: np.ndarray
    levels: np.ndarray

    @property
    def total(self) -> float:
        return float(self.values[0])

    def __call__(self, p_r):
        p = np.asarray(p_r, dtype=float)
        return (self.levels[None, :] * (p[..., None] < self.corners[None, :])).sum(-1) if p.ndim else float(self.levels[p < self.corners].sum())


def aggregate(bids) -> AggregateBid:
    bids = list(bids)
    if not bids:
        raise ContractViolation("need at least one bid")
    return aggregate_arrays(np.array([b.corner for b in bids]), np.array([b.level for b in bids]))


def aggregate_arrays(corners, levels) -> AggregateBid:
    c = np.asarray(corners, dtype=float)
    lv = np.asarray(levels, dtype=float)
    order = np.argsort(c)
    cs, ls = c[order], lv[order]
    inner = np.unique(cs[cs > 0.0])
    breaks = np.r_[0.0, inner]
    # on [breaks[j], ...) a device is on iff its corner exceeds breaks[j]
    above = ls[::-1].cumsum()[::-1]  # sum of levels from index i upward
    idx = np.searchsorted(cs, breaks, side="right")
    values = np.r_[above, 0.0][idx]
    return AggregateBid(breaks, values, c, lv)


def clear_market(agg: AggregateBid, u: float) -> float:
    """Priority whose aggregate consumption is closest to ``u``; ties go to the smaller priority."""
    if u < 0:
        raise ContractViolation("target must be non-negative")
    err = np.abs(agg.values - u)
    j = int(np.flatnonzero(err <= err.min())[0])
    return float(agg.breaks[j])


# ---------------------------------------------------------------------------
# aggregate models


@dataclass(frozen=True)
class AggregateBuildingModel:
    C_a: float
    C_m: float
    U_a: float
    H_m: float
    gamma_a: float
    gamma_m: float
    U_m: float = 0.0  # optional mass-to-ambient conductance
    rms: float = float("nan")

    def matrices(self):
        """Continuous-time x' = A x + B P_b + E [T_out, Q_a, Q_m], x = [T_a, T_m], t in hours."""
        A = np.array([[-(self.U_a + self.H_m) / self.C_a, self.H_m / self.C_a],
                      [self.H_m / self.C_m, -(self.H_m + self.U_m) / self.C_m]])
        B = np.array([[self.gamma_a / self.C_a], [0.0]])
        E = np.array([[self.U_a / self.C_a, 1.0 / self.C_a, 0.0], [self.U_m / self.C_m, 0.0, self.gamma_m / self.C_m]])
        return A, B, E


@dataclass(frozen=True)
class AggregateTankModel:
    C_s: float
    U_s: float
    gamma_s: float
    rms: float = float("nan")

    def matrices(self):
        """x' = A x + B P_w + E [T_amb, d]."""
        A = np.array([[-self.U_s / self.C_s]])
        B = np.array([[self.gamma_s / self.C_s]])
        E = np.array([[self.U_s / self.C_s, -1.0 / self.C_s]])
        return A, B, E


def discretize(A, B, E, dt_h: float):
    """Zero-order-hold map over ``dt_h`` hours."""
    n, m, k = A.shape[0], B.shape[1], E.shape[1]
    M = np.zeros((n + m + k, n + m + k))
    M[:n, :n] = A
    M[:n, n:n + m] = B
    M[:n, n + m:] = E
    X = expm(M * dt_h)
    return X[:n, :n], X[:n, n:n + m], X[:n, n + m:]


def simulate_building(model: AggregateBuildingModel, x0, P_b, T_out, Q_a, Q_m, dt_h):
    Ad, Bd, Ed = discretize(*model.matrices(), dt_h)
    x = np.empty((len(P_b) + 1, 2))
    x[0] = x0
    for k in range(len(P_b)):
        x[k + 1] = Ad @ x[k] + Bd[:, 0] * P_b[k] + Ed @ np.array([T_out[k], Q_a[k], Q_m[k]])
    return x


def simulate_tank(model: AggregateTankModel, x0, P_w, T_amb, d, dt_h):
    Ad, Bd, Ed = discretize(*model.matrices(), dt_h)
    x = np.empty(len(P_w) + 1)
    x[0] = x0
    for k in range(len(P_w)):
        x[k + 1] = Ad[0, 0] * x[k] + Bd[0, 0] * P_w[k] + Ed[0] @ np.array([T_amb[k], d[k]])
    return x


def _regress(X, y, what):
    scale = np.abs(X).max(axis=0)
    if np.any(scale == 0):
        raise FittingError(f"{what}: a regressor is identically zero; run a richer historic simulation")
    Xs = X / scale
    s = np.linalg.svd(Xs, compute_uv=False)
    if s[-1] < 1e-8 * s[0]:
        raise FittingError(f"{what}: regression is singular (insufficient excitation); run a richer historic simulation")
    res = lsq_linear(Xs, y, bounds=(1e-12, np.inf), method="bvls")
    theta = res.x / scale
    return theta, float(np.sqrt(np.mean((X @ theta - y) ** 2)))


@dataclass
class FitTrace:
    """Historic per-step aggregate signals at a fixed step ``dt`` seconds.

    Temperature arrays have one more sample than the input arrays.
    """

    dt: float
    T_a: np.ndarray
    T_m: np.ndarray
    T_out: np.ndarray
    Q_a: np.ndarray
    Q_m: np.ndarray
    P_b: np.ndarray
    T_s: np.ndarray | None = None
    T_amb_s: np.ndarray | None = None
    P_w: np.ndarray | None = None
    d: np.ndarray | None = None
    mass_to_ambient: bool = False

    def window(self, lo: int, hi: int) -> "FitTrace":
        cut = lambda a, extra: None if a is None else a[lo:hi + extra]
        return FitTrace(self.dt, cut(self.T_a, 1), cut(self.T_m, 1), cut(self.T_out, 0), cut(self.Q_a, 0), cut(self.Q_m, 0),
                        cut(self.P_b, 0), cut(self.T_s, 1), cut(self.T_amb_s, 0), cut(self.P_w, 0), cut(self.d, 0),
                        self.mass_to_ambient)


def _euler_rows(trace: FitTrace):
    h = trace.dt / 3600.0
    Ta, Tm = trace.T_a, trace.T_m
    ya = np.diff(Ta) / h
    Xa = np.column_stack([Tm[:-1] - Ta[:-1], trace.T_out - Ta[:-1], trace.P_b, trace.Q_a])
    ym = np.diff(Tm) / h
    cols = [Ta[:-1] - Tm[:-1]]
    if trace.mass_to_ambient:
        cols.append(trace.T_out - Tm[:-1])
    if trace.Q_m is not None and np.any(trace.Q_m != 0):
        cols.append(trace.Q_m)
    return Xa, ya, np.column_stack(cols), ym


def fit_aggregate_models(trace: FitTrace, fit_tank: bool = True):
    """Least-squares fit of the forward-Euler discretisation at the trace step.

    Returns (building model or None, tank model or None). ``rms`` on each model
    is the one-step temperature residual in K. Without a mass-node gain the
    mass gain factor is reported as 0.
    """
    h = trace.dt / 3600.0
    bld = None
    if trace.P_b is not None:
        Xa, ya, Xm, ym = _euler_rows(trace)
        ta, ra = _regress(Xa, ya, "building air node")
        tm, rm = _regress(Xm, ym, "building mass node")
        C_a = 1.0 / ta[3]
        H_m = ta[0] * C_a
        C_m = H_m / tm[0]
        j = 1
        U_m = 0.0
        if trace.mass_to_ambient:
            U_m = tm[j] * C_m
            j += 1
        gamma_m = tm[j] * C_m if j < len(tm) else 0.0
        bld = AggregateBuildingModel(C_a=C_a, C_m=C_m, U_a=ta[1] * C_a, H_m=H_m, gamma_a=ta[2] * C_a, gamma_m=gamma_m,
                                     U_m=U_m, rms=max(ra, rm) * h)
    tank = None
    if fit_tank and trace.T_s is not None:
        Ts = trace.T_s
        amb = trace.T_out if trace.T_amb_s is None else trace.T_amb_s
        ys = np.diff(Ts) / h
        Xs = np.column_stack([amb - Ts[:-1], trace.P_w, -trace.d])
        ts, rs = _regress(Xs, ys, "storage")
        C_s = 1.0 / ts[2]
        tank = AggregateTankModel(C_s=C_s, U_s=ts[0] * C_s, gamma_s=ts[1] * C_s, rms=rs * h)
    return bld, tank


def one_step_rms(model: AggregateBuildingModel, trace: FitTrace) -> float:
    """Held-out one-step-ahead prediction error of the air temperature (K)."""
    h = trace.dt / 3600.0
    Xa, ya, _, _ = _euler_rows(trace)
    theta = np.array([model.H_m, model.U_a, model.gamma_a, 1.0]) / model.C_a
    return float(np.sqrt(np.mean(((Xa @ theta) - ya) ** 2)) * h)


# ---------------------------------------------------------------------------
# planner


@dataclass
class Forecast:
    """Per-control-step known inputs over the horizon."""

    lam: np.ndarray  # effective heat cost EUR/MWh
    T_out: np.ndarray | None = None
    Q_a: np.ndarray | None = None
    Q_m: np.ndarray | None = None
    T_amb_s: np.ndarray | None = None
    d: np.ndarray | None = None


@dataclass
class DispatchPlan:
    P: np.ndarray
    P_b: np.ndarray
    P_w: np.ndarray
    T_a: np.ndarray | None
    T_s: np.ndarray | None
    objective: float
    relaxed: bool = False


def _responses(model, x0, w, dt_h, T):
    """First-state trajectory split into the free response and the Toeplitz input map."""
    Ad, Bd, Ed = discretize(*model.matrices(), dt_h)
    n = Ad.shape[0]
    x = np.asarray(x0, dtype=float)
    free = np.empty(T)
    imp = np.empty(T)
    v = Bd[:, 0].copy()
    for k in range(T):
        x = Ad @ x + Ed @ w[k]
        free[k] = x[0]
        imp[k] = v[0]
        v = Ad @ v
    idx = np.arange(T)
    lag = idx[:, None] - idx[None, :]
    G = np.where(lag >= 0, imp[np.clip(lag, 0, None)], 0.0)
    return free, G


def _band_rows(A_ub, b_ub, nv, i0, G, free, band, islack, n):
    T = len(free)
    hi = np.zeros((T, nv))
    hi[:, i0:i0 + n] = G
    lo = -hi
    if islack >= 0:
        hi[np.arange(T), islack + np.arange(T)] = -1.0
        lo[np.arange(T), islack + n + np.arange(T)] = -1.0
    A_ub.extend(hi)
    A_ub.extend(lo)
    b_ub.extend(band[1] - free)
    b_ub.extend(free - band[0])


def _plan_lp(building, tank, x_b, x_s, fc, dt_h, p_max, alpha, band_a, band_s, slack):
    T = len(fc.lam)
    nb = T if building is not None else 0
    nw = T if tank is not None else 0
    # variable layout: P_b (nb), P_w (nw), z (T-1), slack_a (2nb), slack_s (2nw)
    n_sa = 2 * nb if slack else 0
    n_ss = 2 * nw if slack else 0
    nv = nb + nw + (T - 1) + n_sa + n_ss
    ib, iw, iz = 0, nb, nb + nw
    isa = iz + T - 1
    iss = isa + n_sa
    price = np.asarray(fc.lam, dtype=float) * dt_h / 1000.0
    c = np.zeros(nv)
    c[ib:ib + nb] = price[:nb]
    c[iw:iw + nw] = price[:nw]
    c[iz:iz + T - 1] = alpha / 1000.0
    c[isa:] = SLACK_PENALTY
    A_ub, b_ub = [], []

    def total(t):
        row = np.zeros(nv)
        if nb:
            row[ib + t] = 1.0
        if nw:
            row[iw + t] = 1.0
        return row

    for t in range(T - 1):
        d = total(t + 1) - total(t)
        r1 = d.copy()
        r1[iz + t] = -1.0
        r2 = -d
        r2[iz + t] = -1.0
        A_ub += [r1, r2]
        b_ub += [0.0, 0.0]
    for t in range(T):
        A_ub.append(total(t))
        b_ub.append(p_max)
    if building is not None:
        free, G = _responses(building, x_b, np.column_stack([fc.T_out, fc.Q_a, fc.Q_m]), dt_h, T)
        _band_rows(A_ub, b_ub, nv, ib, G, free, band_a, isa if slack else -1, nb)
    if tank is not None:
        free, G = _responses(tank, [x_s], np.column_stack([fc.T_amb_s, fc.d]), dt_h, T)
        _band_rows(A_ub, b_ub, nv, iw, G, free, band_s, iss if slack else -1, nw)
    res = linprog(c, A_ub=np.array(A_ub), b_ub=np.array(b_ub), bounds=[(0, None)] * nv, method="highs")
    return res, (ib, nb, iw, nw)


def plan(
    forecast: Forecast,
    building: AggregateBuildingModel | None = None,
    tank: AggregateTankModel | None = None,
    x_building=(20.0, 20.0),
    t_tank: float = 60.0,
    p_max: float = 1e9,
    dt: float = CONTROL_STEP,
    alpha: float = ALPHA,
    comfort=COMFORT_BAND,
    tank_band=TANK_BAND,
) -> DispatchPlan:
    """Minimise energy cost plus a ramp penalty subject to the aggregate models and temperature bands.

    Falls back to a slack-penalised solve (``relaxed=True``) when the bands cannot be met.
    """
    T = len(forecast.lam)
    if T < 2:
        raise ContractViolation("horizon must have at least two steps")
    if building is None and tank is None:
        raise ContractViolation("need a building or a tank model")
    dt_h = dt / 3600.0
    relaxed = False
    res, (ib, nb, iw, nw) = _plan_lp(building, tank, x_building, t_tank, forecast, dt_h, p_max, alpha, comfort, tank_band, False)
    if res.status == 2:
        relaxed = True
        res, (ib, nb, iw, nw) = _plan_lp(building, tank, x_building, t_tank, forecast, dt_h, p_max, alpha, comfort, tank_band, True)
    if res.status != 0:
        raise SolverError(f"planner LP failed: {res.message}")
    x = res.x
    P_b = x[ib:ib + nb] if nb else np.zeros(T)
    P_w = x[iw:iw + nw] if nw else np.zeros(T)
    T_a = None
    if building is not None:
        T_a = simulate_building(building, x_building, P_b, forecast.T_out, forecast.Q_a, forecast.Q_m, dt_h)[1:, 0]
    T_s = simulate_tank(tank, t_tank, P_w, forecast.T_amb_s, forecast.d, dt_h)[1:] if tank is not None else None
    return DispatchPlan(P_b + P_w, P_b, P_w, T_a, T_s, float(res.fun), relaxed)


def plan_objective(P, lam, dt: float = CONTROL_STEP, alpha: float = ALPHA) -> float:
    P = np.asarray(P, dtype=float)
    return float((P * np.asarray(lam) * dt / 3600.0 / 1000.0).sum() + alpha / 1000.0 * np.abs(np.diff(P)).sum())


# ---------------------------------------------------------------------------
# real-time trim


@dataclass
class PITrim:
    kp: float = KP
    ki: float = KI
    u_max: float = float("inf")
    integral: float = 0.0

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0:
            raise ContractViolation("PI gains must be non-negative")

    def step(self, target: float, measured: float, u_max: float | None = None, previous_target: float | None = None) -> float:
        """One control step; the integral is frozen while the output saturates in the error's direction.

        ``previous_target`` is what ``measured`` was aiming at when the plan moved on since.
        """
        hi = self.u_max if u_max is None else u_max
        e = (target if previous_target is None else previous_target) - measured
        u_raw = target + self.kp * e + self.ki * (self.integral + e)
        if (u_raw > hi and e > 0) or (u_raw < 0 and e < 0):
            u_raw = target + self.kp * e + self.ki * self.integral
        else:
            self.integral += e
        return float(np.clip(u_raw, 0.0, hi))


def pi_trim(target: float, measured: float, state: PITrim) -> float:
    return state.step(target, measured)


# ---------------------------------------------------------------------------
# production source


def chp_heat_cost(lam_spot: float, t_in: float, f_m: float = 1.0, gas_price: float = GAS_PRICE, chp: ChpParams | None = None) -> float:
    """EUR per MWh of CHP heat, net of electricity sold at spot."""
    p_el, p_heat, p_gas = chp_evaluate(chp or ChpParams(), f_m, t_in)
    return (p_gas * gas_price - p_el * lam_spot) / p_heat


def boiler_heat_cost(t_in: float, f_m: float = 1.0, gas_price: float = GAS_PRICE, boiler: BoilerParams | None = None) -> float:
    p_out, p_gas = boiler_evaluate(boiler or BoilerParams(), f_m, t_in)
    return p_gas * gas_price / p_out


def effective_heat_cost(lam_spot, t_in: float = 40.0, gas_price: float = GAS_PRICE) -> np.ndarray:
    """Planning price of heat: the cheaper of CHP (net of power revenue) and boiler, at full load."""
    lam = np.asarray(lam_spot, dtype=float)
    p_el, p_heat, p_gas = chp_evaluate(ChpParams(), 1.0, t_in)
    chp = (p_gas * gas_price - p_el * lam) / p_heat
    return np.minimum(chp, boiler_heat_cost(t_in, 1.0, gas_price))


@dataclass(frozen=True)
class SourceChoice:
    chp: bool
    boiler: bool


def select_source(p_t: float, lam_spot: float, t_in: float = 40.0, chp_on: bool = False, since_switch: float = 1e9,
                  gas_price: float = GAS_PRICE, chp: ChpParams | None = None, boiler: BoilerParams | None = None) -> SourceChoice:
    """Run the CHP when its net heat cost at the needed modulation beats the boiler; timers win over price."""
    if p_t < 0:
        raise ContractViolation("power must be non-negative")
    chp = chp or ChpParams()
    boiler = boiler or BoilerParams()
    from .plant import chp_fm_for_heat, chp_heat_range

    h_min, h_max = chp_heat_range(chp, t_in)
    want = False
    if p_t > 0:
        fm = chp_fm_for_heat(chp, min(max(p_t, h_min), h_max), t_in)
        want = chp_heat_cost(lam_spot, t_in, fm, gas_price, chp) < boiler_heat_cost(t_in, 1.0, gas_price, boiler) and p_t >= h_min
    on = chp_on
    if want != chp_on:
        limit = chp.t_on_min if chp_on else chp.t_off_min
        if since_switch >= limit - 1e-9:
            on = want
    covered = min(max(p_t, h_min), h_max) if on else 0.0
    return SourceChoice(chp=on, boiler=p_t > covered + 1e-9)
