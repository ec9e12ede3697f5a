"""Global simulation loop, scenario configuration and result tallies.

Every physics step (default 60 s) runs plant, hydraulics, supply-pipe thermal
transport, substations, buildings and tanks, then the return pipes. Controllers
act every 15 minutes. A run covers a pre-run (reference control, used to fit the
aggregate models) followed by the test week, which is what gets tallied.
"""
from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import dispatch as dp
from .building import (
    SECONDARY_CURVE_OFFSET,
    SUBSTATION_EFFECTIVENESS,
    THERMOSTAT_HIGH,
    THERMOSTAT_LOW,
    cn_operators,
    dhw_profile,
    electrical_gain_profile,
    population_table,
    sample_population,
    solar_gain,
)
from .constants import CP_WATER, MAINS_TEMP, heating_curve
from .econ import EconomicsParams, ProfitBreakdown, settle
from .errors import ContractViolation, DhflexError, SimulationError
from .hydronet import TopologyConfig, build_topology, pump_operating_point
from .plant import (
    BoilerParams,
    ChpParams,
    PlantState,
    boiler_gas_for_heat,
    boiler_max_heat,
    chp_evaluate,
    chp_fm_for_heat,
    chp_heat_range,
    reference_dispatch,
    step_chp_timer,
)
from .profiles import Profiles, load_profiles, select_representative_week  # noqa: F401  (re-exported)
from .storage import TankBank, assign_types, central_tank, local_tank
from .thermonet import NetworkThermal

SCENARIOS = ("reference", "central_active", "distributed_active", "no_buffer_active")
ACTIVE = {"central_active", "distributed_active", "no_buffer_active"}

TANK_CHARGE_FLOW = 0.1  # kg/s through a local tank valve
DHW_TEMP = 45.0
DHW_HX_RETURN = MAINS_TEMP + 5.0  # tank-side return of the open-tank DHW exchanger
SUPPLY_OVERSHOOT = 10.0  # K above setpoint before surplus heat is dumped
CENTRAL_CHARGE_MAX = 15.0  # kg/s
CENTRAL_BAND_WIDTH = 15.0  # K below the supply setpoint
PLANT_ROOM_TEMP = 15.0
TANK_REF_HYST = 8.0  # K, local tank thermostat deadband
FIT_SKIP_DAYS = 1.0


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "reference"
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    seed: int = 1
    weather_path: str | None = None
    price_path: str | None = None
    dt: float = 60.0
    week: int | str = 46
    prerun_days: float = 10.0
    days: float = 7.0
    economics: EconomicsParams = field(default_factory=EconomicsParams)
    cell_length: float = 1.0
    comfort: tuple[float, float] = dp.COMFORT_BAND
    planner_comfort: tuple[float, float] = (0.5 * (THERMOSTAT_LOW + THERMOSTAT_HIGH), dp.COMFORT_BAND[1])
    alpha: float = dp.ALPHA
    horizon_steps: int = dp.HORIZON_STEPS
    dhw_litres_per_day: float = 120.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ContractViolation(f"unknown scenario {self.scenario!r}; pick one of {SCENARIOS}")
        if self.dt <= 0 or self.dt > 60.0 + 1e-9:
            raise ContractViolation("global step must lie in (0, 60] s")
        ratio = dp.CONTROL_STEP / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ContractViolation("global step must divide 15 min evenly")
        for p in (self.weather_path, self.price_path):
            if p is not None and not Path(p).is_file():
                raise ContractViolation(f"input file {p} not found")
        if self.prerun_days < 1.0 + FIT_SKIP_DAYS and self.scenario in ACTIVE:
            raise ContractViolation("active scenarios need at least two pre-run days to fit their models")

    @property
    def steps_per_control(self) -> int:
        return int(round(dp.CONTROL_STEP / self.dt))

    @classmethod
    def from_dict(cls, d: dict | None) -> "ScenarioConfig":
        d = dict(d or {})
        if "topology" in d:
            d["topology"] = TopologyConfig.from_dict(d["topology"] or {})
        if "economics" in d:
            d["economics"] = EconomicsParams.from_dict(d["economics"])
        for key in ("comfort", "planner_comfort"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path, **overrides) -> "ScenarioConfig":
        with Path(path).open() as fh:
            d = yaml.safe_load(fh) or {}
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topology"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["topology"].items()}
        d["comfort"] = list(self.comfort)
        d["planner_comfort"] = list(self.planner_comfort)
        return d


TRACE_FIELDS = (
    "price", "t_ambient", "t_set", "t_supply", "t_return", "m_net",
    "consumed", "q_space", "q_dhw_direct", "q_charge", "dhw_from_tank",
    "chp_heat", "boiler_heat", "booster", "dumped", "h_net", "p_el", "gas_chp", "gas_boiler", "chp_on", "chp_fm", "boiler_fm",
    "net_loss", "loss_supply", "loss_return", "net_energy", "ltank_loss", "ltank_energy", "ctank_loss", "ctank_energy", "tank_mean",
    "ti_mean", "ti_std", "ti_min", "ti_max", "te_mean", "q_air", "pump_hydraulic",
    "plan_p", "lambda_eff", "u_pi", "p_clear", "measured",
)


@dataclass
class SimulationResult:
    scenario: str
    dt: float
    week_start_step: int
    traces: dict
    tallies: dict
    profit: ProfitBreakdown | None = None
    models: dict = field(default_factory=dict)
    runtime_s: float = 0.0
    config: dict = field(default_factory=dict)

    def week(self, name: str) -> np.ndarray:
        return self.traces[name][self.week_start_step:]

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "tallies": self.tallies,
            "profit": self.profit.to_dict() if self.profit else None,
            "models": self.models,
            "runtime_s": self.runtime_s,
            "config": self.config,
        }

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        k0, n = self.week_start_step, len(self.traces["price"])
        t = (np.arange(k0, n) - k0) * self.dt
        with (out / f"{self.scenario}_trace.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *TRACE_FIELDS])
            cols = [self.traces[f][k0:] for f in TRACE_FIELDS]
            for i in range(n - k0):
                w.writerow([f"{t[i]:g}", *(f"{c[i]:.6g}" for c in cols)])
        with (out / f"{self.scenario}_plant.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "chp_on", "f_m_chp", "P_el", "P_heat_chp", "P_gas_chp", "f_m_boiler", "P_heat_boiler", "P_gas_boiler", "T_supply"])
            tr = self.traces
            for i in range(k0, n):
                w.writerow([f"{t[i - k0]:g}", int(tr["chp_on"][i]), f"{tr['chp_fm'][i]:.4f}", f"{tr['p_el'][i]:.3f}",
                            f"{tr['chp_heat'][i]:.3f}", f"{tr['gas_chp'][i]:.3f}", f"{tr['boiler_fm'][i]:.4f}",
                            f"{tr['boiler_heat'][i]:.3f}", f"{tr['gas_boiler'][i]:.3f}", f"{tr['t_supply'][i]:.3f}"])
        ctrl = self.traces
        with (out / f"{self.scenario}_planner.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "lambda_eff", "P_star", "p_r_clear", "u_pi", "measured_P"])
            step = int(round(dp.CONTROL_STEP / self.dt))
            for i in range(k0, n, step):
                w.writerow([f"{t[i - k0]:g}", *(f"{ctrl[f][i]:.6g}" for f in ("lambda_eff", "plan_p", "p_clear", "u_pi", "measured"))])
        path = out / f"{self.scenario}_summary.json"
        path.write_text(json.dumps(self.summary(), indent=2, default=float))
        return path


def _block_mean(x, n):
    m = len(x) // n
    return np.asarray(x[: m * n], dtype=float).reshape(m, n).mean(axis=1)


class Simulation:
    """Mutable state of one scenario. ``advance`` moves it forward; ``result`` tallies the test week."""

    def __init__(self, config: ScenarioConfig, profiles: Profiles | None = None):
        cfg = config
        self.cfg = cfg
        self.prof = profiles or load_profiles(cfg.weather_path, cfg.price_path, cfg.week, cfg.dt, cfg.prerun_days, cfg.days)
        self.dt = cfg.dt
        self.nc = cfg.steps_per_control
        self.n_steps = self.prof.n_steps
        self.k0 = self.prof.week_start_step
        self.graph = build_topology(cfg.topology)
        n = self.graph.n_buildings
        self.n = n
        self.chp, self.boiler = ChpParams(), BoilerParams()

        pop = sample_population(n, cfg.seed)
        tab = population_table(pop)
        self.R_h, self.R_ih, self.R_ea = tab["R_h"], tab["R_ih"], tab["R_ea"]
        self.g_ia = np.where(np.isinf(tab["R_ia"]), 0.0, 1.0 / tab["R_ia"])
        self.A_piv, self.B_piv = tab["A_piv"], tab["B_piv"]
        self.C_tot = tab["C_i"] + tab["C_e"] + tab["C_h"]
        self.max_flow = np.array([p.max_primary_flow for p in pop])
        self.M, self.N = cn_operators(pop, self.dt)

        rng = np.random.default_rng(cfg.seed + 101)
        T = np.empty((n, 3))
        T[:, 0] = rng.uniform(19.6, 20.4, n)
        ta0 = self.prof.t_ambient[0]
        T[:, 1] = (T[:, 0] * self.R_ea + ta0 * tab["R_ie"]) / (tab["R_ie"] + self.R_ea)
        T[:, 2] = T[:, 0]
        self.T = T
        self.T_new = np.empty_like(T)
        self.q_rad = np.zeros(n)
        self.heating = np.zeros(n, dtype=bool)
        self.b = np.zeros((n, 3))

        hours = self.prof.hours()
        self.pel_base = electrical_gain_profile(hours)
        self.pel_scale = rng.uniform(0.7, 1.3, n)
        self.dhw = dhw_profile(n, self.n_steps, self.dt, cfg.seed + 7, cfg.dhw_litres_per_day, self.prof.start.hour)
        self.ra = solar_gain(self.prof.solar)
        self.t_set = heating_curve(self.prof.t_ambient_24h)

        self.net = NetworkThermal(self.graph, float(self.t_set[0]), 35.0, cell_length=cfg.cell_length)
        self.plant = PlantState(supply_setpoint=float(self.t_set[0]))

        kinds = assign_types(n, cfg.seed)
        self.tanks = None
        self.ctank = None
        if cfg.scenario == "distributed_active":
            geoms = [local_tank(k) for k in kinds]
            self.tanks = TankBank(geoms)
            L = self.tanks.layers
            self.tT = np.full((n, L), 50.0)
            self.tTin = np.where(self.tanks.has_inner[:, None], 50.0, 0.0) * np.ones((1, L))
            self.t_kind = np.array([{"open": 0, "coil": 1, "tank_in_tank": 2}[k] for k in kinds])
            self.t_cap = self.tanks.c_layer * L + self.tanks.c_layer_in * L  # kJ/K
            self.t_on = np.zeros(n, dtype=bool)
        elif cfg.scenario == "central_active":
            vol = sum(local_tank(k).total_volume for k in kinds)
            self.ctank = TankBank([central_tank(vol)])
            self.cT = np.full((1, self.ctank.layers), float(self.t_set[0]) - 5.0)
            self.cTin = np.zeros_like(self.cT)
            self.c_cap = float(self.ctank.c_layer[0] * self.ctank.layers)
            self.central_chp_mode = False

        self.tr = {f: np.zeros(self.n_steps) for f in TRACE_FIELDS}
        self.k = 0
        self.active = False
        self.pi = dp.PITrim()
        self.prev_target = None
        self.acc_cons = 0.0
        self.acc_n = 0
        self.target_p = 0.0  # central production target
        self.ctrl = {"plan_p": np.nan, "lambda_eff": np.nan, "u_pi": np.nan, "p_clear": np.nan, "measured": np.nan}
        self.bmodel = None
        self.tmodel = None
        self.fit_info = {}
        self.clear_on = np.zeros(n, dtype=bool)
        self.clear_t_on = np.zeros(n, dtype=bool)
        self.dhw_expect = None

        h15 = _block_mean(hours, self.nc)
        self.f_price = _block_mean(self.prof.price, self.nc)
        self.f_tout = _block_mean(self.prof.t_ambient, self.nc)
        q_air = (self.pel_base * self.pel_scale.sum() + n * self.ra
                 + self.A_piv.sum() * self.prof.wind + self.B_piv.sum())
        self.q_air_series = q_air
        self.f_qa = _block_mean(q_air, self.nc)
        self.f_hour = h15

    # --- helpers ---------------------------------------------------------------

    def tank_means(self):
        L = self.tanks.layers
        e = self.tT.sum(1) * self.tanks.c_layer + self.tTin.sum(1) * self.tanks.c_layer_in
        return e / (self.t_cap) if L else e

    def dhw_top(self):
        return np.where(self.tanks.has_inner, self.tTin[:, -1], self.tT[:, -1])

    def central_mean(self):
        return float(self.cT.mean())

    def _chp_gas(self, heat, t_in):
        if heat <= 0:
            return 0.0, 0.0, 0.0
        fm = chp_fm_for_heat(self.chp, heat, t_in)
        p_el, _, gas = chp_evaluate(self.chp, fm, t_in)
        return fm, float(p_el), float(gas)

    # --- controllers ----------------------------------------------------------

    def _building_levels(self, T_s):
        """Heat an open valve would draw over the next interval (kW per building)."""
        sec = self.t_set[self.k] - SECONDARY_CURVE_OFFSET
        steady = np.maximum(sec - self.T[:, 0], 0.0) / (self.R_h + self.R_ih)
        cap = self.max_flow * CP_WATER * SUBSTATION_EFFECTIVENESS * np.maximum(T_s - self.T[:, 2], 0.0)
        return np.minimum(steady, cap)

    def _horizon(self, j, arr):
        H = self.cfg.horizon_steps
        idx = np.arange(j, j + H)
        last = len(arr)
        per = int(round(86400.0 / dp.CONTROL_STEP))
        over = idx >= last
        idx[over] = idx[over] - per * ((idx[over] - last) // per + 1)
        return np.asarray(arr)[idx]

    def _dhw_forecast(self, j):
        """Hour-of-day mean of the aggregate tapping power seen during the pre-run."""
        if self.dhw_expect is None:
            tot = _block_mean(self.dhw[: self.k0].sum(1), self.nc)
            per = int(round(86400.0 / dp.CONTROL_STEP))
            days = len(tot) // per
            self.dhw_expect = tot[: days * per].reshape(days, per).mean(0)
        per = len(self.dhw_expect)
        off = int(round(self.prof.start.hour * 3600.0 / dp.CONTROL_STEP))
        return self.dhw_expect[(np.arange(j, j + self.cfg.horizon_steps) + off) % per]

    def _fit(self):
        """Fit the aggregate models on the pre-run trace, minus a warm-up day."""
        tr, k0 = self.tr, self.k0
        lo = int(round(FIT_SKIP_DAYS * 86400.0 / self.dt))
        sl = slice(lo, k0)
        snap = self._snap
        if self.cfg.scenario in ("distributed_active", "no_buffer_active"):
            trace = self.fit_trace(lo, k0)
            self.bmodel, self.tmodel = dp.fit_aggregate_models(trace, fit_tank=self.tanks is not None)
        else:
            trace = dp.FitTrace(
                dt=self.dt, T_a=None, T_m=None, T_out=tr["t_ambient"][sl], Q_a=None, Q_m=None, P_b=None,
                T_s=snap["tank"][lo:k0 + 1], T_amb_s=np.full(k0 - lo, PLANT_ROOM_TEMP),
                P_w=tr["chp_heat"][sl] + tr["boiler_heat"][sl] - tr["booster"][sl] - tr["dumped"][sl],
                d=tr["h_net"][sl] - tr["booster"][sl],
            )
            _, self.tmodel = dp.fit_aggregate_models(trace, fit_tank=True)
            self._fit_demand_regression(lo)
        self.fit_info = {k: asdict(v) for k, v in (("building", self.bmodel), ("tank", self.tmodel)) if v is not None}

    def fit_trace(self, lo: int, hi: int) -> dp.FitTrace:
        """Recorded building (and local tank) data for steps ``lo`` to ``hi``."""
        tr, snap, sl = self.tr, self._snap, slice(lo, hi)
        tanks = self.tanks is not None
        return dp.FitTrace(
            dt=self.dt, T_a=snap["ti"][lo:hi + 1], T_m=snap["te"][lo:hi + 1], T_out=tr["t_ambient"][sl],
            Q_a=tr["q_air"][sl], Q_m=None, P_b=tr["q_space"][sl],
            T_s=snap["tank"][lo:hi + 1] if tanks else None,
            T_amb_s=tr["ti_mean"][sl] if tanks else None,
            P_w=tr["q_charge"][sl] if tanks else None,
            d=tr["dhw_from_tank"][sl] if tanks else None,
            mass_to_ambient=True,
        )

    def _fit_demand_regression(self, lo):
        """Network heat demand against ambient temperature and hour of day, on 15-min means."""
        y = _block_mean(self.tr["h_net"][lo:self.k0], self.nc)
        tout = _block_mean(self.prof.t_ambient[lo:self.k0], self.nc)
        hour = (_block_mean(self.prof.hours()[lo:self.k0], self.nc)).astype(int) % 24
        X = np.column_stack([tout, np.eye(24)[hour]])
        self.demand_coef, *_ = np.linalg.lstsq(X, y, rcond=None)

    def _demand_forecast(self, j):
        tout = self._horizon(j, self.f_tout)
        hour = self._horizon(j, self.f_hour).astype(int) % 24
        return np.maximum(np.column_stack([tout, np.eye(24)[hour]]) @ self.demand_coef, 0.0)

    def _control(self):
        """Plan, trim and clear for the coming 15 minutes."""
        k, j = self.k, self.k // self.nc
        meas = self.acc_cons / max(self.acc_n, 1)
        self.acc_cons, self.acc_n = 0.0, 0
        t_set = float(self.t_set[k])
        lam = dp.effective_heat_cost(self._horizon(j, self.f_price), t_in=40.0, gas_price=self.cfg.economics.gas_price)
        # beyond the CHP maximum the marginal heat is boiler heat, which the single price does not see
        p_max = chp_heat_range(self.chp, 40.0)[1]
        sc = self.cfg.scenario
        if sc == "central_active":
            fc = dp.Forecast(lam=lam, T_amb_s=np.full(len(lam), PLANT_ROOM_TEMP), d=self._demand_forecast(j))
            band = (t_set - CENTRAL_BAND_WIDTH, t_set - 0.5)
            pl = dp.plan(fc, tank=self.tmodel, t_tank=self.central_mean(), p_max=p_max, alpha=self.cfg.alpha, tank_band=band)
            self.target_p = float(pl.P[0])
            self.ctrl.update(plan_p=self.target_p, lambda_eff=float(lam[0]), measured=meas, u_pi=self.target_p, p_clear=np.nan)
            return
        H = len(lam)
        ti = float(self.T[:, 0].mean())
        fc = dp.Forecast(lam=lam, T_out=self._horizon(j, self.f_tout), Q_a=self._horizon(j, self.f_qa), Q_m=np.zeros(H))
        dhw_fc = self._dhw_forecast(j)
        kw = {}
        if self.tanks is not None:
            fc.T_amb_s = np.full(H, ti)
            fc.d = dhw_fc
            kw = dict(tank=self.tmodel, t_tank=float(np.average(self.tank_means(), weights=self.t_cap)),
                      tank_band=(dp.TANK_BAND[0], min(dp.TANK_BAND[1], t_set - 2.0)))
        pl = dp.plan(fc, building=self.bmodel, x_building=(ti, float(self.T[:, 1].mean())), p_max=p_max,
                     alpha=self.cfg.alpha, comfort=self.cfg.planner_comfort, **kw)
        direct = float(dhw_fc[0]) if self.tanks is None else 0.0
        target = float(pl.P[0]) + direct
        T_s = self.net.building_supply_temps()
        lo, hi = self.cfg.comfort
        lv_b = self._building_levels(T_s)
        soc_b = np.clip((self.T[:, 0] - lo) / (hi - lo), 0.0, 1.0)
        corners = [np.where(self.T[:, 0] < lo, 1.0, 1.0 - soc_b)]
        levels = [lv_b]
        if self.tanks is not None:
            tlo, thi = dp.TANK_BAND[0], min(dp.TANK_BAND[1], t_set - 2.0)
            means = self.tank_means()
            soc_t = np.clip((means - tlo) / max(thi - tlo, 1e-6), 0.0, 1.0)
            lv_t = TANK_CHARGE_FLOW * CP_WATER * np.maximum(T_s - self.tT[:, 0], 0.0)
            corners.append(np.where(means < tlo, 1.0, 1.0 - soc_t))
            levels.append(lv_t)
        corners = np.concatenate(corners)
        levels = np.concatenate(levels)
        u_max = float(levels.sum()) + direct
        u = self.pi.step(target, meas, u_max=u_max, previous_target=self.prev_target)
        self.prev_target = target
        agg = dp.aggregate_arrays(corners, levels)
        p_star = dp.clear_market(agg, max(u - direct, 0.0))
        on = p_star < corners
        self.clear_on = on[: self.n]
        if self.tanks is not None:
            self.clear_t_on = on[self.n:]
        self.ctrl.update(plan_p=float(pl.P[0]), lambda_eff=float(lam[0]), u_pi=u, p_clear=p_star, measured=meas)

    # --- one physics step ------------------------------------------------------

    def _valves(self, T_s, t_set):
        """Space-heating on/off per building and local tank charging flags."""
        Ti = self.T[:, 0]
        if self.active and self.cfg.scenario in ("distributed_active", "no_buffer_active"):
            lo, hi = self.cfg.comfort
            heat = (self.clear_on | (Ti < lo)) & (Ti < hi)
        else:
            heat = np.where(Ti < THERMOSTAT_LOW, True, np.where(Ti > THERMOSTAT_HIGH, False, self.heating))
        self.heating = heat
        if self.tanks is not None:
            means = self.tank_means()
            full = (self.tT[:, 0] > T_s - 2.0) | (means > t_set - 2.0)
            if self.active:
                self.t_on = (self.clear_t_on | (means < dp.TANK_BAND[0])) & ~full
            else:
                hi_ref = min(t_set - 3.0, dp.TANK_BAND[1])
                self.t_on = np.where(means < hi_ref - TANK_REF_HYST, True, np.where(means > hi_ref, False, self.t_on)) & ~full
        return heat

    def step(self):
        k, dt, n = self.k, self.dt, self.n
        tr = self.tr
        t_amb = float(self.prof.t_ambient[k])
        t_set = float(self.t_set[k])
        sec = t_set - SECONDARY_CURVE_OFFSET
        price = float(self.prof.price[k])
        module = "controller"
        try:
            if k == self.k0 and self.cfg.scenario in ACTIVE:
                module = "fitting"
                self._fit()
                self.active = True
                self.acc_cons, self.acc_n = 0.0, 0
            if self.active and k % self.nc == 0:
                module = "dispatch"
                self._control()

            # substations decide flows from last known inlet temperatures
            module = "building"
            T_s = self.net.building_supply_temps()
            Ti, Th = self.T[:, 0], self.T[:, 2]
            heat = self._valves(T_s, t_set)
            need = (sec - Th) / self.R_h
            dT = SUBSTATION_EFFECTIVENESS * (T_s - Th)
            with np.errstate(divide="ignore", invalid="ignore"):
                m_sh = np.where(dT > 1.0, need / (CP_WATER * np.maximum(dT, 1e-9)), self.max_flow)
            m_sh = np.where(heat & (need > 0), np.minimum(m_sh, self.max_flow), 0.0)

            dhw = self.dhw[k]
            if self.tanks is not None:
                from_tank = self.dhw_top() >= DHW_TEMP
                dhw_direct = np.where(from_tank, 0.0, dhw)
                m_ch = np.where(self.t_on, TANK_CHARGE_FLOW, 0.0)
            else:
                from_tank = np.zeros(n, dtype=bool)
                dhw_direct = dhw
                m_ch = np.zeros(n)
            m_dhw = dhw_direct / (CP_WATER * SUBSTATION_EFFECTIVENESS * np.maximum(T_s - MAINS_TEMP, 1.0))
            qb = m_sh + m_dhw + m_ch
            m_net = float(qb.sum())

            module = "hydronet"
            q, head, _ = pump_operating_point(self.graph, qb)

            module = "plant"
            T_r = self.net.plant_return_temp()
            T_sup, P_w = self._plant(m_net, T_r, t_set, price)

            module = "thermonet"
            loss_s = self.net.propagate_supply(q, m_net, T_sup, dt)
            T_s = self.net.building_supply_temps()

            module = "building"
            hs = m_sh > 0
            c_sec = 1.0 / self.R_h
            rise = SUBSTATION_EFFECTIVENESS * np.minimum(m_sh * CP_WATER, c_sec) * np.maximum(T_s - Th, 0.0) / c_sec
            T_hin = np.where(hs, np.minimum(sec, Th + rise), Th)
            pel = self.pel_base[k] * self.pel_scale
            b = self.b
            b[:, 0] = t_amb * self.g_ia + self.A_piv * self.prof.wind[k] + self.B_piv + pel + self.ra[k]
            b[:, 1] = t_amb / self.R_ea
            b[:, 2] = np.where(hs, T_hin / self.R_h, 0.0)
            from .building import cn_step_kernel

            cn_step_kernel(self.M, self.N, self.T, hs, b, self.R_h, T_hin, self.T_new, self.q_rad)
            self.T, self.T_new = self.T_new, self.T
            q_sh = self.q_rad.copy()
            with np.errstate(divide="ignore", invalid="ignore"):
                T_ret_sh = np.where(hs, T_s - q_sh / (np.maximum(m_sh, 1e-12) * CP_WATER), T_s)
                T_ret_dhw = T_s - dhw_direct / (np.maximum(m_dhw, 1e-12) * CP_WATER)

            q_ch = np.zeros(n)
            d_tank = np.zeros(n)
            ret_ch = T_s
            if self.tanks is not None:
                module = "storage"
                top = self.tT[:, -1]
                top_in = self.tTin[:, -1]
                want = np.where(from_tank, dhw, 0.0)
                kind = self.t_kind
                m_dis = np.where(kind == 0, want / (CP_WATER * np.maximum(top - DHW_HX_RETURN, 1.0)),
                                 np.where(kind == 1, want / (CP_WATER * np.maximum(top - MAINS_TEMP, 1.0)), 0.0))
                ret_dis = np.where(kind == 0, DHW_HX_RETURN, MAINS_TEMP)
                m_din = np.where(kind == 2, want / (CP_WATER * np.maximum(top_in - MAINS_TEMP, 1.0)), 0.0)
                e0 = self.tanks.energy(self.tT, self.tTin)
                ch_out, dis_out, din_out, tloss = self.tanks.step(
                    self.tT, self.tTin, m_ch, T_s, m_dis, ret_dis, m_din, MAINS_TEMP, self.T[:, 0], dt)
                ret_ch = ch_out
                q_ch = m_ch * CP_WATER * (T_s - ch_out)
                d_tank = m_dis * CP_WATER * (dis_out - ret_dis) + m_din * CP_WATER * (din_out - MAINS_TEMP)
                tr["ltank_loss"][k] = float(tloss.sum())
                tr["ltank_energy"][k] = float(self.tanks.energy(self.tT, self.tTin).sum())
                tr["tank_mean"][k] = float(np.average(self.tank_means(), weights=self.t_cap))

            with np.errstate(divide="ignore", invalid="ignore"):
                T_ret = np.where(qb > 0, (m_sh * T_ret_sh + m_dhw * T_ret_dhw + m_ch * ret_ch) / np.maximum(qb, 1e-12), T_s)
            module = "thermonet"
            loss_r = self.net.propagate_return(q, qb, T_ret, dt)
        except DhflexError as exc:
            raise SimulationError(k * dt, module, exc) from exc

        consumed = float(q_sh.sum() + dhw_direct.sum() + q_ch.sum())
        Ti = self.T[:, 0]
        tr["price"][k] = price
        tr["t_ambient"][k] = t_amb
        tr["t_set"][k] = t_set
        tr["m_net"][k] = m_net
        tr["consumed"][k] = consumed
        tr["q_space"][k] = float(q_sh.sum())
        tr["q_dhw_direct"][k] = float(dhw_direct.sum())
        tr["q_charge"][k] = float(q_ch.sum())
        tr["dhw_from_tank"][k] = float(d_tank.sum())
        tr["net_loss"][k] = loss_s + loss_r
        tr["loss_supply"][k] = loss_s
        tr["loss_return"][k] = loss_r
        tr["net_energy"][k] = self.net.stored_energy()
        tr["ti_mean"][k] = float(Ti.mean())
        tr["ti_std"][k] = float(Ti.std())
        tr["ti_min"][k] = float(Ti.min())
        tr["ti_max"][k] = float(Ti.max())
        tr["te_mean"][k] = float(self.T[:, 1].mean())
        tr["q_air"][k] = float(self.q_air_series[k])
        tr["pump_hydraulic"][k] = head * m_net / 1000.0 / 1000.0
        for f, v in self.ctrl.items():
            tr[f][k] = v
        self.acc_cons += consumed
        self.acc_n += 1
        self.k += 1
        self._record_snapshot()

    def _record_snapshot(self):
        """Temperatures at step boundaries (n + 1 samples) for model fitting."""
        snap = self._snap
        k = self.k
        snap["ti"][k] = self.T[:, 0].mean()
        snap["te"][k] = self.T[:, 1].mean()
        if self.tanks is not None:
            snap["tank"][k] = float(np.average(self.tank_means(), weights=self.t_cap))
        elif self.ctank is not None:
            snap["tank"][k] = self.central_mean()

    def start(self):
        self._snap = {"ti": np.zeros(self.n_steps + 1), "te": np.zeros(self.n_steps + 1), "tank": np.zeros(self.n_steps + 1)}
        self.k = 0
        self._record_snapshot()
        self.tr["net_energy0"] = self.net.stored_energy()

    # --- plant -------------------------------------------------------------------

    def _plant(self, m_net, T_r, t_set, price):
        """Decide production, return (supply temperature, heat into water excluding booster)."""
        tr, k, dt = self.tr, self.k, self.dt
        if self.ctank is not None:
            return self._central_plant(m_net, T_r, t_set, price)
        D = max(m_net * CP_WATER * (t_set - T_r), 0.0)
        st = self.plant
        if not self.active:
            st = reference_dispatch(st, D, float(self.prof.t_ambient_24h[k]), dt, t_in=T_r, chp=self.chp, boiler=self.boiler)
            chp_heat, boiler_heat = st.chp_heat, st.boiler_heat
        else:
            ch = dp.select_source(D, price, T_r, st.chp_on, st.since_switch, self.cfg.economics.gas_price, self.chp, self.boiler)
            on, since = step_chp_timer(self.chp, st, ch.chp, dt)
            h_min, h_max = chp_heat_range(self.chp, T_r)
            chp_heat = float(np.clip(D, h_min, h_max)) if on else 0.0
            boiler_heat = min(max(D - chp_heat, 0.0), boiler_max_heat(self.boiler, T_r))
            st = replace(st, chp_on=on, since_switch=since)
        P = chp_heat + boiler_heat
        dumped = 0.0
        if m_net > 1e-9:
            T_sup = T_r + P / (m_net * CP_WATER)
            cap = t_set + SUPPLY_OVERSHOOT
            if T_sup > cap:
                dumped = P - m_net * CP_WATER * (cap - T_r)
                T_sup = cap
        else:
            T_sup, dumped = t_set, P
        self._book(st, chp_heat, boiler_heat, 0.0, dumped, T_r, T_sup, m_net * CP_WATER * (T_sup - T_r))
        return T_sup, P

    def _central_plant(self, m_net, T_r, t_set, price):
        tr, k, dt = self.tr, self.k, self.dt
        st = self.plant
        D = max(m_net * CP_WATER * (t_set - T_r), 0.0)
        h_min, h_max = chp_heat_range(self.chp, T_r)
        b_max = boiler_max_heat(self.boiler, T_r)
        band_lo = t_set - CENTRAL_BAND_WIDTH
        soc = (self.central_mean() - band_lo) / CENTRAL_BAND_WIDTH
        if not self.active:
            # heat-led CHP with the buffer absorbing the surplus of minimum modulation
            if soc < 0.2:
                self.central_chp_mode = True
            elif soc > 0.9:
                self.central_chp_mode = False
            want = D >= h_min or self.central_chp_mode
            on, since = step_chp_timer(self.chp, st, want, dt)
            P = max(D, h_min) if on else 0.0
        else:
            ch = dp.select_source(self.target_p, price, T_r, st.chp_on, st.since_switch, self.cfg.economics.gas_price, self.chp, self.boiler)
            on, since = step_chp_timer(self.chp, st, ch.chp, dt)
            P = max(self.target_p, h_min) if on else self.target_p
        P = min(P, h_max + b_max)
        st = replace(st, chp_on=on, since_switch=since)
        Tc = self.cT
        T_bot = float(Tc[0, 0])
        e0 = float(self.ctank.energy(Tc, self.cTin)[0])
        booster = 0.0
        if P >= D:
            denom = CP_WATER * (t_set - T_bot)
            m_c = min((P - D) / denom, CENTRAL_CHARGE_MAX) if denom > 0.5 * CP_WATER else 0.0
            ch_out, _, _, loss = self.ctank.step(Tc, self.cTin, m_c, t_set, 0.0, T_r, 0.0, MAINS_TEMP, PLANT_ROOM_TEMP, dt)
            P_act = D + m_c * CP_WATER * (t_set - float(ch_out[0]))
            T_sup = t_set if m_net > 1e-9 else t_set
            t_in = (m_net * T_r + m_c * float(ch_out[0])) / max(m_net + m_c, 1e-12) if m_net + m_c > 0 else T_r
        else:
            m_p = min(P / (CP_WATER * (t_set - T_r)), m_net) if t_set - T_r > 0.5 else m_net
            m_d = m_net - m_p
            _, dis_out, _, loss = self.ctank.step(Tc, self.cTin, 0.0, t_set, m_d, T_r, 0.0, MAINS_TEMP, PLANT_ROOM_TEMP, dt)
            T_mix = (m_p * t_set + m_d * float(dis_out[0])) / m_net if m_net > 1e-9 else t_set
            P_act = P
            booster = max(m_net * CP_WATER * (t_set - T_mix), 0.0)
            t_in = T_r
        if on:
            chp_heat = float(np.clip(P_act, h_min, h_max))
            dumped = max(h_min - P_act, 0.0)
        else:
            chp_heat, dumped = 0.0, 0.0
        base_boiler = max(P_act - chp_heat, 0.0)
        booster = min(booster, max(b_max - base_boiler, 0.0))
        if P < D:
            T_sup = T_mix + booster / (m_net * CP_WATER) if m_net > 1e-9 else t_set
        tr["ctank_loss"][k] = float(loss[0])
        tr["ctank_energy"][k] = float(self.ctank.energy(Tc, self.cTin)[0])
        tr["tank_mean"][k] = self.central_mean()
        self._book(st, chp_heat, base_boiler + booster, booster, dumped, t_in, T_sup, m_net * CP_WATER * (T_sup - T_r))
        return T_sup, P_act

    def _book(self, st, chp_heat, boiler_heat, booster, dumped, t_in, T_sup, h_net):
        tr, k = self.tr, self.k
        fm_c, p_el, gas_c = self._chp_gas(chp_heat, t_in)
        fm_b, gas_b = boiler_gas_for_heat(self.boiler, boiler_heat, t_in)
        self.plant = replace(st, chp_fm=fm_c, boiler_fm=fm_b, chp_heat=chp_heat, boiler_heat=boiler_heat,
                             supply_setpoint=float(self.t_set[k]))
        tr["chp_heat"][k] = chp_heat
        tr["boiler_heat"][k] = boiler_heat
        tr["booster"][k] = booster
        tr["dumped"][k] = dumped
        tr["p_el"][k] = p_el
        tr["gas_chp"][k] = gas_c
        tr["gas_boiler"][k] = gas_b
        tr["chp_on"][k] = float(st.chp_on)
        tr["chp_fm"][k] = fm_c
        tr["boiler_fm"][k] = fm_b
        tr["t_supply"][k] = T_sup
        tr["t_return"][k] = t_in
        tr["h_net"][k] = h_net

    # --- driving -----------------------------------------------------------------

    def advance(self, until: int):
        if self.k == 0 and not hasattr(self, "_snap"):
            self.start()
        until = min(until, self.n_steps)
        while self.k < until:
            self.step()

    def result(self, runtime_s: float = 0.0) -> SimulationResult:
        if self.k < self.n_steps:
            raise ContractViolation("simulation has not reached the end of the test week")
        traces = {f: self.tr[f].copy() for f in TRACE_FIELDS}
        res = SimulationResult(self.cfg.scenario, self.dt, self.k0, traces, {}, models=self.fit_info,
                               runtime_s=runtime_s, config=self.cfg.to_dict())
        res.tallies = tally(res, self._net_energy_before_week(), self._ctank_before_week())
        res.profit = settle(res, self.cfg.economics)
        return res

    def _net_energy_before_week(self):
        return float(self.tr["net_energy"][self.k0 - 1]) if self.k0 > 0 else float(self.tr["net_energy0"])

    def _ctank_before_week(self):
        return float(self.tr["ctank_energy"][self.k0 - 1]) if self.k0 > 0 else 0.0


def tally(res: SimulationResult, net_e0: float, ctank_e0: float) -> dict:
    """Week integrals (kWh) and derived ratios, computed from the traces."""
    w = res.week
    h = res.dt / 3600.0
    kwh = lambda name: float(w(name).sum() * h)
    produced = kwh("chp_heat") + kwh("boiler_heat")
    consumed = kwh("consumed")
    d_net = (float(w("net_energy")[-1]) - net_e0) / 3600.0
    d_ct = (float(w("ctank_energy")[-1]) - ctank_e0) / 3600.0 if np.any(w("ctank_energy")) else 0.0
    losses = kwh("net_loss")
    closure = produced - (consumed + losses + d_net + d_ct + kwh("ctank_loss") + kwh("dumped"))
    lo = THERMOSTAT_LOW
    return {
        "consumed_kWh": consumed,
        "produced_kWh": produced,
        "chp_kWh": kwh("chp_heat"),
        "boiler_kWh": kwh("boiler_heat"),
        "electricity_kWh": kwh("p_el"),
        "gas_kWh": kwh("gas_chp") + kwh("gas_boiler"),
        "network_loss_kWh": losses,
        "network_storage_change_kWh": d_net,
        "central_tank_change_kWh": d_ct,
        "central_tank_loss_kWh": kwh("ctank_loss"),
        "local_tank_loss_kWh": kwh("ltank_loss"),
        "dumped_kWh": kwh("dumped"),
        "pump_hydraulic_kWh": kwh("pump_hydraulic"),
        "grid_efficiency": consumed / produced if produced > 0 else float("nan"),
        "closure_error": closure / produced if produced > 0 else 0.0,
        "ti_std_mean": float(w("ti_std").mean()),
        "ti_min": float(w("ti_min").min()),
        "ti_max": float(w("ti_max").max()),
        "comfort_deficit_Kh": float(np.maximum(lo - w("ti_min"), 0.0).sum() * h),
        "mean_ambient": float(w("t_ambient").mean()),
    }


def run(config: ScenarioConfig, profiles: Profiles | None = None) -> SimulationResult:
    """Simulate one scenario over pre-run plus test week."""
    t0 = time.perf_counter()
    sim = Simulation(config, profiles)
    sim.advance(sim.n_steps)
    return sim.result(time.perf_counter() - t0)


def run_all(config: ScenarioConfig, scenarios=SCENARIOS, progress=None) -> dict:
    """Run several scenarios; reference and no-buffer share their identical pre-run."""
    prof = load_profiles(config.weather_path, config.price_path, config.week, config.dt, config.prerun_days, config.days)
    out = {}
    shared = None
    for sc in scenarios:
        t0 = time.perf_counter()
        cfg = replace(config, scenario=sc)
        if sc in ("reference", "no_buffer_active"):
            if shared is None:
                base = Simulation(replace(config, scenario="reference"), prof)
                base.advance(base.k0)
                shared = (base, time.perf_counter() - t0)
                t0 = time.perf_counter()
            sim = copy.deepcopy(shared[0])
            sim.cfg = cfg
            pre = shared[1]
        else:
            sim = Simulation(cfg, prof)
            pre = 0.0
        sim.advance(sim.n_steps)
        out[sc] = sim.result(time.perf_counter() - t0 + pre)
        if progress:
            progress(sc, out[sc])
    return out
