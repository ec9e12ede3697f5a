"""Settlement of a simulated week and the scenario comparison table."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ContractViolation

GAS_PRICE = 39.9  # EUR/MWh
HEAT_PRICE = 54.5  # EUR/MWh
PUMP_TARIFF = 150.0  # EUR/MWh electricity
PUMP_EFFICIENCY = 0.7


@dataclass(frozen=True)
class EconomicsParams:
    gas_price: float = GAS_PRICE
    heat_price: float = HEAT_PRICE
    pump_tariff: float = PUMP_TARIFF
    pump_efficiency: float = PUMP_EFFICIENCY

    def __post_init__(self):
        if min(self.gas_price, self.heat_price, self.pump_tariff) < 0:
            raise ContractViolation("gas, heat and pump prices must be non-negative")
        if not 0 < self.pump_efficiency <= 1:
            raise ContractViolation("pump efficiency must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict | None) -> "EconomicsParams":
        return cls(**(d or {}))

    def scaled(self, c: float) -> "EconomicsParams":
        return EconomicsParams(self.gas_price * c, self.heat_price * c, self.pump_tariff * c, self.pump_efficiency)


@dataclass(frozen=True)
class ProfitBreakdown:
    gas_cost: float
    pump_cost: float
    heat_revenue: float
    electricity_revenue: float

    @property
    def profit(self) -> float:
        return (self.heat_revenue + self.electricity_revenue) - (self.gas_cost + self.pump_cost)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profit"] = self.profit
        return d


def settle_arrays(dt: float, gas_kw, el_kw, spot, delivered_kw, pump_hydraulic_kw, params: EconomicsParams | None = None) -> ProfitBreakdown:
    """Money for per-step powers (kW) held over ``dt`` seconds; ``spot`` in EUR/MWh."""
    params = params or EconomicsParams()
    arrs = [np.asarray(a, dtype=float) for a in (gas_kw, el_kw, spot, delivered_kw, pump_hydraulic_kw)]
    n = {a.shape for a in arrs}
    if len(n) != 1:
        raise AlignmentError(f"series lengths differ: {sorted(a.shape[0] for a in arrs)}")
    gas, el, price, heat, pump = arrs
    mwh = dt / 3600.0 / 1000.0
    return ProfitBreakdown(
        gas_cost=float(gas.sum() * mwh * params.gas_price),
        pump_cost=float(pump.sum() / params.pump_efficiency * mwh * params.pump_tariff),
        heat_revenue=float(heat.sum() * mwh * params.heat_price),
        electricity_revenue=float((el * price).sum() * mwh),
    )


def settle(result, params: EconomicsParams | None = None) -> ProfitBreakdown:
    """Profit over the test week of a simulation result."""
    w = result.week
    return settle_arrays(result.dt, w("gas_chp") + w("gas_boiler"), w("p_el"), w("price"), w("consumed"), w("pump_hydraulic"), params)


TABLE5_COLUMNS = ("consumed_kWh", "produced_kWh", "chp_kWh", "boiler_kWh")


def _tallies(r) -> dict:
    return r if isinstance(r, dict) else r.tallies


def table5_report(results: dict, out: str | Path | None = None) -> list[dict]:
    """Consumed and produced energy per scenario with percentage change against the reference."""
    if "reference" not in results:
        raise ContractViolation("comparison needs the reference scenario")
    ref = _tallies(results["reference"])
    rows = []
    for name, r in results.items():
        t = _tallies(r)
        row = {"configuration": name}
        for col in TABLE5_COLUMNS:
            row[col] = float(t[col])
            row[col.replace("_kWh", "_delta_pct")] = 100.0 * (t[col] - ref[col]) / ref[col] if ref[col] else 0.0
        row["grid_efficiency_pct"] = 100.0 * t["consumed_kWh"] / t["produced_kWh"] if t["produced_kWh"] else float("nan")
        rows.append(row)
    if out is not None:
        with Path(out).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows


def profit_ordering(profits: dict, tie_rel: float = 0.02, margin_rel: float = 0.10) -> dict:
    """Check distributed >= no-buffer (or within ``tie_rel``) > central > reference, reference lowest by ``margin_rel``."""
    p = profits
    d, nb, c, r = p["distributed_active"], p["no_buffer_active"], p["central_active"], p["reference"]
    checks = {
        "distributed_vs_no_buffer": d >= nb or abs(d - nb) <= tie_rel * abs(nb),
        "no_buffer_above_central": nb > c,
        "central_above_reference": c > r,
        "reference_lowest_by_margin": all(v - r >= margin_rel * abs(r) for k, v in p.items() if k != "reference"),
    }
    checks["ordering_holds"] = all(checks.values())
    return checks


def production_terciles(results: dict) -> dict:
    """Share of test-week steps with total production in the low, middle and high third.

    The thirds split [0, highest production seen in any scenario], so every
    scenario is binned on the same axis.
    """
    prod = {k: r.week("chp_heat") + r.week("boiler_heat") for k, r in results.items()}
    top = max(float(p.max()) for p in prod.values())
    if top <= 0:
        return {k: [1.0, 0.0, 0.0] for k in prod}
    return {k: (np.histogram(p, bins=3, range=(0.0, top))[0] / len(p)).tolist() for k, p in prod.items()}


def capture_price(result) -> float:
    """Electricity revenue per MWh generated (EUR/MWh)."""
    el = result.week("p_el")
    return float((el * result.week("price")).sum() / el.sum()) if el.sum() > 0 else float("nan")
