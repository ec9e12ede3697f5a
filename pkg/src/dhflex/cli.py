"""``dhflex`` command line: run, fit, compare, validate."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .econ import capture_price, production_terciles, profit_ordering, table5_report
from .engine import ACTIVE, SCENARIOS, ScenarioConfig, Simulation, run, run_all


def _config(path, **overrides) -> ScenarioConfig:
    if path:
        return ScenarioConfig.from_yaml(path, **overrides)
    return ScenarioConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def _progress(name, res):
    t = res.tallies
    print(f"{name:<20} profit {res.profit.profit:9.1f} EUR  consumed {t['consumed_kWh']:9.0f} kWh  "
          f"efficiency {100 * t['grid_efficiency']:5.1f}%  ({res.runtime_s:.0f} s)", flush=True)


def cmd_run(args) -> int:
    cfg = _config(args.config, scenario=args.scenario)
    res = run(cfg)
    res.write(args.out)
    _progress(cfg.scenario, res)
    return 0


def cmd_fit(args) -> int:
    cfg = _config(args.config)
    if cfg.scenario not in ACTIVE:
        cfg = ScenarioConfig.from_dict({**cfg.to_dict(), "scenario": "distributed_active"})
    sim = Simulation(cfg)
    sim.advance(sim.k0 + 1)
    text = json.dumps({"scenario": cfg.scenario, "models": sim.fit_info}, indent=2)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_all(cfg, scenarios=SCENARIOS, progress=_progress)
    for res in results.values():
        res.write(out)
    rows = table5_report(results, out / "table5.csv")
    with (out / "profit.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["configuration", "gas_cost", "pump_cost", "heat_revenue", "electricity_revenue", "profit"])
        for name, r in results.items():
            p = r.profit
            w.writerow([name, p.gas_cost, p.pump_cost, p.heat_revenue, p.electricity_revenue, p.profit])
    profits = {k: r.profit.profit for k, r in results.items()}
    summary = {
        "profit": profits,
        "ordering": profit_ordering(profits),
        "table5": rows,
        "production_terciles": production_terciles(results),
        "ti_std_mean": {k: r.tallies["ti_std_mean"] for k, r in results.items()},
        "capture_price": {k: capture_price(r) for k, r in results.items()},
        "runtime_s": {k: r.runtime_s for k, r in results.items()},
    }
    (out / "comparison.json").write_text(json.dumps(summary, indent=2) + "\n")
    verdict = "holds" if summary["ordering"]["ordering_holds"] else "does not hold"
    print(f"profit ordering {verdict}; report in {out}")
    return 0


def cmd_validate(args) -> int:
    from .validation import run_checks

    return 0 if run_checks() else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dhflex", description="District heating network flexibility simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one scenario")
    p.add_argument("--scenario", choices=SCENARIOS, required=True)
    p.add_argument("--config", help="YAML scenario configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fit", help="run the pre-run and print the fitted aggregate models")
    p.add_argument("--config", help="YAML scenario configuration")
    p.add_argument("--out", help="optional JSON file for the fitted models")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="run all four scenarios and write the comparison report")
    p.add_argument("--config", help="YAML configuration shared by all scenarios")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="run the built-in oracle checks")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        from .errors import DhflexError

        if isinstance(exc, DhflexError):
            print(f"dhflex: {exc}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
