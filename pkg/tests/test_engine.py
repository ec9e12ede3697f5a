import json

import numpy as np
import pytest

from dhflex.engine import SCENARIOS, ScenarioConfig, SimulationResult, run, run_all
from dhflex.errors import ContractViolation
from dhflex.profiles import SEASON_END, SEASON_START

SHORT = dict(prerun_days=2.0, days=1.0)


@pytest.fixture(scope="module")
def short_runs():
    return run_all(ScenarioConfig(**SHORT))


def test_config_rejects_bad_tag():
    with pytest.raises(ContractViolation):
        ScenarioConfig(scenario="hybrid")


@pytest.mark.parametrize("dt", [0.0, 120.0, 7.0])
def test_config_rejects_bad_step(dt):
    with pytest.raises(ContractViolation):
        ScenarioConfig(dt=dt)


def test_config_rejects_missing_file(tmp_path):
    with pytest.raises(ContractViolation):
        ScenarioConfig(weather_path=str(tmp_path / "nope.csv"))


def test_active_needs_prerun():
    with pytest.raises(ContractViolation):
        ScenarioConfig(scenario="central_active", prerun_days=0.5)
    ScenarioConfig(scenario="reference", prerun_days=0.0)


def test_config_yaml_roundtrip(tmp_path):
    import yaml

    cfg = ScenarioConfig(scenario="no_buffer_active", seed=4, days=2.0)
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump(cfg.to_dict()))
    assert ScenarioConfig.from_yaml(f) == cfg
    assert ScenarioConfig.from_yaml(f, scenario="reference").scenario == "reference"


def test_config_unknown_key():
    with pytest.raises(ContractViolation):
        ScenarioConfig.from_dict({"sceanrio": "reference"})


def test_all_scenarios_short(short_runs):
    assert set(short_runs) == set(SCENARIOS)
    for name, r in short_runs.items():
        t = r.tallies
        assert abs(t["closure_error"]) < 0.005, name
        assert 0.80 < t["grid_efficiency"] < 1.0, name
        assert t["ti_min"] > 18.5 and t["ti_max"] < 23.0, name
        assert r.week("consumed").shape == (1440,)


def test_tallies_match_trace_integrals(short_runs):
    for r in short_runs.values():
        h = r.dt / 3600.0
        for key, field in (("consumed_kWh", "consumed"), ("chp_kWh", "chp_heat"), ("boiler_kWh", "boiler_heat")):
            assert r.tallies[key] == pytest.approx(r.week(field).sum() * h, rel=1e-4)
        assert r.tallies["produced_kWh"] == pytest.approx(r.tallies["chp_kWh"] + r.tallies["boiler_kWh"], rel=1e-4)


def test_active_models_fitted(short_runs):
    for name in ("distributed_active", "no_buffer_active"):
        assert short_runs[name].models["building"]["C_a"] > 0
    assert "tank" in short_runs["distributed_active"].models
    assert short_runs["central_active"].models["tank"]["C_s"] > 0
    assert short_runs["reference"].models == {}


def test_shared_prerun_matches_fresh_run(short_runs):
    fresh = run(ScenarioConfig(scenario="no_buffer_active", **SHORT))
    np.testing.assert_array_equal(fresh.traces["t_supply"], short_runs["no_buffer_active"].traces["t_supply"])


def test_deterministic():
    cfg = ScenarioConfig(scenario="distributed_active", prerun_days=2.0, days=0.25)
    a, b = run(cfg), run(cfg)
    for f in a.traces:
        np.testing.assert_array_equal(a.traces[f], b.traces[f], err_msg=f)


def test_write_outputs(short_runs, tmp_path):
    r: SimulationResult = short_runs["central_active"]
    r.write(tmp_path)
    assert (tmp_path / "central_active_trace.csv").is_file()
    assert (tmp_path / "central_active_plant.csv").is_file()
    assert (tmp_path / "central_active_planner.csv").is_file()
    s = json.loads((tmp_path / "central_active_summary.json").read_text())
    assert s["profit"]["profit"] == pytest.approx(r.profit.profit)


def _constant_weather(path, temp):
    import datetime as dt

    n = int((SEASON_END - SEASON_START).total_seconds() // 3600)
    lines = ["timestamp,t_ambient,wind,solar"]
    lines += [f"{(SEASON_START + dt.timedelta(hours=i)).isoformat()},{temp},0,0" for i in range(n)]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_no_load_production_is_standing_losses(tmp_path):
    w = _constant_weather(tmp_path / "w.csv", 20.0)
    cfg = ScenarioConfig(weather_path=str(w), dhw_litres_per_day=0.0, prerun_days=1.0, days=1.0)
    r = run(cfg)
    t = r.tallies
    # without a bypass nothing circulates, so the pipes cool and the plant idles
    assert t["consumed_kWh"] == pytest.approx(0.0, abs=1e-9)
    assert t["network_loss_kWh"] > 0
    assert t["produced_kWh"] <= t["network_loss_kWh"]
    assert t["produced_kWh"] == pytest.approx(t["network_loss_kWh"] + t["network_storage_change_kWh"], abs=1e-6)
