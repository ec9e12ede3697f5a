import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhflex.errors import IngestionError
from dhflex.profiles import (
    SEASON_END,
    SEASON_START,
    bundled_path,
    load_profiles,
    read_series,
    select_representative_week,
)


def _season_hours():
    n = int((SEASON_END - SEASON_START).total_seconds() // 3600)
    return [SEASON_START + dt.timedelta(hours=i) for i in range(n)]


HOURS = _season_hours()


def _brute_force_week(times, values):
    season = float(np.mean(values))
    best, best_gap, k = None, np.inf, 0
    for i, t in enumerate(times):
        if t.weekday() == 0 and t.hour == 0 and i + 168 <= len(times):
            gap = abs(np.mean(values[i:i + 168]) - season)
            if gap < best_gap:
                best, best_gap = k, gap
            k += 1
    return best


def _write(path, header, rows):
    path.write_text(",".join(header) + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    return path


def test_constant_series_picks_first_week():
    sel = select_representative_week(HOURS, np.full(len(HOURS), 5.0))
    assert sel.index == 0
    assert sel.start == min(t for t in HOURS if t.weekday() == 0 and t.hour == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_week_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    vals = np.cumsum(rng.normal(0, 0.3, len(HOURS))) + rng.normal(0, 2, len(HOURS))
    sel = select_representative_week(HOURS, vals)
    assert sel.index == _brute_force_week(HOURS, vals)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_selected_week_is_argmin(seed):
    vals = np.random.default_rng(seed).normal(5, 4, len(HOURS))
    sel = select_representative_week(HOURS, vals)
    season = vals.mean()
    mondays = [i for i, t in enumerate(HOURS) if t.weekday() == 0 and t.hour == 0 and i + 168 <= len(HOURS)]
    gaps = [abs(vals[i:i + 168].mean() - season) for i in mondays]
    assert abs(sel.week_mean - season) <= min(gaps) + 1e-12


def test_bundled_week_46_mean_ambient():
    p = load_profiles(week=46, dt=60.0)
    assert 5.2 <= p.week_mean_ambient <= 7.2
    assert p.week_start_step == 10 * 1440
    assert p.n_steps == 17 * 1440


def test_bundled_weather_representative_week_is_46():
    s = read_series(bundled_path("weather.csv"))
    assert select_representative_week(s.times, s.columns["t_ambient"]).iso_week == 46


def test_constant_price_file_interpolates_constant(tmp_path):
    rows = [(t.isoformat(), 42.0) for t in HOURS]
    price = _write(tmp_path / "p.csv", ["timestamp", "price"], rows)
    p = load_profiles(price_path=price, dt=60.0)
    assert np.all(p.price == 42.0)


def test_hourly_to_quarter_hour_anchors(tmp_path):
    rng = np.random.default_rng(3)
    vals = rng.normal(50, 10, len(HOURS)).round(2)
    price = _write(tmp_path / "p.csv", ["timestamp", "price"], [(t.isoformat(), v) for t, v in zip(HOURS, vals)])
    p = load_profiles(price_path=price, dt=900.0)
    i0 = HOURS.index(p.start)
    np.testing.assert_allclose(p.price[::4], vals[i0:i0 + len(p.price[::4])], rtol=0, atol=1e-9)
    # in between: linear
    np.testing.assert_allclose(p.price[2::4][:50], 0.5 * (vals[i0:i0 + 50] + vals[i0 + 1:i0 + 51]), atol=1e-9)


def test_gap_reports_row(tmp_path):
    rows = [(t.isoformat(), 1.0) for t in HOURS[:10]]
    del rows[5]
    f = _write(tmp_path / "g.csv", ["timestamp", "price"], rows)
    with pytest.raises(IngestionError) as exc:
        read_series(f)
    assert exc.value.row == 7


def test_non_monotone_reports_row(tmp_path):
    rows = [(t.isoformat(), 1.0) for t in HOURS[:10]]
    rows[4], rows[5] = rows[5], rows[4]
    f = _write(tmp_path / "m.csv", ["timestamp", "price"], rows)
    with pytest.raises(IngestionError) as exc:
        read_series(f)
    assert exc.value.row in (6, 7)


def test_unreadable_value_reports_row(tmp_path):
    rows = [(t.isoformat(), 1.0) for t in HOURS[:10]]
    rows[2] = (rows[2][0], "abc")
    f = _write(tmp_path / "u.csv", ["timestamp", "price"], rows)
    with pytest.raises(IngestionError, match="row 4"):
        read_series(f)


def test_window_not_covered(tmp_path):
    rows = [(t.isoformat(), 1.0) for t in HOURS[:500]]
    f = _write(tmp_path / "short.csv", ["timestamp", "price"], rows)
    with pytest.raises(IngestionError):
        load_profiles(price_path=f)
