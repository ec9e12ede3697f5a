"""Input time series: bundled synthetic weather and spot prices, ingestion and week selection.

The bundled files are a seeded stand-in for a Belgian typical-meteorological-year
heating season (1 Oct to 30 Apr, hourly) and a day-ahead price series with a
weekday double peak, mean reversion and occasional spikes.
"""
from __future__ import annotations

import csv
import datetime as _dt
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import IngestionError

SEASON_START = _dt.datetime(2012, 10, 1)
SEASON_END = _dt.datetime(2013, 5, 1)  # exclusive
LATITUDE = 50.85
SEASON_MEAN_TARGET = 6.1
WEEK_MEAN_TARGET = 6.2
TARGET_WEEK = 46


def _hours():
    n = int((SEASON_END - SEASON_START).total_seconds() // 3600)
    return [SEASON_START + _dt.timedelta(hours=i) for i in range(n)]


def _ar1(rng, n, tau_h, std):
    a = np.exp(-1.0 / tau_h)
    e = rng.normal(0.0, std * np.sqrt(1 - a * a), n)
    x = np.empty(n)
    x[0] = rng.normal(0.0, std)
    for i in range(1, n):
        x[i] = a * x[i - 1] + e[i]
    return x


def _clear_sky(times) -> np.ndarray:
    """Horizontal clear-sky irradiance (kW/m2) from solar elevation."""
    doy = np.array([t.timetuple().tm_yday for t in times])
    hour = np.array([t.hour + 0.5 for t in times])
    decl = np.radians(23.44) * np.sin(2 * np.pi * (284 + doy) / 365.0)
    ha = np.radians(15.0 * (hour - 12.5))
    lat = np.radians(LATITUDE)
    sin_el = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(ha)
    return np.where(sin_el > 0, 1.0 * sin_el * 0.7 ** (1 / np.maximum(sin_el, 0.05) ** 0.678), 0.0)


def _week_windows(times, values):
    """(iso week, start index, mean) for every full Monday-to-Sunday week in the series."""
    out = []
    for i, t in enumerate(times):
        if t.weekday() == 0 and t.hour == 0 and i + 168 <= len(times):
            out.append((t.isocalendar()[1], i, float(np.mean(values[i:i + 168]))))
    return out


def synthetic_weather(seed: int = 7):
    """Hourly (times, ambient degC, wind m/s, solar kW/m2).

    The seasonal cycle, diurnal swing and synoptic anomaly are random; a
    smooth correction then pins the season mean to 6.1 degC and week 46 to
    6.2 degC so that it is the representative week.
    """
    times = _hours()
    n = len(times)
    doy = np.array([t.timetuple().tm_yday for t in times], dtype=float)
    hour = np.array([t.hour for t in times], dtype=float)
    for s in range(seed, seed + 200):
        rng = np.random.default_rng(s)
        seasonal = 10.4 - 7.4 * np.cos(2 * np.pi * (doy - 15.0) / 365.0)
        diurnal = 2.5 * np.cos(2 * np.pi * (hour - 15.0) / 24.0)
        anomaly = _ar1(rng, n, 60.0, 3.0)
        temp = seasonal + diurnal + anomaly
        start = next(i for w, i, _ in _week_windows(times, temp) if w == TARGET_WEEK)
        bump = np.zeros(n)
        lo, hi = start - 24, start + 168 + 24
        taper = np.ones(hi - lo)
        taper[:24] = np.sin(np.linspace(0, np.pi / 2, 24)) ** 2
        taper[-24:] = taper[:24][::-1]
        bump[lo:hi] = taper
        for _ in range(4):
            temp += SEASON_MEAN_TARGET - temp.mean()
            temp += bump * (WEEK_MEAN_TARGET - temp[start:start + 168].mean()) / bump[start:start + 168].mean()
        temp += SEASON_MEAN_TARGET - temp.mean()
        weeks = _week_windows(times, temp)
        gaps = {w: abs(m - temp.mean()) for w, _, m in weeks}
        if min(gaps, key=gaps.get) == TARGET_WEEK and all(g > gaps[TARGET_WEEK] + 0.02 for w, g in gaps.items() if w != TARGET_WEEK):
            break
    wind = np.clip(4.0 + _ar1(rng, n, 24.0, 2.0), 0.0, None)
    cloud = np.clip(0.55 + _ar1(rng, n, 18.0, 0.3), 0.05, 1.0)
    solar = _clear_sky(times) * cloud
    return times, temp, wind, solar


def synthetic_prices(times, seed: int = 2012) -> np.ndarray:
    """Hourly day-ahead price (EUR/MWh)."""
    rng = np.random.default_rng(seed)
    h = np.array([t.hour for t in times], dtype=float)
    weekend = np.array([t.weekday() >= 5 for t in times])
    shape = (
        -9.0 * np.exp(-0.5 * ((h - 4.0) / 2.0) ** 2)
        + 12.0 * np.exp(-0.5 * ((h - 9.5) / 1.8) ** 2)
        + 16.0 * np.exp(-0.5 * ((h - 18.5) / 1.6) ** 2)
    )
    base = 47.0 - 7.0 * weekend + np.where(weekend, 0.5, 1.0) * shape
    noise = _ar1(rng, len(times), 8.0, 6.0)
    spikes = (rng.random(len(times)) < 0.006) * rng.uniform(30.0, 110.0, len(times))
    return np.round(base + noise + spikes, 2)


def write_bundled(directory) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    times, temp, wind, solar = synthetic_weather()
    price = synthetic_prices(times)
    wpath, ppath = d / "weather.csv", d / "prices.csv"
    with wpath.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "t_ambient", "wind", "solar"])
        for t, a, b, c in zip(times, temp, wind, solar):
            w.writerow([t.isoformat(), f"{a:.2f}", f"{b:.2f}", f"{c:.4f}"])
    with ppath.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "price"])
        for t, p in zip(times, price):
            w.writerow([t.isoformat(), f"{p:.2f}"])
    return wpath, ppath


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("dhflex") / "data" / name))


# --- ingestion ---------------------------------------------------------------------


@dataclass
class Series:
    times: list
    columns: dict


def read_series(path) -> Series:
    """Read a timestamped CSV; timestamps must increase with a constant spacing."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3:
        raise IngestionError(f"{path}: need a header and at least two rows", row=None)
    header = rows[0]
    times, data = [], []
    for i, r in enumerate(rows[1:], start=2):
        try:
            times.append(_dt.datetime.fromisoformat(r[0]))
            data.append([float(x) for x in r[1:]])
        except (ValueError, IndexError) as exc:
            raise IngestionError(f"{path}: unreadable row ({exc})", row=i) from None
    step = times[1] - times[0]
    if step.total_seconds() <= 0:
        raise IngestionError(f"{path}: timestamps not increasing", row=3)
    for i in range(1, len(times)):
        gap = times[i] - times[i - 1]
        if gap.total_seconds() <= 0:
            raise IngestionError(f"{path}: timestamps not increasing", row=i + 2)
        if gap != step:
            raise IngestionError(f"{path}: gap of {gap} in the series", row=i + 2)
    arr = np.array(data, dtype=float)
    return Series(times, {name: arr[:, j] for j, name in enumerate(header[1:])})


@dataclass
class WeekSelection:
    index: int  # position among the full weeks of the series
    iso_week: int
    start: _dt.datetime
    week_mean: float
    season_mean: float


def select_representative_week(times, values, season=(None, None)) -> WeekSelection:
    """Full calendar week whose mean is closest to the season mean; ties go to the earliest."""
    lo, hi = season
    keep = [i for i, t in enumerate(times) if (lo is None or t >= lo) and (hi is None or t < hi)]
    ts = [times[i] for i in keep]
    vals = np.asarray(values, dtype=float)[keep]
    season_mean = float(vals.mean())
    per_hour = round(3600.0 / (ts[1] - ts[0]).total_seconds()) if len(ts) > 1 else 1
    span = 168 * per_hour
    weeks = []
    for i, t in enumerate(ts):
        if t.weekday() == 0 and t.hour == 0 and t.minute == 0 and i + span <= len(ts):
            weeks.append((i, t, float(vals[i:i + span].mean())))
    if not weeks:
        raise IngestionError("series holds no full calendar week", row=None)
    gaps = np.array([abs(m - season_mean) for _, _, m in weeks])
    k = int(np.flatnonzero(gaps <= gaps.min())[0])
    i, t, m = weeks[k]
    return WeekSelection(k, t.isocalendar()[1], t, m, season_mean)


@dataclass
class Profiles:
    """Inputs interpolated to the global step, starting ``prerun_days`` before the test week."""

    dt: float
    start: _dt.datetime
    week_start_step: int
    t_ambient: np.ndarray
    t_ambient_24h: np.ndarray
    wind: np.ndarray
    solar: np.ndarray
    price: np.ndarray
    week: WeekSelection | None = None

    @property
    def n_steps(self) -> int:
        return len(self.t_ambient)

    def hours(self) -> np.ndarray:
        """Hour of day of each step."""
        return (self.start.hour + np.arange(self.n_steps) * self.dt / 3600.0) % 24.0

    @property
    def week_mean_ambient(self) -> float:
        return float(self.t_ambient[self.week_start_step:].mean())


def _interp(series_times, values, start, n, dt):
    t0 = series_times[0]
    src = np.array([(t - t0).total_seconds() for t in series_times])
    dst = (start - t0).total_seconds() + np.arange(n) * dt
    if dst[0] < src[0] - 1e-6 or dst[-1] > src[-1] + 1e-6:
        raise IngestionError("series does not cover the requested window", row=None)
    return np.interp(dst, src, values)


def load_profiles(weather_path=None, price_path=None, week=TARGET_WEEK, dt: float = 60.0, prerun_days: float = 10.0,
                  days: float = 7.0) -> Profiles:
    """Interpolate weather and prices onto the global step for pre-run plus test week.

    ``week`` is an ISO week number or ``"auto"`` for the representative week.
    """
    weather = read_series(weather_path or bundled_path("weather.csv"))
    prices = read_series(price_path or bundled_path("prices.csv"))
    amb = weather.columns["t_ambient"]
    sel = None
    if week == "auto":
        sel = select_representative_week(weather.times, amb)
        week_start = sel.start
    else:
        starts = [t for t in weather.times if t.weekday() == 0 and t.hour == 0 and t.minute == 0 and t.isocalendar()[1] == int(week)]
        if not starts:
            raise IngestionError(f"week {week} not found in the weather series", row=None)
        week_start = starts[0]
    start = week_start - _dt.timedelta(days=prerun_days)
    n = int(round((prerun_days + days) * 86400.0 / dt))
    t_amb = _interp(weather.times, amb, start, n, dt)
    # trailing 24 h mean on the source resolution, then interpolated
    w_step = (weather.times[1] - weather.times[0]).total_seconds()
    k = max(int(round(86400.0 / w_step)), 1)
    c = np.cumsum(np.r_[0.0, amb])
    idx = np.arange(len(amb))
    lo = np.maximum(idx + 1 - k, 0)
    mean24 = (c[idx + 1] - c[lo]) / (idx + 1 - lo)
    return Profiles(
        dt=dt,
        start=start,
        week_start_step=int(round(prerun_days * 86400.0 / dt)),
        t_ambient=t_amb,
        t_ambient_24h=_interp(weather.times, mean24, start, n, dt),
        wind=_interp(weather.times, weather.columns["wind"], start, n, dt),
        solar=_interp(weather.times, weather.columns["solar"], start, n, dt),
        price=_interp(prices.times, prices.columns["price"], start, n, dt),
        week=sel,
    )
