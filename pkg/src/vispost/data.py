"""Forecast / observation records, CSV ingestion and the synthetic generator."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta, timezone
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .scale import MAX_VISIBILITY, N_CLASSES, round_down, scale_values, value_of

log = logging.getLogger(__name__)

N_MEMBERS = 50
MEMBER_COLUMNS = [f"m{j:02d}" for j in range(1, N_MEMBERS + 1)]
FORECAST_HEADER = ["station_id", "init_time", "lead_h", "hres", "ctrl", *MEMBER_COLUMNS]
OBSERVATION_HEADER = ["station_id", "valid_time", "visibility_m"]
STATION_HEADER = ["station_id", "lat", "lon"]
PREDICTION_HEADER = ["station_id", "init_time", "lead_h", "obs_class", *(f"p{k}" for k in range(1, N_CLASSES + 1))]


class DataFormatError(ValueError):
    """A CSV file does not follow its column contract."""


@dataclass(frozen=True)
class ForecastRecord:
    station_id: str
    init_time: datetime
    lead_time_h: int
    ctrl: float
    members: tuple[float, ...] | None
    hres: float | None = None

    def __post_init__(self):
        if self.lead_time_h <= 0 or self.lead_time_h % 6:
            raise ValueError(f"lead time {self.lead_time_h} h is not a positive multiple of 6")
        if self.members is not None and len(self.members) != N_MEMBERS:
            raise ValueError(f"expected {N_MEMBERS} members, got {len(self.members)}")
        values = [self.ctrl, *(self.members or ()), *(() if self.hres is None else (self.hres,))]
        if any(not v >= 0 for v in values):
            raise ValueError("forecast values must be non-negative meters")

    @property
    def valid_time(self) -> datetime:
        return self.init_time + timedelta(hours=self.lead_time_h)


@dataclass(frozen=True)
class ObservationRecord:
    station_id: str
    valid_time: datetime
    visibility_class: int

    def __post_init__(self):
        if not 1 <= self.visibility_class <= N_CLASSES:
            raise ValueError(f"visibility class {self.visibility_class} outside 1..{N_CLASSES}")

    @property
    def visibility_m(self) -> float:
        return value_of(self.visibility_class)


@dataclass(frozen=True)
class StationMeta:
    station_id: str
    latitude: float
    longitude: float

    def __post_init__(self):
        if abs(self.latitude) > 90 or abs(self.longitude) > 180:
            raise ValueError(f"station {self.station_id}: coordinates out of range")


@dataclass(frozen=True)
class ForecastCase:
    forecast: ForecastRecord
    observation: ObservationRecord
    day_of_year: int

    @property
    def station_id(self) -> str:
        return self.forecast.station_id

    @property
    def lead_time_h(self) -> int:
        return self.forecast.lead_time_h

    @property
    def obs_class(self) -> int:
        return self.observation.visibility_class


def day_of_year(t: datetime | date) -> int:
    """Day of year on a 365-day calendar; Feb 29 shares day 59 with Feb 28."""
    d = t.timetuple().tm_yday
    leap = t.year % 4 == 0 and (t.year % 100 != 0 or t.year % 400 == 0)
    if leap and d >= 60:
        d -= 1
    return d


# -- time and number formatting ------------------------------------------------


def parse_time(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    t = datetime.fromisoformat(text)
    if t.tzinfo is None:
        return t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def format_time(t: datetime) -> str:
    return t.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def format_number(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _parse_meters(text: str, row: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataFormatError(f"row {row}: column {column!r} is not a number: {text!r}") from None
    if not (v >= 0 and math.isfinite(v)):
        raise DataFormatError(f"row {row}: column {column!r} must be non-negative, got {text!r}")
    return v


def _read_rows(path, header: list[str], optional: Sequence[str] = ()):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: missing header") from None
        columns = [c.strip() for c in columns]
        unknown = [c for c in columns if c not in header]
        if unknown:
            raise DataFormatError(f"{path}: unknown column(s) {unknown}")
        missing = [c for c in header if c not in columns and c not in optional]
        if missing:
            raise DataFormatError(f"{path}: missing column(s) {missing}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(columns):
                raise DataFormatError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(columns)}"
                )
            yield lineno, dict(zip(columns, row))


# -- loaders -------------------------------------------------------------------


def load_forecasts(path) -> list[ForecastRecord]:
    """Read a forecasts CSV (``station_id,init_time,lead_h,hres,ctrl,m01..m50``).

    Empty ``hres`` cells mean the high-resolution run is absent; a row whose
    member cells are all empty carries ``members=None`` and is dropped later
    by :func:`join_cases`.
    """
    records = []
    seen = set()
    for row, rec in _read_rows(path, FORECAST_HEADER, optional=("hres",)):
        try:
            station = rec["station_id"].strip()
            init = parse_time(rec["init_time"])
            lead = int(rec["lead_h"])
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {row}: {exc}") from None
        hres_text = rec.get("hres", "").strip()
        hres = _parse_meters(hres_text, row, "hres") if hres_text else None
        ctrl = _parse_meters(rec["ctrl"], row, "ctrl")
        cells = [rec[c].strip() for c in MEMBER_COLUMNS]
        filled = [c for c in cells if c]
        if not filled:
            members = None
        elif len(filled) != N_MEMBERS:
            raise DataFormatError(
                f"{path}: row {row} has {len(filled)} member values, expected {N_MEMBERS}"
            )
        else:
            members = tuple(_parse_meters(c, row, name) for c, name in zip(cells, MEMBER_COLUMNS))
        key = (station, init, lead)
        if key in seen:
            raise DataFormatError(f"{path}: row {row} duplicates forecast key {key}")
        seen.add(key)
        try:
            records.append(ForecastRecord(station, init, lead, ctrl, members, hres))
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {row}: {exc}") from None
    return records


def load_observations(path) -> list[ObservationRecord]:
    """Read an observations CSV; meter values are rounded down onto the scale."""
    records = []
    seen = set()
    for row, rec in _read_rows(path, OBSERVATION_HEADER):
        station = rec["station_id"].strip()
        try:
            t = parse_time(rec["valid_time"])
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {row}: {exc}") from None
        vis = _parse_meters(rec["visibility_m"], row, "visibility_m")
        if (station, t) in seen:
            raise DataFormatError(f"{path}: row {row} duplicates observation ({station}, {t})")
        seen.add((station, t))
        records.append(ObservationRecord(station, t, round_down(vis)))
    return records


def load_stations(path) -> list[StationMeta]:
    records = []
    seen = set()
    for row, rec in _read_rows(path, STATION_HEADER):
        station = rec["station_id"].strip()
        if station in seen:
            raise DataFormatError(f"{path}: row {row} duplicates station {station!r}")
        seen.add(station)
        try:
            records.append(StationMeta(station, float(rec["lat"]), float(rec["lon"])))
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {row}: {exc}") from None
    return records


# -- writers -------------------------------------------------------------------


def _writer(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def save_forecasts(path, forecasts: Iterable[ForecastRecord]) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(FORECAST_HEADER)
        for f in forecasts:
            members = f.members if f.members is not None else [None] * N_MEMBERS
            w.writerow(
                [
                    f.station_id,
                    format_time(f.init_time),
                    f.lead_time_h,
                    "" if f.hres is None else format_number(f.hres),
                    format_number(f.ctrl),
                    *("" if m is None else format_number(m) for m in members),
                ]
            )


def save_observations(path, observations: Iterable[ObservationRecord]) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(OBSERVATION_HEADER)
        for o in observations:
            w.writerow([o.station_id, format_time(o.valid_time), format_number(o.visibility_m)])


def save_stations(path, stations: Iterable[StationMeta]) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(STATION_HEADER)
        for s in stations:
            w.writerow([s.station_id, format_number(s.latitude), format_number(s.longitude)])


# -- prediction tables ---------------------------------------------------------


@dataclass(eq=False)
class PredictionTable:
    """Predictive PMFs keyed by (station, initialization time, lead time)."""

    station_id: list[str]
    init_time: list[datetime]
    lead_h: np.ndarray
    obs_class: np.ndarray
    pmf: np.ndarray

    def __post_init__(self):
        self.lead_h = np.asarray(self.lead_h, dtype=np.int64)
        self.obs_class = np.asarray(self.obs_class, dtype=np.int64)
        self.pmf = np.asarray(self.pmf, dtype=float).reshape(-1, N_CLASSES)
        n = len(self.station_id)
        if not (len(self.init_time) == self.lead_h.size == self.obs_class.size == self.pmf.shape[0] == n):
            raise ValueError("prediction table columns differ in length")

    def __len__(self):
        return len(self.station_id)

    @property
    def keys(self) -> list[tuple]:
        return list(zip(self.station_id, self.init_time, self.lead_h.tolist()))

    @property
    def valid_time_key(self) -> np.ndarray:
        """Valid times as POSIX seconds, for ordering score series in time."""
        return np.array([t.timestamp() + 3600 * h for t, h in zip(self.init_time, self.lead_h.tolist())])


def save_predictions(path, table: PredictionTable) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(PREDICTION_HEADER)
        for i in range(len(table)):
            w.writerow(
                [table.station_id[i], format_time(table.init_time[i]), int(table.lead_h[i]), int(table.obs_class[i])]
                + [repr(float(v)) for v in table.pmf[i]]
            )


def load_predictions(path) -> PredictionTable:
    """Read a predictions CSV (``station_id,init_time,lead_h,obs_class,p1..p84``)."""
    stations, inits, leads, obs, rows = [], [], [], [], []
    for row, rec in _read_rows(path, PREDICTION_HEADER):
        try:
            stations.append(rec["station_id"].strip())
            inits.append(parse_time(rec["init_time"]))
            leads.append(int(rec["lead_h"]))
            obs.append(int(rec["obs_class"]))
            rows.append([float(rec[c]) for c in PREDICTION_HEADER[4:]])
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {row}: {exc}") from None
    pmf = np.array(rows, dtype=float).reshape(-1, N_CLASSES)
    if obs and (min(obs) < 1 or max(obs) > N_CLASSES):
        raise DataFormatError(f"{path}: obs_class outside 1..{N_CLASSES}")
    return PredictionTable(stations, inits, np.array(leads, dtype=np.int64), np.array(obs, dtype=np.int64), pmf)


# -- joining -------------------------------------------------------------------


def join_cases(
    forecasts: Iterable[ForecastRecord], observations: Iterable[ObservationRecord]
) -> tuple[list[ForecastCase], Counter]:
    """Inner-join forecasts with observations on (station, valid time).

    Returns the joined cases in forecast order and a per-station count of
    dropped forecasts (no matching observation, or no ensemble members).
    """
    obs = {(o.station_id, o.valid_time): o for o in observations}
    cases = []
    dropped: Counter = Counter()
    for f in forecasts:
        o = obs.get((f.station_id, f.valid_time))
        if o is None or f.members is None:
            dropped[f.station_id] += 1
            continue
        cases.append(ForecastCase(f, o, day_of_year(f.valid_time)))
    if dropped:
        log.info(
            "dropped %d incomplete forecast cases (%s)",
            sum(dropped.values()),
            ", ".join(f"{s}: {n}" for s, n in sorted(dropped.items())),
        )
    return cases, dropped


# -- synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """Parameters of the synthetic visibility benchmark.

    The latent truth is log-visibility: a station mean plus seasonal and
    diurnal cycles plus a 6-hourly AR(1) anomaly. Ensemble members scatter
    around ``truth + bias + forecast error`` with a spread of only
    ``dispersion`` times the forecast-error scale, so the raw ensemble is
    biased and underdispersed by construction.
    """

    n_stations: int = 10
    start_date: str = "2020-01-01"
    n_days: int = 731
    lead_times: tuple[int, ...] = (6, 12, 18, 24)
    include_hres: bool = False
    log_mean: float = 9.6
    station_spread: float = 0.5
    seasonal_amplitude: float = 0.5
    diurnal_amplitude: float = 0.3
    ar_coef: float = 0.9
    ar_sd: float = 0.9
    noise_scale: float = 0.4
    error_growth: float = 0.25
    bias: float = 0.6
    dispersion: float = 0.3
    missing_obs_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lead_times", tuple(int(h) for h in self.lead_times))
        if self.n_stations < 1:
            raise ValueError("simulation needs at least one station")
        if self.n_days < 1:
            raise ValueError("simulation needs a non-empty date range")
        if not self.lead_times or any(h <= 0 or h % 6 for h in self.lead_times):
            raise ValueError("lead times must be positive multiples of 6 h")
        if not 0 <= self.ar_coef < 1:
            raise ValueError("ar_coef must lie in [0, 1)")
        if min(self.noise_scale, self.dispersion, self.ar_sd, self.station_spread) < 0:
            raise ValueError("scale parameters must be non-negative")
        if not 0 <= self.missing_obs_fraction < 1:
            raise ValueError("missing_obs_fraction must lie in [0, 1)")
        date.fromisoformat(self.start_date)

    @property
    def start(self) -> datetime:
        d = date.fromisoformat(self.start_date)
        return datetime(d.year, d.month, d.day, tzinfo=timezone.utc)

    def error_sd(self, lead_h: int) -> float:
        return self.noise_scale * (1.0 + self.error_growth * lead_h / 24.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lead_times"] = list(self.lead_times)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation config keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LatentTruth:
    """6-hourly latent log-visibility per station and its one-step law."""

    station_ids: list[str]
    times: list[datetime]
    log_vis: np.ndarray  # (stations, times)
    cond_mean: np.ndarray
    cond_sd: np.ndarray
    meters: np.ndarray = field(repr=False)


def _station_ids(n: int) -> list[str]:
    width = max(2, len(str(n)))
    return [f"S{i:0{width}d}" for i in range(1, n + 1)]


def latent_truth(cfg: SimConfig, seed: int) -> LatentTruth:
    rng = np.random.default_rng(seed)
    ids = _station_ids(cfg.n_stations)
    n_steps = cfg.n_days * 4 + max(cfg.lead_times) // 6 + 1
    times = [cfg.start + timedelta(hours=6 * i) for i in range(n_steps)]
    doy = np.array([day_of_year(t) for t in times], dtype=float)
    hour = np.array([t.hour for t in times], dtype=float)

    mu = cfg.log_mean + cfg.station_spread * rng.standard_normal(cfg.n_stations)
    amp = cfg.seasonal_amplitude * rng.uniform(0.5, 1.5, cfg.n_stations)
    mean = (
        mu[:, None]
        - amp[:, None] * np.cos(2 * np.pi * doy / 365)[None, :]
        - cfg.diurnal_amplitude * np.cos(2 * np.pi * (hour - 6) / 24)[None, :]
    )
    innov_sd = cfg.ar_sd * math.sqrt(1 - cfg.ar_coef**2)
    eps = rng.standard_normal((cfg.n_stations, n_steps))
    anomaly = np.empty_like(mean)
    anomaly[:, 0] = cfg.ar_sd * eps[:, 0]
    for t in range(1, n_steps):
        anomaly[:, t] = cfg.ar_coef * anomaly[:, t - 1] + innov_sd * eps[:, t]
    z = mean + anomaly
    cond_mean = mean.copy()
    cond_mean[:, 1:] += cfg.ar_coef * anomaly[:, :-1]
    cond_sd = np.full_like(mean, innov_sd)
    cond_sd[:, 0] = cfg.ar_sd
    return LatentTruth(ids, times, z, cond_mean, cond_sd, to_meters(z))


def to_meters(log_vis: np.ndarray) -> np.ndarray:
    """Latent log-visibility to reported-resolution meters (1 m steps, capped at 70 km)."""
    with np.errstate(over="ignore"):
        return np.minimum(np.round(np.exp(log_vis)), MAX_VISIBILITY)


def discretized_lognormal_pmf(mu, sigma) -> np.ndarray:
    """Class probabilities of ``round_down(to_meters(Z))`` for ``Z ~ N(mu, sigma^2)``.

    ``mu`` and ``sigma`` broadcast; the class axis is appended last.
    """
    mu = np.asarray(mu, dtype=float)[..., None]
    sigma = np.asarray(sigma, dtype=float)[..., None]
    # A class k collects exp(Z) in [y_k - 0.5, y_{k+1} - 0.5) after 1 m rounding.
    edges = np.log(np.maximum(scale_values()[1:] - 0.5, 1e-300))
    cdf = ndtr((edges - mu) / sigma)
    lower = np.concatenate([np.zeros(cdf.shape[:-1] + (1,)), cdf], axis=-1)
    upper = np.concatenate([cdf, np.ones(cdf.shape[:-1] + (1,))], axis=-1)
    return np.maximum(upper - lower, 0.0)


def simulate_dataset(
    cfg: SimConfig, seed: int
) -> tuple[list[ForecastRecord], list[ObservationRecord], list[StationMeta]]:
    """Generate a deterministic synthetic forecast/observation dataset."""
    truth = latent_truth(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    ids = truth.station_ids

    lat = rng.uniform(47.0, 55.0, cfg.n_stations)
    lon = rng.uniform(5.0, 20.0, cfg.n_stations)
    stations = [
        StationMeta(s, round(float(a), 4), round(float(b), 4)) for s, a, b in zip(ids, lat, lon)
    ]

    keep = rng.uniform(size=truth.meters.shape) >= cfg.missing_obs_fraction
    classes = round_down(truth.meters)
    observations = [
        ObservationRecord(s, t, int(classes[i, j]))
        for j, t in enumerate(truth.times)
        for i, s in enumerate(ids)
        if keep[i, j]
    ]

    forecasts = []
    n_ens = N_MEMBERS + 1 + int(cfg.include_hres)
    for day in range(cfg.n_days):
        init = cfg.start + timedelta(days=day)
        for lead in cfg.lead_times:
            j = 4 * day + lead // 6
            sd = cfg.error_sd(lead)
            center = truth.log_vis[:, j] + cfg.bias + sd * rng.standard_normal(cfg.n_stations)
            spread = cfg.dispersion * sd * rng.standard_normal((cfg.n_stations, n_ens))
            values = to_meters(center[:, None] + spread)
            for i, s in enumerate(ids):
                row = values[i]
                forecasts.append(
                    ForecastRecord(
                        s,
                        init,
                        lead,
                        ctrl=float(row[0]),
                        members=tuple(float(v) for v in row[1 : N_MEMBERS + 1]),
                        hres=float(row[-1]) if cfg.include_hres else None,
                    )
                )
    return forecasts, observations, stations
