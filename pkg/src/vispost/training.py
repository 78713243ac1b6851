"""Rolling-window training: local, semi-local (k-means) and regional fits,
plus the climatology and raw-ensemble reference forecasts."""

from __future__ import annotations

import logging
import zlib
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import ForecastCase, ForecastRecord, ObservationRecord
from .features import FeatureConfig, feature_matrix
from .mlp import FORMAT as MLP_FORMAT
from .mlp import MlpArchitecture, MlpParams, MlpTrainConfig, mlp_forward, train_mlp
from .polr import FORMAT as POLR_FORMAT
from .polr import PolrFitConfig, PolrParams, fit_polr, polr_pmf
from .scale import N_CLASSES, round_down

log = logging.getLogger(__name__)

SCHEMES = ("local", "semi_local", "regional")
MODELS = ("polr", "mlp")


# -- windows -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingWindow:
    start_date: date
    end_date: date
    length_days: int
    feasible: bool = True

    def contains(self, d: date) -> bool:
        return self.start_date <= d <= self.end_date


def rolling_windows(
    target_dates: Iterable[date], length_days: int, data_start: date | None = None
) -> list[tuple[date, TrainingWindow]]:
    """The ``length_days`` calendar days ending the day before each target date.

    Windows reaching back before ``data_start`` are returned with
    ``feasible=False``.
    """
    if length_days < 1:
        raise ValueError("window length must be at least one day")
    out = []
    for t in target_dates:
        end = t - timedelta(days=1)
        start = t - timedelta(days=length_days)
        feasible = data_start is None or start >= data_start
        out.append((t, TrainingWindow(start, end, length_days, feasible)))
    return out


# -- observation lookups -------------------------------------------------------


class ObservationIndex:
    """Per-station observation arrays sorted by valid time."""

    def __init__(self, observations: Iterable[ObservationRecord]):
        rows = defaultdict(list)
        for o in observations:
            t = o.valid_time
            rows[o.station_id].append((t.date().toordinal(), t.hour, o.visibility_class))
        self._by_station = {}
        for s, r in rows.items():
            a = np.array(sorted(r), dtype=np.int64)
            self._by_station[s] = (a[:, 0], a[:, 1], a[:, 2])

    @property
    def stations(self) -> list[str]:
        return sorted(self._by_station)

    def classes(self, station: str, window: TrainingWindow, hour: int | None = None) -> np.ndarray:
        if station not in self._by_station:
            return np.empty(0, dtype=np.int64)
        days, hours, classes = self._by_station[station]
        lo = np.searchsorted(days, window.start_date.toordinal(), side="left")
        hi = np.searchsorted(days, window.end_date.toordinal(), side="right")
        sel = classes[lo:hi]
        if hour is not None:
            sel = sel[hours[lo:hi] == hour]
        return sel


def _as_index(observations) -> ObservationIndex:
    return observations if isinstance(observations, ObservationIndex) else ObservationIndex(observations)


# Upper class indices of the [0, 5000] and (5000, 30000] m bands.
_BAND_EDGES = (round_down(5000), round_down(30000))


def climatology_features(observations, window: TrainingWindow, stations: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Per-station frequencies of observations in [0, 5000], (5000, 30000] and (30000, 70000] m.

    Stations without observations in the window are left out.
    """
    index = _as_index(observations)
    out = {}
    for s in stations if stations is not None else index.stations:
        k = index.classes(s, window)
        if k.size == 0:
            log.warning("station %s has no observations in %s..%s; excluded", s, window.start_date, window.end_date)
            continue
        band = np.searchsorted(_BAND_EDGES, k, side="left")
        out[s] = np.bincount(band, minlength=3) / k.size
    return out


def climatology_forecast(observations, station: str, window: TrainingWindow, hour: int | None = None) -> np.ndarray:
    """Empirical PMF of the station's observed classes in the window.

    With ``hour`` set, only observations at that hour of day are used.
    """
    k = _as_index(observations).classes(station, window, hour)
    if k.size == 0:
        raise ValueError(f"station {station} has no observations in the climatology window")
    return np.bincount(k - 1, minlength=N_CLASSES) / k.size


def raw_ensemble_distribution(forecast: ForecastRecord) -> np.ndarray:
    """Equal-weight PMF of all available members, each rounded down to its class."""
    if forecast.members is None:
        raise ValueError("forecast has no ensemble members")
    values = [forecast.ctrl, *forecast.members]
    if forecast.hres is not None:
        values.append(forecast.hres)
    k = round_down(np.array(values, dtype=float))
    return np.bincount(k - 1, minlength=N_CLASSES) / k.size


# -- k-means -------------------------------------------------------------------


def _kmeans_once(X, k, rng, max_iter):
    n = X.shape[0]
    # k-means++ seeding
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(n)])
        else:
            centers.append(X[rng.choice(n, p=d2 / total)])
    C = np.array(centers, dtype=float)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = X[labels == j]
            if members.size:
                C[j] = members.mean(axis=0)
    inertia = float(((X - C[labels]) ** 2).sum())
    return labels, inertia


def kmeans_clusters(
    features: Mapping[str, np.ndarray],
    k: int,
    min_size: int = 4,
    seed=0,
    n_init: int = 10,
    max_iter: int = 100,
) -> list[list[str]]:
    """Partition stations by k-means on their feature vectors.

    The best of ``n_init`` seeded restarts (lowest within-cluster sum of
    squares) is kept. While a cluster has fewer than ``min_size`` stations,
    ``k`` is reduced and clustering redone; ``k = 1`` is regional pooling.
    Clusters are returned as sorted station lists ordered by first station.
    """
    if k < 1:
        raise ValueError("need at least one cluster")
    stations = sorted(features)
    if not stations:
        return []
    X = np.array([features[s] for s in stations], dtype=float)
    k = min(k, len(stations) // max(min_size, 1) or 1)
    while k > 1:
        rng = np.random.default_rng(seed)
        best = None
        for _ in range(n_init):
            labels, inertia = _kmeans_once(X, k, rng, max_iter)
            if best is None or inertia < best[1]:
                best = (labels, inertia)
        sizes = np.bincount(best[0], minlength=k)
        if sizes.min() >= min_size:
            groups = [[s for s, lab in zip(stations, best[0]) if lab == j] for j in range(k)]
            return sorted(groups, key=lambda g: g[0])
        k -= 1
    return [stations]


# -- experiment ----------------------------------------------------------------


@dataclass(frozen=True)
class SpatialScheme:
    kind: str = "local"
    n_clusters: int = 4
    min_cluster_size: int = 4

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown scheme {self.kind!r}; expected one of {SCHEMES}")
        if self.n_clusters < 1 or self.min_cluster_size < 1:
            raise ValueError("n_clusters and min_cluster_size must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "polr"
    scheme: SpatialScheme = SpatialScheme()
    training_length: int = 350
    climatology_length: int = 30
    lead_times: tuple[int, ...] | None = None
    verification_start: str | None = None
    verification_end: str | None = None
    features: FeatureConfig = FeatureConfig()
    polr: PolrFitConfig | None = None
    mlp: MlpTrainConfig = MlpTrainConfig()
    mlp_hidden: tuple[int, ...] = (25, 25)
    seed: int = 0
    refit_every: int = 1

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.training_length < 1 or self.climatology_length < 1 or self.refit_every < 1:
            raise ValueError("window lengths and refit cadence must be >= 1")
        if self.polr is None:
            cons = self.features.forecast_columns
            object.__setattr__(self, "polr", PolrFitConfig(constrained_nonnegative=cons))

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        if "scheme" in d and isinstance(d["scheme"], Mapping):
            d["scheme"] = SpatialScheme(**d["scheme"])
        elif "scheme" in d and isinstance(d["scheme"], str):
            d["scheme"] = SpatialScheme(kind=d["scheme"])
        if isinstance(d.get("features"), Mapping):
            d["features"] = FeatureConfig.from_dict(d["features"])
        if isinstance(d.get("polr"), Mapping):
            p = dict(d["polr"])
            if "constrained_nonnegative" in p:
                p["constrained_nonnegative"] = tuple(p["constrained_nonnegative"])
            d["polr"] = PolrFitConfig(**p)
        if isinstance(d.get("mlp"), Mapping):
            d["mlp"] = MlpTrainConfig(**d["mlp"])
        for key in ("lead_times", "mlp_hidden"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "scheme": {
                "kind": self.scheme.kind,
                "n_clusters": self.scheme.n_clusters,
                "min_cluster_size": self.scheme.min_cluster_size,
            },
            "training_length": self.training_length,
            "climatology_length": self.climatology_length,
            "lead_times": None if self.lead_times is None else list(self.lead_times),
            "verification_start": self.verification_start,
            "verification_end": self.verification_end,
            "features": self.features.to_dict(),
            "polr": {
                "constrained_nonnegative": list(self.polr.constrained_nonnegative),
                "max_iter": self.polr.max_iter,
                "grad_tol": self.polr.grad_tol,
                "armijo": self.polr.armijo,
                "standardize": self.polr.standardize,
            },
            "mlp": {
                "max_epochs": self.mlp.max_epochs,
                "learning_rate": self.mlp.learning_rate,
                "seed": self.mlp.seed,
                "init_scale": self.mlp.init_scale,
            },
            "mlp_hidden": list(self.mlp_hidden),
            "seed": self.seed,
            "refit_every": self.refit_every,
        }


class CaseTable:
    """Column view of forecast cases in canonical (init, lead, station) order."""

    def __init__(self, cases: Sequence[ForecastCase], features: FeatureConfig):
        order = sorted(
            range(len(cases)),
            key=lambda i: (cases[i].forecast.init_time, cases[i].lead_time_h, cases[i].station_id),
        )
        self.cases = [cases[i] for i in order]
        self.station = np.array([c.station_id for c in self.cases], dtype=object)
        self.init_day = np.array([c.forecast.init_time.date().toordinal() for c in self.cases], dtype=np.int64)
        self.valid_day = np.array([c.forecast.valid_time.date().toordinal() for c in self.cases], dtype=np.int64)
        self.valid_hour = np.array([c.forecast.valid_time.hour for c in self.cases], dtype=np.int64)
        self.lead = np.array([c.lead_time_h for c in self.cases], dtype=np.int64)
        self.obs = np.array([c.obs_class for c in self.cases], dtype=np.int64)
        self.X = feature_matrix(self.cases, features)

    def __len__(self):
        return len(self.cases)


@dataclass(frozen=True)
class FitTask:
    fit_date: date
    lead_h: int
    stations: tuple[str, ...]
    scope: str
    train_rows: np.ndarray = field(repr=False)
    predict_rows: np.ndarray = field(repr=False)

    @property
    def key(self) -> tuple:
        return (self.fit_date, self.lead_h, self.scope)


def scope_seed(master_seed: int, fit_date: date, lead_h: int, stations: Sequence[str]) -> int:
    """Seed for one fit, derived from the master seed, date, lead and station set."""
    tag = zlib.crc32(",".join(sorted(stations)).encode())
    ss = np.random.SeedSequence([int(master_seed), fit_date.toordinal(), int(lead_h), tag])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _verification_dates(cfg: ExperimentConfig, table: CaseTable) -> tuple[date, date]:
    first = date.fromordinal(int(table.init_day.min()))
    last = date.fromordinal(int(table.init_day.max()))
    start = date.fromisoformat(cfg.verification_start) if cfg.verification_start else first + timedelta(days=cfg.training_length)
    end = date.fromisoformat(cfg.verification_end) if cfg.verification_end else last
    if end < start:
        raise ValueError("empty verification period")
    return start, end


def refit_dates(start: date, end: date, every: int) -> list[date]:
    out = []
    d = start
    while d <= end:
        out.append(d)
        d += timedelta(days=every)
    return out


def plan_tasks(cfg: ExperimentConfig, table: CaseTable, observations) -> list[FitTask]:
    """Enumerate (refit date x lead time x scope) fit tasks."""
    index = _as_index(observations)
    start, end = _verification_dates(cfg, table)
    data_start = date.fromordinal(int(min(table.init_day.min(), table.valid_day.min())))
    leads = sorted(set(table.lead.tolist())) if cfg.lead_times is None else sorted(cfg.lead_times)
    stations_all = sorted(set(table.station.tolist()))
    dates = refit_dates(start, end, cfg.refit_every)
    tasks = []
    for i, (fit_date, window) in enumerate(rolling_windows(dates, cfg.training_length, data_start)):
        if not window.feasible:
            raise ValueError(f"training window for {fit_date} starts before the data ({window.start_date})")
        next_fit = dates[i + 1] if i + 1 < len(dates) else end + timedelta(days=1)
        in_window = (table.valid_day >= window.start_date.toordinal()) & (table.valid_day <= window.end_date.toordinal())
        in_target = (table.init_day >= fit_date.toordinal()) & (table.init_day < next_fit.toordinal())
        if cfg.scheme.kind == "local":
            groups = [[s] for s in stations_all]
        elif cfg.scheme.kind == "regional":
            groups = [stations_all]
        else:
            feats = climatology_features(index, window, stations_all)
            groups = kmeans_clusters(
                feats,
                cfg.scheme.n_clusters,
                cfg.scheme.min_cluster_size,
                seed=scope_seed(cfg.seed, fit_date, 0, stations_all),
            )
            if len(groups) == 1:
                # A single cluster is the regional pool, orphans included.
                groups = [stations_all]
        pools = [g for g in groups]
        if cfg.scheme.kind == "semi_local":
            clustered = {s for g in groups for s in g}
            # Stations without window observations are predicted by the whole pool.
            orphans = [s for s in stations_all if s not in clustered]
            if orphans:
                groups.append(orphans)
                pools.append(stations_all)
        for lead in leads:
            at_lead = table.lead == lead
            for j, (g, pool) in enumerate(zip(groups, pools)):
                if cfg.scheme.kind == "regional":
                    scope = "all"
                elif cfg.scheme.kind == "local":
                    scope = g[0]
                else:
                    scope = f"c{j}"
                tasks.append(
                    FitTask(
                        fit_date,
                        lead,
                        tuple(pool),
                        scope,
                        np.flatnonzero(in_window & at_lead & np.isin(table.station, pool)),
                        np.flatnonzero(in_target & at_lead & np.isin(table.station, g)),
                    )
                )
    return tasks


def fit_model(cfg: ExperimentConfig, task: FitTask, X: np.ndarray, y: np.ndarray):
    fc = cfg.features.to_dict()
    if cfg.model == "polr":
        return fit_polr(X, y, cfg.polr, feature_config=fc)
    arch = MlpArchitecture(cfg.features.dim, cfg.mlp_hidden, N_CLASSES)
    train_cfg = replace(cfg.mlp, seed=scope_seed(cfg.seed, task.fit_date, task.lead_h, task.stations))
    return train_mlp(X, y, arch, train_cfg, feature_config=fc)


def params_from_dict(d: Mapping):
    """Rebuild POLR or MLP parameters from their JSON document."""
    fmt = d.get("format")
    if fmt == POLR_FORMAT:
        return PolrParams.from_dict(d)
    if fmt == MLP_FORMAT:
        return MlpParams.from_dict(d)
    raise ValueError(f"unknown parameter document format {fmt!r}")


def predict_pmf(params, X: np.ndarray) -> np.ndarray:
    if isinstance(params, PolrParams):
        return polr_pmf(params, X)
    if isinstance(params, MlpParams):
        return mlp_forward(params, X)
    raise TypeError(f"unsupported model parameters {type(params).__name__}")


def _run_fit(args):
    cfg, task, X, y = args
    if y.size == 0:
        return None, "empty training set"
    try:
        return fit_model(cfg, task, X, y), None
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def run_fits(cfg: ExperimentConfig, table: CaseTable, tasks: Sequence[FitTask], jobs: int = 1) -> list:
    """Fit every task; returns ``(params or None, error or None)`` per task, in task order."""
    payload = ((cfg, t, table.X[t.train_rows], table.obs[t.train_rows]) for t in tasks)
    if jobs <= 1:
        return [_run_fit(a) for a in payload]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_fit, payload, chunksize=max(1, len(tasks) // (4 * jobs))))


@dataclass
class ExperimentResult:
    cases: list[ForecastCase]
    model_pmf: np.ndarray
    climatology_pmf: np.ndarray
    raw_pmf: np.ndarray
    failures: list[tuple[tuple, str]]

    def __iter__(self):
        return iter(zip(self.cases, self.model_pmf, self.climatology_pmf, self.raw_pmf))

    def __len__(self):
        return len(self.cases)

    @property
    def obs(self) -> np.ndarray:
        return np.array([c.obs_class for c in self.cases], dtype=np.int64)

    @property
    def lead(self) -> np.ndarray:
        return np.array([c.lead_time_h for c in self.cases], dtype=np.int64)

    @property
    def valid_time_key(self) -> np.ndarray:
        return np.array([c.forecast.valid_time.timestamp() for c in self.cases])


def reference_forecasts(table: CaseTable, rows: np.ndarray, observations, climatology_length: int):
    """Climatology (same hour of day, preceding window) and raw-ensemble PMFs for ``rows``.

    Rows whose station lacks climatology observations get NaN climatology.
    """
    index = _as_index(observations)
    clim = np.full((rows.size, N_CLASSES), np.nan)
    raw = np.empty((rows.size, N_CLASSES))
    for j, r in enumerate(rows):
        case = table.cases[r]
        target = date.fromordinal(int(table.init_day[r]))
        _, window = rolling_windows([target], climatology_length)[0]
        try:
            clim[j] = climatology_forecast(index, case.station_id, window, int(table.valid_hour[r]))
        except ValueError:
            log.warning("no climatology for %s at %s", case.station_id, target)
        raw[j] = raw_ensemble_distribution(case.forecast)
    return clim, raw


def prepare_experiment(cfg: ExperimentConfig, cases: Sequence[ForecastCase], observations):
    """Case table, observation index and fit tasks for an experiment."""
    index = _as_index(observations)
    table = CaseTable(list(cases), cfg.features)
    return table, index, plan_tasks(cfg, table, index)


def assemble_predictions(
    cfg: ExperimentConfig,
    table: CaseTable,
    index: ObservationIndex,
    tasks: Sequence[FitTask],
    fits: Sequence[tuple],
) -> ExperimentResult:
    """Verification-period PMFs from fitted tasks plus both references.

    ``fits`` pairs each task with ``(params or None, error or None)``.
    Cases whose fit failed or whose station has no climatology are dropped;
    failures are listed in the result.
    """
    model = np.full((len(table), N_CLASSES), np.nan)
    failures = []
    for task, (params, err) in zip(tasks, fits):
        if params is None:
            if task.predict_rows.size:
                failures.append((task.key, err))
                log.warning("fit %s failed: %s", task.key, err)
            continue
        if task.predict_rows.size:
            model[task.predict_rows] = predict_pmf(params, table.X[task.predict_rows])

    start, end = _verification_dates(cfg, table)
    in_period = (table.init_day >= start.toordinal()) & (table.init_day <= end.toordinal())
    if cfg.lead_times is not None:
        in_period &= np.isin(table.lead, cfg.lead_times)
    rows = np.flatnonzero(in_period)
    clim, raw = reference_forecasts(table, rows, index, cfg.climatology_length)
    ok = ~np.isnan(model[rows]).any(axis=1) & ~np.isnan(clim).any(axis=1)
    rows = rows[ok]
    return ExperimentResult(
        [table.cases[r] for r in rows],
        model[rows],
        clim[ok],
        raw[ok],
        failures,
    )


def run_experiment(
    cfg: ExperimentConfig,
    cases: Sequence[ForecastCase],
    observations: Iterable[ObservationRecord],
    jobs: int = 1,
) -> ExperimentResult:
    """Rolling-window post-processing over the verification period.

    Every verification case receives the model PMF from the most recent fit
    of its lead time and spatial scope, along with the climatology and raw
    ensemble references.
    """
    table, index, tasks = prepare_experiment(cfg, cases, observations)
    fits = run_fits(cfg, table, tasks, jobs)
    return assemble_predictions(cfg, table, index, tasks, fits)
