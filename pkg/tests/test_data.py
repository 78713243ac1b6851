import hashlib
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vispost.data import (
    FORECAST_HEADER,
    DataFormatError,
    ForecastRecord,
    ObservationRecord,
    PredictionTable,
    SimConfig,
    StationMeta,
    day_of_year,
    discretized_lognormal_pmf,
    join_cases,
    latent_truth,
    load_forecasts,
    load_observations,
    load_predictions,
    load_stations,
    save_forecasts,
    save_observations,
    save_predictions,
    save_stations,
    simulate_dataset,
    to_meters,
)
from vispost.scale import class_of, round_down, value_of
from vispost.training import raw_ensemble_distribution
from vispost.verification import central_interval

T0 = datetime(2021, 3, 1, tzinfo=timezone.utc)


def _forecast(station="A", init=T0, lead=6, value=1000.0, members=True, hres=None):
    return ForecastRecord(station, init, lead, value, (value,) * 50 if members else None, hres)


def _write(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


# -- records -------------------------------------------------------------------


def test_forecast_record_validation():
    with pytest.raises(ValueError):
        _forecast(lead=7)
    with pytest.raises(ValueError):
        _forecast(lead=0)
    with pytest.raises(ValueError):
        ForecastRecord("A", T0, 6, 100.0, (1.0,) * 49)
    with pytest.raises(ValueError):
        _forecast(value=-1.0)
    assert _forecast(lead=18).valid_time == T0 + timedelta(hours=18)


def test_observation_and_station_validation():
    with pytest.raises(ValueError):
        ObservationRecord("A", T0, 85)
    with pytest.raises(ValueError):
        StationMeta("A", 91.0, 0.0)
    assert ObservationRecord("A", T0, class_of(5000)).visibility_m == 5000


@pytest.mark.parametrize(
    "day, expected",
    [
        (datetime(2021, 1, 1), 1),
        (datetime(2021, 12, 31), 365),
        (datetime(2020, 2, 28), 59),
        (datetime(2020, 2, 29), 59),
        (datetime(2020, 3, 1), 60),
        (datetime(2020, 12, 31), 365),
        (datetime(1900, 3, 1), 60),
    ],
)
def test_day_of_year_uses_365_day_calendar(day, expected):
    assert day_of_year(day) == expected


# -- CSV loaders ---------------------------------------------------------------


def test_observation_rounding_on_load(tmp_path):
    p = _write(tmp_path / "obs.csv", ["station_id", "valid_time", "visibility_m"], [["A", "2021-03-01T06:00:00Z", 5500]])
    (rec,) = load_observations(p)
    assert rec.visibility_class == round_down(5000) and rec.visibility_m == 5000
    assert rec.valid_time == T0 + timedelta(hours=6)


def test_empty_files_with_header(tmp_path):
    assert load_forecasts(_write(tmp_path / "f.csv", FORECAST_HEADER, [])) == []
    assert load_observations(_write(tmp_path / "o.csv", ["station_id", "valid_time", "visibility_m"], [])) == []
    assert load_stations(_write(tmp_path / "s.csv", ["station_id", "lat", "lon"], [])) == []


def test_row_with_49_members_names_the_row(tmp_path):
    good = ["A", "2021-03-01T00:00:00Z", 6, "", 100] + [100] * 50
    bad = ["A", "2021-03-02T00:00:00Z", 6, "", 100] + [100] * 49 + [""]
    p = _write(tmp_path / "f.csv", FORECAST_HEADER, [good, bad])
    with pytest.raises(DataFormatError, match="row 3"):
        load_forecasts(p)


def test_all_members_empty_means_absent(tmp_path):
    row = ["A", "2021-03-01T00:00:00Z", 6, "", 100] + [""] * 50
    (rec,) = load_forecasts(_write(tmp_path / "f.csv", FORECAST_HEADER, [row]))
    assert rec.members is None and rec.hres is None


def test_unknown_and_missing_columns(tmp_path):
    with pytest.raises(DataFormatError, match="unknown"):
        load_stations(_write(tmp_path / "s.csv", ["station_id", "lat", "lon", "alt"], []))
    with pytest.raises(DataFormatError, match="missing"):
        load_stations(_write(tmp_path / "s2.csv", ["station_id", "lat"], []))
    # hres is optional at the file level
    header = [c for c in FORECAST_HEADER if c != "hres"]
    row = ["A", "2021-03-01T00:00:00Z", 6, 100] + [100] * 50
    (rec,) = load_forecasts(_write(tmp_path / "f.csv", header, [row]))
    assert rec.hres is None


def test_malformed_values_and_duplicates(tmp_path):
    obs_header = ["station_id", "valid_time", "visibility_m"]
    with pytest.raises(DataFormatError, match="row 2"):
        load_observations(_write(tmp_path / "a.csv", obs_header, [["A", "2021-03-01T00:00:00Z", "-5"]]))
    with pytest.raises(DataFormatError, match="row 2"):
        load_observations(_write(tmp_path / "b.csv", obs_header, [["A", "yesterday", "5"]]))
    dup = [["A", "2021-03-01T00:00:00Z", 5], ["A", "2021-03-01T00:00:00Z", 7]]
    with pytest.raises(DataFormatError, match="row 3"):
        load_observations(_write(tmp_path / "c.csv", obs_header, dup))
    with pytest.raises(DataFormatError, match="lead time"):
        row = ["A", "2021-03-01T00:00:00Z", 5, "", 100] + [100] * 50
        load_forecasts(_write(tmp_path / "d.csv", FORECAST_HEADER, [row]))


def test_csv_round_trip(tmp_path):
    cfg = SimConfig(n_stations=2, n_days=3, lead_times=(6, 12), include_hres=True)
    forecasts, observations, stations = simulate_dataset(cfg, 3)
    forecasts[0] = ForecastRecord("S01", forecasts[0].init_time, 6, 1234.5, None, None)
    save_forecasts(tmp_path / "f.csv", forecasts)
    save_observations(tmp_path / "o.csv", observations)
    save_stations(tmp_path / "s.csv", stations)
    assert load_forecasts(tmp_path / "f.csv") == forecasts
    assert load_observations(tmp_path / "o.csv") == observations
    assert load_stations(tmp_path / "s.csv") == stations
    raw = (tmp_path / "f.csv").read_bytes()
    assert b"\r\n" not in raw


def test_cases_survive_reserialization(tmp_path, small_dataset):
    _, forecasts, observations, _, cases = small_dataset
    save_forecasts(tmp_path / "f.csv", forecasts)
    save_observations(tmp_path / "o.csv", observations)
    again, _ = join_cases(load_forecasts(tmp_path / "f.csv"), load_observations(tmp_path / "o.csv"))
    assert again == cases


def test_prediction_table_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pmf = rng.dirichlet(np.ones(84), size=3)
    t = PredictionTable(["A", "B", "C"], [T0] * 3, [6, 12, 18], [1, 40, 84], pmf)
    save_predictions(tmp_path / "p.csv", t)
    back = load_predictions(tmp_path / "p.csv")
    assert back.keys == t.keys
    assert np.array_equal(back.pmf, pmf)
    assert back.obs_class.tolist() == [1, 40, 84]


# -- join ----------------------------------------------------------------------


def test_join_ten_forecasts_nine_observations():
    forecasts = [_forecast(init=T0 + timedelta(days=i)) for i in range(10)]
    observations = [ObservationRecord("A", f.valid_time, 20) for f in forecasts[:9]]
    cases, dropped = join_cases(forecasts, observations)
    assert len(cases) == 9 and sum(dropped.values()) == 1 and dropped["A"] == 1


def test_join_drops_forecast_without_members():
    forecasts = [_forecast(), _forecast(init=T0 + timedelta(days=1), members=False)]
    observations = [ObservationRecord("A", f.valid_time, 20) for f in forecasts]
    cases, dropped = join_cases(forecasts, observations)
    assert [c.forecast for c in cases] == forecasts[:1] and dropped["A"] == 1


def test_join_disjoint_stations_and_case_fields():
    assert join_cases([_forecast("A")], [ObservationRecord("B", T0 + timedelta(hours=6), 3)])[0] == []
    (case,) = join_cases([_forecast("A")], [ObservationRecord("A", T0 + timedelta(hours=6), 3)])[0]
    assert case.observation.valid_time == case.forecast.valid_time
    assert case.day_of_year == day_of_year(case.forecast.valid_time)


@given(st.lists(st.tuples(st.integers(0, 5), st.sampled_from([6, 12])), max_size=12, unique=True), st.lists(st.integers(0, 6), max_size=12))
def test_join_size_bound(fkeys, ohours):
    forecasts = [_forecast(init=T0 + timedelta(days=d), lead=h) for d, h in fkeys]
    observations = [ObservationRecord("A", T0 + timedelta(hours=6 * k), 1) for k in sorted(set(ohours))]
    cases, dropped = join_cases(forecasts, observations)
    assert len(cases) <= min(len(forecasts), len(observations))
    assert len(cases) + sum(dropped.values()) == len(forecasts)


# -- simulator -----------------------------------------------------------------


def test_simulation_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n_stations=0)
    with pytest.raises(ValueError):
        SimConfig(n_days=0)
    with pytest.raises(ValueError):
        SimConfig(lead_times=(5,))
    with pytest.raises(ValueError):
        SimConfig.from_dict({"n_station": 3})
    assert SimConfig.from_dict(SimConfig().to_dict()) == SimConfig()


def test_simulation_row_counts():
    cfg = SimConfig(n_stations=5, n_days=30, lead_times=(6, 12, 18, 24))
    forecasts, observations, stations = simulate_dataset(cfg, 0)
    assert len(forecasts) == 5 * 30 * 4 == 600
    assert len(stations) == 5
    assert all(len(f.members) == 50 and f.hres is None for f in forecasts)


def _digest(records):
    return hashlib.sha256(repr(records).encode()).hexdigest()


def test_simulation_is_deterministic(tmp_path):
    cfg = SimConfig(n_stations=2, n_days=5)
    a = simulate_dataset(cfg, 9)
    b = simulate_dataset(cfg, 9)
    assert _digest(a) == _digest(b)
    assert _digest(a) != _digest(simulate_dataset(cfg, 10))
    for i, run in enumerate((a, b)):
        save_forecasts(tmp_path / f"f{i}.csv", run[0])
    assert (tmp_path / "f0.csv").read_bytes() == (tmp_path / "f1.csv").read_bytes()


def test_degenerate_generator_reproduces_truth():
    cfg = SimConfig(n_stations=2, n_days=4, noise_scale=0.0, bias=0.0)
    forecasts, observations, _ = simulate_dataset(cfg, 4)
    truth = latent_truth(cfg, 4)
    index = {t: j for j, t in enumerate(truth.times)}
    for f in forecasts:
        i = truth.station_ids.index(f.station_id)
        expected = truth.meters[i, index[f.valid_time]]
        assert f.ctrl == expected and set(f.members) == {expected}
    for o in observations:
        i = truth.station_ids.index(o.station_id)
        assert o.visibility_class == round_down(truth.meters[i, index[o.valid_time]])


def test_missing_observation_fraction():
    cfg = SimConfig(n_stations=4, n_days=50, missing_obs_fraction=0.2)
    forecasts, observations, _ = simulate_dataset(cfg, 1)
    n_times = len(latent_truth(cfg, 1).times)
    frac = 1 - len(observations) / (4 * n_times)
    assert 0.15 < frac < 0.25


def test_raw_ensemble_is_underdispersed():
    cfg = SimConfig(n_stations=4, n_days=200, dispersion=0.3)
    forecasts, observations, _ = simulate_dataset(cfg, 2)
    cases, _ = join_cases(forecasts, observations)
    pmf = np.array([raw_ensemble_distribution(c.forecast) for c in cases])
    lo, hi = central_interval(pmf, 0.9)
    y = np.array([value_of(c.obs_class) for c in cases])
    coverage = np.mean((lo <= y) & (y <= hi))
    assert coverage < 0.7


def test_discretized_lognormal_pmf_matches_sampling():
    rng = np.random.default_rng(0)
    mu, sigma = 8.5, 1.1
    z = rng.normal(mu, sigma, 200_000)
    counts = np.bincount(round_down(to_meters(z)) - 1, minlength=84) / z.size
    pmf = discretized_lognormal_pmf(mu, sigma)
    assert pmf.shape == (84,)
    assert abs(pmf.sum() - 1) < 1e-12
    assert np.max(np.abs(counts - pmf)) < 5e-3
