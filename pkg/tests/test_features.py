import statistics
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vispost.data import ForecastCase, ForecastRecord, ObservationRecord, day_of_year
from vispost.features import FeatureConfig, extract_features, feature_matrix


def _case(ctrl, members, valid=datetime(2021, 12, 31, 6, tzinfo=timezone.utc), hres=None):
    f = ForecastRecord("A", valid - timedelta(hours=6), 6, float(ctrl), tuple(float(m) for m in members), hres)
    return ForecastCase(f, ObservationRecord("A", valid, 1), day_of_year(valid))


def test_degenerate_top_ensemble_full_year_phase():
    x = extract_features(_case(70000, [70000] * 50))
    assert x.shape == (8,)
    np.testing.assert_allclose(x, [1, 1, 0, 0, 0, 1, 0, 1], atol=1e-12)


def test_all_zero_ensemble():
    x = extract_features(_case(0, [0] * 50))
    np.testing.assert_allclose(x[:6], [0, 0, 0, 1, 0, 0], atol=0)


def test_mixed_ensemble_against_hand_computation():
    members = [500] * 25 + [1500] * 25
    x = extract_features(_case(2500, members))
    values = [2500 / 70000] + [m / 70000 for m in members]
    assert x[0] == pytest.approx(2500 / 70000)
    assert x[1] == pytest.approx(statistics.fmean(values[1:]))
    assert x[2] == pytest.approx(statistics.variance(values), rel=1e-12)
    assert x[3] == pytest.approx(25 / 51) and x[4] == pytest.approx(25 / 51) and x[5] == 0


def test_threshold_boundaries_are_closed_on_the_right():
    members = [1000] * 10 + [2000] * 10 + [30000] * 10 + [30001] * 20
    x = extract_features(_case(1000, members))
    assert x[3] == pytest.approx(11 / 51)
    assert x[4] == pytest.approx(10 / 51)
    assert x[5] == pytest.approx(20 / 51)


def test_hres_feature_set():
    cfg = FeatureConfig(use_hres=True)
    x = extract_features(_case(1000, [2000] * 50, hres=35000.0), cfg)
    assert x.shape == (9,) and cfg.dim == 9
    assert x[0] == pytest.approx(0.5)
    # HRES stays out of the exceedance fractions
    assert x[4] == pytest.approx(1 / 51) and x[5] == pytest.approx(50 / 51) and x[6] == 0
    with pytest.raises(ValueError):
        extract_features(_case(1000, [2000] * 50), cfg)
    assert cfg.forecast_columns == (0, 1, 2)
    assert FeatureConfig().forecast_columns == (0, 1)


def test_values_above_normalizer_fail_validation():
    with pytest.raises(ValueError):
        extract_features(_case(80000, [100] * 50))
    with pytest.raises(ValueError):
        extract_features(_case(100, [75000] * 50))
    # a single large member leaves every component inside [0, 1]
    assert extract_features(_case(100, [100] * 49 + [75000]))[1] < 1


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        FeatureConfig(thresholds=(2000, 1000, 30000))
    cfg = FeatureConfig(use_hres=True, thresholds=(500, 1500, 20000))
    assert FeatureConfig.from_dict(cfg.to_dict()) == cfg


def test_feature_matrix_matches_single_extraction(small_dataset):
    cases = small_dataset[-1][:40]
    X = feature_matrix(cases)
    np.testing.assert_array_equal(X, np.array([extract_features(c) for c in cases]))
    assert feature_matrix([]).shape == (0, 8)


@given(st.integers(1, 365))
def test_seasonal_pair_on_unit_circle(d):
    valid = datetime(2021, 1, 1, 6, tzinfo=timezone.utc) + timedelta(days=d - 1)
    x = extract_features(_case(100, [100] * 50, valid=valid))
    assert abs(x[6] ** 2 + x[7] ** 2 - 1) < 1e-12


@given(
    st.lists(st.floats(0, 70000, allow_nan=False), min_size=50, max_size=50),
    st.floats(0, 70000, allow_nan=False),
    st.randoms(use_true_random=False),
)
def test_member_permutation_invariance(members, ctrl, rnd):
    shuffled = list(members)
    rnd.shuffle(shuffled)
    a = extract_features(_case(ctrl, members))
    b = extract_features(_case(ctrl, shuffled))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    assert np.all(a[:2] >= 0) and np.all(a[:2] <= 1) and a[2] >= 0
    assert a[3] + a[4] <= 1 + 1e-12
