import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftguard.errors import ValidationError
from driftguard.features import FeatureSpec, build_features, design_matrix, feature_tensor

from .conftest import make_panel

SPEC = FeatureSpec(lag_days=(1, 7), rolling_windows=(7,))


def test_rolling_mean_of_ramp():
    p = make_panel(np.arange(1.0, 11.0))
    fv = build_features(p, 0, 10, SPEC)
    assert fv["rolling_mean_7"] == pytest.approx(6.0)
    assert fv["rolling_std_7"] == pytest.approx(np.std(np.arange(3.0, 10.0)))


def test_lags_read_previous_days():
    p = make_panel(np.arange(1.0, 11.0))
    fv = build_features(p, 0, 10, SPEC)
    assert fv["lag_1"] == 9.0 and fv["lag_7"] == 3.0
    assert fv["lag_1_missing"] == 0.0 and fv["lag_7_missing"] == 0.0


def test_short_history_uses_trailing_mean():
    p = make_panel(np.arange(1.0, 11.0))
    fv = build_features(p, 0, 4, SPEC)
    assert fv["lag_7_missing"] == 1.0
    assert fv["lag_7"] == pytest.approx(2.0)
    assert fv["rolling_mean_7"] == pytest.approx(2.0)


def test_first_day_has_no_history():
    fv = build_features(make_panel(np.full(5, 3.0)), 0, 1, SPEC)
    assert fv["lag_1_missing"] == 1.0 and fv["lag_1"] == 0.0 and fv["rolling_mean_7"] == 0.0


def test_constant_series():
    fv = build_features(make_panel(np.full(40, 5.0)), 0, 30, SPEC)
    assert fv["rolling_mean_7"] == 5.0 and fv["rolling_std_7"] == 0.0
    assert fv["price_ratio_28d"] == pytest.approx(1.0)


def test_calendar_and_holiday():
    p = make_panel(np.ones(10), holidays=(4,))
    fv = build_features(p, 0, 4, SPEC)
    assert fv["is_holiday"] == 1.0
    dow = p.calendar[3].day_of_week
    assert fv[f"dow_{dow}"] == 1.0
    assert sum(fv[f"dow_{k}"] for k in range(7)) == 1.0
    assert build_features(p, 0, 5, SPEC)["is_holiday"] == 0.0


def test_price_ratio():
    prices = np.concatenate([np.full(28, 2.0), np.full(2, 1.0)])
    p = make_panel(np.ones(30), prices=[prices])
    fv = build_features(p, 0, 29, SPEC)
    assert fv["price"] == 1.0 and fv["price_ratio_28d"] == pytest.approx(0.5)


def test_day_zero_rejected():
    with pytest.raises(ValidationError):
        build_features(make_panel(np.ones(5)), 0, 0, SPEC)


def test_names_match_width():
    p = make_panel(np.ones((2, 12)), n_stores=2)
    X = feature_tensor(p, FeatureSpec(), [5, 6])
    assert X.shape == (2, 2, len(FeatureSpec().names()))


def test_spec_round_trip():
    s = FeatureSpec(lag_days=(7, 1), include_price=False)
    assert FeatureSpec.from_dict(s.to_dict()) == s
    assert s.lag_days == (1, 7)


def test_design_matrix_targets():
    sales = np.arange(20.0).reshape(2, 10)
    p = make_panel(sales, n_stores=2)
    X, y = design_matrix(p, SPEC, [0, 1], 8, 10)
    np.testing.assert_array_equal(y, [7, 8, 9, 17, 18, 19])
    assert X.shape[0] == 6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30))
def test_no_leakage(seed, day):
    rng = np.random.default_rng(seed)
    sales = rng.poisson(10, size=(2, 30)).astype(float)
    p = make_panel(sales)
    before = feature_tensor(p, FeatureSpec(lag_days=(1, 7, 28), rolling_windows=(7, 28)), [day])
    probe = sales.copy()
    probe[:, day - 1 :] = rng.poisson(50, size=(2, 30 - day + 1))
    after = feature_tensor(make_panel(probe), FeatureSpec(lag_days=(1, 7, 28), rolling_windows=(7, 28)), [day])
    np.testing.assert_array_equal(before, after)
