import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftguard.errors import ValidationError
from driftguard.inject import KINDS, DriftScenario, InjectionRecord, inject, sample_affected

from .conftest import make_panel


def flat_panel(value=10.0, n=5, T=12, holidays=(), n_stores=1, states=("CA",)):
    return make_panel(np.full((n, T), value), holidays=holidays, n_stores=n_stores, states=states)


def scenario(kind, **kw):
    base = dict(kind=kind, onset_day=5, affected_fraction=1.0)
    if kind == "hierarchical":
        base["affected_region"] = "CA"
    base.update(kw)
    return DriftScenario(**base)


class TestSampleAffected:
    def test_full_fraction(self):
        assert sample_affected(flat_panel(n=7), 1.0, 0) == tuple(range(7))

    def test_size_and_determinism(self):
        p = flat_panel(n=100, T=3)
        a = sample_affected(p, 0.2, 11)
        assert len(a) == 20 and a == sample_affected(p, 0.2, 11)
        assert a != sample_affected(p, 0.2, 12)

    def test_region(self):
        p = flat_panel(n=20, T=3, n_stores=4, states=("CA", "TX"))
        picked = sample_affected(p, 0.5, 0, region="CA")
        assert picked and all(p.keys[i].state_id == "CA" for i in picked)
        with pytest.raises(ValidationError):
            sample_affected(p, 0.5, 0, region="WI")


class TestExamples:
    def test_level_shock_identity(self):
        p = flat_panel()
        q, _ = inject(p, scenario("level_shock", alpha=1.0))
        assert q == p

    def test_level_shock_value(self):
        q, rec = inject(flat_panel(), scenario("level_shock", alpha=0.8))
        assert q.sales[0, 4] == pytest.approx(8.0) and q.sales[0, 3] == 10.0
        assert rec.onset_day == 5 and rec.kind == "level_shock"

    def test_volatility_spike_value(self):
        sales = np.array([[9.0] * 4 + [3.0, 7.0, 5.0, 5.0]])
        q, _ = inject(make_panel(sales), scenario("volatility_spike", gamma=3.0))
        # post-onset mean is 5, so 7 -> 5 + 3 * 2
        assert q.sales[0, 5] == pytest.approx(11.0)
        assert q.sales[0, 4] == pytest.approx(0.0)  # 5 + 3 * (-2) clipped

    def test_seasonality_shift(self):
        q, _ = inject(flat_panel(holidays=(6,)), scenario("seasonality_shift", seasonal_factor=0.4))
        assert q.sales[0, 5] == pytest.approx(6.0)
        assert q.sales[0, 6] == 10.0

    def test_trend_change(self):
        q, rec = inject(flat_panel(T=30), scenario("trend_change", beta=0.5))
        assert q.sales[0, 8] == pytest.approx(8.0)  # day 9 = onset + 4
        assert q.sales[0, 29] == 0.0
        assert rec.params["beta_per_series"] == [0.5] * 5

    def test_default_trend_reaches_quarter_decline(self):
        q, _ = inject(flat_panel(T=25), scenario("trend_change", onset_day=5))
        assert q.sales[0, 24] == pytest.approx(10.0 * (1 - 0.25 * 20 / 20))

    def test_hierarchical_needs_region(self):
        with pytest.raises(ValidationError):
            inject(flat_panel(), DriftScenario(kind="hierarchical", onset_day=5))

    @pytest.mark.parametrize(
        "kw", [dict(kind="bogus"), dict(alpha=0.0), dict(gamma=-1.0), dict(affected_fraction=0.0),
               dict(onset_day=99), dict(onset_day=12), dict(seasonal_factor=1.5), dict(beta=float("inf"))]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            inject(flat_panel(), DriftScenario(**{**dict(onset_day=5), **kw}))

    def test_record_round_trip(self):
        _, rec = inject(flat_panel(), scenario("level_shock", affected_fraction=0.4))
        assert InjectionRecord.from_dict(rec.to_dict()) == rec


class TestAlgebra:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 3.0))
    def test_level_shock_mean_ratio(self, seed, alpha):
        rng = np.random.default_rng(seed)
        p = make_panel(rng.uniform(1, 50, size=(6, 20)), n_stores=2)
        q, rec = inject(p, DriftScenario(onset_day=8, alpha=alpha, affected_fraction=0.5, seed=seed))
        rows = list(rec.affected_series)
        before = p.sales[rows, 7:]
        after = q.sales[rows, 7:]
        assert np.array_equal(after, alpha * before)
        assert after.mean() == pytest.approx(alpha * before.mean(), rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 3.0))
    def test_volatility_spike_preserves_mean(self, seed, gamma):
        rng = np.random.default_rng(seed)
        # values near a high level keep ybar + gamma * (y - ybar) positive
        p = make_panel(100 + rng.uniform(-10, 10, size=(4, 20)))
        q, rec = inject(p, DriftScenario(kind="volatility_spike", onset_day=6, gamma=gamma, affected_fraction=1.0))
        before = p.sales[:, 5:]
        after = q.sales[:, 5:]
        np.testing.assert_allclose(after.mean(axis=1), before.mean(axis=1), rtol=1e-12)
        np.testing.assert_allclose(after.std(axis=1), gamma * before.std(axis=1), rtol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(KINDS), st.integers(0, 2**32 - 1), st.floats(0.1, 1.0))
    def test_locality(self, kind, seed, fraction):
        rng = np.random.default_rng(seed)
        p = make_panel(rng.poisson(20, size=(10, 30)).astype(float), n_stores=4, states=("CA", "TX"),
                       holidays=(12, 20, 25))
        original = np.array(p.sales)
        q, rec = inject(p, scenario(kind, onset_day=15, affected_fraction=fraction, seed=seed))
        assert np.array_equal(p.sales, original)
        untouched = np.ones_like(original, dtype=bool)
        untouched[np.ix_(list(rec.affected_series), np.arange(14, 30))] = False
        assert np.array_equal(q.sales[untouched], original[untouched])
        assert np.array_equal(q.prices, p.prices) and q.calendar == p.calendar
        assert np.all(q.sales >= 0)

    def test_deterministic(self):
        p = make_panel(np.random.default_rng(0).poisson(20, size=(10, 30)).astype(float))
        s = DriftScenario(onset_day=10, affected_fraction=0.3, seed=4)
        assert inject(p, s) == inject(p, s)
