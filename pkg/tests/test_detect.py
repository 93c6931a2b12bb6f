import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp, kstwobign

from driftguard.detect import (
    CusumState,
    DetectorConfig,
    cusum_update,
    detect_panel,
    ensemble_vote,
    error_score,
    ks_statistic,
    psi,
    psi_from_proportions,
    read_event_log,
    statistical_score,
    write_event_log,
)
from driftguard.errors import DegenerateBaselineError, InsufficientDataError, ValidationError
from driftguard.features import FeatureSpec
from driftguard.inject import DriftScenario, inject
from driftguard.ingest import SynthConfig, generate_synthetic

SMALL = DetectorConfig(recent_window=7, baseline_window=42, baseline_gap=0, ae_window=7, ae_bottleneck=2, ae_epochs=50)
SPEC = FeatureSpec(lag_days=(1, 7), rolling_windows=(7,))


def trailing_mean_forecasts(panel, w=7):
    """Forecast for day t is the mean of days t-w .. t-1 (first w days copy day 1)."""
    S = panel.sales
    out = np.empty_like(S)
    for c in range(S.shape[1]):
        out[:, c] = S[:, max(c - w, 0) : c].mean(axis=1) if c else S[:, 0]
    return out


@pytest.fixture(scope="module")
def panel():
    return generate_synthetic(SynthConfig(n_stores=2, n_states=1, n_skus_per_store=10, n_days=120,
                                          weekly_amplitude=0.0, annual_amplitude=0.0, seed=5))


class TestErrorScore:
    def test_identity(self):
        assert error_score([2.0, -2.0, 2.0], 2.0, 3) == pytest.approx(0.0)

    def test_doubling(self):
        assert error_score([4.0, -4.0], 2.0, 2) == pytest.approx(1.0)

    def test_hand_case(self):
        assert error_score([3.0, 4.0], 2.5, 2) == pytest.approx(np.sqrt(12.5) / 2.5 - 1, abs=1e-12)
        assert error_score([3.0, 4.0], 2.5, 2) == pytest.approx(0.4142, abs=1e-4)

    def test_uses_recent_window_only(self):
        assert error_score([100.0, 1.0, 1.0], 1.0, 2) == pytest.approx(0.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateBaselineError):
            error_score([1.0], 0.0, 1)
        with pytest.raises(InsufficientDataError):
            error_score([1.0], 1.0, 2)


class TestKS:
    def test_identical(self):
        assert ks_statistic([1, 2, 3], [1, 2, 3])[0] == 0.0

    def test_disjoint(self):
        assert ks_statistic([1, 2, 3], [7, 8, 9])[0] == 1.0

    def test_hand_case(self):
        assert ks_statistic([1, 2, 3, 4], [3, 4, 5, 6])[0] == 0.5

    def test_min_size(self):
        with pytest.raises(InsufficientDataError):
            ks_statistic([1, 2, 3], [1, 2, 3], min_size=8)
        with pytest.raises(InsufficientDataError):
            ks_statistic([], [1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(8, 60), st.integers(8, 60))
    def test_matches_reference(self, seed, n, m):
        rng = np.random.default_rng(seed)
        a = rng.poisson(5, size=n).astype(float)
        b = rng.poisson(6, size=m).astype(float)
        d, p = ks_statistic(a, b)
        assert d == pytest.approx(ks_2samp(a, b).statistic, abs=1e-12)
        assert p == pytest.approx(kstwobign.sf(np.sqrt(n * m / (n + m)) * d), rel=1e-9, abs=1e-15)


class TestPSI:
    def test_hand_case(self):
        expected = 0.25 * np.log(2) - 0.25 * np.log(2 / 3)
        assert psi_from_proportions([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-12)
        assert psi_from_proportions([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.2747, abs=1e-4)

    def test_identical(self):
        x = np.random.default_rng(0).normal(size=500)
        assert abs(psi(x, x)) < 1e-6

    def test_empty_bin_finite(self):
        assert np.isfinite(psi_from_proportions([1.0, 0.0], [0.0, 1.0]))

    def test_categorical(self):
        v = psi(["a", "a", "b", "b"], ["a", "b", "b", "b"], categorical=True)
        assert v == pytest.approx(psi_from_proportions([0.5, 0.5], [0.25, 0.75]))

    def test_empty_sample(self):
        with pytest.raises(ValidationError):
            psi([], [1.0])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 12))
    def test_symmetric_non_negative(self, seed, k):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(k))
        q = rng.dirichlet(np.ones(k))
        a, b = psi_from_proportions(p, q), psi_from_proportions(q, p)
        assert a == b and a >= 0


class TestStatisticalScore:
    def test_identical(self):
        x = np.random.default_rng(1).normal(size=(30, 2))
        assert statistical_score(x, x) == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_feature(self):
        a = np.column_stack([np.arange(30.0), np.arange(30.0)])
        b = np.column_stack([np.arange(30.0), np.arange(100.0, 130.0)])
        assert statistical_score(a, b) == pytest.approx(1.0, abs=1e-9)

    def test_too_small_abstains(self):
        with pytest.raises(InsufficientDataError):
            statistical_score(np.arange(5.0), np.arange(5.0))

    def test_column_mismatch(self):
        with pytest.raises(ValidationError):
            statistical_score(np.zeros((10, 2)), np.zeros((10, 3)))


class TestCusum:
    def test_stays_zero(self):
        s = CusumState(mu0=3.0)
        for _ in range(50):
            s = cusum_update(s, 3.0, 0.5)
        assert s.c == 0.0 and s.c_neg == 0.0

    def test_recursion(self):
        s, out = CusumState(), []
        for r in (1.0, 1.0, 1.0):
            s = cusum_update(s, r, 0.5)
            out.append(s.c)
        assert out == [0.5, 1.0, 1.5]

    def test_two_sided(self):
        s1 = cusum_update(CusumState(), 2.0, 0.5)
        s2 = cusum_update(s1, -5.0, 0.5)
        assert (s1.c, s2.c) == (1.5, 0.0)
        assert (s1.c_neg, s2.c_neg) == (0.0, 4.5)
        assert s2.score == 4.5

    def test_non_finite(self):
        with pytest.raises(ValidationError):
            cusum_update(CusumState(), float("nan"), 0.5)


class TestVote:
    TH = (0.5, 0.5, 0.5, 0.5)

    def test_three_of_four(self):
        assert ensemble_vote((1, 1, 1, 0), self.TH).decision

    def test_two_of_four(self):
        assert not ensemble_vote((1, 1, 0, 0), self.TH).decision

    def test_abstention_lowers_quorum(self):
        ev = ensemble_vote((1, 1, 0, None), self.TH)
        assert ev.quorum == 2 and ev.decision
        assert not ensemble_vote((1, 0, 0, None), self.TH).decision

    def test_quorum_floor(self):
        ev = ensemble_vote((1, None, None, None), self.TH)
        assert ev.quorum == 2 and not ev.decision

    def test_disabled_keeps_quorum(self):
        ev = ensemble_vote((1, 1, None, 0), self.TH, disabled=(False, False, True, False))
        assert ev.quorum == 3 and not ev.decision

    def test_all_abstain(self):
        assert ensemble_vote((None,) * 4, self.TH) is None

    def test_threshold_strict(self):
        assert not ensemble_vote((0.5, 0.5, 0.5, 0.5), self.TH).decision


class TestDetectPanel:
    def test_control_quiet_and_shock_detected(self, panel):
        events, trace = detect_panel(panel, trailing_mean_forecasts(panel), config=SMALL, start_day=70, spec=SPEC)
        assert events == []
        drifted, rec = inject(panel, DriftScenario(onset_day=90, alpha=0.5, affected_fraction=0.5, seed=1))
        events, trace = detect_panel(drifted, trailing_mean_forecasts(drifted), config=SMALL, start_day=70, spec=SPEC)
        assert len(events) == 1
        ev = events[0]
        assert ev.day >= 90 and ev.overlaps(rec.affected_series)
        assert set(ev.series_scope) == set(np.flatnonzero(trace.decision[:, ev.day - 70]))

    def test_causal(self, panel):
        F = trailing_mean_forecasts(panel)
        _, a = detect_panel(panel, F, config=SMALL, start_day=70, spec=SPEC)
        sales = np.array(panel.sales)
        sales[:, 99:] *= 3.0
        changed = panel.with_sales(sales)
        _, b = detect_panel(changed, trailing_mean_forecasts(changed), config=SMALL, start_day=70, spec=SPEC)
        k = 100 - 70
        np.testing.assert_array_equal(a.decision[:, :k], b.decision[:, :k])
        np.testing.assert_array_equal(np.nan_to_num(a.scores[:, :, :k]), np.nan_to_num(b.scores[:, :, :k]))

    def test_misaligned(self, panel):
        with pytest.raises(ValidationError):
            detect_panel(panel, np.zeros((3, 120)), config=SMALL, start_day=70, spec=SPEC)
        with pytest.raises(ValidationError):
            detect_panel(panel, trailing_mean_forecasts(panel), config=SMALL, start_day=20, spec=SPEC)

    def test_unknown_monitored_feature(self, panel):
        cfg = DetectorConfig(**{**SMALL.to_dict(), "monitored_continuous": ["lag_364"]})
        with pytest.raises(ValidationError):
            detect_panel(panel, trailing_mean_forecasts(panel), config=cfg, start_day=70, spec=SPEC)

    def test_event_log_round_trip(self, panel, tmp_path):
        drifted, _ = inject(panel, DriftScenario(onset_day=90, alpha=0.5, affected_fraction=0.5, seed=1))
        events, _ = detect_panel(drifted, trailing_mean_forecasts(drifted), config=SMALL, start_day=70, spec=SPEC)
        write_event_log(events, tmp_path / "events.log")
        back = read_event_log(tmp_path / "events.log")
        assert [e.to_record() for e in back] == [e.to_record() for e in events]
        assert back[0].series_events == events[0].series_events

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            DetectorConfig(recent_window=3).validate()
        with pytest.raises(ValidationError):
            DetectorConfig(vote_quorum=5).validate()
