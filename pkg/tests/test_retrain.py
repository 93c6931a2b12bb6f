from statistics import NormalDist

import numpy as np
import pytest

import driftguard.retrain as retrain_mod
from driftguard.errors import UndefinedMetricError, ValidationError
from driftguard.features import FeatureSpec
from driftguard.forecast import one_step_forecasts, train_store_models
from driftguard.gbt import GbtHyper
from driftguard.inject import DriftScenario, inject
from driftguard.retrain import (
    CostModel,
    RetrainPlan,
    build_plan,
    execute_retraining,
    inventory_cost,
    order_quantity,
    probe_loss,
    roi,
    select_series,
    select_window,
)

SPEC = FeatureSpec(lag_days=(1, 7), rolling_windows=(7,), include_series_id=False)
HYPER = GbtHyper(n_trees=15, max_depth=3, min_leaf=10)
PLAN_DAY, VAL = 115, 7


class TestCost:
    def test_under_forecast(self):
        assert inventory_cost([10.0], [7.0], [2.0]) == pytest.approx(4.2)

    def test_over_forecast(self):
        assert inventory_cost([10.0], [13.0], [2.0]) == pytest.approx(1.8)

    def test_perfect(self):
        assert inventory_cost([[1.0, 5.0]], [[1.0, 5.0]], [[3.0, 3.0]]) == 0.0

    def test_shape_and_price(self):
        with pytest.raises(ValidationError):
            inventory_cost([1.0, 2.0], [1.0], [1.0, 1.0])
        with pytest.raises(ValidationError):
            inventory_cost([1.0], [1.0], [0.0])

    def test_config(self):
        with pytest.raises(ValidationError):
            CostModel(holding_ratio=0.5, stockout_ratio=0.6).validate()
        with pytest.raises(ValidationError):
            CostModel(order_policy="bogus").validate()
        assert CostModel.from_dict({"lambda": 3.0}).lam == 3.0
        assert CostModel().critical_fractile == pytest.approx(0.7)


class TestOrders:
    def test_forecast_policy_is_identity(self):
        f = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(order_quantity(f, None, CostModel(order_policy="forecast")), f)

    def test_fractile(self):
        z = NormalDist().inv_cdf(0.7)
        q = order_quantity(np.array([[10.0, 0.0]]), np.array([2.0]))
        np.testing.assert_allclose(q, [[10.0 + 2 * z, 2 * z]], rtol=1e-12)

    def test_clipped(self):
        cm = CostModel(holding_ratio=0.9, stockout_ratio=0.1)
        assert order_quantity(np.array([0.5]), np.array([5.0]), cm)[0] == 0.0

    def test_bad_sigma(self):
        with pytest.raises(ValidationError):
            order_quantity(np.ones(2), np.array([-1.0, 1.0]))

    def test_fractile_beats_mean_on_normal_demand(self):
        rng = np.random.default_rng(0)
        mu, sd = 50.0, 8.0
        y = rng.normal(mu, sd, size=200_000)
        f = np.full_like(y, mu)
        p = np.ones_like(y)
        cost_mean = inventory_cost(y, f, p)
        cost_frac = inventory_cost(y, order_quantity(f, np.full_like(y, sd)), p)
        assert cost_frac < cost_mean
        # closed form expected newsvendor cost at the optimum: sd * pdf(z) per unit price
        z = NormalDist().inv_cdf(0.7)
        assert cost_frac / y.size == pytest.approx(sd * NormalDist().pdf(z), rel=0.01)


class TestROI:
    def test_examples(self):
        assert roi(100.0, 10.0) == 9.0
        assert roi(10.0, 10.0) == 0.0
        assert roi(4.0e6, 9.6e3) == pytest.approx(415.67, abs=0.01)

    def test_zero_compute(self):
        with pytest.raises(UndefinedMetricError):
            roi(1.0, 0.0)

    def test_plan_invariant(self):
        with pytest.raises(ValidationError):
            RetrainPlan(30, (1,), 1.0, 5.0, 4.0, False)
        p = RetrainPlan(30, (1, 2), 1.0, 5.0, 4.0, True, delta_wmape={1: 0.5, 2: 0.3})
        assert RetrainPlan.from_dict(p.to_dict()) == p


class TestSelectSeries:
    def test_none_above_tau(self):
        assert select_series({0: 0.1, 1: 0.2}, 0.2, 5) == ()

    def test_top_k(self):
        assert select_series([0.5, 0.3, 0.1], 0.2, 2) == (0, 1)

    def test_k_exceeds_qualifying(self):
        assert select_series({3: 0.3, 7: 0.9, 9: 0.0}, 0.2, 10) == (7, 3)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            select_series([0.5], -0.1, 1)


@pytest.fixture(scope="module")
def scenario(small_synth):
    drifted, rec = inject(small_synth, DriftScenario(onset_day=90, alpha=0.5, affected_fraction=0.5, seed=2))
    models = train_store_models(small_synth, SPEC, HYPER, 29, 80)
    return drifted, rec, models


def _delta(panel, models, affected):
    base = one_step_forecasts(models, panel, SPEC, 60, 80)
    post = one_step_forecasts(models, panel, SPEC, 95, PLAN_DAY)
    out = {}
    for s in range(panel.n_series):
        yb, yp = panel.sales[s, 59:80], panel.sales[s, 94:PLAN_DAY]
        out[s] = float(np.abs(yp - post[s]).sum() / yp.sum() - np.abs(yb - base[s]).sum() / yb.sum())
    return out


class TestWindow:
    def test_lambda_zero_picks_smallest(self, scenario):
        drifted, rec, _ = scenario
        w, probes, warn = select_window(drifted, rec.affected_series, (10, 20, 40), CostModel(lam=0.0), VAL, PLAN_DAY,
                                        SPEC, HYPER)
        assert w == 10 and warn is None and len(probes) == 3

    def test_large_lambda_picks_lowest_loss(self, scenario):
        drifted, rec, _ = scenario
        cands = (10, 20, 40)
        w, probes, _ = select_window(drifted, rec.affected_series, cands, CostModel(lam=1e9), VAL, PLAN_DAY, SPEC, HYPER)
        losses = {c: probe_loss(drifted, rec.affected_series, c, PLAN_DAY, VAL, SPEC, HYPER)[0] for c in cands}
        assert w == min(losses, key=losses.get)
        assert {p["window"]: p["val_wmape"] for p in probes} == losses

    def test_insufficient_history(self, scenario):
        drifted, rec, _ = scenario
        w, probes, warn = select_window(drifted, rec.affected_series, (30, 200), CostModel(), VAL, PLAN_DAY, SPEC, HYPER)
        assert w == 30 and probes == [] and "200" in warn
        with pytest.raises(ValidationError):
            select_window(drifted, rec.affected_series, (500,), CostModel(), VAL, PLAN_DAY, SPEC, HYPER)

    def test_empty_scope(self, scenario):
        with pytest.raises(ValidationError):
            select_window(scenario[0], [], (10,), CostModel(), VAL, PLAN_DAY, SPEC, HYPER)


def _plan(drifted, models, affected, **cm):
    delta = _delta(drifted, models, affected)
    old = one_step_forecasts(models, drifted, SPEC, PLAN_DAY - VAL + 1, PLAN_DAY)
    sigma = np.ones(drifted.n_series)
    cost = CostModel(compute_cost_rate=1e-3, **cm)
    return build_plan(drifted, delta, PLAN_DAY, cost, (10, 20), VAL, SPEC, HYPER, old, sigma=sigma, candidate_cache={}), sigma, old


class TestPlanAndExecute:
    def test_plan_projection_and_execution(self, scenario):
        drifted, rec, models = scenario
        plan, sigma, old = _plan(drifted, models, rec.affected_series)
        assert set(plan.selected_series) <= set(rec.affected_series)
        assert plan.est_compute_cost == pytest.approx(1e-3 * plan.window_days * 6 * len(plan.stores))
        assert plan.est_inventory_saving == pytest.approx(
            sum(v["saving"] for v in plan.projection.values()) * 365 / VAL, rel=1e-12)
        assert plan.roi == pytest.approx((plan.est_inventory_saving - plan.est_compute_cost) / plan.est_compute_cost)
        assert plan.approved
        out = execute_retraining(drifted, plan, models, SPEC, HYPER, (116, 120))
        for store, d in out.decisions.items():
            if d["deployed"]:
                assert d["val_wmape_after"] < d["val_wmape_before"]
                assert plan.projection[store]["saving"] >= 0
            else:
                assert out.models[store] is models[store]
        assert out.deployed
        assert out.after.wmape < out.before.wmape

    def test_empty_plan(self, scenario):
        drifted, rec, models = scenario
        plan = build_plan(drifted, {s: 0.0 for s in range(drifted.n_series)}, PLAN_DAY, CostModel(), (10, 20), VAL,
                          SPEC, HYPER)
        assert plan.selected_series == () and not plan.approved and plan.roi is None
        out = execute_retraining(drifted, plan, models, SPEC, HYPER, (116, 120))
        assert out.models == models and out.decisions == {}
        assert out.before.to_dict() == out.after.to_dict()

    def test_failing_store_rolled_back(self, scenario, monkeypatch):
        drifted, rec, models = scenario
        plan, _, _ = _plan(drifted, models, rec.affected_series)
        real = retrain_mod.train_candidate
        bad = plan.stores[0]

        def flaky(panel, store, *a, **k):
            if store == bad:
                raise ValidationError("boom")
            return real(panel, store, *a, **k)

        monkeypatch.setattr(retrain_mod, "train_candidate", flaky)
        out = execute_retraining(drifted, plan, models, SPEC, HYPER, (116, 120))
        assert out.decisions[bad]["error"] and not out.decisions[bad]["deployed"]
        assert out.models[bad] is models[bad]

    def test_unapproved_rejected(self, scenario):
        drifted, rec, models = scenario
        plan = RetrainPlan(10, (0,), 1.0, 0.0, -1.0, False, PLAN_DAY, VAL, ("CA_1",))
        with pytest.raises(ValidationError):
            execute_retraining(drifted, plan, models, SPEC, HYPER, (116, 120))

    def test_fractile_needs_sigma(self, scenario):
        drifted, rec, models = scenario
        old = one_step_forecasts(models, drifted, SPEC, PLAN_DAY - VAL + 1, PLAN_DAY)
        with pytest.raises(ValidationError):
            build_plan(drifted, _delta(drifted, models, rec.affected_series), PLAN_DAY, CostModel(), (10, 20), VAL,
                       SPEC, HYPER, old)
