"""Cost-aware remediation: window selection, top-K series selection,
newsvendor costing, ROI gating and store-level retraining with rollback."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .core import Panel
from .errors import DriftGuardError, UndefinedMetricError, ValidationError
from .features import FeatureSpec, design_matrix, feature_tensor
from .forecast import MetricReport, metric_report, one_step_forecasts, series_forecasts, wmape
from .gbt import GbtHyper, train_gbt

log = logging.getLogger(__name__)

CANDIDATE_WINDOWS = (30, 60, 90, 180)
FULL_RETRAIN_DAYS = 180
ORDER_POLICIES = ("fractile", "forecast")


@dataclass(frozen=True)
class CostModel:
    holding_ratio: float = 0.3
    stockout_ratio: float = 0.7
    compute_cost_rate: Optional[float] = None  # None: a full-panel 180-day retrain costs 1.0
    lam: float = 100.0
    tau: float = 0.02
    top_k: Optional[int] = None                # None: top_k_fraction of the series count
    top_k_fraction: float = 0.2
    order_policy: str = "fractile"             # "fractile": order at the critical fractile; "forecast": order the forecast

    def validate(self):
        if abs(self.holding_ratio + self.stockout_ratio - 1.0) > 1e-12:
            raise ValidationError("holding_ratio + stockout_ratio must equal 1")
        rates = (self.holding_ratio, self.stockout_ratio, self.lam, self.tau)
        if any(r < 0 for r in rates) or (self.compute_cost_rate is not None and self.compute_cost_rate < 0):
            raise ValidationError("cost rates must be >= 0")
        if self.top_k is not None and self.top_k < 1:
            raise ValidationError("top_k must be >= 1")
        if not 0 < self.top_k_fraction <= 1:
            raise ValidationError("top_k_fraction must lie in (0, 1]")
        if self.order_policy not in ORDER_POLICIES:
            raise ValidationError(f"order_policy must be one of {ORDER_POLICIES}")

    @property
    def critical_fractile(self) -> float:
        return self.stockout_ratio / (self.stockout_ratio + self.holding_ratio)

    def rate(self, n_series: int) -> float:
        if self.compute_cost_rate is not None:
            return float(self.compute_cost_rate)
        return 1.0 / (n_series * FULL_RETRAIN_DAYS)

    def k(self, n_series: int) -> int:
        return self.top_k if self.top_k is not None else max(1, math.ceil(self.top_k_fraction * n_series))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class RetrainPlan:
    window_days: int
    selected_series: tuple
    est_compute_cost: float
    est_inventory_saving: float
    roi: Optional[float]
    approved: bool
    plan_day: int = 0
    validation_days: int = 0
    stores: tuple = ()
    probes: list = field(default_factory=list)
    delta_wmape: dict = field(default_factory=dict)
    warning: Optional[str] = None
    projection: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.approved != (self.roi is not None and self.roi > 0):
            raise ValidationError("approved must equal roi > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selected_series"] = [int(s) for s in self.selected_series]
        d["stores"] = list(self.stores)
        d["delta_wmape"] = {str(k): v for k, v in sorted(self.delta_wmape.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RetrainPlan":
        d = dict(d)
        d["selected_series"] = tuple(d["selected_series"])
        d["stores"] = tuple(d["stores"])
        d["delta_wmape"] = {int(k): v for k, v in d["delta_wmape"].items()}
        return cls(**d)


# ------------------------------------------------------------------ costing

def inventory_cost(actuals, forecasts, prices, cost_model: CostModel = CostModel()) -> float:
    y = np.asarray(actuals, dtype=float)
    f = np.asarray(forecasts, dtype=float)
    p = np.asarray(prices, dtype=float)
    if y.shape != f.shape or y.shape != p.shape:
        raise ValidationError(f"shape mismatch {y.shape} / {f.shape} / {p.shape}")
    if np.any(p <= 0):
        raise ValidationError("prices must be positive")
    under = np.maximum(y - f, 0.0)
    over = np.maximum(f - y, 0.0)
    return float(np.sum(p * (cost_model.stockout_ratio * under + cost_model.holding_ratio * over)))


def order_quantity(forecasts, sigma, cost_model: CostModel = CostModel()) -> np.ndarray:
    """Order placed for each forecast: the forecast itself, or the normal
    critical-fractile quantity ``f + z * sigma`` clipped at 0, with ``sigma``
    the per-series forecast error std (broadcast along days)."""
    f = np.asarray(forecasts, dtype=float)
    if cost_model.order_policy == "forecast":
        return f
    sd = np.asarray(sigma, dtype=float)
    if f.ndim == 2 and sd.ndim == 1:
        sd = sd[:, None]
    if np.any(sd < 0) or not np.all(np.isfinite(sd)):
        raise ValidationError("sigma must be finite and >= 0")
    z = float(norm.ppf(cost_model.critical_fractile))
    return np.maximum(f + z * sd, 0.0)


def roi(delta_inventory_cost: float, compute_cost: float) -> float:
    if compute_cost == 0:
        raise UndefinedMetricError("ROI undefined for zero compute cost")
    if compute_cost < 0:
        raise ValidationError("compute cost must be positive")
    return (delta_inventory_cost - compute_cost) / compute_cost


# ------------------------------------------------------------------ selection

def select_series(delta_wmape, tau: float, top_k: int) -> tuple:
    """Series whose WMAPE rose by more than ``tau``, worst first, at most ``top_k``."""
    if tau < 0 or top_k < 1:
        raise ValidationError("tau must be >= 0 and top_k >= 1")
    items = delta_wmape.items() if hasattr(delta_wmape, "items") else enumerate(delta_wmape)
    keep = [(float(d), int(s)) for s, d in items if float(d) > tau]
    keep.sort(key=lambda t: (-t[0], t[1]))
    return tuple(s for _, s in keep[:top_k])


def _fit_hyper(hyper: GbtHyper, n_rows: int) -> GbtHyper:
    # small probe samples cannot honour a large min_leaf
    return replace(hyper, min_leaf=max(1, min(hyper.min_leaf, n_rows // 4)))


def probe_loss(panel: Panel, series, window: int, end_day: int, validation_days: int, spec: FeatureSpec, hyper: GbtHyper):
    """Train one pooled model on ``series`` over the ``window`` days ending at
    ``end_day - validation_days``; return (validation WMAPE, validation forecasts)."""
    idx = np.asarray(series, dtype=int)
    t_end = end_day - validation_days
    X, y = design_matrix(panel, spec, idx, t_end - window + 1, t_end)
    model = train_gbt(X, y, _fit_hyper(hyper, len(y)), spec.names())
    days = np.arange(t_end + 1, end_day + 1)
    V = feature_tensor(panel, spec, days, idx)
    pred = np.maximum(model.predict_matrix(V.reshape(-1, V.shape[2])), 0.0).reshape(len(idx), len(days))
    actual = panel.sales[idx][:, panel.col(t_end + 1) : panel.col(end_day) + 1]
    return wmape(actual, pred), pred


def select_window(
    panel: Panel,
    drift_scope: Sequence[int],
    candidates: Sequence[int] = CANDIDATE_WINDOWS,
    cost_model: CostModel = CostModel(),
    validation_days: int = 14,
    end_day: Optional[int] = None,
    spec: FeatureSpec = FeatureSpec(),
    hyper: GbtHyper = GbtHyper(),
    max_probe: int = 20,
    seed: int = 0,
):
    """Return ``(window, probes, warning)``; ``probes`` logs each candidate's
    compute cost, validation loss and objective."""
    scope = sorted(int(s) for s in drift_scope)
    if not scope:
        raise ValidationError("empty drift scope")
    end = panel.last_day if end_day is None else end_day
    cands = sorted(int(c) for c in candidates)
    rng = np.random.default_rng(seed)
    sample = scope if len(scope) <= max_probe else sorted(int(s) for s in rng.choice(scope, max_probe, replace=False))
    feasible = [w for w in cands if end - validation_days - w + 1 >= panel.first_day]
    if not feasible:
        raise ValidationError("no candidate window fits the available history")
    rate = cost_model.rate(panel.n_series)
    if len(feasible) < len(cands):
        w = feasible[-1]
        msg = f"insufficient history for windows {sorted(set(cands) - set(feasible))}; using {w}"
        log.warning(msg)
        return w, [], msg
    probes = []
    for w in cands:
        loss, _ = probe_loss(panel, sample, w, end, validation_days, spec, hyper)
        cost = rate * len(sample) * w
        probes.append({"window": w, "compute_cost": cost, "val_wmape": loss, "objective": cost + cost_model.lam * loss,
                       "sample": sample})
    best = min(probes, key=lambda p: (p["objective"], p["window"]))
    return best["window"], probes, None


def train_candidate(panel: Panel, store: str, window: int, plan_day: int, validation_days: int, spec: FeatureSpec, hyper: GbtHyper):
    """Store model trained on the ``window`` days that end just before the
    validation days."""
    t1 = plan_day - validation_days
    t0 = t1 - window + 1
    idx = panel.series_in_store(store)
    X, y = design_matrix(panel, spec, idx, t0, t1)
    return train_gbt(X, y, _fit_hyper(hyper, len(y)), spec.names(), feature_spec=spec.to_dict(),
                     trained_window=(t0, t1), meta={"store": store, "n_series": int(len(idx))})


def _candidate(cache, panel, store, window, plan_day, validation_days, spec, hyper):
    if cache is None:
        return train_candidate(panel, store, window, plan_day, validation_days, spec, hyper)
    key = (store, window, plan_day, validation_days, hyper, spec)
    if key not in cache:
        cache[key] = train_candidate(panel, store, window, plan_day, validation_days, spec, hyper)
    return cache[key]


def build_plan(
    panel: Panel,
    delta: dict,
    plan_day: int,
    cost_model: CostModel = CostModel(),
    candidates: Sequence[int] = CANDIDATE_WINDOWS,
    validation_days: int = 14,
    spec: FeatureSpec = FeatureSpec(),
    hyper: GbtHyper = GbtHyper(),
    old_forecasts=None,
    max_probe: int = 20,
    seed: int = 0,
    sigma=None,
    candidate_cache: Optional[dict] = None,
) -> RetrainPlan:
    """Select series and window, then gate on projected ROI.

    ``old_forecasts`` holds the deployed models' forecasts for the validation
    days ``plan_day - validation_days + 1 .. plan_day`` (``[series, days]``).
    The saving is the validation-day cost reduction of the store models that
    would survive the rollback check, annualized. ``sigma`` (per series) sizes
    the orders under the fractile policy. Trained store candidates are put in
    ``candidate_cache`` for :func:`execute_retraining` to reuse.
    """
    cost_model.validate()
    selected = select_series(delta, cost_model.tau, cost_model.k(panel.n_series))
    if not selected:
        return RetrainPlan(min(candidates), (), 0.0, 0.0, None, False, plan_day, validation_days, delta_wmape=delta)
    if old_forecasts is None:
        raise ValidationError("old_forecasts for the validation window are required")
    old_all = np.asarray(old_forecasts, dtype=float)
    if old_all.shape != (panel.n_series, validation_days):
        raise ValidationError("old_forecasts must be [series, validation_days]")
    if sigma is None:
        if cost_model.order_policy == "fractile":
            raise ValidationError("sigma is required for the fractile order policy")
        sigma = np.zeros(panel.n_series)
    sigma = np.asarray(sigma, dtype=float)
    w, probes, warning = select_window(panel, selected, candidates, cost_model, validation_days, plan_day, spec, hyper, max_probe, seed)
    stores = tuple(sorted({panel.keys[s].store_id for s in selected}))
    n_trained = sum(len(panel.series_in_store(st)) for st in stores)
    compute = cost_model.rate(panel.n_series) * n_trained * w

    v0 = plan_day - validation_days + 1
    cols = slice(panel.col(v0), panel.col(plan_day) + 1)
    saving_val = 0.0
    projection = {}
    for store in stores:
        idx = panel.series_in_store(store)
        y, price, old = panel.sales[idx][:, cols], panel.prices[idx][:, cols], old_all[idx]
        try:
            cand = _candidate(candidate_cache, panel, store, w, plan_day, validation_days, spec, hyper)
        except DriftGuardError as exc:
            projection[store] = {"error": f"{type(exc).__name__}: {exc}", "saving": 0.0}
            continue
        new = series_forecasts(cand, panel, spec, idx, v0, plan_day)
        before, after = wmape(y, old), wmape(y, new)
        gain = 0.0
        if after < before:
            sd = sigma[idx]
            gain = inventory_cost(y, order_quantity(old, sd, cost_model), price, cost_model) - inventory_cost(
                y, order_quantity(new, sd, cost_model), price, cost_model)
        projection[store] = {"val_wmape_before": before, "val_wmape_after": after, "saving": gain}
        saving_val += gain
    saving = saving_val * 365.0 / validation_days
    r = roi(saving, compute) if compute > 0 else None
    return RetrainPlan(
        w, selected, compute, saving, r, r is not None and r > 0, plan_day, validation_days, stores,
        probes, delta, warning, projection,
    )


# ------------------------------------------------------------------ execution

@dataclass
class RetrainOutcome:
    models: dict
    decisions: dict
    before: MetricReport
    after: MetricReport
    eval_window: tuple

    @property
    def deployed(self) -> list:
        return sorted(s for s, d in self.decisions.items() if d["deployed"])

    def to_dict(self) -> dict:
        return {
            "eval_window": list(self.eval_window),
            "decisions": {k: v for k, v in sorted(self.decisions.items())},
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
        }


def execute_retraining(
    panel: Panel,
    plan: RetrainPlan,
    models: dict,
    spec: FeatureSpec,
    hyper: GbtHyper,
    eval_window: tuple,
    candidate_cache: Optional[dict] = None,
) -> RetrainOutcome:
    """Retrain the store models holding selected series on the plan window and
    keep each only when it beats the deployed model on the validation days."""
    if plan.selected_series and not plan.approved:
        raise ValidationError("plan is not approved")
    e0, e1 = eval_window
    v0, v1 = plan.plan_day - plan.validation_days + 1, plan.plan_day
    t1 = v0 - 1
    new_models = dict(models)
    decisions = {}
    for store in plan.stores if plan.selected_series else ():
        idx = panel.series_in_store(store)
        y_val = panel.sales[idx][:, panel.col(v0) : panel.col(v1) + 1]
        old_val = wmape(y_val, series_forecasts(models[store], panel, spec, idx, v0, v1))
        rec = {"deployed": False, "val_wmape_before": old_val, "val_wmape_after": None, "error": None,
               "window": [t1 - plan.window_days + 1, t1]}
        try:
            cand = _candidate(candidate_cache, panel, store, plan.window_days, plan.plan_day, plan.validation_days, spec, hyper)
            new_val = wmape(y_val, series_forecasts(cand, panel, spec, idx, v0, v1))
            rec["val_wmape_after"] = new_val
            if new_val < old_val:
                new_models[store] = cand
                rec["deployed"] = True
        except DriftGuardError as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
        log.info("store %s: %s", store, "deployed" if rec["deployed"] else "rolled back")
        decisions[store] = rec
    y = panel.sales[:, panel.col(e0) : panel.col(e1) + 1]
    before = metric_report(y, one_step_forecasts(models, panel, spec, e0, e1))
    after = metric_report(y, one_step_forecasts(new_models, panel, spec, e0, e1))
    return RetrainOutcome(new_models, decisions, before, after, (e0, e1))
