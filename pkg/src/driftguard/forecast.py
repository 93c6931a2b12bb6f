"""Store-level forecasters, panel forecasts, bottom-up reconciliation and
accuracy metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .core import Hierarchy, Panel
from .errors import UndefinedMetricError, ValidationError
from .features import FeatureSpec, design_matrix, feature_tensor
from .gbt import GbtHyper, GbtModel, train_gbt


@dataclass
class MetricReport:
    wmape: float
    mae: float
    rmse: float
    per_series_wmape: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "wmape": self.wmape,
            "mae": self.mae,
            "rmse": self.rmse,
            "per_series_wmape": {str(k): v for k, v in self.per_series_wmape.items()},
        }


def _pair(actuals, forecasts):
    y = np.asarray(actuals, dtype=float)
    f = np.asarray(forecasts, dtype=float)
    if y.shape != f.shape:
        raise ValidationError(f"shape mismatch {y.shape} vs {f.shape}")
    if y.size == 0:
        raise ValidationError("empty input")
    return y, f


def wmape(actuals, forecasts) -> float:
    y, f = _pair(actuals, forecasts)
    denom = y.sum()
    if not denom > 0:
        raise UndefinedMetricError("WMAPE undefined when actuals sum to zero")
    return float(np.abs(y - f).sum() / denom)


def mae(actuals, forecasts) -> float:
    y, f = _pair(actuals, forecasts)
    return float(np.mean(np.abs(y - f)))


def rmse(actuals, forecasts) -> float:
    y, f = _pair(actuals, forecasts)
    return float(np.sqrt(np.mean((y - f) ** 2)))


def metric_report(actuals, forecasts, series_ids=None) -> MetricReport:
    """Pooled metrics over a ``[series, days]`` block plus per-series WMAPE
    (series whose actuals sum to zero are omitted from the per-series map)."""
    y, f = _pair(actuals, forecasts)
    y2 = np.atleast_2d(y)
    f2 = np.atleast_2d(f)
    ids = range(y2.shape[0]) if series_ids is None else series_ids
    per = {}
    for i, s in enumerate(ids):
        if y2[i].sum() > 0:
            per[int(s)] = wmape(y2[i], f2[i])
    return MetricReport(wmape(y, f), mae(y, f), rmse(y, f), per)


# ------------------------------------------------------------------ models

ModelMap = Dict[str, GbtModel]


def train_store_models(
    panel: Panel,
    spec: FeatureSpec,
    hyper: GbtHyper,
    start_day: int,
    end_day: int,
    stores=None,
) -> ModelMap:
    """One pooled model per store over target days ``[start_day, end_day]``."""
    models = {}
    names = tuple(spec.names())
    for store in stores if stores is not None else panel.stores():
        idx = panel.series_in_store(store)
        X, y = design_matrix(panel, spec, idx, start_day, end_day)
        models[store] = train_gbt(
            X, y, hyper, names, feature_spec=spec.to_dict(), trained_window=(start_day, end_day),
            meta={"store": store, "n_series": int(len(idx))},
        )
    return models


def _store_rows(panel: Panel, models: ModelMap):
    out = []
    for store in panel.stores():
        if store not in models:
            raise ValidationError(f"no model for store {store!r}")
        out.append((store, panel.series_in_store(store)))
    return out


def one_step_forecasts(models: ModelMap, panel: Panel, spec: FeatureSpec, start_day: int, end_day: int) -> np.ndarray:
    """Next-day forecasts using observed history, ``[series, days]``, clipped at 0."""
    out = np.zeros((panel.n_series, end_day - start_day + 1))
    for store, idx in _store_rows(panel, models):
        out[idx] = series_forecasts(models[store], panel, spec, idx, start_day, end_day)
    return out


def series_forecasts(model: GbtModel, panel: Panel, spec: FeatureSpec, series, start_day: int, end_day: int) -> np.ndarray:
    """One-step forecasts of a single model for the given series, clipped at 0."""
    idx = np.asarray(series, dtype=int)
    days = np.arange(start_day, end_day + 1)
    X = feature_tensor(panel, spec, days, idx)
    pred = model.predict_matrix(X.reshape(-1, X.shape[2]))
    return np.maximum(pred.reshape(len(idx), len(days)), 0.0)


def forecast_panel(
    models: ModelMap, panel: Panel, horizon_days: int, spec: FeatureSpec, origin_day: Optional[int] = None
) -> np.ndarray:
    """Recursive multi-step forecasts for days ``origin+1 .. origin+horizon``.

    Each day's clipped prediction replaces that day's sales before the next
    day's features are built, so later lags read earlier forecasts.
    """
    if horizon_days < 1:
        raise ValidationError("horizon must be >= 1")
    origin = panel.last_day - horizon_days if origin_day is None else origin_day
    if origin < panel.first_day or origin + horizon_days > panel.last_day:
        raise ValidationError(
            f"horizon {horizon_days} from origin {origin} exceeds calendar ending at {panel.last_day}"
        )
    sales = np.array(panel.sales, dtype=float)
    out = np.zeros((panel.n_series, horizon_days))
    rows = _store_rows(panel, models)
    for h in range(horizon_days):
        day = origin + 1 + h
        for store, idx in rows:
            X = feature_tensor(panel, spec, [day], idx, sales=sales)[:, 0, :]
            out[idx, h] = np.maximum(models[store].predict_matrix(X), 0.0)
        sales[:, panel.col(day)] = out[:, h]
    return out


def reconcile_bottom_up(forecasts, hierarchy: Hierarchy, n_series: Optional[int] = None) -> dict:
    """Coherent forecasts for every node of both branches, keyed by node path.

    Leaves pass through unchanged; each internal node is the left-fold sum of
    its children.
    """
    f = np.asarray(forecasts, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    expected = len(hierarchy.geographic.leaf_series) if n_series is None else n_series
    if f.shape[0] != expected or not np.all(np.isfinite(f)):
        raise ValidationError(f"leaf forecasts missing: got {f.shape[0]} rows for {expected} series")
    out = {}

    def visit(node):
        if node.is_leaf:
            val = np.array(f[node.leaf_series[0]])
        else:
            parts = [visit(c) for c in node.children]
            val = parts[0].copy()
            for p in parts[1:]:
                val = val + p
        out[node.path] = val
        return val

    visit(hierarchy.geographic)
    visit(hierarchy.product)
    return out


# ------------------------------------------------------------------ persistence

def save_models(models: ModelMap, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for store, m in sorted(models.items()):
        (d / f"{store}.json").write_text(m.to_json() + "\n", encoding="utf-8")
    (d / "index.json").write_text(json.dumps(sorted(models), indent=1) + "\n", encoding="utf-8")


def load_models(directory) -> ModelMap:
    d = Path(directory)
    stores = json.loads((d / "index.json").read_text(encoding="utf-8"))
    return {s: GbtModel.from_json((d / f"{s}.json").read_text(encoding="utf-8")) for s in stores}
