"""Lag, calendar, price and rolling-window features.

Every feature for day ``t`` reads sales strictly before ``t``. When a lag
reaches before the start of the panel the series' trailing mean is used
instead and the matching ``*_missing`` indicator is set to 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Panel
from .errors import ValidationError

PRICE_WINDOW = 28
_CHUNK = 256


@dataclass(frozen=True)
class FeatureSpec:
    lag_days: tuple = (1, 7, 28, 364)
    rolling_windows: tuple = (7, 28)
    include_calendar: bool = True
    include_price: bool = True
    include_series_id: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lag_days", tuple(sorted(int(v) for v in self.lag_days)))
        object.__setattr__(self, "rolling_windows", tuple(sorted(int(v) for v in self.rolling_windows)))
        if any(v < 1 for v in self.lag_days + self.rolling_windows):
            raise ValidationError("lags and rolling windows must be >= 1")

    def names(self) -> list:
        out = [f"lag_{L}" for L in self.lag_days]
        out += [f"lag_{L}_missing" for L in self.lag_days]
        if self.include_calendar:
            out += [f"dow_{d}" for d in range(7)]
            out += ["month", "is_holiday"]
        if self.include_price:
            out += ["price", "price_ratio_28d"]
        for w in self.rolling_windows:
            out += [f"rolling_mean_{w}", f"rolling_std_{w}"]
        if self.include_series_id:
            out.append("series_id")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lag_days"] = list(self.lag_days)
        d["rolling_windows"] = list(self.rolling_windows)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(**d)


@dataclass(frozen=True)
class FeatureVector:
    names: tuple
    values: np.ndarray

    def __post_init__(self):
        if len(self.names) != len(self.values):
            raise ValidationError("names/values length mismatch")

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])


def _trailing_stats(s: np.ndarray, cols: np.ndarray, w: int):
    """Mean and population std over sales columns [c-w, c-1] for each c in cols."""
    n, T = s.shape
    pad = np.full((n, w), np.nan)
    padded = np.concatenate([pad, s], axis=1)
    # window for target column c is padded[:, c : c + w]
    win = sliding_window_view(padded, w, axis=1)[:, cols, :]
    count = np.sum(~np.isnan(win), axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        total = np.nansum(win, axis=2)
        mean = np.where(count > 0, total / np.maximum(count, 1), 0.0)
        dev = np.where(np.isnan(win), 0.0, win - mean[..., None])
        var = np.where(count > 0, np.sum(dev * dev, axis=2) / np.maximum(count, 1), 0.0)
    return mean, np.sqrt(var)


def feature_tensor(
    panel: Panel,
    spec: FeatureSpec,
    days: Optional[Sequence[int]] = None,
    series: Optional[Sequence[int]] = None,
    sales: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Features for every (series, day) pair, shape ``[len(series), len(days), F]``.

    ``sales`` overrides the panel's sales matrix (used when feeding forecasts
    back as lag inputs).
    """
    series = np.arange(panel.n_series) if series is None else np.asarray(series, dtype=int)
    days = panel.day_indices if days is None else np.asarray(days, dtype=int)
    if days.size and days.min() < 1:
        raise ValidationError("day must be >= 1")
    cols = np.array([panel.col(int(d)) for d in days], dtype=int)
    S = panel.sales if sales is None else np.asarray(sales, dtype=float)
    names = spec.names()
    out = np.empty((len(series), len(cols), len(names)))
    for a in range(0, len(series), _CHUNK):
        idx = series[a : a + _CHUNK]
        out[a : a + len(idx)] = _block(panel, spec, S[idx], panel.prices[idx], idx, cols)
    return out


def _block(panel, spec, s, p, idx, cols):
    n = s.shape[0]
    m = len(cols)
    parts = []
    csum = np.concatenate([np.zeros((n, 1)), np.cumsum(s, axis=1)], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        trailing = np.where(cols > 0, csum[:, cols] / np.maximum(cols, 1), 0.0)
    lag_vals, lag_miss = [], []
    for L in spec.lag_days:
        src = cols - L
        ok = src >= 0
        vals = np.where(ok[None, :], s[:, np.maximum(src, 0)], trailing)
        lag_vals.append(vals)
        lag_miss.append(np.broadcast_to((~ok).astype(float), (n, m)))
    parts += lag_vals + lag_miss

    if spec.include_calendar:
        cal = [panel.calendar[c] for c in cols]
        dow = np.array([d.day_of_week for d in cal])
        for k in range(7):
            parts.append(np.broadcast_to((dow == k).astype(float), (n, m)))
        parts.append(np.broadcast_to(np.array([d.month for d in cal], dtype=float), (n, m)))
        parts.append(np.broadcast_to(np.array([d.is_holiday for d in cal], dtype=float), (n, m)))

    if spec.include_price:
        parts.append(p[:, cols])
        pmean, _ = _trailing_stats(p, cols, PRICE_WINDOW)
        with np.errstate(invalid="ignore", divide="ignore"):
            parts.append(np.where(cols[None, :] > 0, p[:, cols] / np.where(pmean > 0, pmean, 1.0), 1.0))

    for w in spec.rolling_windows:
        mean, std = _trailing_stats(s, cols, w)
        parts += [mean, std]

    if spec.include_series_id:
        parts.append(np.broadcast_to(np.asarray(idx, dtype=float)[:, None], (n, m)))
    return np.stack(parts, axis=2)


def build_features(panel: Panel, series_index: int, day: int, spec: FeatureSpec = FeatureSpec()) -> FeatureVector:
    if day <= 0:
        raise ValidationError("day must be >= 1")
    x = feature_tensor(panel, spec, [day], [series_index])[0, 0]
    return FeatureVector(tuple(spec.names()), x)


def design_matrix(panel: Panel, spec: FeatureSpec, series, start_day: int, end_day: int, sales=None):
    """Stacked training rows (series-major) and targets for a day range."""
    days = np.arange(start_day, end_day + 1)
    X = feature_tensor(panel, spec, days, series, sales=sales)
    S = panel.sales if sales is None else sales
    y = S[np.asarray(series)][:, [panel.col(int(d)) for d in days]]
    return X.reshape(-1, X.shape[2]), y.reshape(-1)
