"""Parameterized drift scenarios applied to a panel at a known onset day."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .core import Panel
from .errors import ValidationError

KINDS = ("seasonality_shift", "trend_change", "level_shock", "volatility_spike", "hierarchical")


@dataclass(frozen=True)
class DriftScenario:
    kind: str = "level_shock"
    onset_day: int = 700
    seasonal_factor: float = 0.4
    beta: Optional[float] = None  # None: per-series slope giving a 25% decline by the last day
    alpha: float = 0.8
    gamma: float = 3.0
    affected_fraction: float = 0.2
    affected_region: Optional[str] = None
    seed: int = 0

    def validate(self, panel: Optional[Panel] = None):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown drift kind {self.kind!r}")
        if not self.alpha > 0 or not self.gamma > 0:
            raise ValidationError("alpha and gamma must be positive")
        if not 0 < self.affected_fraction <= 1:
            raise ValidationError("affected_fraction must lie in (0, 1]")
        if self.beta is not None and not np.isfinite(self.beta):
            raise ValidationError("beta must be finite")
        if not 0 <= self.seasonal_factor <= 1:
            raise ValidationError("seasonal_factor must lie in [0, 1]")
        if panel is not None and not panel.first_day <= self.onset_day <= panel.last_day:
            raise ValidationError(f"onset day {self.onset_day} outside the panel")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DriftScenario":
        return cls(**d)


@dataclass(frozen=True)
class InjectionRecord:
    affected_series: tuple
    onset_day: int
    kind: str
    params: dict

    def to_dict(self) -> dict:
        return {
            "affected_series": [int(s) for s in self.affected_series],
            "onset_day": self.onset_day,
            "kind": self.kind,
            "params": dict(self.params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionRecord":
        return cls(tuple(d["affected_series"]), d["onset_day"], d["kind"], d["params"])


def sample_affected(panel: Panel, fraction: float, seed: int, region: Optional[str] = None) -> tuple:
    """Sorted series indices drawn uniformly without replacement."""
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must lie in (0, 1]")
    if region is None:
        pool = np.arange(panel.n_series)
    else:
        pool = np.array([i for i, k in enumerate(panel.keys) if k.state_id == region], dtype=int)
        if pool.size == 0:
            raise ValidationError(f"region {region!r} has no stores")
    size = max(1, int(round(fraction * len(pool))))
    rng = np.random.default_rng(seed)
    picked = rng.choice(pool, size=size, replace=False)
    return tuple(int(i) for i in np.sort(picked))


def inject(panel: Panel, scenario: DriftScenario):
    """Return ``(drifted_panel, record)``; the input panel is left untouched."""
    scenario.validate(panel)
    if panel.last_day <= scenario.onset_day:
        raise ValidationError("panel must extend past the onset day")
    region = scenario.affected_region if scenario.kind == "hierarchical" else None
    if scenario.kind == "hierarchical" and region is None:
        raise ValidationError("hierarchical drift needs affected_region")
    affected = sample_affected(panel, scenario.affected_fraction, scenario.seed, region)

    c0 = panel.col(scenario.onset_day)
    rows = np.array(affected, dtype=int)
    sales = np.array(panel.sales, dtype=float)
    y = sales[rows, c0:]
    t = np.arange(y.shape[1], dtype=float)  # t - t0
    kind = scenario.kind
    params = scenario.to_dict()

    if kind == "seasonality_shift":
        s = np.array([d.is_holiday for d in panel.calendar[c0:]], dtype=float)
        new = y * (1.0 - scenario.seasonal_factor * s)
    elif kind == "trend_change":
        if scenario.beta is None:
            remaining = max(panel.last_day - scenario.onset_day, 1)
            beta = 0.25 * y.mean(axis=1) / remaining
        else:
            beta = np.full(len(rows), float(scenario.beta))
        params["beta_per_series"] = [float(b) for b in beta]
        new = y - beta[:, None] * t[None, :]
    elif kind in ("level_shock", "hierarchical"):
        new = scenario.alpha * y
    else:  # volatility_spike
        ybar = y.mean(axis=1, keepdims=True)
        new = ybar + scenario.gamma * (y - ybar)

    sales[rows, c0:] = np.maximum(new, 0.0)
    record = InjectionRecord(affected, scenario.onset_day, kind, params)
    return panel.with_sales(sales), record
