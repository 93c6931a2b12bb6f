"""Panel sources: M5-schema CSV files, a seeded synthetic generator, and the
native single-file panel format."""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .core import CalendarDay, Panel, SeriesKey
from .errors import FormatVersionError, IngestionError, SchemaError, ValidationError

PANEL_FORMAT = "driftguard-panel"
PANEL_VERSION = "1"

STATE_NAMES = ("CA", "TX", "WI")
CATEGORIES = ("FOODS", "HOUSEHOLD", "HOBBIES")
START_DATE = dt.date(2011, 1, 29)


@dataclass(frozen=True)
class SynthConfig:
    n_stores: int = 8
    n_states: int = 2
    n_skus_per_store: int = 25
    n_days: int = 800
    weekly_amplitude: float = 0.2
    annual_period_days: int = 364
    annual_amplitude: float = 0.1
    base_demand_mean: float = 40.0
    noise_dispersion: float = 50.0
    holiday_every_n_days: int = 30
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_stores", "n_states", "n_skus_per_store", "annual_period_days"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.n_states > self.n_stores:
            raise ValidationError("n_states cannot exceed n_stores")
        if self.n_days < 60:
            raise ValidationError("n_days must be >= 60")
        if self.weekly_amplitude < 0 or self.annual_amplitude < 0:
            raise ValidationError("seasonal amplitudes must be >= 0")
        if self.weekly_amplitude + self.annual_amplitude >= 1:
            raise ValidationError("combined seasonal amplitude must stay below 1")
        if self.base_demand_mean <= 0 or self.noise_dispersion <= 0:
            raise ValidationError("base_demand_mean and noise_dispersion must be > 0")
        if self.holiday_every_n_days < 0:
            raise ValidationError("holiday_every_n_days must be >= 0 (0 disables holidays)")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")


def _state_name(i: int) -> str:
    return STATE_NAMES[i] if i < len(STATE_NAMES) else f"S{i + 1}"


def synthetic_keys(cfg: SynthConfig) -> list:
    per_state: dict = {}
    stores = []
    for j in range(cfg.n_stores):
        state = _state_name(j % cfg.n_states)
        per_state[state] = per_state.get(state, 0) + 1
        stores.append((f"{state}_{per_state[state]}", state))
    keys = []
    for store_id, state in stores:
        for k in range(cfg.n_skus_per_store):
            cat = CATEGORIES[k % len(CATEGORIES)]
            dept = f"{cat}_{(k // len(CATEGORIES)) % 2 + 1}"
            keys.append(SeriesKey(f"{dept}_{k + 1:03d}", store_id, state, cat, dept))
    return keys


def synthetic_calendar(n_days: int, holiday_every: int) -> list:
    days = []
    for t in range(1, n_days + 1):
        date = START_DATE + dt.timedelta(days=t - 1)
        hol = holiday_every > 0 and t % holiday_every == 0
        days.append(CalendarDay(t, date.isoformat(), date.weekday(), date.month, hol, "Holiday" if hol else None))
    return days


def generate_synthetic(cfg: SynthConfig) -> Panel:
    """Negative-binomial daily counts around ``base_demand_mean`` with
    multiplicative weekly and annual factors; prices are piecewise-constant
    random walks re-drawn every four weeks."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    keys = synthetic_keys(cfg)
    calendar = synthetic_calendar(cfg.n_days, cfg.holiday_every_n_days)
    n, T = len(keys), cfg.n_days
    t = np.arange(1, T + 1, dtype=float)

    weekly = 1.0 + cfg.weekly_amplitude * np.sin(2 * np.pi * t / 7.0)
    annual = 1.0 + cfg.annual_amplitude * np.sin(2 * np.pi * t / cfg.annual_period_days)
    mean = np.broadcast_to(cfg.base_demand_mean * weekly * annual, (n, T))

    r = cfg.noise_dispersion
    sales = rng.negative_binomial(r, r / (r + mean)).astype(float)

    base_price = np.round(rng.uniform(1.0, 10.0, size=n), 2)
    n_blocks = math.ceil(T / 28)
    steps = rng.normal(0.0, 0.02, size=(n, n_blocks))
    steps[:, 0] = 0.0
    level = base_price[:, None] * np.exp(np.cumsum(steps, axis=1))
    prices = np.repeat(np.round(np.maximum(level, 0.01), 2), 28, axis=1)[:, :T]
    return Panel(keys, calendar, sales, prices)


# ---------------------------------------------------------------- M5 schema

SALES_ID_COLS = ("item_id", "dept_id", "cat_id", "store_id", "state_id")
CALENDAR_COLS = ("date", "wm_yr_wk", "d", "event_name_1")
PRICE_COLS = ("store_id", "item_id", "wm_yr_wk", "sell_price")


def _require(df: pd.DataFrame, cols, path) -> None:
    for c in cols:
        if c not in df.columns:
            raise SchemaError(c, path)


def load_m5(sales_path, calendar_path, prices_path) -> Panel:
    sales_df = pd.read_csv(sales_path)
    cal_df = pd.read_csv(calendar_path)
    price_df = pd.read_csv(prices_path)
    _require(sales_df, SALES_ID_COLS, sales_path)
    _require(cal_df, CALENDAR_COLS, calendar_path)
    _require(price_df, PRICE_COLS, prices_path)

    day_cols = sorted(
        (c for c in sales_df.columns if c.startswith("d_") and c[2:].isdigit()), key=lambda c: int(c[2:])
    )
    if not day_cols:
        raise SchemaError("d_1", sales_path)
    day_nums = [int(c[2:]) for c in day_cols]
    if day_nums != list(range(day_nums[0], day_nums[0] + len(day_nums))):
        raise IngestionError("day columns are not contiguous")

    cal = cal_df.set_index("d")
    missing = [c for c in day_cols if c not in cal.index]
    if missing:
        raise IngestionError(f"calendar lacks days {missing[:5]}")
    cal = cal.loc[day_cols]

    calendar = []
    for num, (_, row) in zip(day_nums, cal.iterrows()):
        date = dt.date.fromisoformat(str(row["date"]))
        ev = row["event_name_1"]
        ev = None if pd.isna(ev) or str(ev) == "" else str(ev)
        calendar.append(CalendarDay(num, date.isoformat(), date.weekday(), date.month, ev is not None, ev))

    keys = [
        SeriesKey(str(r.item_id), str(r.store_id), str(r.state_id), str(r.cat_id), str(r.dept_id))
        for r in sales_df[list(SALES_ID_COLS)].itertuples(index=False)
    ]
    sales = sales_df[day_cols].to_numpy(dtype=float)

    weeks = cal["wm_yr_wk"].to_numpy()
    uniq_weeks, week_pos = np.unique(weeks, return_inverse=True)
    lookup = price_df.pivot_table(index=["store_id", "item_id"], columns="wm_yr_wk", values="sell_price", aggfunc="last")
    lookup = lookup.reindex(columns=uniq_weeks)
    idx = pd.MultiIndex.from_tuples([(k.store_id, k.sku_id) for k in keys])
    weekly_prices = lookup.reindex(idx).to_numpy(dtype=float)
    prices = weekly_prices[:, week_pos]
    # forward-fill, then back-fill the leading gap from the first recorded price
    prices = pd.DataFrame(prices).ffill(axis=1).bfill(axis=1).to_numpy()
    bad = [keys[i].label for i in np.flatnonzero(np.isnan(prices).any(axis=1))]
    if bad:
        raise IngestionError(f"no price recorded for series: {', '.join(bad)}")
    return Panel(keys, calendar, sales, prices)


# ---------------------------------------------------------------- native format

def dumps_panel(panel: Panel) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"#{PANEL_FORMAT}", f"v{PANEL_VERSION}"])
    w.writerow(["#section", "keys", panel.n_series])
    w.writerow(["sku_id", "store_id", "state_id", "category", "department"])
    for k in panel.keys:
        w.writerow([k.sku_id, k.store_id, k.state_id, k.category, k.department])
    w.writerow(["#section", "calendar", panel.n_days])
    w.writerow(["day_index", "date", "day_of_week", "month", "is_holiday", "event_name"])
    for d in panel.calendar:
        w.writerow([d.day_index, d.date, d.day_of_week, d.month, int(d.is_holiday), d.event_name or ""])
    for name, mat in (("sales", panel.sales), ("prices", panel.prices)):
        w.writerow(["#section", name, panel.n_series])
        for row in mat.tolist():
            buf.write(",".join(map(repr, row)) + "\n")
    return buf.getvalue()


def loads_panel(text: str) -> Panel:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != f"#{PANEL_FORMAT}":
        raise FormatVersionError("not a driftguard panel file")
    if rows[0][1] != f"v{PANEL_VERSION}":
        raise FormatVersionError(f"unsupported panel format {rows[0][1]!r}, expected v{PANEL_VERSION}")
    sections: dict = {}
    i = 1
    while i < len(rows):
        head = rows[i]
        if not head or head[0] != "#section":
            raise FormatVersionError(f"malformed section header at line {i + 1}")
        name, count = head[1], int(head[2])
        has_header = name in ("keys", "calendar")
        start = i + 1 + has_header
        sections[name] = rows[start : start + count]
        i = start + count

    keys = [SeriesKey(*r) for r in sections["keys"]]
    calendar = [
        CalendarDay(int(r[0]), r[1], int(r[2]), int(r[3]), r[4] == "1", r[5] or None) for r in sections["calendar"]
    ]
    sales = np.array([[float(v) for v in r] for r in sections["sales"]], dtype=float)
    prices = np.array([[float(v) for v in r] for r in sections["prices"]], dtype=float)
    return Panel(keys, calendar, sales, prices)


def save_panel(panel: Panel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dumps_panel(panel))
    return path


def load_panel(path) -> Panel:
    with open(path, encoding="utf-8", newline="") as fh:
        return loads_panel(fh.read())


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
