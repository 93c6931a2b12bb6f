import datetime as dt

import numpy as np
import pytest

from driftguard.core import CalendarDay, Panel, SeriesKey
from driftguard.ingest import SynthConfig, generate_synthetic


def make_keys(n_series, n_stores=1, states=("CA",)):
    keys = []
    for i in range(n_series):
        store = i % n_stores
        state = states[store % len(states)]
        cat = ("FOODS", "HOBBIES")[i % 2]
        dept = f"{cat}_{(i // 2) % 2 + 1}"
        keys.append(SeriesKey(f"SKU_{i:03d}", f"{state}_{store + 1}", state, cat, dept))
    return keys


def make_calendar(n_days, first=1, holidays=()):
    start = dt.date(2011, 1, 29)
    out = []
    for t in range(first, first + n_days):
        d = start + dt.timedelta(days=t - 1)
        out.append(CalendarDay(t, d.isoformat(), d.weekday(), d.month, t in holidays, "Holiday" if t in holidays else None))
    return out


def make_panel(sales, prices=None, n_stores=1, states=("CA",), holidays=(), first=1):
    sales = np.atleast_2d(np.asarray(sales, dtype=float))
    n, T = sales.shape
    if prices is None:
        prices = np.full((n, T), 2.0)
    return Panel(make_keys(n, n_stores, states), make_calendar(T, first, holidays), sales, prices)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(n_stores=2, n_states=1, n_skus_per_store=6, n_days=120, annual_amplitude=0.0, seed=3)
    return generate_synthetic(cfg)


TINY = {
    "seed": 1,
    "synthetic": {"n_stores": 2, "n_states": 1, "n_skus_per_store": 5, "n_days": 260, "annual_amplitude": 0.0},
    "split": {"train_start": 29, "train_end": 150, "detect_start": 200, "validation_days": 7, "eval_days": 14},
    "scenario": {"onset_day": 215, "alpha": 0.5, "affected_fraction": 0.4},
    "detector": {"recent_window": 14, "baseline_window": 42, "baseline_gap": 0, "ae_window": 14, "ae_bottleneck": 2,
                 "ae_epochs": 50, "panel_flag_fraction": 0.15},
    "features": {"lag_days": [1, 7, 28], "rolling_windows": [7]},
    "gbt": {"n_trees": 20, "max_depth": 3, "min_leaf": 10},
    "retrain": {"candidates": [14, 28], "max_probe_series": 10,
                "hyper": {"n_trees": 20, "max_depth": 3, "min_leaf": 10}},
    "diagnosis": {"background_rows": 5, "max_instances": 6, "top_features": 6, "importance_instances": 2,
                  "importance_permutations": 50, "report_features": 3},
    "batch": {"n_seeds": 2, "severities": [0.7, 0.5], "bootstrap_samples": 100},
}


def tiny_config(**overrides):
    from driftguard.harness import RunConfig

    d = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY.items()}
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k].update(v)
        else:
            d[k] = v
    return RunConfig.from_dict(d)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
