"""Four residual/feature drift detectors, their majority vote, and the daily
panel sweep that turns per-series decisions into panel-level events.

Detector order everywhere is (error ratio, statistical, autoencoder, CUSUM).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import kolmogorov

from .autoencoder import AutoencoderArch, AutoencoderModel, train_autoencoder
from .core import Panel
from .errors import DegenerateBaselineError, InsufficientDataError, ValidationError
from .features import FeatureSpec, feature_tensor

DETECTORS = ("error", "statistical", "autoencoder", "cusum")
PSI_EPS = 1e-4
PSI_SCALE = 0.2
MIN_KS_SAMPLE = 8


@dataclass(frozen=True)
class DetectorConfig:
    theta_e: float = 0.25
    theta_s: float = 0.9
    theta_a: Optional[float] = None  # None: calibrated from stable windows
    theta_c: float = 5.0             # multiples of the baseline residual std
    recent_window: int = 21
    baseline_window: int = 112
    baseline_gap: int = 7
    cusum_k: float = 0.5             # multiples of the baseline residual std
    psi_bins: int = 10
    ks_alpha: float = 0.1
    vote_quorum: int = 3
    panel_flag_fraction: float = 0.05
    ae_window: int = 28
    ae_bottleneck: int = 4
    ae_epochs: int = 500
    ae_step_size: float = 0.5
    ae_quantile: float = 0.99
    monitored_continuous: tuple = ("lag_1", "lag_7")
    monitored_categorical: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "monitored_continuous", tuple(self.monitored_continuous))
        object.__setattr__(self, "monitored_categorical", tuple(self.monitored_categorical))

    def validate(self):
        if min(self.recent_window, self.baseline_window, self.ae_window) < 7:
            raise ValidationError("detector windows must be >= 7 days")
        if self.baseline_gap < 0:
            raise ValidationError("baseline_gap must be >= 0")
        if not 1 <= self.vote_quorum <= 4:
            raise ValidationError("vote_quorum must lie in 1..4")
        for name in ("theta_e", "theta_s", "theta_c", "psi_bins", "ks_alpha"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.theta_a is not None and not self.theta_a > 0:
            raise ValidationError("theta_a must be positive")
        if self.cusum_k < 0:
            raise ValidationError("cusum_k must be >= 0")
        if not 0 <= self.panel_flag_fraction < 1:
            raise ValidationError("panel_flag_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["monitored_continuous"] = list(self.monitored_continuous)
        d["monitored_categorical"] = list(self.monitored_categorical)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)

    def arch(self, seed: int = 0) -> AutoencoderArch:
        return AutoencoderArch(self.ae_window, self.ae_bottleneck, self.ae_epochs, self.ae_step_size, seed, self.ae_quantile)


# ------------------------------------------------------------------ detectors

def error_score(residuals, baseline_rmse: float, recent_window: int) -> float:
    r = np.asarray(residuals, dtype=float)
    if not baseline_rmse > 0:
        raise DegenerateBaselineError("baseline RMSE is zero")
    if r.size < recent_window:
        raise InsufficientDataError(f"need {recent_window} residuals, got {r.size}")
    recent = r[-recent_window:]
    return float(np.sqrt(np.mean(recent * recent)) / baseline_rmse - 1.0)


def _ks_d(a_sorted: np.ndarray, windows: np.ndarray) -> np.ndarray:
    """KS distance between one sorted sample and each row of ``windows``."""
    n = a_sorted.size
    m = windows.shape[1]
    pts = np.concatenate([np.broadcast_to(a_sorted, (windows.shape[0], n)), windows], axis=1)
    fa = np.searchsorted(a_sorted, pts, side="right") / n
    fb = np.sum(windows[:, :, None] <= pts[:, None, :], axis=1) / m
    return np.max(np.abs(fa - fb), axis=1)


def ks_pvalue(d, n: int, m: int):
    return kolmogorov(np.sqrt(n * m / (n + m)) * np.asarray(d, dtype=float))


def ks_statistic(sample_a, sample_b, min_size: int = 1):
    """Two-sample KS distance and asymptotic p-value.

    Samples shorter than ``min_size`` raise; the detector passes
    ``MIN_KS_SAMPLE`` so that tiny windows abstain.
    """
    a = np.sort(np.asarray(sample_a, dtype=float).ravel())
    b = np.asarray(sample_b, dtype=float).ravel()
    if a.size < max(min_size, 1) or b.size < max(min_size, 1):
        raise InsufficientDataError(f"KS needs >= {max(min_size, 1)} values per sample")
    d = float(_ks_d(a, b[None, :])[0])
    return d, float(ks_pvalue(d, a.size, b.size))


def psi_from_proportions(p, q) -> float:
    """Symmetric PSI; empty bins are floored at ``PSI_EPS`` before renormalizing."""
    p = np.maximum(np.asarray(p, dtype=float), PSI_EPS)
    q = np.maximum(np.asarray(q, dtype=float), PSI_EPS)
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum((p - q) * (np.log(p) - np.log(q))))


def psi(baseline_sample, current_sample, bins: int = 10, categorical: bool = False, edges=None) -> float:
    """Population stability index.

    Continuous samples are binned at baseline quantiles unless ``edges`` is
    given; categorical samples use the union of observed levels.
    """
    a = np.asarray(baseline_sample).ravel()
    b = np.asarray(current_sample).ravel()
    if a.size == 0 or b.size == 0:
        raise ValidationError("PSI needs non-empty samples")
    if categorical:
        levels = np.unique(np.concatenate([a, b]))
        p = np.array([np.mean(a == v) for v in levels])
        q = np.array([np.mean(b == v) for v in levels])
        return psi_from_proportions(p, q)
    a = a.astype(float)
    b = b.astype(float)
    if edges is None:
        edges = np.unique(np.quantile(a, np.linspace(0, 1, bins + 1)[1:-1]))
    edges = np.asarray(edges, dtype=float)
    k = len(edges) + 1
    p = np.bincount(np.searchsorted(edges, a, side="right"), minlength=k) / a.size
    q = np.bincount(np.searchsorted(edges, b, side="right"), minlength=k) / b.size
    return psi_from_proportions(p, q)


def statistical_score(baseline_features, current_features, kinds: Optional[Sequence[str]] = None, bins: int = 10) -> float:
    """Max evidence over feature columns: ``1 - p`` (KS) or ``PSI / 0.2`` capped at 1."""
    A = np.asarray(baseline_features, dtype=float)
    B = np.asarray(current_features, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if B.ndim == 1:
        B = B[:, None]
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValidationError("feature matrices must have matching columns")
    kinds = ["continuous"] * A.shape[1] if kinds is None else list(kinds)
    evidence = []
    for j, kind in enumerate(kinds):
        if kind == "categorical":
            evidence.append(min(psi(A[:, j], B[:, j], categorical=True) / PSI_SCALE, 1.0))
        else:
            try:
                _, p = ks_statistic(A[:, j], B[:, j], MIN_KS_SAMPLE)
            except InsufficientDataError:
                continue
            evidence.append(1.0 - p)
    if not evidence:
        raise InsufficientDataError("no feature had enough data")
    return float(max(evidence))


def reconstruction_error(model: AutoencoderModel, window) -> float:
    w = np.asarray(window, dtype=float)
    if w.ndim != 1 or w.shape[0] != model.width:
        raise ValidationError(f"window must have length {model.width}")
    return float(model.errors(w[None, :])[0])


@dataclass(frozen=True)
class CusumState:
    c: float = 0.0       # upward side
    mu0: float = 0.0
    c_neg: float = 0.0   # downward side

    @property
    def score(self) -> float:
        return max(self.c, self.c_neg)


def cusum_update(state: CusumState, r_t: float, k: float) -> CusumState:
    if not (np.isfinite(r_t) and np.isfinite(k)):
        raise ValidationError("CUSUM inputs must be finite")
    dev = r_t - state.mu0
    return CusumState(max(0.0, state.c + dev - k), state.mu0, max(0.0, state.c_neg - dev - k))


def effective_quorum(quorum: int, n_abstain: int) -> int:
    """Quorum lowered by one per abstaining detector, never below 2."""
    return max(quorum - n_abstain, min(quorum, 2))


@dataclass(frozen=True)
class DriftEvent:
    day: int
    series_scope: tuple
    per_detector_scores: tuple
    votes: tuple
    decision: bool
    quorum: int = 3

    def __post_init__(self):
        if self.decision != (sum(self.votes) >= self.quorum):
            raise ValidationError("decision does not match the vote count")

    def to_record(self) -> dict:
        return {
            "day": self.day,
            "scope_size": len(self.series_scope),
            "series_scope": [int(s) for s in self.series_scope],
            "scores": [None if s is None else float(s) for s in self.per_detector_scores],
            "votes": [bool(v) for v in self.votes],
            "quorum": self.quorum,
            "decision": bool(self.decision),
        }


def ensemble_vote(scores, thresholds, quorum: int = 3, disabled=(False,) * 4, day: int = 0, series: tuple = ()):
    """Vote each score against its threshold; ``None`` scores abstain.

    Disabled detectors neither vote nor lower the quorum. Returns ``None`` when
    every enabled detector abstains.
    """
    votes, active, abstain = [], 0, 0
    for s, th, off in zip(scores, thresholds, disabled):
        if off:
            votes.append(False)
        elif s is None:
            abstain += 1
            votes.append(False)
        else:
            active += 1
            votes.append(bool(s > th))
    if active == 0:
        return None
    q = effective_quorum(quorum, abstain)
    return DriftEvent(day, tuple(series), tuple(scores), tuple(votes), sum(votes) >= q, q)


# ------------------------------------------------------------------ panel sweep

@dataclass
class PanelEvent:
    day: int
    series_scope: tuple
    flagged_fraction: float
    series_events: list
    first_flag_day: dict = field(default_factory=dict)  # series -> first flagged day, extended after emission

    def overlaps(self, affected) -> bool:
        return bool(set(self.series_scope) & set(int(a) for a in affected))

    def to_record(self) -> dict:
        return {
            "type": "panel",
            "day": self.day,
            "scope_size": len(self.series_scope),
            "series_scope": [int(s) for s in self.series_scope],
            "flagged_fraction": self.flagged_fraction,
            "extended_scope": {str(k): v for k, v in sorted(self.first_flag_day.items())},
        }

    @classmethod
    def from_records(cls, panel_rec: dict, series_recs=()) -> "PanelEvent":
        evs = [
            DriftEvent(r["day"], tuple(r["series_scope"]), tuple(r["scores"]), tuple(r["votes"]), r["decision"], r["quorum"])
            for r in series_recs
        ]
        first = {int(k): v for k, v in panel_rec.get("extended_scope", {}).items()}
        return cls(panel_rec["day"], tuple(panel_rec["series_scope"]), panel_rec["flagged_fraction"], evs, first)


@dataclass
class DetectionTrace:
    days: np.ndarray
    scores: np.ndarray      # [4, series, days], NaN where abstaining
    votes: np.ndarray       # [4, series, days]
    decision: np.ndarray    # [series, days]
    flagged_fraction: np.ndarray
    thresholds: np.ndarray  # [4, series]
    disabled: tuple
    autoencoder: Optional[AutoencoderModel] = None

    def daily_vote_rate(self) -> np.ndarray:
        return self.votes.mean(axis=(1, 2))


def _windows(x: np.ndarray, w: int, first: int, count: int) -> np.ndarray:
    """Trailing windows of length ``w`` ending at columns first .. first+count-1."""
    return sliding_window_view(x, w, axis=1)[:, first - w + 1 : first - w + 1 + count]


def run_detectors(residuals, features, config: DetectorConfig, base_cols, mon_first: int, seed: int = 0, ae_cache=None) -> DetectionTrace:
    """Score every series on every monitored column.

    ``residuals`` is ``[series, T]``; ``features`` maps monitored feature name
    to a ``[series, T]`` matrix on the same columns. Baseline statistics use
    columns ``base_cols`` (a slice); monitoring covers ``mon_first .. T-1``.
    """
    config.validate()
    R = np.asarray(residuals, dtype=float)
    n, T = R.shape
    D = T - mon_first
    if D < 1 or base_cols.stop > mon_first or mon_first - config.ae_window + 1 < 0:
        raise ValidationError("residual history does not cover the baseline and monitoring windows")
    rw = config.recent_window
    base = R[:, base_cols]
    mu0 = base.mean(axis=1)
    sigma = base.std(axis=1, ddof=1)
    brmse = np.sqrt(np.mean(base * base, axis=1))

    scores = np.full((4, n, D), np.nan)
    disabled = [False, False, False, False]

    # error ratio
    ok = brmse > 0
    rec = _windows(R, rw, mon_first, D)
    rmse_recent = np.sqrt(np.mean(rec * rec, axis=2))
    scores[0][ok] = rmse_recent[ok] / brmse[ok, None] - 1.0

    # statistical
    ev = np.full((n, D), -np.inf)
    have = False
    for name in config.monitored_continuous:
        X = features[name]
        cur = _windows(X, rw, mon_first, D)
        nb = X[:, base_cols].shape[1]
        if nb < MIN_KS_SAMPLE or rw < MIN_KS_SAMPLE:
            continue
        have = True
        for s in range(n):
            d = _ks_d(np.sort(X[s, base_cols]), cur[s])
            ev[s] = np.maximum(ev[s], 1.0 - ks_pvalue(d, nb, rw))
    for name in config.monitored_categorical:
        X = features[name]
        cur = _windows(X, rw, mon_first, D)
        have = True
        for s in range(n):
            for j in range(D):
                v = min(psi(X[s, base_cols], cur[s, j], categorical=True) / PSI_SCALE, 1.0)
                ev[s, j] = max(ev[s, j], v)
    if have:
        scores[1] = ev
    else:
        disabled[1] = True

    # autoencoder over residual windows scaled by each series' baseline std
    scale = np.where(sigma > 0, sigma, 1.0)
    Z = (R - mu0[:, None]) / scale[:, None]
    W = config.ae_window
    ae = None
    stable = sliding_window_view(Z[:, base_cols], W, axis=1).reshape(-1, W) if base.shape[1] >= W else np.empty((0, W))
    key = None
    if ae_cache is not None:
        key = hashlib.sha1(np.ascontiguousarray(stable).tobytes() + repr(config.arch(seed)).encode()).hexdigest()
        ae = ae_cache.get(key)
    if ae is None:
        try:
            ae = train_autoencoder(stable, config.arch(seed))
        except InsufficientDataError:
            disabled[2] = True
        if key is not None and ae is not None:
            ae_cache[key] = ae
    theta_a = None
    if ae is not None:
        theta_a = config.theta_a if config.theta_a is not None else ae.theta_a
        scores[2] = ae.errors(_windows(Z, W, mon_first, D))

    # two-sided CUSUM started at the first monitored column
    k = config.cusum_k * sigma
    cp = np.zeros(n)
    cn = np.zeros(n)
    live = sigma > 0
    for j in range(D):
        dev = R[:, mon_first + j] - mu0
        cp = np.maximum(0.0, cp + dev - k)
        cn = np.maximum(0.0, cn - dev - k)
        scores[3][live, j] = np.maximum(cp, cn)[live]

    thresholds = np.stack([
        np.full(n, config.theta_e),
        np.full(n, config.theta_s),
        np.full(n, np.inf if theta_a is None else theta_a),
        config.theta_c * sigma,
    ])
    present = ~np.isnan(scores)
    votes = present & (np.where(present, scores, -np.inf) > thresholds[:, :, None])
    enabled = ~np.array(disabled)[:, None, None]
    n_abstain = np.sum(~present & enabled, axis=0)
    q = np.maximum(config.vote_quorum - n_abstain, min(config.vote_quorum, 2))
    n_active = np.sum(present & enabled, axis=0)
    decision = (votes.sum(axis=0) >= q) & (n_active > 0)
    return DetectionTrace(
        days=np.arange(D), scores=scores, votes=votes, decision=decision,
        flagged_fraction=decision.mean(axis=0), thresholds=thresholds,
        disabled=tuple(disabled), autoencoder=ae,
    )


def panel_events(trace: DetectionTrace, config: DetectorConfig) -> list:
    """At most one panel event, on the first day the flagged fraction exceeds
    the configured level; later flags extend its scope."""
    over = np.flatnonzero(trace.flagged_fraction > config.panel_flag_fraction)
    if over.size == 0:
        return []
    j0 = int(over[0])
    scope = tuple(int(s) for s in np.flatnonzero(trace.decision[:, j0]))
    series_events = []
    for s in scope:
        sc = tuple(None if np.isnan(v) else float(v) for v in trace.scores[:, s, j0])
        n_abs = sum(1 for v, off in zip(sc, trace.disabled) if v is None and not off)
        q = effective_quorum(config.vote_quorum, n_abs)
        series_events.append(
            DriftEvent(int(trace.days[j0]), (s,), sc, tuple(bool(v) for v in trace.votes[:, s, j0]), True, q)
        )
    first = {}
    for s in range(trace.decision.shape[0]):
        hits = np.flatnonzero(trace.decision[s, j0:])
        if hits.size:
            first[s] = int(trace.days[j0 + hits[0]])
    return [PanelEvent(int(trace.days[j0]), scope, float(trace.flagged_fraction[j0]), series_events, first)]


def detection_layout(config: DetectorConfig, start_day: int):
    """(first residual day needed, baseline first day, baseline last day)."""
    b_end = start_day - config.baseline_gap - 1
    b_start = b_end - config.baseline_window + 1
    need = min(b_start, start_day - max(config.recent_window, config.ae_window) + 1)
    return need, b_start, b_end


def detect_panel(
    panel: Panel,
    forecasts,
    models=None,
    config: DetectorConfig = DetectorConfig(),
    start_day: int = 1,
    spec: FeatureSpec = FeatureSpec(),
    forecast_start: Optional[int] = None,
    end_day: Optional[int] = None,
    seed: int = 0,
    ae_cache: Optional[dict] = None,
):
    """Daily sweep from ``start_day`` to ``end_day``; returns ``(events, trace)``.

    ``forecasts`` holds one-step forecasts for days ``forecast_start ..``; when
    it is ``None`` they are produced from ``models``.
    """
    config.validate()
    end = panel.last_day if end_day is None else end_day
    need, b_start, b_end = detection_layout(config, start_day)
    if need < panel.first_day or not start_day <= end <= panel.last_day:
        raise ValidationError("not enough history before start_day for the baseline window")
    if forecasts is None:
        if models is None:
            raise ValidationError("need forecasts or models")
        from .forecast import one_step_forecasts

        forecasts = one_step_forecasts(models, panel, spec, need, end)
        forecast_start = need
    F = np.asarray(forecasts, dtype=float)
    fs = need if forecast_start is None else forecast_start
    if F.ndim != 2 or F.shape[0] != panel.n_series or fs > need or fs + F.shape[1] - 1 < end:
        raise ValidationError("forecasts do not cover the detection range")
    F = F[:, need - fs : end - fs + 1]
    days = np.arange(need, end + 1)
    Y = panel.sales[:, panel.col(need) : panel.col(end) + 1]
    R = Y - F
    names = spec.names()
    monitored = list(config.monitored_continuous) + list(config.monitored_categorical)
    missing = [m for m in monitored if m not in names]
    if missing:
        raise ValidationError(f"monitored features not in the feature spec: {missing}")
    feats = {}
    if monitored:
        ft = feature_tensor(panel, spec, days)
        feats = {m: ft[:, :, names.index(m)] for m in monitored}
    base_cols = slice(b_start - need, b_end - need + 1)
    trace = run_detectors(R, feats, config, base_cols, start_day - need, seed, ae_cache)
    trace.days = np.arange(start_day, end + 1)
    return panel_events(trace, config), trace


def write_event_log(events, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_record(), sort_keys=True) + "\n")
            for se in ev.series_events:
                rec = se.to_record()
                rec["type"] = "series"
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_event_log(path) -> list:
    """Panel events rebuilt from a log written by ``write_event_log``."""
    events = []
    with open(path, encoding="utf-8") as fh:
        recs = [json.loads(line) for line in fh if line.strip()]
    for rec in recs:
        if rec["type"] == "panel":
            events.append((rec, []))
        else:
            events[-1][1].append(rec)
    return [PanelEvent.from_records(p, s) for p, s in events]
