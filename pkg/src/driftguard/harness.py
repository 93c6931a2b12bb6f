"""Configuration-driven lifecycle: data, baseline models, drift injection,
detection, diagnosis, retraining plan, retraining and evaluation.

Every stage reads and writes a shared output directory so stages can be run
one at a time from the CLI or all at once through :func:`run_lifecycle`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import scipy
import yaml

from . import __version__
from .core import Panel, build_hierarchy
from .detect import DetectorConfig, PanelEvent, detect_panel, detection_layout, read_event_log, write_event_log
from .errors import DriftGuardError, StageError, UndefinedMetricError, ValidationError
from .features import FeatureSpec, feature_tensor
from .forecast import load_models, one_step_forecasts, save_models, train_store_models, wmape
from .gbt import GbtHyper
from .ingest import SynthConfig, generate_synthetic, load_m5, load_panel, save_panel
from .inject import DriftScenario, InjectionRecord, inject
from .retrain import CANDIDATE_WINDOWS, CostModel, RetrainPlan, build_plan, execute_retraining, inventory_cost, order_quantity
from .shap import DiagnosticMap, deltas_from_means, hierarchical_impact, shapley_exact, shapley_sampled

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ configuration

@dataclass(frozen=True)
class SplitConfig:
    train_start: int = 29
    train_end: int = 532
    detect_start: int = 652
    validation_days: int = 14
    eval_days: int = 28


@dataclass(frozen=True)
class RetrainConfig:
    candidates: tuple = CANDIDATE_WINDOWS
    max_probe_series: int = 20
    hyper: GbtHyper = field(default_factory=lambda: GbtHyper(n_trees=60, max_depth=4, min_leaf=50))


@dataclass(frozen=True)
class DiagnosisConfig:
    background_rows: int = 20
    max_instances: int = 50
    top_features: int = 12
    importance_instances: int = 5
    importance_permutations: int = 50
    report_features: int = 5


@dataclass(frozen=True)
class BatchConfig:
    n_seeds: int = 20
    severities: tuple = (0.9, 0.85, 0.8)
    controls: bool = True  # also run each seed with the scenario disabled
    bootstrap_samples: int = 1000
    confidence: float = 0.95


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    source: str = "synthetic"
    synthetic: SynthConfig = field(default_factory=lambda: SynthConfig(annual_amplitude=0.0))
    m5: dict = field(default_factory=dict)
    split: SplitConfig = field(default_factory=SplitConfig)
    scenario_enabled: bool = True
    scenario: DriftScenario = field(default_factory=DriftScenario)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    cost: CostModel = field(default_factory=CostModel)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    gbt: GbtHyper = field(default_factory=GbtHyper)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    diagnosis: DiagnosisConfig = field(default_factory=DiagnosisConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    output: str = "runs/default"

    # -- derived timeline
    def n_days(self, panel: Optional[Panel] = None) -> int:
        return panel.last_day if panel is not None else self.synthetic.n_days

    def plan_day(self, panel: Optional[Panel] = None) -> int:
        return self.n_days(panel) - self.split.eval_days

    def eval_window(self, panel: Optional[Panel] = None) -> tuple:
        return self.plan_day(panel) + 1, self.n_days(panel)

    def validate(self, panel: Optional[Panel] = None):
        s = self.split
        need, b_start, _ = detection_layout(self.detector, s.detect_start)
        last = self.n_days(panel)
        if not 1 <= s.train_start < s.train_end < b_start:
            raise ValidationError("training must end before the detector baseline window starts")
        if need < 1:
            raise ValidationError("detector baseline window starts before day 1")
        if s.eval_days < 1 or s.validation_days < 1:
            raise ValidationError("eval_days and validation_days must be >= 1")
        if not s.detect_start < self.plan_day(panel) <= last:
            raise ValidationError("detection must start before the plan day")
        if self.scenario_enabled and not s.detect_start <= self.scenario.onset_day <= self.plan_day(panel):
            raise ValidationError("onset day must lie inside the monitored range")
        self.detector.validate()
        self.cost.validate()
        self.gbt.validate()
        self.retrain.hyper.validate()
        if self.source not in ("synthetic", "m5"):
            raise ValidationError(f"unknown data source {self.source!r}")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            seed=seed,
            synthetic=replace(self.synthetic, seed=seed),
            scenario=replace(self.scenario, seed=seed),
        )

    def with_alpha(self, alpha: float) -> "RunConfig":
        return replace(self, scenario=replace(self.scenario, alpha=alpha))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        nested = {
            "synthetic": SynthConfig, "split": SplitConfig, "scenario": DriftScenario,
            "detector": DetectorConfig, "features": FeatureSpec, "gbt": GbtHyper,
            "diagnosis": DiagnosisConfig, "batch": BatchConfig,
        }
        for k, v in d.items():
            if k in nested:
                kw[k] = _build(nested[k], v)
            elif k == "cost":
                kw[k] = CostModel.from_dict(v or {})
            elif k == "retrain":
                v = dict(v or {})
                if "hyper" in v:
                    v["hyper"] = _build(GbtHyper, v["hyper"])
                if "candidates" in v:
                    v["candidates"] = tuple(v["candidates"])
                kw[k] = _build(RetrainConfig, v)
            else:
                kw[k] = v
        if "batch" in kw:
            kw["batch"] = replace(kw["batch"], severities=tuple(kw["batch"].severities))
        return cls(**kw)

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    @classmethod
    def default(cls) -> "RunConfig":
        text = resources.files("driftguard").joinpath("default.yaml").read_text(encoding="utf-8")
        return cls.from_dict(yaml.safe_load(text))


def _build(cls, values):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**values)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _dump(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _load(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


# ------------------------------------------------------------------ detection metrics

def compute_detection_metrics(events, ground_truth: Optional[InjectionRecord], control_events=None) -> dict:
    """Recall, precision and latency against the injected event, plus the
    false-positive rate over matched drift-free runs (``control_events`` is a
    list with one event list per control run)."""
    if ground_truth is None:
        raise ValidationError("ground truth is required")
    affected = set(int(s) for s in ground_truth.affected_series)
    evs = [e if isinstance(e, PanelEvent) else PanelEvent.from_records(e) for e in events]
    matched = [e for e in evs if e.day >= ground_truth.onset_day and affected & set(e.series_scope)]
    latency = matched[0].day - ground_truth.onset_day if matched else None
    out = {
        "recall": 1.0 if matched else 0.0,
        "precision": len(matched) / len(evs) if evs else None,
        "mean_latency_days": None if latency is None else float(latency),
        "n_events": len(evs),
        "event_days": [e.day for e in evs],
        "fpr": None,
    }
    if control_events is not None:
        out["fpr"] = sum(1 for c in control_events if len(c) > 0) / len(control_events) if control_events else None
    return out


# ------------------------------------------------------------------ lifecycle

class Lifecycle:
    """Stage runner over one output directory.

    Artifacts produced earlier in the same process are kept in memory; a
    stage run on its own reloads what it needs from disk.
    """

    def __init__(self, config: RunConfig, out, cache: Optional[dict] = None):
        self.config = config
        self.out = Path(out)
        self.cache = cache if cache is not None else {}
        self._mem = {}

    # -- helpers
    def _stage(self, name, fn):
        try:
            return fn()
        except StageError:
            raise
        except (DriftGuardError, OSError, ValueError, KeyError) as exc:
            raise StageError(name, exc) from exc

    def _need(self, key, path: Path, loader, stage: str):
        if key not in self._mem:
            if not path.exists():
                raise StageError(stage, FileNotFoundError(f"missing {path}; run the earlier stages first"))
            self._mem[key] = loader(path)
        return self._mem[key]

    @property
    def spec(self) -> FeatureSpec:
        return self.config.features

    @property
    def panel(self) -> Panel:
        return self._need("panel", self.out / "panel" / "panel.csv", load_panel, "ingest")

    @property
    def drifted(self) -> Panel:
        return self._need("drifted", self.out / "panel" / "drifted.csv", load_panel, "inject")

    @property
    def models(self) -> dict:
        return self._need("models", self.out / "models" / "baseline", load_models, "train")

    @property
    def record(self) -> Optional[InjectionRecord]:
        def load(p):
            d = _load(p)
            return None if d is None else InjectionRecord.from_dict(d)
        return self._need("record", self.out / "injection.json", load, "inject")

    @property
    def events(self) -> list:
        return self._need("events", self.out / "events.log", read_event_log, "detect")

    @property
    def control_events(self) -> list:
        return self._need("control_events", self.out / "control_events.log", read_event_log, "detect")

    def layout(self):
        need, b_start, b_end = detection_layout(self.config.detector, self.config.split.detect_start)
        return need, b_start, b_end

    def forecasts(self, which: str) -> np.ndarray:
        """One-step baseline-model forecasts from the detector's first needed day
        to the panel end, on the clean or drifted panel."""
        key = f"fc_{which}"
        if key not in self._mem:
            path = self.out / "forecasts" / f"{which}.npy"
            if path.exists():
                self._mem[key] = np.load(path)
            else:
                panel = self.panel if which == "clean" else self.drifted
                need = self.layout()[0]
                ck = ("fc", self._panel_key(panel), self._models_key(), need)
                if ck not in self.cache:
                    self.cache[ck] = one_step_forecasts(self.models, panel, self.spec, need, panel.last_day)
                self._mem[key] = self.cache[ck]
                path.parent.mkdir(parents=True, exist_ok=True)
                np.save(path, self._mem[key])
        return self._mem[key]

    def _panel_key(self, panel: Panel) -> str:
        h = hashlib.sha1(np.ascontiguousarray(panel.sales).tobytes())
        h.update(np.ascontiguousarray(panel.prices).tobytes())
        return h.hexdigest()

    def _models_key(self) -> str:
        h = hashlib.sha1()
        for store, m in sorted(self.models.items()):
            h.update(store.encode())
            h.update(m.to_json().encode())
        return h.hexdigest()

    # -- stages
    def ingest(self, force_synthetic: bool = False) -> Panel:
        def go():
            c = self.config
            if c.source == "synthetic" or force_synthetic:
                key = ("panel", json.dumps(asdict(c.synthetic), sort_keys=True))
                if key not in self.cache:
                    self.cache[key] = generate_synthetic(c.synthetic)
                panel = self.cache[key]
            else:
                m = c.m5
                panel = load_m5(m["sales"], m["calendar"], m["prices"])
            c.validate(panel)
            save_panel(panel, self.out / "panel" / "panel.csv")
            self._mem["panel"] = panel
            return panel
        return self._stage("ingest", go)

    def train(self) -> dict:
        def go():
            c = self.config
            key = ("models", self._panel_key(self.panel), json.dumps(_plain(asdict(c.gbt))), json.dumps(c.features.to_dict()),
                   c.split.train_start, c.split.train_end)
            if key not in self.cache:
                self.cache[key] = train_store_models(self.panel, self.spec, c.gbt, c.split.train_start, c.split.train_end)
            models = self.cache[key]
            save_models(models, self.out / "models" / "baseline")
            self._mem["models"] = models
            return models
        return self._stage("train", go)

    def inject(self):
        def go():
            c = self.config
            if c.scenario_enabled:
                drifted, record = inject(self.panel, c.scenario)
            else:
                drifted, record = self.panel, None
            save_panel(drifted, self.out / "panel" / "drifted.csv")
            _dump(None if record is None else record.to_dict(), self.out / "injection.json")
            self._mem["drifted"] = drifted
            self._mem["record"] = record
            return drifted, record
        return self._stage("inject", go)

    def detect(self):
        def go():
            c = self.config
            need = self.layout()[0]
            plan_day = c.plan_day(self.drifted)
            ae_cache = self.cache.setdefault("autoencoders", {})

            def sweep(panel, which):
                key = ("detect", self._panel_key(panel), self._models_key(), json.dumps(c.detector.to_dict()),
                       json.dumps(self.spec.to_dict()), c.split.detect_start, plan_day, c.seed)
                if key not in self.cache:
                    self.cache[key] = detect_panel(
                        panel, self.forecasts(which), None, c.detector, c.split.detect_start, self.spec,
                        need, plan_day, c.seed, ae_cache,
                    )
                return self.cache[key]

            events, trace = sweep(self.drifted, "drifted")
            write_event_log(events, self.out / "events.log")
            # the matched control is the same sweep over the clean panel
            control = events if self.record is None else sweep(self.panel, "clean")[0]
            write_event_log(control, self.out / "control_events.log")
            summary = {
                "monitored_days": [c.split.detect_start, plan_day],
                "max_flagged_fraction": float(trace.flagged_fraction.max()),
                "daily_vote_rate": [float(v) for v in trace.daily_vote_rate()],
                "disabled": list(trace.disabled),
                "theta_a": None if trace.autoencoder is None else trace.autoencoder.theta_a,
                "n_events": len(events),
                "n_control_events": len(control),
            }
            _dump(summary, self.out / "detection.json")
            self._mem["events"] = events
            self._mem["control_events"] = control
            return events
        return self._stage("detect", go)

    def _series_wmape(self, forecasts, panel, start, end):
        need = self.layout()[0]
        y = panel.sales[:, panel.col(start) : panel.col(end) + 1]
        f = forecasts[:, start - need : end - need + 1]
        out = np.zeros(panel.n_series)
        for s in range(panel.n_series):
            try:
                out[s] = wmape(y[s], f[s])
            except UndefinedMetricError:
                out[s] = 0.0
        return out

    def sigma(self) -> np.ndarray:
        """Per-series std of the baseline model's one-step errors over the
        detector baseline window; sizes newsvendor orders."""
        need, b_start, b_end = self.layout()
        panel = self.drifted
        y = panel.sales[:, panel.col(b_start) : panel.col(b_end) + 1]
        f = self.forecasts("drifted")[:, b_start - need : b_end - need + 1]
        return np.std(y - f, axis=1, ddof=1)

    def diagnose(self) -> Optional[DiagnosticMap]:
        def go():
            events = self.events
            if not events:
                _dump({"diagnosed": False}, self.out / "diagnosis" / "status.json")
                return None
            c = self.config
            ev = events[0]
            panel = self.drifted
            _, b_start, b_end = self.layout()
            plan_day = c.plan_day(panel)
            fc = self.forecasts("drifted")
            base_w = self._series_wmape(fc, panel, b_start, b_end)
            drift_w = self._series_wmape(fc, panel, ev.day, plan_day)
            scope = sorted(ev.first_flag_day) or list(ev.series_scope)
            inst = _attribution(panel, self.models, self.spec, scope, (b_start, b_end), (ev.day, plan_day), c.diagnosis, c.seed)
            names = inst["names"]
            k = c.diagnosis.report_features

            def top(leaves):
                leaves = set(leaves)
                b = [r for s, r in zip(inst["base_series"], inst["base_phi"]) if s in leaves]
                d = [r for s, r in zip(inst["drift_series"], inst["drift_phi"]) if s in leaves]
                if not b or not d:
                    return []
                return deltas_from_means(names, np.mean(b, axis=0), np.mean(d, axis=0))[:k]

            hierarchy = build_hierarchy(panel.keys)
            dmap = hierarchical_impact(base_w, drift_w, hierarchy, panel, (ev.day, plan_day), top)
            overall = deltas_from_means(names, np.mean(inst["base_phi"], axis=0), np.mean(inst["drift_phi"], axis=0))
            d = self.out / "diagnosis"
            _dump(dmap.to_dict(), d / "map.json")
            (d / "map.txt").write_text(dmap.render(), encoding="utf-8")
            _dump({
                "event_day": ev.day,
                "scope": scope,
                "features": names,
                "selected_features": inst["selected"],
                "delta_phi": [vars(r) for r in overall],
                "baseline_wmape": base_w.tolist(),
                "drift_wmape": drift_w.tolist(),
            }, d / "attribution.json")
            self._mem["diagnosis"] = dmap
            return dmap
        return self._stage("diagnose", go)

    def plan(self) -> Optional[RetrainPlan]:
        def go():
            events = self.events
            path = self.out / "plan" / "plan.json"
            if not events:
                _dump(None, path)
                self._mem["plan"] = None
                return None
            c = self.config
            panel = self.drifted
            ev = events[0]
            _, b_start, b_end = self.layout()
            plan_day = c.plan_day(panel)
            vd = c.split.validation_days
            fc = self.forecasts("drifted")
            base_w = self._series_wmape(fc, panel, b_start, b_end)
            drift_w = self._series_wmape(fc, panel, ev.day, plan_day)
            delta = {s: float(drift_w[s] - base_w[s]) for s in range(panel.n_series)}
            need = self.layout()[0]
            old_val = fc[:, plan_day - vd + 1 - need : plan_day + 1 - need]
            plan = build_plan(
                panel, delta, plan_day, c.cost, c.retrain.candidates, vd, self.spec, c.retrain.hyper,
                old_val, c.retrain.max_probe_series, c.seed, self.sigma(), self._mem.setdefault("candidates", {}),
            )
            _dump(plan.to_dict(), path)
            self._mem["plan"] = plan
            return plan
        return self._stage("plan", go)

    @property
    def current_plan(self) -> Optional[RetrainPlan]:
        def load(p):
            d = _load(p)
            return None if d is None else RetrainPlan.from_dict(d)
        return self._need("plan", self.out / "plan" / "plan.json", load, "plan")

    def retrain(self):
        def go():
            plan = self.current_plan
            path = self.out / "plan" / "retrain.json"
            if plan is None or not plan.approved:
                _dump({"executed": False, "reason": "no event" if plan is None else "plan not approved"}, path)
                self._mem["deployed_models"] = self.models
                save_models(self.models, self.out / "models" / "deployed")
                return None
            c = self.config
            outcome = execute_retraining(self.drifted, plan, self.models, self.spec, c.retrain.hyper, c.eval_window(self.drifted),
                                         self._mem.get("candidates"))
            d = outcome.to_dict()
            d["executed"] = True
            _dump(d, path)
            save_models(outcome.models, self.out / "models" / "deployed")
            self._mem["deployed_models"] = outcome.models
            return outcome
        return self._stage("retrain", go)

    @property
    def deployed_models(self) -> dict:
        return self._need("deployed_models", self.out / "models" / "deployed", load_models, "retrain")

    def evaluate(self) -> dict:
        def go():
            c = self.config
            panel, drifted = self.panel, self.drifted
            e0, e1 = c.eval_window(drifted)
            record = self.record
            events = self.events
            control = self.control_events
            if record is not None:
                detection = compute_detection_metrics(events, record, [control])
            else:
                detection = {"recall": None, "precision": None, "mean_latency_days": None,
                             "n_events": len(events), "event_days": [e.day for e in events],
                             "fpr": 1.0 if events else 0.0}
            sl = slice(panel.col(e0), panel.col(e1) + 1)
            need = self.layout()[0]
            fsl = slice(e0 - need, e1 - need + 1)
            y_clean, y_drift = panel.sales[:, sl], drifted.sales[:, sl]
            price = drifted.prices[:, sl]
            f_clean = self.forecasts("clean")[:, fsl] if record is not None else self.forecasts("drifted")[:, fsl]
            f_drift = self.forecasts("drifted")[:, fsl]
            f_new = one_step_forecasts(self.deployed_models, drifted, self.spec, e0, e1)
            np.save(self.out / "forecasts" / "deployed_eval.npy", f_new)
            affected = list(record.affected_series) if record is not None else []
            sigma = self.sigma()

            def cost(y, f, p):
                return inventory_cost(y, order_quantity(f, sigma, c.cost), p, c.cost)

            def acc(y, f):
                out = {"all": wmape(y, f)}
                if affected:
                    out["affected"] = wmape(y[affected], f[affected])
                    rest = np.setdiff1d(np.arange(y.shape[0]), affected)
                    out["unaffected"] = wmape(y[rest], f[rest])
                return out

            base = acc(y_clean, f_clean)
            accuracy = {"baseline_wmape": base["all"], "post_drift_wmape": None, "post_retrain_wmape": None, "detail": {"baseline": base}}
            business = {
                "baseline_cost": cost(y_clean, f_clean, panel.prices[:, sl]),
                "drift_cost": None, "retrained_cost": None, "compute_cost": None,
                "est_inventory_saving": None, "roi": None,
            }
            if record is not None:
                post, new = acc(y_drift, f_drift), acc(y_drift, f_new)
                accuracy.update(post_drift_wmape=post["all"], post_retrain_wmape=new["all"])
                accuracy["detail"].update(post_drift=post, post_retrain=new)
                business.update(drift_cost=cost(y_drift, f_drift, price), retrained_cost=cost(y_drift, f_new, price))
            plan = self.current_plan
            retraining = {"planned": plan is not None}
            if plan is not None:
                business.update(compute_cost=plan.est_compute_cost, est_inventory_saving=plan.est_inventory_saving, roi=plan.roi)
                ex = _load(self.out / "plan" / "retrain.json")
                retraining.update(
                    approved=plan.approved, window_days=plan.window_days, n_selected=len(plan.selected_series),
                    stores=list(plan.stores), executed=ex.get("executed", False),
                    decisions=ex.get("decisions", {}),
                )
            report = {
                "detection": detection,
                "accuracy": accuracy,
                "business": business,
                "retraining": retraining,
                "provenance": {
                    "config_hash": c.config_hash(),
                    "seed": c.seed,
                    "versions": {
                        "driftguard": __version__,
                        "numpy": np.__version__,
                        "scipy": scipy.__version__,
                        "python": platform.python_version(),
                    },
                },
            }
            _dump(report, self.out / "report.json")
            (self.out / "report.txt").write_text(render_report(report), encoding="utf-8")
            return _plain(report)
        return self._stage("evaluate", go)

    def run(self) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        _dump(self.config.to_dict(), self.out / "config.json")
        self.ingest()
        self.train()
        self.inject()
        self.detect()
        self.diagnose()
        self.plan()
        self.retrain()
        return self.evaluate()


def _attribution(panel, models, spec, scope, base_window, drift_window, dc: DiagnosisConfig, seed: int) -> dict:
    """Exact attributions for sampled baseline and drift instances of the
    flagged series, each scored with its store model against a background
    drawn from the same store's baseline rows."""
    rng = np.random.default_rng(seed)
    names = spec.names()
    scope = np.asarray(scope, dtype=int)
    bdays = np.arange(base_window[0], base_window[1] + 1)
    ddays = np.arange(drift_window[0], drift_window[1] + 1)
    Xb = feature_tensor(panel, spec, bdays, scope)
    Xd = feature_tensor(panel, spec, ddays, scope)

    def pick(X, cap):
        pairs = [(i, j) for i in range(X.shape[0]) for j in range(X.shape[1])]
        take = np.sort(rng.choice(len(pairs), min(cap, len(pairs)), replace=False))
        return [pairs[t] for t in take]

    base_idx = pick(Xb, dc.max_instances)
    drift_idx = pick(Xd, dc.max_instances)
    store_of = {int(s): panel.keys[int(s)].store_id for s in scope}
    backgrounds = {}
    for store in sorted(set(store_of.values())):
        rows = np.flatnonzero([store_of[int(s)] == store for s in scope])
        flat = Xb[rows].reshape(-1, Xb.shape[2])
        backgrounds[store] = flat[np.sort(rng.choice(flat.shape[0], min(dc.background_rows, flat.shape[0]), replace=False))]

    imp = np.zeros(len(names))
    for t, (i, j) in enumerate(base_idx[: dc.importance_instances]):
        st = store_of[int(scope[i])]
        r = shapley_sampled(models[st], Xb[i, j], backgrounds[st], dc.importance_permutations, seed + t, names=names)
        imp += np.abs(r.values(names))
    order = sorted(range(len(names)), key=lambda f: (-imp[f], f))
    subset = sorted(order[: min(dc.top_features, len(names))])

    def attribute(X, idx):
        series, phis = [], []
        for i, j in idx:
            st = store_of[int(scope[i])]
            r = shapley_exact(models[st], X[i, j], backgrounds[st], subset, names)
            series.append(int(scope[i]))
            phis.append(np.abs(r.values(names)))
        return series, phis

    bs, bp = attribute(Xb, base_idx)
    ds, dp = attribute(Xd, drift_idx)
    return {"names": names, "selected": [names[f] for f in subset], "base_series": bs, "base_phi": bp,
            "drift_series": ds, "drift_phi": dp}


def run_lifecycle(config: RunConfig, out=None, cache: Optional[dict] = None) -> dict:
    return Lifecycle(config, out or config.output, cache).run()


# ------------------------------------------------------------------ batch

def bootstrap_ci(values, samples: int = 1000, confidence: float = 0.95, seed: int = 0, stat=np.mean):
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return None
    if v.size == 1:
        return [float(v[0]), float(v[0])]
    rng = np.random.default_rng(seed)
    draws = np.array([stat(v[rng.integers(0, v.size, v.size)]) for _ in range(samples)])
    a = (1 - confidence) / 2
    return [float(np.quantile(draws, a)), float(np.quantile(draws, 1 - a))]


def _summary(values, bc: BatchConfig, stat=np.mean):
    v = [x for x in values if x is not None]
    return {
        "n": len(v),
        "mean": float(np.mean(v)) if v else None,
        "median": float(np.median(v)) if v else None,
        "ci": bootstrap_ci(v, bc.bootstrap_samples, bc.confidence, stat=stat),
    }


SEVERITY_LABELS = {0: "mild", 1: "moderate", 2: "severe"}


def batch_runs(config: RunConfig, n_seeds: Optional[int] = None, out=None, severities=None) -> dict:
    """Run the lifecycle for each seed and severity; seeds are ``seed + i``.

    Baseline panel and models are shared between the severity runs of a seed.
    """
    bc = config.batch
    n = bc.n_seeds if n_seeds is None else n_seeds
    if n < 1:
        raise ValidationError("n_seeds must be >= 1")
    sev = tuple(bc.severities if severities is None else severities)
    if not config.scenario_enabled:
        sev = (None,)
    elif bc.controls:
        sev = sev + (None,)
    root = Path(out or config.output)
    runs, failures = {}, []
    for i in range(n):
        seed = config.seed + i
        cache = {}
        for alpha in sev:
            if alpha is None:
                cfg = replace(config.with_seed(seed), scenario_enabled=False)
            else:
                cfg = config.with_seed(seed).with_alpha(alpha)
            tag = "control" if alpha is None else f"alpha_{alpha:.2f}"
            try:
                rep = run_lifecycle(cfg, root / f"seed_{seed:03d}" / tag, cache)
                runs.setdefault(tag, []).append(rep)
            except StageError as exc:
                failures.append({"seed": seed, "run": tag, "stage": exc.stage, "error": str(exc)})
                log.error("seed %d %s failed: %s", seed, tag, exc)
    agg = {"n_seeds": n, "completed": {k: len(v) for k, v in runs.items()}, "failures": failures,
           "complete": not failures, "severity_table": []}
    order = sorted((a for a in sev if a is not None), reverse=True)
    for rank, alpha in enumerate(order):
        tag = f"alpha_{alpha:.2f}"
        reps = runs.get(tag, [])
        agg["severity_table"].append(_aggregate(reps, bc, alpha, SEVERITY_LABELS.get(rank, f"level_{rank}")))
    if None in sev:
        agg["severity_table"].append(_aggregate(runs.get("control", []), bc, None, "control"))
    _dump(agg, root / "aggregate.json")
    (root / "aggregate.txt").write_text(render_aggregate(agg), encoding="utf-8")
    return _plain(agg)


def _aggregate(reps, bc: BatchConfig, alpha, label) -> dict:
    det = [r["detection"] for r in reps]
    acc = [r["accuracy"] for r in reps]
    bus = [r["business"] for r in reps]
    lat = [d["mean_latency_days"] for d in det]
    rois = [b["roi"] for b in bus]
    return {
        "alpha": alpha,
        "label": label,
        "runs": len(reps),
        "recall": _summary([d["recall"] for d in det], bc),
        "precision": _summary([d["precision"] for d in det], bc),
        "fpr": _summary([d["fpr"] for d in det], bc),
        "latency_days": _summary(lat, bc),
        "baseline_wmape": _summary([a["baseline_wmape"] for a in acc], bc),
        "post_drift_wmape": _summary([a["post_drift_wmape"] for a in acc], bc),
        "post_retrain_wmape": _summary([a["post_retrain_wmape"] for a in acc], bc),
        "roi": _summary(rois, bc, stat=np.median),
        "roi_positive": sum(1 for r in rois if r is not None and r > 0),
    }


# ------------------------------------------------------------------ text rendering

def _fmt(v, spec="{:.4f}"):
    return "-" if v is None else spec.format(v)


def render_report(r: dict) -> str:
    d, a, b = r["detection"], r["accuracy"], r["business"]
    lines = [
        "detection",
        f"  recall      {_fmt(d['recall'], '{:.2f}')}",
        f"  precision   {_fmt(d['precision'], '{:.2f}')}",
        f"  fpr         {_fmt(d['fpr'], '{:.2f}')}",
        f"  latency     {_fmt(d['mean_latency_days'], '{:.1f}')} days",
        f"  events      {d['n_events']} {d['event_days']}",
        "accuracy (WMAPE, evaluation window)",
        f"  {'baseline':<12} {'post-drift':<12} {'retrained':<12}",
        f"  {_fmt(a['baseline_wmape']):<12} {_fmt(a['post_drift_wmape']):<12} {_fmt(a['post_retrain_wmape']):<12}",
        "business",
        f"  baseline cost   {_fmt(b['baseline_cost'], '{:,.2f}')}",
        f"  drift cost      {_fmt(b['drift_cost'], '{:,.2f}')}",
        f"  retrained cost  {_fmt(b['retrained_cost'], '{:,.2f}')}",
        f"  compute cost    {_fmt(b['compute_cost'], '{:,.4f}')}",
        f"  est. saving     {_fmt(b['est_inventory_saving'], '{:,.2f}')}",
        f"  roi             {_fmt(b['roi'], '{:,.1f}')}",
        f"config {r['provenance']['config_hash'][:12]} seed {r['provenance']['seed']}",
    ]
    return "\n".join(lines) + "\n"


def render_aggregate(agg: dict) -> str:
    head = f"{'severity':<10} {'alpha':>6} {'runs':>5} {'recall':>7} {'latency':>8} {'fpr':>6} {'baseline':>9} {'drift':>9} {'retrain':>9} {'roi>0':>6}"
    lines = [head]
    for row in agg["severity_table"]:
        lines.append(
            f"{row['label']:<10} {_fmt(row['alpha'], '{:.2f}'):>6} {row['runs']:>5} "
            f"{_fmt(row['recall']['mean'], '{:.2f}'):>7} {_fmt(row['latency_days']['median'], '{:.1f}'):>8} "
            f"{_fmt(row['fpr']['mean'], '{:.2f}'):>6} {_fmt(row['baseline_wmape']['mean']):>9} "
            f"{_fmt(row['post_drift_wmape']['mean']):>9} {_fmt(row['post_retrain_wmape']['mean']):>9} {row['roi_positive']:>6}"
        )
    if not agg["complete"]:
        lines.append(f"incomplete: {len(agg['failures'])} failed runs")
    return "\n".join(lines) + "\n"
