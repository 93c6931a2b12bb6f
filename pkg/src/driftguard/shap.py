"""Interventional Shapley attribution, period attribution deltas and
hierarchical severity maps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import factorial
from typing import Callable, Optional, Sequence

import numpy as np

from ._kernels import tree_coalitions
from .core import Hierarchy, Panel, key_signature
from .errors import SubsetTooLargeError, ValidationError
from .gbt import GbtModel

MAX_EXACT = 16


@dataclass
class ShapResult:
    phi: dict
    base_value: float
    prediction: float

    def values(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.phi[n] for n in names])


def _predictor(model) -> Callable:
    f = getattr(model, "predict_matrix", model)
    return lambda X: np.asarray(f(X), dtype=float)


def _prepare(instance, background, feature_subset, names):
    x = np.asarray(instance, dtype=float).ravel()
    B = np.atleast_2d(np.asarray(background, dtype=float))
    if B.shape[0] == 0:
        raise ValidationError("background must be non-empty")
    if B.shape[1] != x.size:
        raise ValidationError("background and instance widths differ")
    subset = list(range(x.size)) if feature_subset is None else [int(i) for i in feature_subset]
    if len(set(subset)) != len(subset) or any(not 0 <= i < x.size for i in subset):
        raise ValidationError("bad feature subset")
    names = [f"x{i}" for i in range(x.size)] if names is None else list(names)
    return x, B, subset, names


def _tree_game(model, x, B, subset):
    """All 2**m coalition values of a boosted-tree model in one pass."""
    bitpos = np.full(x.size, -1, dtype=np.int64)
    bitpos[np.asarray(subset, dtype=int)] = np.arange(len(subset))
    if not model.trees:
        return np.full(1 << len(subset), float(model.base_score))
    feature, threshold, left, right, value = model._packed()
    acc = tree_coalitions(x, np.ascontiguousarray(B), bitpos, feature, threshold, left, right, value, len(subset))
    return model.base_score + model.learning_rate * (acc / B.shape[0])


def _coalition_values(f, x, B, subset, masks) -> np.ndarray:
    """g(S) for each bitmask over ``subset``; features outside it stay at ``x``."""
    nb, F = B.shape
    base = np.broadcast_to(x, (nb, F)).copy()
    out = np.empty(len(masks))
    chunk = max(1, 200_000 // nb)
    sub = np.asarray(subset, dtype=int)
    bits = 1 << np.arange(len(subset))
    for a in range(0, len(masks), chunk):
        mk = np.asarray(masks[a : a + chunk])
        take = (mk[:, None] & bits[None, :]) != 0          # [k, m]
        rows = np.broadcast_to(base, (len(mk), nb, F)).copy()
        src = np.where(take[:, None, :], x[sub][None, None, :], B[:, sub][None, :, :])
        rows[:, :, sub] = src
        pred = f(rows.reshape(-1, F)).reshape(len(mk), nb)
        out[a : a + len(mk)] = pred.mean(axis=1)
    return out


def shapley_exact(model, instance, background, feature_subset=None, names=None) -> ShapResult:
    """Full subset enumeration over ``feature_subset`` (at most 16 features)."""
    x, B, subset, names = _prepare(instance, background, feature_subset, names)
    m = len(subset)
    if m > MAX_EXACT:
        raise SubsetTooLargeError(f"{m} features exceed the exact bound {MAX_EXACT}; use shapley_sampled")
    masks = np.arange(1 << m)
    if isinstance(model, GbtModel):
        g = _tree_game(model, x, B, subset)
    else:
        g = _coalition_values(_predictor(model), x, B, subset, masks)
    sizes = np.array([bin(int(k)).count("1") for k in masks])
    weight = np.array([factorial(s) * factorial(m - s - 1) / factorial(m) if s < m else 0.0 for s in range(m + 1)])
    phi = {n: 0.0 for n in names}
    for j, i in enumerate(subset):
        bit = 1 << j
        without = masks[(masks & bit) == 0]
        phi[names[i]] = float(np.sum(weight[sizes[without]] * (g[without | bit] - g[without])))
    return ShapResult(phi, float(g[0]), float(g[-1]))


def shapley_sampled(model, instance, background, n_permutations: int = 200, seed: int = 0, feature_subset=None, names=None) -> ShapResult:
    """Permutation-sampling estimate with the efficiency gap spread in
    proportion to each estimate's magnitude."""
    if n_permutations < 50:
        raise ValidationError("n_permutations must be >= 50")
    x, B, subset, names = _prepare(instance, background, feature_subset, names)
    m = len(subset)
    f = _predictor(model)
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(m) for _ in range(n_permutations)])
    # coalition after adding the first k features of each permutation
    masks = np.zeros((n_permutations, m + 1), dtype=np.int64)
    for k in range(m):
        masks[:, k + 1] = masks[:, k] | (1 << perms[:, k])
    uniq, inv = np.unique(masks.ravel(), return_inverse=True)
    g = _coalition_values(f, x, B, subset, uniq)[inv].reshape(masks.shape)
    contrib = np.zeros(m)
    for k in range(m):
        np.add.at(contrib, perms[:, k], g[:, k + 1] - g[:, k])
    est = contrib / n_permutations
    g0 = float(g[0, 0])
    gN = float(g[0, -1])
    gap = (gN - g0) - est.sum()
    mag = np.abs(est)
    est = est + (gap * mag / mag.sum() if mag.sum() > 0 else gap / m)
    phi = {n: 0.0 for n in names}
    for j, i in enumerate(subset):
        phi[names[i]] = float(est[j])
    return ShapResult(phi, g0, gN)


# ------------------------------------------------------------------ period deltas

@dataclass(frozen=True)
class DeltaPhi:
    feature: str
    delta: float
    baseline_mean_phi: float
    drift_mean_phi: float


def _sample_rows(X, cap, rng):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValidationError("period has no instances")
    if X.shape[0] > cap:
        X = X[np.sort(rng.choice(X.shape[0], cap, replace=False))]
    return X


def mean_abs_phi(model, instances, background, feature_subset=None, names=None) -> np.ndarray:
    rows = [shapley_exact(model, x, background, feature_subset, names) for x in instances]
    names = list(rows[0].phi)
    return np.mean([np.abs(r.values(names)) for r in rows], axis=0)


def deltas_from_means(names, base_mean, drift_mean) -> list:
    """DeltaPhi records sorted by decreasing delta (ties by name)."""
    out = [DeltaPhi(n, float(d) - float(b), float(b), float(d)) for n, b, d in zip(names, base_mean, drift_mean)]
    return sorted(out, key=lambda r: (-r.delta, r.feature))


def delta_phi(model, baseline_instances, drift_instances, background, feature_subset=None, names=None, cap: int = 50, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    Xb = _sample_rows(baseline_instances, cap, rng)
    Xd = _sample_rows(drift_instances, cap, rng)
    names = [f"x{i}" for i in range(Xb.shape[1])] if names is None else list(names)
    mb = mean_abs_phi(model, Xb, background, feature_subset, names)
    md = mean_abs_phi(model, Xd, background, feature_subset, names)
    return deltas_from_means(names, mb, md)


def global_importance(model, instances, background, n_permutations: int = 50, seed: int = 0, names=None) -> np.ndarray:
    """Mean |phi| over all features from the sampling estimator (used to pick
    the subset that is then attributed exactly)."""
    X = np.atleast_2d(np.asarray(instances, dtype=float))
    acc = np.zeros(X.shape[1])
    for i, x in enumerate(X):
        r = shapley_sampled(model, x, background, n_permutations, seed + i)
        acc += np.abs(r.values([f"x{k}" for k in range(X.shape[1])]))
    return acc / X.shape[0]


# ------------------------------------------------------------------ hierarchy map

@dataclass
class NodeImpact:
    path: str
    level: str
    label: str
    severity: float
    sales: float
    weight: float                 # share of parent's sales over the drift window
    children: tuple = ()
    top_features: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "level": self.level,
            "label": self.label,
            "severity": self.severity,
            "sales": self.sales,
            "weight": self.weight,
            "children": list(self.children),
            "top_features": [vars(d) for d in self.top_features],
        }


@dataclass
class DiagnosticMap:
    nodes: dict                   # path -> NodeImpact
    roots: tuple
    drift_window: tuple

    def to_dict(self) -> dict:
        return {
            "drift_window": list(self.drift_window),
            "roots": list(self.roots),
            "nodes": {p: n.to_dict() for p, n in sorted(self.nodes.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "DiagnosticMap":
        nodes = {}
        for p, n in d["nodes"].items():
            top = [DeltaPhi(**t) for t in n["top_features"]]
            nodes[p] = NodeImpact(n["path"], n["level"], n["label"], n["severity"], n["sales"], n["weight"], tuple(n["children"]), top)
        return cls(nodes, tuple(d["roots"]), tuple(d["drift_window"]))

    def render(self, max_depth: int = 2, top: int = 3) -> str:
        """Aligned text table per branch; severity shown as a WMAPE change in percent."""
        lines = []
        for root in self.roots:
            lines.append(f"{'node':<28} {'level':<11} {'dWMAPE':>9} {'share':>7}  drivers")
            stack = [(root, 0)]
            while stack:
                path, depth = stack.pop()
                n = self.nodes[path]
                drivers = ", ".join(f"{d.feature}({d.delta:+.3g})" for d in n.top_features[:top])
                label = "  " * depth + n.label
                lines.append(f"{label:<28} {n.level:<11} {100 * n.severity:>+8.1f}% {100 * n.weight:>6.1f}%  {drivers}")
                if depth < max_depth:
                    stack.extend((c, depth + 1) for c in reversed(n.children))
            lines.append("")
        return "\n".join(lines)


def hierarchical_impact(
    baseline_wmape,
    drift_wmape,
    hierarchy: Hierarchy,
    panel: Panel,
    drift_window: Optional[tuple] = None,
    top_features: Optional[Callable] = None,
) -> DiagnosticMap:
    """Leaf severity is the per-series WMAPE change; internal nodes take the
    sales-share weighted mean of their children over ``drift_window``.

    ``top_features(leaf_series)`` may supply a ranked DeltaPhi list per node.
    """
    base = np.asarray(baseline_wmape, dtype=float)
    drift = np.asarray(drift_wmape, dtype=float)
    if base.shape != drift.shape or base.shape != (panel.n_series,):
        raise ValidationError("per-series metrics must cover the same series as the panel")
    if hierarchy.signature != key_signature(panel.keys):
        raise ValidationError("hierarchy was not built from this panel")
    lo, hi = drift_window if drift_window is not None else (panel.first_day, panel.last_day)
    sales = panel.sales[:, panel.col(lo) : panel.col(hi) + 1].sum(axis=1)
    nodes = {}

    def visit(node):
        total = float(sales[list(node.leaf_series)].sum())
        if node.is_leaf:
            sev = float(drift[node.leaf_series[0]] - base[node.leaf_series[0]])
            kids = ()
        else:
            parts = [visit(c) for c in node.children]
            child_sales = np.array([nodes[c.path].sales for c in node.children])
            denom = child_sales.sum()
            w = child_sales / denom if denom > 0 else np.full(len(parts), 1.0 / len(parts))
            for c, wc in zip(node.children, w):
                nodes[c.path].weight = float(wc)
            sev = weighted_severity([nodes[c.path].severity for c in node.children], [nodes[c.path].weight for c in node.children])
            kids = tuple(c.path for c in node.children)
        feats = top_features(node.leaf_series) if top_features is not None else []
        nodes[node.path] = NodeImpact(node.path, node.level, node.label, sev, total, 1.0, kids, feats)
        return node.path

    roots = (visit(hierarchy.geographic), visit(hierarchy.product))
    return DiagnosticMap(nodes, roots, (lo, hi))


def weighted_severity(severities, weights) -> float:
    acc = 0.0
    for s, w in zip(severities, weights):
        acc += s * w
    return float(acc)

