"""Squared-error gradient boosting over depth-limited regression trees.

Split search is histogram based: each feature is cut at up to ``max_bins``
empirical quantiles (or at every distinct value when there are fewer), and a
split sends ``x <= threshold`` left. Growth is level-wise; every level of every
tree is one ``bincount`` over (node, feature, bin).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._kernels import best_splits, level_histograms, node_sums, predict_forest, route_rows
from .errors import ValidationError

MODEL_FORMAT = "driftguard-gbt"
MODEL_VERSION = 1


@dataclass(frozen=True)
class GbtHyper:
    n_trees: int = 100
    max_depth: int = 6
    learning_rate: float = 0.1
    min_leaf: int = 20
    seed: int = 0
    max_bins: int = 128

    def validate(self):
        if self.n_trees < 0 or self.max_depth < 1 or self.min_leaf < 1 or self.max_bins < 2:
            raise ValidationError(f"invalid hyperparameters {self}")
        if not 0 < self.learning_rate <= 1:
            raise ValidationError("learning_rate must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[idx]
            internal = f >= 0
            if not internal.any():
                return self.value[idx]
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[idx]
            idx = np.where(internal, np.where(go_left, self.left[idx], self.right[idx]), idx)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=float),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["value"], dtype=float),
        )


@dataclass(eq=False)
class GbtModel:
    trees: list
    learning_rate: float
    base_score: float
    n_features: int
    feature_names: tuple = ()
    feature_spec: Optional[dict] = None
    trained_window: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    def _packed(self):
        cached = self.__dict__.get("_pack")
        if cached is not None and cached[0] == len(self.trees):
            return cached[1]
        width = max((t.n_nodes for t in self.trees), default=1)
        T = len(self.trees)
        arrays = (
            np.full((T, width), -1, dtype=np.int64),
            np.zeros((T, width)),
            np.zeros((T, width), dtype=np.int64),
            np.zeros((T, width), dtype=np.int64),
            np.zeros((T, width)),
        )
        for i, t in enumerate(self.trees):
            for arr, src in zip(arrays, (t.feature, t.threshold, t.left, t.right, t.value)):
                arr[i, : t.n_nodes] = src
        self.__dict__["_pack"] = (T, arrays)
        return arrays

    def tree_sum(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValidationError(f"expected {self.n_features} features, got shape {X.shape}")
        if not self.trees:
            return np.zeros(X.shape[0])
        return predict_forest(X, *self._packed())

    def predict_matrix(self, X) -> np.ndarray:
        return self.base_score + self.learning_rate * self.tree_sum(X)

    __call__ = predict_matrix

    def predict(self, x) -> float:
        values = getattr(x, "values", x)
        names = getattr(x, "names", None)
        if names is not None and self.feature_names and tuple(names) != tuple(self.feature_names):
            raise ValidationError("feature order does not match the model")
        v = np.asarray(values, dtype=float)
        if v.ndim != 1 or v.shape[0] != self.n_features:
            raise ValidationError(f"expected {self.n_features} features, got {v.shape}")
        return float(self.predict_matrix(v[None, :])[0])

    def to_json(self) -> str:
        doc = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "feature_spec": self.feature_spec,
            "trained_window": list(self.trained_window) if self.trained_window else None,
            "meta": self.meta,
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "GbtModel":
        d = json.loads(text)
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValidationError("unsupported model format")
        tw = d.get("trained_window")
        return cls(
            [RegressionTree.from_dict(t) for t in d["trees"]],
            d["learning_rate"],
            d["base_score"],
            d["n_features"],
            tuple(d["feature_names"]),
            d.get("feature_spec"),
            tuple(tw) if tw else None,
            d.get("meta") or {},
        )


def _bin_edges(col: np.ndarray, max_bins: int) -> np.ndarray:
    u = np.unique(col)
    if len(u) <= max_bins:
        return u[:-1]
    q = np.quantile(col, np.linspace(0, 1, max_bins + 1)[1:-1], method="inverted_cdf")
    return np.unique(q)


def _fit_tree(Xb, edges, g, offsets, max_depth, min_leaf):
    n, F = Xb.shape
    total_bins = int(offsets[-1])
    bin_feature = np.repeat(np.arange(F), np.diff(offsets))
    flat = Xb + offsets[:-1][None, :]

    feat, thr, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    node_of_row = np.zeros(n, dtype=np.int64)  # level-local node id; -1 once settled in a leaf
    leaf_of_row = np.zeros(n, dtype=np.int64)
    level = [0]                                # global ids of the current level's nodes
    for depth in range(max_depth + 1):
        L = len(level)
        rows = np.flatnonzero(node_of_row >= 0)
        if L == 0 or rows.size == 0:
            break
        loc = node_of_row[rows]
        g_sum, n_sum, g2_sum = node_sums(rows, loc, g, L)
        leaf_val = g_sum / np.maximum(n_sum, 1)
        if depth == max_depth:
            for j, node in enumerate(level):
                value[node] = float(leaf_val[j])
            leaf_of_row[rows] = np.asarray(level)[loc]
            break

        G, N = level_histograms(flat, rows, loc, g, L, total_bins)
        best_gain, best = best_splits(G, N, offsets, g_sum, n_sum, float(min_leaf))
        node_sse = g2_sum - g_sum * g_sum / np.maximum(n_sum, 1)
        split = np.isfinite(best_gain) & (best_gain > 1e-12 * np.maximum(node_sse, 0) + 1e-12)

        new_left = np.full(L, -1, dtype=np.int64)
        next_level = []
        for j, node in enumerate(level):
            if not split[j]:
                value[node] = float(leaf_val[j])
                continue
            f = int(bin_feature[best[j]])
            k = int(best[j] - offsets[f])
            li = len(feat)
            feat[node], thr[node], left[node], right[node] = f, float(edges[f][k]), li, li + 1
            feat += [-1, -1]
            thr += [0.0, 0.0]
            left += [-1, -1]
            right += [-1, -1]
            value += [0.0, 0.0]
            new_left[j] = len(next_level)
            next_level += [li, li + 1]

        route_rows(flat, rows, loc, best, bin_feature, split, new_left, np.asarray(level, dtype=np.int64), node_of_row, leaf_of_row)
        level = next_level

    value = np.array(value, dtype=float)
    tree = RegressionTree(
        np.array(feat, dtype=np.int64),
        np.array(thr, dtype=float),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        value,
    )
    return tree, value[leaf_of_row]


def train_gbt(features, targets, hyper: GbtHyper = GbtHyper(), feature_names=(), **meta) -> GbtModel:
    """Fit ``base_score + learning_rate * sum(trees)`` to squared error.

    Each tree is fit to the current residuals; leaves hold residual means, so
    training SSE cannot increase from one tree to the next.
    """
    hyper.validate()
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError(f"features {X.shape} and targets {y.shape} do not align")
    if X.shape[0] < 2 * hyper.min_leaf:
        raise ValidationError(f"need at least {2 * hyper.min_leaf} rows, got {X.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError("non-finite training data")

    base = float(np.mean(y))
    model = GbtModel([], hyper.learning_rate, base, X.shape[1], tuple(feature_names), **meta)
    if np.all(y == y[0]):
        model.base_score = float(y[0])
        return model

    edges = [_bin_edges(X[:, f], hyper.max_bins) for f in range(X.shape[1])]
    Xb = np.stack([np.searchsorted(edges[f], X[:, f], side="left") for f in range(X.shape[1])], axis=1)
    sizes = np.array([len(e) + 1 for e in edges])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    Xb = np.ascontiguousarray(Xb)
    tree_total = np.zeros(len(y))
    for _ in range(hyper.n_trees):
        resid = y - (base + hyper.learning_rate * tree_total)
        tree, fitted = _fit_tree(Xb, edges, resid, offsets, hyper.max_depth, hyper.min_leaf)
        if tree.n_nodes == 1:
            break
        model.trees.append(tree)
        tree_total = tree_total + fitted
    return model
