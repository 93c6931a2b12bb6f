"""Hierarchical demand panel: series identity, calendar, and aggregation.

A :class:`Panel` holds one row per (SKU, store) series and one column per
calendar day. :func:`build_hierarchy` derives two parallel trees over the same
series set, a geographic one (total > state > store > leaf) and a product one
(total > category > department > leaf).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from functools import reduce
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ValidationError

LEVELS = ("total", "state", "store", "category", "department", "leaf")


@dataclass(frozen=True)
class SeriesKey:
    sku_id: str
    store_id: str
    state_id: str
    category: str
    department: str

    @property
    def label(self) -> str:
        return f"{self.sku_id}|{self.store_id}"


@dataclass(frozen=True)
class CalendarDay:
    day_index: int
    date: str
    day_of_week: int
    month: int
    is_holiday: bool = False
    event_name: Optional[str] = None


def _readonly(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Panel:
    """Daily sales and prices, shape ``[series, days]``.

    Arrays are copied and frozen on construction; derive modified panels with
    :meth:`with_sales`.
    """

    keys: tuple
    calendar: tuple
    sales: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        keys = tuple(self.keys)
        calendar = tuple(self.calendar)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "calendar", calendar)
        sales = _readonly(self.sales)
        prices = _readonly(self.prices)
        object.__setattr__(self, "sales", sales)
        object.__setattr__(self, "prices", prices)

        if not keys:
            raise ValidationError("panel has no series")
        if not calendar:
            raise ValidationError("panel has no days")
        shape = (len(keys), len(calendar))
        if sales.shape != shape or prices.shape != shape:
            raise ValidationError(
                f"sales {sales.shape} / prices {prices.shape} do not match keys x calendar {shape}"
            )
        if not np.all(np.isfinite(sales)) or np.any(sales < 0):
            raise ValidationError("sales must be finite and non-negative")
        if not np.all(np.isfinite(prices)) or np.any(prices <= 0):
            raise ValidationError("prices must be finite and positive")
        first = calendar[0].day_index
        if first < 1:
            raise ValidationError("day_index is 1-based")
        for i, day in enumerate(calendar):
            if day.day_index != first + i:
                raise ValidationError(f"calendar not contiguous at position {i}")
        _check_keys(keys)

    @property
    def n_series(self) -> int:
        return len(self.keys)

    @property
    def n_days(self) -> int:
        return len(self.calendar)

    @property
    def first_day(self) -> int:
        return self.calendar[0].day_index

    @property
    def last_day(self) -> int:
        return self.calendar[-1].day_index

    @property
    def day_indices(self) -> np.ndarray:
        return np.arange(self.first_day, self.last_day + 1)

    def col(self, day: int) -> int:
        """Column position of a 1-based ``day_index``."""
        if not self.first_day <= day <= self.last_day:
            raise ValidationError(f"day {day} outside [{self.first_day}, {self.last_day}]")
        return day - self.first_day

    def holidays(self) -> np.ndarray:
        return np.array([d.is_holiday for d in self.calendar], dtype=bool)

    def with_sales(self, sales) -> "Panel":
        return replace(self, sales=sales)

    def stores(self) -> list:
        return sorted({k.store_id for k in self.keys})

    def series_in_store(self, store_id: str) -> np.ndarray:
        return np.array([i for i, k in enumerate(self.keys) if k.store_id == store_id], dtype=int)

    def __eq__(self, other):
        if not isinstance(other, Panel):
            return NotImplemented
        return (
            self.keys == other.keys
            and self.calendar == other.calendar
            and np.array_equal(self.sales, other.sales)
            and np.array_equal(self.prices, other.prices)
        )

    __hash__ = None


def _check_keys(keys: Sequence[SeriesKey]) -> None:
    seen = set()
    dept_cat: dict = {}
    store_state: dict = {}
    for k in keys:
        pair = (k.sku_id, k.store_id)
        if pair in seen:
            raise ValidationError(f"duplicate series key {pair}")
        seen.add(pair)
        if dept_cat.setdefault(k.department, k.category) != k.category:
            raise ValidationError(f"department {k.department!r} maps to two categories")
        if store_state.setdefault(k.store_id, k.state_id) != k.state_id:
            raise ValidationError(f"store {k.store_id!r} maps to two states")


def key_signature(keys: Sequence[SeriesKey]) -> str:
    h = hashlib.sha1()
    for k in keys:
        h.update("\x1f".join((k.sku_id, k.store_id, k.state_id, k.category, k.department)).encode())
        h.update(b"\x1e")
    return h.hexdigest()


@dataclass(frozen=True)
class HierarchyNode:
    level: str
    label: str
    path: str
    leaf_series: tuple
    children: tuple = ()
    signature: str = field(default="", repr=False, compare=False)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def walk(self) -> Iterator["HierarchyNode"]:
        """Pre-order traversal."""
        yield self
        for c in self.children:
            yield from c.walk()


@dataclass(frozen=True)
class Hierarchy:
    geographic: HierarchyNode
    product: HierarchyNode
    signature: str

    def branch(self, name: str) -> HierarchyNode:
        if name not in ("geographic", "product"):
            raise ValidationError(f"unknown branch {name!r}")
        return getattr(self, name)

    def nodes(self, branch: str = "geographic") -> list:
        return list(self.branch(branch).walk())

    def count(self, level: str, branch: str = "geographic") -> int:
        return sum(1 for n in self.branch(branch).walk() if n.level == level)

    def find(self, path: str) -> HierarchyNode:
        for root in (self.geographic, self.product):
            for n in root.walk():
                if n.path == path:
                    return n
        raise KeyError(path)


def _branch(keys, levels, prefix, signature) -> HierarchyNode:
    # levels: attribute names for each internal level below the root
    def build(idx, depth, path):
        if depth == len(levels):
            return tuple(
                HierarchyNode("leaf", keys[i].label, f"{path}/{keys[i].label}", (i,), (), signature)
                for i in idx
            )
        level, attr = levels[depth]
        groups: dict = {}
        for i in idx:
            groups.setdefault(getattr(keys[i], attr), []).append(i)
        out = []
        for label in sorted(groups):
            sub = groups[label]
            p = f"{path}/{label}"
            out.append(HierarchyNode(level, label, p, tuple(sub), build(sub, depth + 1, p), signature))
        return tuple(out)

    all_idx = list(range(len(keys)))
    root_path = f"{prefix}:total"
    return HierarchyNode("total", "total", root_path, tuple(all_idx), build(all_idx, 0, root_path), signature)


def build_hierarchy(keys: Sequence[SeriesKey]) -> Hierarchy:
    keys = tuple(keys)
    if not keys:
        raise ValidationError("no series keys")
    _check_keys(keys)
    sig = key_signature(keys)
    geo = _branch(keys, [("state", "state_id"), ("store", "store_id")], "geo", sig)
    prod = _branch(keys, [("category", "category"), ("department", "department")], "prod", sig)
    return Hierarchy(geo, prod, sig)


def _sum_children(parts: list) -> np.ndarray:
    return reduce(np.add, parts)


def aggregate_series(panel: Panel, node: HierarchyNode, values: Optional[np.ndarray] = None) -> np.ndarray:
    """Sum of the node's leaf series, built bottom-up so that every node equals
    the left-fold sum of its children exactly.

    ``values`` substitutes another ``[series, days]`` matrix (e.g. forecasts)
    for the panel's sales.
    """
    if node.signature != key_signature(panel.keys):
        raise ValidationError(f"node {node.path!r} does not belong to this panel's hierarchy")
    mat = panel.sales if values is None else np.asarray(values, dtype=float)
    if mat.shape[0] != panel.n_series:
        raise ValidationError("values row count does not match panel series")
    return _aggregate(mat, node)


def _aggregate(mat: np.ndarray, node: HierarchyNode) -> np.ndarray:
    if node.is_leaf:
        return np.array(mat[node.leaf_series[0]], dtype=float)
    return _sum_children([_aggregate(mat, c) for c in node.children])


def slice_window(panel: Panel, start_day: int, end_day: int) -> Panel:
    if not (panel.first_day <= start_day <= end_day <= panel.last_day):
        raise ValidationError(
            f"window [{start_day}, {end_day}] outside panel [{panel.first_day}, {panel.last_day}]"
        )
    a, b = panel.col(start_day), panel.col(end_day) + 1
    return Panel(panel.keys, panel.calendar[a:b], panel.sales[:, a:b], panel.prices[:, a:b])
