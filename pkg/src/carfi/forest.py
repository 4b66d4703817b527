"""CART trees and random forests over mixed continuous/categorical columns.

Used in three roles: real-vs-synthetic discriminators, random-forest
prediction models, and the leaf structure that backs density estimation.
Split rules index into the feature columns (schema order, target
excluded). Continuous rules route ``value <= threshold`` left; categorical
rules route levels in the rule's left set to the left child.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _rng
from .tabular import Dataset, FeatureKind, Schema

__all__ = [
    "Task",
    "ForestConfig",
    "SplitRule",
    "Leaf",
    "Internal",
    "Tree",
    "Forest",
    "LeafRegion",
    "fit_forest",
    "predict",
    "predict_proba",
    "oob_accuracy",
    "leaf_regions",
    "save_forest",
    "load_forest",
    "forest_to_dict",
    "forest_from_dict",
]

_GAIN_TOL = 1e-12


class Task(Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 100
    min_node_size: int = 20
    mtry: int | None = None  # None: ceil(sqrt(p)) classification, ceil(p/3) regression
    bootstrap: bool = True

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")

    def resolved_mtry(self, p: int, task: "Task") -> int:
        if self.mtry is not None:
            if not 1 <= self.mtry <= p:
                raise ValueError(f"mtry must be in [1, {p}]")
            return self.mtry
        if task is Task.CLASSIFICATION:
            return min(p, math.ceil(math.sqrt(p)))
        return min(p, math.ceil(p / 3))


@dataclass(frozen=True)
class SplitRule:
    feature: int
    threshold: float | None = None
    left_levels: frozenset[int] | None = None

    def __post_init__(self):
        if (self.threshold is None) == (self.left_levels is None):
            raise ValueError("rule must be either continuous or categorical")
        if self.threshold is not None and not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")
        if self.left_levels is not None and len(self.left_levels) == 0:
            raise ValueError("left level set must be non-empty")


@dataclass
class Leaf:
    id: int
    row_ids: np.ndarray  # training rows routed here (full training data)
    n_grow: int  # rows used during growth (in-bag when bootstrapping)
    value: float  # regression mean of growth rows
    class_counts: np.ndarray | None  # classification counts of growth rows


@dataclass
class Internal:
    rule: SplitRule
    left: "Internal | Leaf"
    right: "Internal | Leaf"


class _FlatTree:
    """Array form of one tree for vectorized routing."""

    __slots__ = ("feature", "threshold", "left", "right", "leaf_slot", "cat_left")

    def __init__(self, root, n_leaves: int, level_width: int):
        nodes = []
        stack = [root]
        while stack:
            node = stack.pop()
            nodes.append(node)
            if isinstance(node, Internal):
                stack.append(node.right)
                stack.append(node.left)
        n = len(nodes)
        index = {id(node): i for i, node in enumerate(nodes)}
        self.feature = np.full(n, -1, dtype=np.int32)
        self.threshold = np.full(n, np.nan)
        self.left = np.zeros(n, dtype=np.int32)
        self.right = np.zeros(n, dtype=np.int32)
        self.leaf_slot = np.full(n, -1, dtype=np.int32)
        self.cat_left = np.zeros((n, max(1, level_width)), dtype=bool)
        slot = 0
        for i, node in enumerate(nodes):
            if isinstance(node, Leaf):
                self.leaf_slot[i] = slot
                slot += 1
            else:
                rule = node.rule
                self.feature[i] = rule.feature
                self.left[i] = index[id(node.left)]
                self.right[i] = index[id(node.right)]
                if rule.threshold is not None:
                    self.threshold[i] = rule.threshold
                else:
                    for lv in rule.left_levels:
                        self.cat_left[i, lv] = True
        assert slot == n_leaves

    def route(self, X: np.ndarray) -> np.ndarray:
        """Leaf slot index for each row of the feature matrix."""
        node = np.zeros(X.shape[0], dtype=np.int32)
        pending = self.feature[node] >= 0
        width = self.cat_left.shape[1]
        while pending.any():
            idx = np.flatnonzero(pending)
            nd = node[idx]
            vals = X[idx, self.feature[nd]]
            thr = self.threshold[nd]
            is_cont = ~np.isnan(thr)
            lv = np.clip(vals, 0, width - 1).astype(np.int64)
            go_left = np.where(is_cont, vals <= thr, self.cat_left[nd, lv])
            nxt = np.where(go_left, self.left[nd], self.right[nd])
            node[idx] = nxt
            pending[idx] = self.feature[nxt] >= 0
        return self.leaf_slot[node]


@dataclass
class Tree:
    root: "Internal | Leaf"
    leaves: list[Leaf]
    flat: _FlatTree = field(repr=False)

    def route(self, X: np.ndarray) -> np.ndarray:
        return self.flat.route(X)


@dataclass
class Forest:
    trees: list[Tree]
    task: Task
    config: ForestConfig
    feature_schema: Schema  # non-target columns, in training order
    target_name: str
    target_kind: FeatureKind
    oob_rows: list[np.ndarray]  # per tree, into training row order
    seed: int

    @property
    def n_features(self) -> int:
        return self.feature_schema.n_columns

    @property
    def n_classes(self) -> int:
        return self.target_kind.n_levels

    def all_leaves(self):
        for t_idx, tree in enumerate(self.trees):
            for leaf in tree.leaves:
                yield t_idx, leaf


@dataclass(frozen=True)
class LeafRegion:
    """Hyperrectangle a leaf carves out: (lo, hi] per continuous feature,
    admissible level set per categorical feature."""

    lo: np.ndarray
    hi: np.ndarray
    levels: tuple[frozenset[int] | None, ...]


def _node_impurity_and_stats(y, task, n_classes):
    if task is Task.REGRESSION:
        s1 = y.sum()
        s2 = (y * y).sum()
        return s2 - s1 * s1 / len(y)
    counts = np.bincount(y.astype(np.int64), minlength=n_classes).astype(np.float64)
    return len(y) - (counts * counts).sum() / len(y)


def _best_continuous(x, y, task, n_classes, min_size):
    order = np.argsort(x, kind="stable")
    xs = x[order]
    n = len(xs)
    lo, hi = min_size - 1, n - min_size - 1
    if lo > hi:
        return None
    boundary = xs[:-1] < xs[1:]
    if task is Task.REGRESSION:
        ys = y[order]
        c1 = np.cumsum(ys)
        c2 = np.cumsum(ys * ys)
        nl = np.arange(1, n, dtype=np.float64)
        sse_l = c2[:-1] - c1[:-1] ** 2 / nl
        nr = n - nl
        sse_r = (c2[-1] - c2[:-1]) - (c1[-1] - c1[:-1]) ** 2 / nr
        score = sse_l + sse_r
    else:
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y[order].astype(np.int64)] = 1.0
        cum = np.cumsum(onehot, axis=0)
        nl = np.arange(1, n, dtype=np.float64)
        nr = n - nl
        left_sq = (cum[:-1] ** 2).sum(axis=1)
        right = cum[-1] - cum[:-1]
        right_sq = (right**2).sum(axis=1)
        score = (nl - left_sq / nl) + (nr - right_sq / nr)
    score = score.copy()
    score[~boundary] = np.inf
    score[: lo] = np.inf
    if hi + 1 < len(score):
        score[hi + 1 :] = np.inf
    best = int(np.argmin(score))
    if not np.isfinite(score[best]):
        return None
    mid = 0.5 * (xs[best] + xs[best + 1])
    if mid >= xs[best + 1]:  # fp guard: keep xs[best+1] strictly right
        mid = xs[best]
    return score[best], float(mid)


def _best_categorical(x, y, task, n_classes, n_levels, min_size):
    codes = x.astype(np.int64)
    counts = np.bincount(codes, minlength=n_levels).astype(np.float64)
    present = np.flatnonzero(counts)
    if len(present) < 2:
        return None
    if task is Task.REGRESSION:
        s1 = np.bincount(codes, weights=y, minlength=n_levels)
        s2 = np.bincount(codes, weights=y * y, minlength=n_levels)
        rate = s1[present] / counts[present]
        order = present[np.argsort(rate, kind="stable")]
        cn = np.cumsum(counts[order])[:-1]
        c1 = np.cumsum(s1[order])[:-1]
        c2 = np.cumsum(s2[order])[:-1]
        n, t1, t2 = counts[present].sum(), s1[present].sum(), s2[present].sum()
        nr = n - cn
        score = (c2 - c1**2 / cn) + ((t2 - c2) - (t1 - c1) ** 2 / nr)
    else:
        mat = np.bincount(
            codes * n_classes + y.astype(np.int64), minlength=n_levels * n_classes
        ).reshape(n_levels, n_classes).astype(np.float64)
        pos = min(1, n_classes - 1)
        rate = mat[present, pos] / counts[present]
        order = present[np.argsort(rate, kind="stable")]
        cum = np.cumsum(mat[order], axis=0)[:-1]
        cn = np.cumsum(counts[order])[:-1]
        total = mat[present].sum(axis=0)
        n = counts[present].sum()
        nr = n - cn
        right = total - cum
        score = (cn - (cum**2).sum(axis=1) / cn) + (nr - (right**2).sum(axis=1) / nr)
    valid = (cn >= min_size) & ((n - cn) >= min_size)
    score = np.where(valid, score, np.inf)
    best = int(np.argmin(score))
    if not np.isfinite(score[best]):
        return None
    return score[best], frozenset(int(l) for l in order[: best + 1])


class _TreeGrower:
    def __init__(self, X, y, kinds, task, n_classes, min_size, mtry, rng):
        self.X = X
        self.y = y
        self.kinds = kinds
        self.task = task
        self.n_classes = n_classes
        self.min_size = min_size
        self.mtry = mtry
        self.rng = rng
        self.p = X.shape[1]

    def grow(self, rows: np.ndarray):
        y_node = self.y[rows]
        n = len(rows)
        if self.task is Task.REGRESSION:
            pure = y_node.max() == y_node.min()
        else:
            pure = (y_node == y_node[0]).all()
        if n < 2 * self.min_size or pure:
            return self._leaf(rows, y_node)
        feats = np.sort(self.rng.choice(self.p, size=self.mtry, replace=False))
        parent = _node_impurity_and_stats(y_node, self.task, self.n_classes)
        best = None
        for f in feats:
            x = self.X[rows, f]
            kind = self.kinds[f]
            if kind.is_categorical:
                res = _best_categorical(
                    x, y_node, self.task, self.n_classes, kind.n_levels, self.min_size
                )
                if res is not None and (best is None or res[0] < best[0]):
                    best = (res[0], SplitRule(feature=int(f), left_levels=res[1]))
            else:
                res = _best_continuous(x, y_node, self.task, self.n_classes, self.min_size)
                if res is not None and (best is None or res[0] < best[0]):
                    best = (res[0], SplitRule(feature=int(f), threshold=res[1]))
        if best is None or best[0] >= parent - _GAIN_TOL:
            return self._leaf(rows, y_node)
        rule = best[1]
        x = self.X[rows, rule.feature]
        if rule.threshold is not None:
            mask = x <= rule.threshold
        else:
            mask = np.isin(x.astype(np.int64), list(rule.left_levels))
        return Internal(rule, self.grow(rows[mask]), self.grow(rows[~mask]))

    def _leaf(self, rows, y_node):
        if self.task is Task.REGRESSION:
            return Leaf(id=-1, row_ids=rows, n_grow=len(rows), value=float(y_node.mean()),
                        class_counts=None)
        counts = np.bincount(y_node.astype(np.int64), minlength=self.n_classes)
        return Leaf(id=-1, row_ids=rows, n_grow=len(rows),
                    value=float(np.argmax(counts)), class_counts=counts)


def fit_forest(
    data: Dataset,
    target: str,
    task: Task,
    config: ForestConfig = ForestConfig(),
    seed: int = 0,
) -> Forest:
    """Grow a forest of greedy CART trees (Gini / variance splitting).

    Nodes stop splitting below 2*min_node_size rows or when pure; every
    split must strictly reduce impurity. Leaves store the full-training-data
    rows routed to them (leaf statistics used during growth come from the
    in-bag sample when bootstrapping).
    """
    t_idx = data.schema.index(target)
    t_kind = data.schema.kind(t_idx)
    if task is Task.CLASSIFICATION and not t_kind.is_categorical:
        raise ValueError("classification requires a categorical target")
    if task is Task.REGRESSION and t_kind.is_categorical:
        raise ValueError("regression requires a continuous target")

    feat_cols = [j for j in range(data.schema.n_columns) if j != t_idx]
    feature_schema = Schema(columns=tuple(data.schema.columns[j] for j in feat_cols))
    X = np.ascontiguousarray(data.values[:, feat_cols])
    y = np.ascontiguousarray(data.values[:, t_idx])
    n, p = X.shape
    n_classes = t_kind.n_levels if task is Task.CLASSIFICATION else 0
    mtry = config.resolved_mtry(p, task)
    kinds = feature_schema.kinds
    level_width = max([k.n_levels for k in kinds if k.is_categorical], default=1)

    trees: list[Tree] = []
    oob_rows: list[np.ndarray] = []
    leaf_id = 0
    for rng in _rng.spawn_rngs(seed, config.num_trees):
        if config.bootstrap:
            boot = rng.integers(0, n, size=n)
            oob = np.setdiff1d(np.arange(n), boot)
        else:
            boot = np.arange(n)
            oob = np.empty(0, dtype=np.int64)
        grower = _TreeGrower(X, y, kinds, task, n_classes, config.min_node_size, mtry, rng)
        root = grower.grow(np.sort(boot))
        leaves = _collect_leaves(root)
        flat = _FlatTree(root, len(leaves), level_width)
        slots = flat.route(X)
        for slot, leaf in enumerate(leaves):
            leaf.id = leaf_id
            leaf.row_ids = np.flatnonzero(slots == slot)
            leaf_id += 1
        trees.append(Tree(root=root, leaves=leaves, flat=flat))
        oob_rows.append(oob)
    return Forest(
        trees=trees,
        task=task,
        config=config,
        feature_schema=feature_schema,
        target_name=target,
        target_kind=t_kind,
        oob_rows=oob_rows,
        seed=seed,
    )


def _collect_leaves(root) -> list[Leaf]:
    # Same order as _FlatTree slot assignment (preorder, left first).
    leaves = []
    stack = [root]
    while stack:
        node = stack.pop()
        if isinstance(node, Leaf):
            leaves.append(node)
        else:
            stack.append(node.right)
            stack.append(node.left)
    return leaves


def _feature_matrix_for(forest: Forest, data: Dataset) -> np.ndarray:
    cols = []
    for name, kind in forest.feature_schema.columns:
        j = data.schema.index(name)
        if data.schema.kind(j) != kind:
            raise ValueError(f"column {name!r} kind mismatch")
        cols.append(j)
    return data.values[:, cols]


def predict_matrix(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Predict on a feature matrix (columns in the forest's feature order)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise ValueError("feature matrix width mismatch")
    n = X.shape[0]
    if forest.task is Task.REGRESSION:
        acc = np.zeros(n)
        for tree in forest.trees:
            means = np.array([lf.value for lf in tree.leaves])
            acc += means[tree.route(X)]
        return acc / len(forest.trees)
    votes = np.zeros((n, forest.n_classes))
    for tree in forest.trees:
        tree_vote = np.array(
            [int(np.argmax(lf.class_counts)) for lf in tree.leaves], dtype=np.int64
        )
        votes[np.arange(n), tree_vote[tree.route(X)]] += 1.0
    return votes


def predict(forest: Forest, data: Dataset) -> np.ndarray:
    """Majority-vote class indices (classification) or mean of per-tree
    leaf means (regression)."""
    X = _feature_matrix_for(forest, data)
    out = predict_matrix(forest, X)
    if forest.task is Task.REGRESSION:
        return out
    return np.argmax(out, axis=1).astype(np.float64)


def predict_proba(forest: Forest, data: Dataset) -> np.ndarray:
    if forest.task is not Task.CLASSIFICATION:
        raise ValueError("predict_proba requires a classification forest")
    votes = predict_matrix(forest, _feature_matrix_for(forest, data))
    return votes / len(forest.trees)


def oob_accuracy(forest: Forest, data: Dataset) -> float:
    """Fraction of training rows whose out-of-bag majority vote matches the
    label; rows with no out-of-bag votes are excluded."""
    if forest.task is not Task.CLASSIFICATION:
        raise ValueError("oob_accuracy requires a classification forest")
    if not forest.config.bootstrap:
        raise ValueError("forest was fitted without bootstrap")
    X = _feature_matrix_for(forest, data)
    y = data.column(forest.target_name).astype(np.int64)
    votes = np.zeros((data.n_rows, forest.n_classes))
    for tree, oob in zip(forest.trees, forest.oob_rows):
        if len(oob) == 0:
            continue
        tree_vote = np.array(
            [int(np.argmax(lf.class_counts)) for lf in tree.leaves], dtype=np.int64
        )
        votes[oob, tree_vote[tree.route(X[oob])]] += 1.0
    voted = votes.sum(axis=1) > 0
    if not voted.any():
        raise ValueError("no rows with out-of-bag votes")
    pred = np.argmax(votes[voted], axis=1)
    return float(np.mean(pred == y[voted]))


def leaf_regions(forest: Forest) -> dict[int, LeafRegion]:
    """Per-leaf hyperrectangles: split constraints intersected along the
    root path; unconstrained continuous dimensions stay (-inf, +inf)."""
    kinds = forest.feature_schema.kinds
    p = len(kinds)
    out: dict[int, LeafRegion] = {}

    def walk(node, lo, hi, levels):
        if isinstance(node, Leaf):
            out[node.id] = LeafRegion(
                lo=lo.copy(),
                hi=hi.copy(),
                levels=tuple(frozenset(s) if s is not None else None for s in levels),
            )
            return
        f = node.rule.feature
        if node.rule.threshold is not None:
            t = node.rule.threshold
            old = hi[f]
            hi[f] = min(hi[f], t)
            walk(node.left, lo, hi, levels)
            hi[f] = old
            old = lo[f]
            lo[f] = max(lo[f], t)
            walk(node.right, lo, hi, levels)
            lo[f] = old
        else:
            old = levels[f]
            levels[f] = old & node.rule.left_levels
            walk(node.left, lo, hi, levels)
            levels[f] = old - node.rule.left_levels
            walk(node.right, lo, hi, levels)
            levels[f] = old

    for tree in forest.trees:
        lo = np.full(p, -np.inf)
        hi = np.full(p, np.inf)
        levels = [set(range(k.n_levels)) if k.is_categorical else None for k in kinds]
        walk(tree.root, lo, hi, levels)
    return out


# --- serialization (versioned JSON structure, lossless round-trip) ---

_FORMAT = "carfi-forest"
_VERSION = 1


def _node_to_dict(node):
    if isinstance(node, Leaf):
        return {
            "kind": "leaf",
            "id": node.id,
            "rows": [int(r) for r in node.row_ids],
            "n_grow": node.n_grow,
            "value": node.value,
            "class_counts": None
            if node.class_counts is None
            else [int(c) for c in node.class_counts],
        }
    rule = node.rule
    return {
        "kind": "split",
        "feature": rule.feature,
        "threshold": rule.threshold,
        "left_levels": None if rule.left_levels is None else sorted(rule.left_levels),
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(d):
    if d["kind"] == "leaf":
        return Leaf(
            id=d["id"],
            row_ids=np.array(d["rows"], dtype=np.int64),
            n_grow=d["n_grow"],
            value=d["value"],
            class_counts=None
            if d["class_counts"] is None
            else np.array(d["class_counts"], dtype=np.int64),
        )
    rule = SplitRule(
        feature=d["feature"],
        threshold=d["threshold"],
        left_levels=None if d["left_levels"] is None else frozenset(d["left_levels"]),
    )
    return Internal(rule, _node_from_dict(d["left"]), _node_from_dict(d["right"]))


def _schema_to_dict(schema: Schema):
    return {
        "columns": [
            {"name": name, "levels": None if k.levels is None else list(k.levels)}
            for name, k in schema.columns
        ],
        "target": schema.target,
    }


def _schema_from_dict(d) -> Schema:
    cols = tuple(
        (c["name"], FeatureKind(levels=None if c["levels"] is None else tuple(c["levels"])))
        for c in d["columns"]
    )
    return Schema(columns=cols, target=d["target"])


def forest_to_dict(forest: Forest) -> dict:
    return {
        "format": _FORMAT,
        "version": _VERSION,
        "task": forest.task.value,
        "config": {
            "num_trees": forest.config.num_trees,
            "min_node_size": forest.config.min_node_size,
            "mtry": forest.config.mtry,
            "bootstrap": forest.config.bootstrap,
        },
        "feature_schema": _schema_to_dict(forest.feature_schema),
        "target_name": forest.target_name,
        "target_levels": None
        if forest.target_kind.levels is None
        else list(forest.target_kind.levels),
        "seed": forest.seed,
        "oob_rows": [[int(r) for r in oob] for oob in forest.oob_rows],
        "trees": [_node_to_dict(t.root) for t in forest.trees],
    }


def forest_from_dict(d: dict) -> Forest:
    if d.get("format") != _FORMAT:
        raise ValueError("not a serialized forest")
    if d.get("version") != _VERSION:
        raise ValueError(f"unsupported forest format version {d.get('version')}")
    schema = _schema_from_dict(d["feature_schema"])
    level_width = max([k.n_levels for k in schema.kinds if k.is_categorical], default=1)
    trees = []
    for nd in d["trees"]:
        root = _node_from_dict(nd)
        leaves = _collect_leaves(root)
        trees.append(Tree(root=root, leaves=leaves, flat=_FlatTree(root, len(leaves), level_width)))
    return Forest(
        trees=trees,
        task=Task(d["task"]),
        config=ForestConfig(**d["config"]),
        feature_schema=schema,
        target_name=d["target_name"],
        target_kind=FeatureKind(
            levels=None if d["target_levels"] is None else tuple(d["target_levels"])
        ),
        oob_rows=[np.array(r, dtype=np.int64) for r in d["oob_rows"]],
        seed=d["seed"],
    )


def save_forest(forest: Forest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(forest_to_dict(forest), fh)


def load_forest(path) -> Forest:
    with open(path, encoding="utf-8") as fh:
        return forest_from_dict(json.load(fh))
