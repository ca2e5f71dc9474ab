"""CART regression trees, random forests and least-squares gradient boosting.

Trees are stored flat: ``feature`` (-1 at leaves), ``threshold``, ``left``,
``right`` and ``value`` per node; an ensemble concatenates its trees and keeps
a ``roots`` index.  A sample goes left when ``x[feature] <= threshold``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from .base import FittedRegressor, check_xy


@dataclass
class _Tree:
    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def add(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.value) - 1


def _best_split(X: np.ndarray, y: np.ndarray, min_leaf: int):
    n = len(y)
    best = (np.inf, -1, 0.0)
    total_sum, total_sq = y.sum(), (y * y).sum()
    parent = total_sq - total_sum ** 2 / n
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="mergesort")
        xs, ys = X[order, f], y[order]
        cs = np.cumsum(ys)[:-1]
        cq = np.cumsum(ys * ys)[:-1]
        nl = np.arange(1, n)
        nr = n - nl
        sse = (cq - cs ** 2 / nl) + ((total_sq - cq) - (total_sum - cs) ** 2 / nr)
        valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        sse = np.where(valid, sse, np.inf)
        i = int(np.argmin(sse))
        if sse[i] < best[0] - 1e-12:
            lo, hi = xs[i], xs[i + 1]
            thr = 0.5 * (lo + hi)
            if not lo <= thr < hi:
                thr = lo
            best = (float(sse[i]), f, float(thr))
    if best[1] < 0 or best[0] >= parent - 1e-15:
        return None
    return best[1], best[2]


def build_tree(X: np.ndarray, y: np.ndarray, max_depth: int | None = None,
               min_samples_leaf: int = 1) -> _Tree:
    tree = _Tree()

    def grow(idx: np.ndarray, depth: int) -> int:
        ys = y[idx]
        node = tree.add(ys.mean())
        if len(idx) < 2 * min_samples_leaf or (max_depth is not None and depth >= max_depth):
            return node
        if np.all(ys == ys[0]):
            return node
        split = _best_split(X[idx], ys, min_samples_leaf)
        if split is None:
            return node
        f, thr = split
        go_left = X[idx, f] <= thr
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.left[node] = grow(idx[go_left], depth + 1)
        tree.right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return tree


def _pack(trees: list[_Tree]) -> dict[str, np.ndarray]:
    feature, threshold, left, right, value, roots = [], [], [], [], [], []
    offset = 0
    for t in trees:
        roots.append(offset)
        feature += t.feature
        threshold += t.threshold
        left += [c + offset if c >= 0 else -1 for c in t.left]
        right += [c + offset if c >= 0 else -1 for c in t.right]
        value += t.value
        offset += len(t.value)
    return {"feature": np.array(feature, dtype=np.int64),
            "threshold": np.array(threshold, dtype=np.float64),
            "left": np.array(left, dtype=np.int64), "right": np.array(right, dtype=np.int64),
            "value": np.array(value, dtype=np.float64), "roots": np.array(roots, dtype=np.int64)}


def tree_outputs(params: dict[str, np.ndarray], X: np.ndarray) -> np.ndarray:
    """Leaf value of every tree for every row, shape ``(rows, trees)``."""
    feat, thr = params["feature"], params["threshold"]
    left, right, value = params["left"], params["right"], params["value"]
    roots = params["roots"]
    n = X.shape[0]
    node = np.broadcast_to(roots[None, :], (n, len(roots))).copy()
    rows = np.broadcast_to(np.arange(n)[:, None], node.shape)
    while True:
        f = feat[node]
        internal = f >= 0
        if not internal.any():
            break
        xv = X[rows, np.where(internal, f, 0)]
        nxt = np.where(xv <= thr[node], left[node], right[node])
        node = np.where(internal, nxt, node)
    return value[node]


def fit_rf(X, y, trees: int = 100, seed: int = 0, max_depth: int | None = None,
           min_samples_leaf: int = 1) -> FittedRegressor:
    """Bagged CART trees; every split considers all features."""
    X, y = check_xy(X, y, min_rows=1)
    if trees < 1:
        raise ValidationError("trees must be >= 1")
    rng = np.random.default_rng(seed)
    n = len(y)
    built = []
    for _ in range(trees):
        idx = rng.integers(0, n, size=n)
        built.append(build_tree(X[idx], y[idx], max_depth, min_samples_leaf))
    cfg = {"trees": trees, "max_depth": max_depth, "min_samples_leaf": min_samples_leaf,
           "n_features": X.shape[1]}
    return FittedRegressor("rf", _pack(built), cfg, seed)


def fit_gbt(X, y, estimators: int = 100, depth: int = 3, lr: float = 0.1,
            seed: int = 0) -> FittedRegressor:
    """Stagewise least-squares boosting from the mean, shrinkage ``lr``."""
    X, y = check_xy(X, y, min_rows=1)
    if estimators < 1 or depth < 1 or not 0 < lr <= 1:
        raise ValidationError("need estimators >= 1, depth >= 1 and 0 < lr <= 1")
    init = float(y.mean())
    pred = np.full(len(y), init)
    built = []
    losses = [float(np.mean((y - pred) ** 2))]
    for _ in range(estimators):
        t = build_tree(X, y - pred, max_depth=depth)
        built.append(t)
        pred = pred + lr * tree_outputs(_pack([t]), X)[:, 0]
        losses.append(float(np.mean((y - pred) ** 2)))
    params = _pack(built)
    params["init"] = np.array([init])
    cfg = {"estimators": estimators, "depth": depth, "lr": lr, "train_loss": losses,
           "n_features": X.shape[1]}
    return FittedRegressor("gbt", params, cfg, seed)


def predict_rf(model: FittedRegressor, X: np.ndarray) -> np.ndarray:
    return tree_outputs(model.params, X).mean(axis=1)


def predict_gbt(model: FittedRegressor, X: np.ndarray) -> np.ndarray:
    out = tree_outputs(model.params, X)
    return model.params["init"][0] + model.config["lr"] * out.sum(axis=1)
