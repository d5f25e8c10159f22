"""CART trees: Gini classification trees for the forest, second-order regression trees for boosting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidConfig, SingleClassInput
from ..parallel import map_ordered


@dataclass
class DecisionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf whose output is ``value``."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row (``x[f] <= t`` goes left)."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        for _ in range(self.max_depth + 1):
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            rows = np.flatnonzero(inner)
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def depth(self) -> int:
        def walk(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist(), "max_depth": self.max_depth}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=np.float64),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["value"], dtype=np.float64), int(d["max_depth"]))


class _Builder:
    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def leaf(self, value: float) -> int:
        return self.node(-1, 0.0, value)

    def node(self, f: int, t: float, value: float) -> int:
        self.feature.append(f)
        self.threshold.append(t)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    def tree(self, max_depth: int) -> DecisionTree:
        return DecisionTree(np.array(self.feature, dtype=np.int64), np.array(self.threshold),
                            np.array(self.left, dtype=np.int64), np.array(self.right, dtype=np.int64),
                            np.array(self.value), max_depth)


def _candidate_splits(x: np.ndarray, min_leaf: int):
    """Sort order and the split positions (left sizes) between distinct values."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    n = len(xs)
    pos = np.arange(min_leaf, n - min_leaf + 1)
    pos = pos[(pos > 0) & (pos < n)]
    pos = pos[xs[pos - 1] < xs[pos]]
    return order, xs, pos


def _gini_split(x, y, min_leaf):
    """Best (weighted impurity, threshold) for one feature, or None."""
    order, xs, pos = _candidate_splits(x, min_leaf)
    if len(pos) == 0:
        return None
    n = len(xs)
    cum = np.cumsum(y[order])
    s = cum[-1]
    nl = pos.astype(np.float64)
    sl = cum[pos - 1]
    nr = n - nl
    sr = s - sl
    # n_side * gini_side with gini = 2 p (1 - p)
    imp = 2 * sl * (nl - sl) / nl + 2 * sr * (nr - sr) / nr
    j = int(np.argmin(imp))
    return float(imp[j]), 0.5 * (xs[pos[j] - 1] + xs[pos[j]])


def _gain_split(x, g, h, lam, min_leaf):
    order, xs, pos = _candidate_splits(x, min_leaf)
    if len(pos) == 0:
        return None
    G, H = g.sum(), h.sum()
    gl = np.cumsum(g[order])[pos - 1]
    hl = np.cumsum(h[order])[pos - 1]
    gain = 0.5 * (gl ** 2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - G ** 2 / (H + lam))
    j = int(np.argmax(gain))
    return float(gain[j]), 0.5 * (xs[pos[j] - 1] + xs[pos[j]])


def grow_classification_tree(X: np.ndarray, y: np.ndarray, max_depth: int, min_leaf: int,
                             n_split_features: int, rng: np.random.Generator) -> DecisionTree:
    """Gini tree; leaves hold the class-1 fraction of their rows."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    F = X.shape[1]
    b = _Builder()

    def build(rows: np.ndarray, depth: int) -> int:
        yr = y[rows]
        p = float(yr.mean())
        n = len(rows)
        if depth >= max_depth or n < 2 * min_leaf or p in (0.0, 1.0):
            return b.leaf(p)
        parent = 2 * yr.sum() * (n - yr.sum()) / n
        best = None
        for f in np.sort(rng.choice(F, size=min(n_split_features, F), replace=False)):
            r = _gini_split(X[rows, f], yr, min_leaf)
            if r is not None and r[0] < parent - 1e-12 and (best is None or r[0] < best[0]):
                best = (r[0], int(f), r[1])
        if best is None:
            return b.leaf(p)
        _, f, t = best
        node = b.node(f, t, p)
        mask = X[rows, f] <= t
        b.left[node] = build(rows[mask], depth + 1)
        b.right[node] = build(rows[~mask], depth + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    return b.tree(max_depth)


def grow_gradient_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, max_depth: int,
                       lam: float, min_leaf: int = 1) -> DecisionTree:
    """Regression tree on (gradient, hessian); leaf value -G / (H + lambda)."""
    X = np.asarray(X, dtype=np.float64)
    b = _Builder()

    def build(rows: np.ndarray, depth: int) -> int:
        G, H = g[rows].sum(), h[rows].sum()
        value = float(-G / (H + lam)) if H + lam > 0 else 0.0
        if depth >= max_depth or len(rows) < 2 * min_leaf:
            return b.leaf(value)
        best = None
        for f in range(X.shape[1]):
            r = _gain_split(X[rows, f], g[rows], h[rows], lam, min_leaf)
            if r is not None and r[0] > 1e-12 and (best is None or r[0] > best[0]):
                best = (r[0], f, r[1])
        if best is None:
            return b.leaf(value)
        _, f, t = best
        node = b.node(f, t, value)
        mask = X[rows, f] <= t
        b.left[node] = build(rows[mask], depth + 1)
        b.right[node] = build(rows[~mask], depth + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    return b.tree(max_depth)


def _check_binary(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(np.unique(y)) < 2:
        raise SingleClassInput("tree ensembles need both classes")
    return y


# ---------------------------------------------------------------------------
# random forest

@dataclass
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    features_per_split: int | None = None  # None -> ceil(sqrt(F))
    bootstrap: bool = True
    seed: int = 0


@dataclass
class Forest:
    trees: list[DecisionTree]
    features_per_split: int
    n_features: int
    tree_seeds: list[int] = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.mean([t.predict(X) for t in self.trees], axis=0)


def train_forest(X, y, cfg: ForestConfig | None = None) -> Forest:
    cfg = cfg or ForestConfig()
    if cfg.n_trees < 1 or cfg.max_depth < 0 or cfg.min_leaf < 1:
        raise InvalidConfig(f"invalid forest config: {cfg}")
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y)
    F = X.shape[1]
    k = cfg.features_per_split or math.ceil(math.sqrt(F))
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)

    def grow(ss: np.random.SeedSequence) -> DecisionTree:
        rng = np.random.default_rng(ss)
        rows = rng.integers(0, len(y), size=len(y)) if cfg.bootstrap else np.arange(len(y))
        return grow_classification_tree(X[rows], y[rows], cfg.max_depth, cfg.min_leaf, k, rng)

    # each tree owns a spawned seed, so the worker count never changes the forest
    trees = map_ordered(grow, seqs)
    return Forest(trees, k, F, [int(s.generate_state(1)[0]) for s in seqs])


# ---------------------------------------------------------------------------
# boosting

@dataclass
class BoostConfig:
    n_rounds: int = 100
    max_depth: int = 4
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    min_leaf: int = 1
    seed: int = 0


@dataclass
class BoostedTrees:
    trees: list[DecisionTree]
    learning_rate: float
    base_score: float  # log-odds
    n_features: int

    def margin(self, X: np.ndarray, rounds: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.full(X.shape[0], self.base_score)
        for t in self.trees[:rounds]:
            out += self.learning_rate * t.predict(X)
        return out

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.margin(X))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def train_boosted(X, y, cfg: BoostConfig | None = None) -> BoostedTrees:
    """Logistic-loss boosting with second-order leaf values and split gains."""
    cfg = cfg or BoostConfig()
    if cfg.n_rounds < 0 or cfg.max_depth < 0 or cfg.reg_lambda < 0 or cfg.learning_rate <= 0:
        raise InvalidConfig(f"invalid boosting config: {cfg}")
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y)
    rate = float(y.mean())
    base = math.log(rate / (1.0 - rate))
    F = np.full(len(y), base)
    trees = []
    for _ in range(cfg.n_rounds):
        p = _sigmoid(F)
        g = p - y
        h = p * (1.0 - p)
        t = grow_gradient_tree(X, g, h, cfg.max_depth, cfg.reg_lambda, cfg.min_leaf)
        trees.append(t)
        F += cfg.learning_rate * t.predict(X)
    return BoostedTrees(trees, cfg.learning_rate, base, X.shape[1])
