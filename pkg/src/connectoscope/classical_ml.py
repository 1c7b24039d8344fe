"""Entropy random forest and the binary classification metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import AllZero, LengthMismatch, NoSplit, SingleClass

# gains at or below this are rounding noise, not information
MIN_GAIN = 1e-12


def entropy(class_counts: Sequence[float]) -> float:
    """Shannon entropy in bits, with 0 log 0 = 0."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise AllZero("entropy of an empty node")
    p = counts[counts > 0] / total
    return float(-(p * np.log2(p)).sum()) + 0.0


def _binary_entropy(pos: np.ndarray, n: np.ndarray) -> np.ndarray:
    p = pos / n
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(q > 0, q * np.log2(q), 0.0))
    return h


def best_split(
    features: np.ndarray, labels: np.ndarray, candidate_features: Sequence[int] | None = None
) -> tuple[int, float, float]:
    """Best (feature, threshold, information gain) over midpoint thresholds.

    Samples with ``x <= threshold`` go left.  Ties in gain resolve to the
    lowest feature index, then the lowest threshold.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    n = y.shape[0]
    if n < 2:
        raise NoSplit("need at least two samples")
    cand = np.arange(X.shape[1]) if candidate_features is None else np.sort(np.asarray(candidate_features))
    pos_total = int(y.sum())
    if pos_total in (0, n):
        raise NoSplit("node is pure")

    xc = X[:, cand]
    order = np.argsort(xc, axis=0, kind="stable")
    xs = np.take_along_axis(xc, order, axis=0)
    ys = y[order]
    pos_left = np.cumsum(ys, axis=0)[:-1].astype(np.float64)
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    pos_right = pos_total - pos_left

    parent = float(_binary_entropy(np.float64(pos_total), np.float64(n)))
    children = (n_left * _binary_entropy(pos_left, n_left) + n_right * _binary_entropy(pos_right, n_right)) / n
    gains = parent - children
    distinct = xs[1:] > xs[:-1]
    gains = np.where(distinct, gains, -np.inf)

    # feature-major so argmax picks the lowest feature, then the lowest threshold
    flat = gains.T.ravel()
    best = int(np.argmax(flat))
    gain = float(flat[best])
    if not gain > MIN_GAIN:
        raise NoSplit("no split improves entropy")
    f_pos, row = divmod(best, n - 1)
    lo, hi = xs[row, f_pos], xs[row + 1, f_pos]
    threshold = lo + (hi - lo) / 2.0
    if threshold >= hi:
        threshold = lo
    return int(cand[f_pos]), float(threshold), gain


@dataclass
class DecisionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def predict(self, features: np.ndarray) -> np.ndarray:
        X = np.asarray(features, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return self.value[node]
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, nxt, node)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.int64),
        )


def _majority(y: np.ndarray) -> int:
    # ties go to the positive class
    return int(2 * int(y.sum()) >= y.shape[0])


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    max_depth: int = 6,
    max_features: int | None = None,
    rng: np.random.Generator | None = None,
) -> DecisionTree:
    n_features = X.shape[1]
    m = n_features if max_features is None else min(max_features, n_features)
    rng = rng if rng is not None else np.random.default_rng(0)
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[int] = []

    def new_node(idx: np.ndarray) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(_majority(y[idx]))
        return len(feature) - 1

    def grow(idx: np.ndarray, depth: int) -> int:
        node = new_node(idx)
        if depth >= max_depth or idx.shape[0] < 2:
            return node
        cand = np.sort(rng.choice(n_features, size=m, replace=False))
        try:
            f, t, _ = best_split(X[idx], y[idx], cand)
        except NoSplit:
            return node
        go_left = X[idx, f] <= t
        feature[node], threshold[node] = f, t
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(X.shape[0]), 0)
    return DecisionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.int64),
    )


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 500
    max_depth: int = 6
    max_features_per_split: int = 96
    criterion: str = "entropy"
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.max_features_per_split < 1:
            raise ValueError("n_trees, max_depth and max_features_per_split must be >= 1")
        if self.criterion != "entropy":
            raise ValueError("only the entropy criterion is implemented")

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class Forest:
    trees: list[DecisionTree]
    config: ForestConfig
    n_features: int = 0

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return predict_proba(self, features)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.predict_proba(features) >= 0.5).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "config": self.config.echo(),
            "n_features": self.n_features,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        return cls([DecisionTree.from_dict(t) for t in d["trees"]], ForestConfig(**d["config"]), d["n_features"])


def fit_forest(features: np.ndarray, labels: np.ndarray, cfg: ForestConfig = ForestConfig()) -> Forest:
    """Bagged entropy trees; tree i draws from ``default_rng(seed + i)``."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise LengthMismatch(f"features {X.shape} vs {y.shape[0]} labels")
    if X.shape[0] < 2:
        raise SingleClass("need at least two samples")
    if np.unique(y).size < 2:
        raise SingleClass("training labels contain a single class")
    n = X.shape[0]
    trees = []
    for i in range(cfg.n_trees):
        rng = np.random.default_rng(cfg.seed + i)
        idx = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
        trees.append(fit_tree(X[idx], y[idx], cfg.max_depth, cfg.max_features_per_split, rng))
    return Forest(trees, cfg, X.shape[1])


def predict_proba(forest: Forest, features: np.ndarray) -> np.ndarray:
    """Fraction of trees voting for the positive class."""
    X = np.asarray(features, dtype=np.float64)
    votes = np.zeros(X.shape[0])
    for tree in forest.trees:
        votes += tree.predict(X)
    return votes / len(forest.trees)


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "MetricsReport":
        total = tp + fp + tn + fn
        return cls(
            tp,
            fp,
            tn,
            fn,
            accuracy=(tp + tn) / total if total else None,
            sensitivity=tp / (tp + fn) if tp + fn else None,
            specificity=tn / (tn + fp) if tn + fp else None,
        )

    def render(self) -> str:
        def fmt(x):
            return "NA" if x is None else f"{x:.3f}"

        return (
            f"accuracy={fmt(self.accuracy)} sensitivity={fmt(self.sensitivity)} "
            f"specificity={fmt(self.specificity)} tp={self.tp} fp={self.fp} tn={self.tn} fn={self.fn}"
        )

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def compute_metrics(predictions: Sequence[int], labels: Sequence[int]) -> MetricsReport:
    """Confusion counts with schizophrenia (1) as the positive class."""
    pred = np.asarray(predictions).astype(np.int64).ravel()
    true = np.asarray(labels).astype(np.int64).ravel()
    if pred.shape != true.shape:
        raise LengthMismatch(f"{pred.size} predictions vs {true.size} labels")
    if not np.all(np.isin(true, (0, 1))) or not np.all(np.isin(pred, (0, 1))):
        raise ValueError("predictions and labels must be 0 or 1")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    return MetricsReport.from_counts(tp, fp, tn, fn)


def threshold_predictions(proba: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Hard labels; a probability exactly at the threshold is positive."""
    return (np.asarray(proba) >= threshold).astype(np.int64)


__all__ = [
    "DecisionTree",
    "Forest",
    "ForestConfig",
    "MetricsReport",
    "best_split",
    "compute_metrics",
    "entropy",
    "fit_forest",
    "fit_tree",
    "predict_proba",
    "threshold_predictions",
]
