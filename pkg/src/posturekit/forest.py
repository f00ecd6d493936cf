"""From-scratch random forest: Gini splits, bootstrap bagging, importances.

Determinism contract: one root seed derives per-tree child seeds through the
splitmix64 mixer, and training first puts samples into a canonical order
(lexicographic by feature values, then label), so the same data and seed
always produce byte-identical serialized models regardless of input order or
how many trees other runs requested.

Split search: candidate thresholds are midpoints between consecutive distinct
sorted values of each of max_features randomly chosen features; the best
weighted Gini impurity decrease wins, ties broken by lowest feature index and
then lowest threshold. Zero-decrease splits are still taken on impure nodes
(stopping is purely on purity, min_samples_leaf, and max_depth), which is
what guarantees memorization of consistent training sets. If none of the
sampled features admits a valid split, the remaining features are searched
before the node is forced into a leaf.
"""

from __future__ import annotations

import io
import struct
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ModelFormatError
from .features import N_FEATURES, FeatureVector
from .postures import PostureLabel
from .seeding import derive_seed

_MAGIC = b"FRST"
_VERSION = 1

_LEAF = -1


@dataclass(frozen=True)
class TrainConfig:
    """Forest hyperparameters; only n_trees has an externally fixed value (100)."""

    n_trees: int = 100
    max_features: int = 5  # floor(sqrt(32))
    min_samples_leaf: int = 1
    max_depth: Optional[int] = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigurationError("n_trees must be >= 1")
        if not (1 <= self.max_features <= N_FEATURES):
            raise ConfigurationError(f"max_features must be in [1, {N_FEATURES}]")
        if self.min_samples_leaf < 1:
            raise ConfigurationError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigurationError("max_depth must be >= 1 when set")


class DecisionTree:
    """One Gini tree as flat node arrays.

    feature[i] == -1 marks a leaf, whose `left[i]` indexes its row in the
    histogram array; internal nodes carry a threshold and child node indices.
    """

    __slots__ = ("feature", "threshold", "left", "right", "histograms")

    def __init__(self, feature, threshold, left, right, histograms):
        self.feature = np.asarray(feature, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.histograms = np.asarray(histograms, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def traverse(self, x: np.ndarray) -> np.ndarray:
        """Walk one vector to a leaf; returns that leaf's class histogram."""
        node = 0
        while self.feature[node] != _LEAF:
            if x[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return self.histograms[self.left[node]]


@dataclass
class RandomForestModel:
    """Trained forest plus normalized Gini importances over the 32 features."""

    trees: list[DecisionTree]
    classes: tuple[PostureLabel, ...]
    importances: np.ndarray
    n_features: int = N_FEATURES
    _flat: Optional[dict] = field(default=None, repr=False, compare=False)

    def flat_arrays(self) -> dict:
        """Concatenated node arrays across trees, built once, for fast predict."""
        if self._flat is None:
            offsets = np.cumsum([0] + [t.n_nodes for t in self.trees[:-1]])
            hist_offsets = np.cumsum([0] + [t.histograms.shape[0] for t in self.trees[:-1]])
            feature = np.concatenate([t.feature for t in self.trees])
            threshold = np.concatenate([t.threshold for t in self.trees])
            left = np.concatenate([
                t.left + np.where(t.feature == _LEAF, h_off, off)
                for t, off, h_off in zip(self.trees, offsets, hist_offsets)
            ])
            right = np.concatenate([
                t.right + off for t, off in zip(self.trees, offsets)
            ])
            hist = np.concatenate([t.histograms for t in self.trees], axis=0)
            sums = hist.sum(axis=1, keepdims=True)
            self._flat = {
                "roots": offsets.astype(np.int64),
                "feature": feature,
                "threshold": threshold,
                "left": left.astype(np.int64),
                "right": right.astype(np.int64),
                "probs": hist / sums,
            }
        return self._flat


def _gini_from_counts(counts: np.ndarray, total: float) -> float:
    if total <= 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.sum(p * p))


def _best_split_for_feature(
    x: np.ndarray, y: np.ndarray, n_classes: int, min_leaf: int,
    parent_gini: float,
) -> Optional[tuple[float, float]]:
    """Best (decrease, threshold) over midpoints of consecutive distinct values."""
    n = x.size
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ys = y[order]
    boundaries = np.flatnonzero(xs[:-1] < xs[1:])
    if boundaries.size == 0:
        return None
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), ys] = 1.0
    cum = np.cumsum(onehot, axis=0)
    total = cum[-1]

    left_n = (boundaries + 1).astype(np.float64)
    right_n = n - left_n
    valid = (left_n >= min_leaf) & (right_n >= min_leaf)
    if not np.any(valid):
        return None
    left_counts = cum[boundaries]
    right_counts = total - left_counts
    gini_left = 1.0 - np.sum((left_counts / left_n[:, None]) ** 2, axis=1)
    gini_right = 1.0 - np.sum((right_counts / right_n[:, None]) ** 2, axis=1)
    weighted = (left_n * gini_left + right_n * gini_right) / n
    decrease = np.where(valid, parent_gini - weighted, -np.inf)
    best = int(np.argmax(decrease))  # argmax takes the first max: lowest threshold
    if not np.isfinite(decrease[best]):
        return None
    b = boundaries[best]
    threshold = 0.5 * (xs[b] + xs[b + 1])
    return float(decrease[best]), float(threshold)


def _grow_tree(
    X: np.ndarray, y: np.ndarray, cfg: TrainConfig, n_classes: int,
    rng: np.random.Generator, importance_acc: np.ndarray,
) -> DecisionTree:
    n_total, n_feat = X.shape
    if cfg.bootstrap:
        sample = rng.integers(0, n_total, n_total)
    else:
        sample = np.arange(n_total)

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    histograms: list[np.ndarray] = []
    mtry = min(cfg.max_features, n_feat)

    # preorder DFS; stack entries are (row indices, depth, parent slot, is_left)
    stack: list[tuple[np.ndarray, int, int, bool]] = [(sample, 0, -1, False)]
    while stack:
        rows, depth, parent, is_left = stack.pop()
        node_id = len(feature)
        if parent >= 0:
            if is_left:
                left[parent] = node_id
            else:
                right[parent] = node_id

        counts = np.bincount(y[rows], minlength=n_classes).astype(np.float64)
        node_gini = _gini_from_counts(counts, rows.size)
        depth_capped = cfg.max_depth is not None and depth >= cfg.max_depth
        splittable = rows.size >= 2 * cfg.min_samples_leaf

        best = None
        if node_gini > 0.0 and not depth_capped and splittable:
            candidates = np.sort(rng.choice(n_feat, size=mtry, replace=False))
            best = _search_features(X, y, rows, candidates, n_classes, cfg, node_gini)
            if best is None and mtry < n_feat:
                rest = np.setdiff1d(np.arange(n_feat), candidates)
                best = _search_features(X, y, rows, rest, n_classes, cfg, node_gini)

        if best is None:
            feature.append(_LEAF)
            threshold.append(0.0)
            left.append(len(histograms))
            right.append(_LEAF)
            histograms.append(counts)
            continue

        f, thr, decrease = best
        importance_acc[f] += (rows.size / n_total) * decrease
        feature.append(f)
        threshold.append(thr)
        left.append(-1)
        right.append(-1)
        go_left = X[rows, f] <= thr
        stack.append((rows[~go_left], depth + 1, node_id, False))
        stack.append((rows[go_left], depth + 1, node_id, True))

    return DecisionTree(feature, threshold, left, right, np.array(histograms))


def _search_features(X, y, rows, candidates, n_classes, cfg, node_gini):
    """Scan candidate features in ascending order; strict improvement wins,
    so ties resolve to the lowest feature index."""
    best: Optional[tuple[int, float, float]] = None
    ysub = y[rows]
    for f in candidates:
        found = _best_split_for_feature(
            X[rows, f], ysub, n_classes, cfg.min_samples_leaf, node_gini
        )
        if found is None:
            continue
        decrease, thr = found
        if best is None or decrease > best[2]:
            best = (int(f), thr, decrease)
    return best


def _prepare_matrix(features: Sequence[FeatureVector]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([vec.values for vec in features])
    labels = [vec.label for vec in features]
    if any(lab is None for lab in labels):
        raise ConfigurationError("training requires labeled feature vectors")
    order = list(PostureLabel)
    y = np.array([order.index(lab) for lab in labels], dtype=np.int64)
    return X, y


def train(
    features: Sequence[FeatureVector],
    cfg: TrainConfig = TrainConfig(),
    feature_indices: Optional[Sequence[int]] = None,
) -> RandomForestModel:
    """Fit the forest on labeled feature vectors.

    feature_indices optionally restricts which columns split candidates may
    come from (modality ablations); vectors keep their full width and the
    importances of excluded columns stay zero.
    """
    X, y = _prepare_matrix(features)
    return train_matrix(X, y, cfg, feature_indices)


def train_matrix(
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    feature_indices: Optional[Sequence[int]] = None,
) -> RandomForestModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ConfigurationError("X and y shapes disagree")
    if X.shape[0] < 2:
        raise ConfigurationError("training needs at least 2 samples")
    if not np.all(np.isfinite(X)):
        raise ConfigurationError("training features must be finite")
    n_classes = len(PostureLabel)
    if np.unique(y).size < 2:
        warnings.warn("single-class training data; model degenerates to one leaf",
                      stacklevel=2)

    # canonical sample order: training becomes invariant to input permutation
    order = np.lexsort((y,) + tuple(X[:, f] for f in range(X.shape[1] - 1, -1, -1)))
    X = X[order]
    y = y[order]

    if feature_indices is not None:
        allowed = np.asarray(sorted(feature_indices), dtype=np.int64)
        if allowed.size == 0 or allowed[0] < 0 or allowed[-1] >= X.shape[1]:
            raise ConfigurationError("feature_indices out of range")
        Xsub = X[:, allowed]
    else:
        allowed = np.arange(X.shape[1])
        Xsub = X

    importances_sub = np.zeros(allowed.size)
    trees: list[DecisionTree] = []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng(derive_seed(cfg.seed, "tree", t))
        tree = _grow_tree(Xsub, y, cfg, n_classes, rng, importances_sub)
        trees.append(_remap_tree(tree, allowed))

    importances = np.zeros(X.shape[1])
    importances[allowed] = importances_sub
    total = importances.sum()
    if total > 0:
        importances = importances / total
    return RandomForestModel(
        trees=trees,
        classes=tuple(PostureLabel),
        importances=importances,
        n_features=X.shape[1],
    )


def _remap_tree(tree: DecisionTree, allowed: np.ndarray) -> DecisionTree:
    """Map split feature ids from the restricted column space back to full width."""
    if np.array_equal(allowed, np.arange(allowed.size)):
        return tree
    feature = tree.feature.copy()
    internal = feature != _LEAF
    feature[internal] = allowed[feature[internal]]
    return DecisionTree(feature, tree.threshold, tree.left, tree.right, tree.histograms)


def predict(model: RandomForestModel, vector: FeatureVector | np.ndarray) -> tuple[PostureLabel, np.ndarray]:
    """Classify one window; returns (label, per-class probabilities).

    Probabilities are the mean of normalized per-tree leaf histograms; the
    argmax tie-break follows class order.
    """
    x = vector.values if isinstance(vector, FeatureVector) else np.asarray(vector, dtype=np.float64)
    if x.shape != (model.n_features,) or not np.all(np.isfinite(x)):
        raise ConfigurationError("prediction input must be a finite vector of model width")
    labels, probs = predict_batch(model, x[None, :])
    return labels[0], probs[0]


def predict_batch(model: RandomForestModel, X: np.ndarray) -> tuple[list[PostureLabel], np.ndarray]:
    """Vectorized prediction: walks all trees for all rows level-by-level."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ConfigurationError("prediction input must be (n, n_features)")
    if not np.all(np.isfinite(X)):
        raise ConfigurationError("prediction input must be finite")
    flat = model.flat_arrays()
    n, t = X.shape[0], len(model.trees)
    ptr = np.broadcast_to(flat["roots"], (n, t)).copy()
    rows = np.arange(n)[:, None]
    while True:
        feat = flat["feature"][ptr]
        active = feat != _LEAF
        if not active.any():
            break
        go_left = X[rows, np.where(active, feat, 0)] <= flat["threshold"][ptr]
        nxt = np.where(go_left, flat["left"][ptr], flat["right"][ptr])
        ptr = np.where(active, nxt, ptr)
    probs = flat["probs"][flat["left"][ptr]].mean(axis=1)
    codes = np.argmax(probs, axis=1)
    order = list(model.classes)
    return [order[c] for c in codes], probs


def importances(model: RandomForestModel) -> np.ndarray:
    """Normalized Gini importances in feature order (sum to 1 when any split exists)."""
    return model.importances.copy()


def benchmark_predict(
    model: RandomForestModel, X: np.ndarray, repeats: int = 3
) -> dict[str, float]:
    """Measure prediction latency; returns microseconds per vector.

    `batch_us` times the batched path the evaluation pipeline uses;
    `single_us` times one-vector calls for reference.
    """
    model.flat_arrays()  # build outside the timed region
    best_batch = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict_batch(model, X)
        best_batch = min(best_batch, (time.perf_counter() - t0) / X.shape[0])
    n_single = min(200, X.shape[0])
    t0 = time.perf_counter()
    for i in range(n_single):
        predict(model, X[i])
    single = (time.perf_counter() - t0) / n_single
    return {"batch_us": best_batch * 1e6, "single_us": single * 1e6}


# ---------------------------------------------------------------------------
# serialization: little-endian, magic + version + class table + node arrays

def save(model: RandomForestModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def serialize(model: RandomForestModel) -> bytes:
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(struct.pack("<I", _VERSION))
    out.write(struct.pack("<I", len(model.classes)))
    for cls in model.classes:
        name = cls.value.encode("utf-8")
        out.write(struct.pack("<H", len(name)))
        out.write(name)
    out.write(struct.pack("<II", model.n_features, len(model.trees)))
    out.write(model.importances.astype("<f8").tobytes())
    for tree in model.trees:
        out.write(struct.pack("<II", tree.n_nodes, tree.histograms.shape[0]))
        out.write(tree.feature.astype("<i4").tobytes())
        out.write(tree.threshold.astype("<f8").tobytes())
        out.write(tree.left.astype("<i4").tobytes())
        out.write(tree.right.astype("<i4").tobytes())
        out.write(tree.histograms.astype("<f8").tobytes())
    return out.getvalue()


def load(path) -> RandomForestModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def deserialize(blob: bytes) -> RandomForestModel:
    view = io.BytesIO(blob)

    def take(n: int) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise ModelFormatError("model file truncated")
        return chunk

    if take(4) != _MAGIC:
        raise ModelFormatError("bad magic; not a forest model file")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    (n_classes,) = struct.unpack("<I", take(4))
    classes = []
    for _ in range(n_classes):
        (length,) = struct.unpack("<H", take(2))
        classes.append(PostureLabel.from_name(take(length).decode("utf-8")))
    n_features, n_trees = struct.unpack("<II", take(8))
    imp = np.frombuffer(take(8 * n_features), dtype="<f8").copy()
    trees = []
    for _ in range(n_trees):
        n_nodes, n_leaves = struct.unpack("<II", take(8))
        feature = np.frombuffer(take(4 * n_nodes), dtype="<i4").copy()
        threshold = np.frombuffer(take(8 * n_nodes), dtype="<f8").copy()
        left = np.frombuffer(take(4 * n_nodes), dtype="<i4").copy()
        right = np.frombuffer(take(4 * n_nodes), dtype="<i4").copy()
        hist = np.frombuffer(take(8 * n_leaves * n_classes), dtype="<f8").copy()
        trees.append(
            DecisionTree(feature, threshold, left, right,
                         hist.reshape(n_leaves, n_classes))
        )
    if view.read(1):
        raise ModelFormatError("trailing bytes after model payload")
    return RandomForestModel(
        trees=trees, classes=tuple(classes), importances=imp, n_features=n_features
    )


def dump_text(model: RandomForestModel, max_trees: int = 3) -> str:
    """Human-readable sketch of the first few trees, for debugging."""
    lines = [
        f"forest: {len(model.trees)} trees, {model.n_features} features, "
        f"classes={[c.value for c in model.classes]}"
    ]
    for t, tree in enumerate(model.trees[:max_trees]):
        lines.append(f"tree {t}: {tree.n_nodes} nodes")

        def walk(node: int, indent: int):
            pad = "  " * indent
            if tree.feature[node] == _LEAF:
                hist = tree.histograms[tree.left[node]]
                lines.append(f"{pad}leaf counts={hist.astype(int).tolist()}")
            else:
                lines.append(
                    f"{pad}f{tree.feature[node]:02d} <= {tree.threshold[node]:.6f}")
                walk(tree.left[node], indent + 1)
                walk(tree.right[node], indent + 1)

        walk(0, 1)
    return "\n".join(lines)
