"""Bag-of-features summaries and a class-balanced random forest of CART trees."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp.audio import AudioBuffer
from .dsp.features import FRAME_LENGTH, HOP_LENGTH, deltas, mfcc, spectral_descriptors
from .tensor import DimensionError

N_TREES = 100
N_MFCC = 20
SHAPE_DESCRIPTORS = ("centroid", "bandwidth", "skewness", "rolloff")

FEATURE_NAMES = (
    [f"{d}_{s}" for d in SHAPE_DESCRIPTORS for s in ("mean", "std")]
    + ["zcr_mean", "zcr_std"]
    + [f"mfcc{i}_mean" for i in range(1, N_MFCC + 1)]
    + [f"dmfcc{i}_mean" for i in range(1, N_MFCC + 1)]
    + [f"ddmfcc{i}_mean" for i in range(1, N_MFCC + 1)]
)
N_FEATURES = len(FEATURE_NAMES)  # 70


class ForestError(ValueError):
    pass


def bag_of_features(audio: AudioBuffer, min_seconds: float = 3.0) -> np.ndarray:
    """Excerpt-level summary, slot order given by ``FEATURE_NAMES``."""
    if audio.duration + 1e-9 < min_seconds:
        raise DimensionError(f"excerpt is {audio.duration:.3f} s, at least {min_seconds} s required")
    if not np.any(audio.samples):
        warnings.warn("silent excerpt; returning an all-zero feature vector")
        return np.zeros(N_FEATURES)
    desc = spectral_descriptors(audio)
    out = []
    for name in SHAPE_DESCRIPTORS:
        out += [desc[name].mean(), desc[name].std()]
    out += [desc["zcr"].mean(), desc["zcr"].std()]
    c = mfcc(audio, N_MFCC)
    d1 = deltas(c)
    d2 = deltas(d1)
    vec = np.concatenate([out, c.mean(axis=0), d1.mean(axis=0), d2.mean(axis=0)])
    if not np.isfinite(vec).all():
        raise FloatingPointError("non-finite feature value")
    return vec


def write_feature_table(path, features: np.ndarray, labels=None) -> None:
    """CSV whose header names each slot; a leading comment records the framing."""
    with open(path, "w", newline="") as f:
        f.write(f"# frame_length={FRAME_LENGTH} hop={HOP_LENGTH}\n")
        w = csv.writer(f)
        w.writerow((["label"] if labels is not None else []) + list(FEATURE_NAMES))
        for i, row in enumerate(np.asarray(features)):
            w.writerow(([int(labels[i])] if labels is not None else []) + [repr(float(v)) for v in row])


def balanced_weights(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-class weights inversely proportional to class frequency, n / (K * count)."""
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(n_classes)
    w[present] = len(y) / (present.sum() * counts[present])
    return w


@dataclass
class Tree:
    feature: list[int] = field(default_factory=list)  # -1 at leaves
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[list[float]] = field(default_factory=list)  # weighted class histogram

    def _add(self, hist) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append([float(v) for v in hist])
        return len(self.feature) - 1

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(len(X), dtype=int)
        active = feat[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = X[rows, feat[n]] <= thr[n]
            node[rows] = np.where(go_left, left[n], right[n])
            active = feat[node] >= 0
        return node

    def proba(self, X: np.ndarray) -> np.ndarray:
        hist = np.asarray(self.value)[self.apply(X)]
        return hist / hist.sum(axis=1, keepdims=True)


def _best_split(X, W, rows, features):
    """Lowest weighted Gini over candidate features; returns (score, feature, threshold) or None."""
    best = None
    for f in features:
        v = X[rows, f]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        valid = vs[:-1] < vs[1:]
        if not valid.any():
            continue
        cw = np.cumsum(W[rows][order], axis=0)
        left = cw[:-1][valid]
        right = cw[-1] - left
        wl = left.sum(axis=1)
        wr = right.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            score = (wl - (left**2).sum(axis=1) / wl) + (wr - (right**2).sum(axis=1) / wr)
        score = np.where((wl > 0) & (wr > 0), score, np.inf)
        j = int(np.argmin(score))
        if not np.isfinite(score[j]):
            continue
        if best is None or score[j] < best[0]:
            pos = np.flatnonzero(valid)[j]
            best = (score[j], f, 0.5 * (vs[pos] + vs[pos + 1]))
    return best


def grow_tree(X: np.ndarray, y: np.ndarray, sample_weight: np.ndarray, n_classes: int,
              max_features: int, rng: np.random.Generator) -> Tree:
    """CART with Gini impurity, grown until nodes are pure or cannot be split."""
    W = np.zeros((len(y), n_classes))
    W[np.arange(len(y)), y] = sample_weight
    tree = Tree()
    root = tree._add(W.sum(axis=0))
    stack = [(root, np.flatnonzero(sample_weight > 0))]
    d = X.shape[1]
    while stack:
        node, rows = stack.pop()
        hist = np.asarray(tree.value[node])
        if len(rows) < 2 or np.count_nonzero(hist) < 2:
            continue
        perm = rng.permutation(d)
        split = _best_split(X, W, rows, perm[:max_features])
        if split is None:
            # every candidate was constant here; fall back to the remaining features
            split = _best_split(X, W, rows, perm[max_features:])
        if split is None:
            continue
        _, f, thr = split
        go_left = X[rows, f] <= thr
        lrows, rrows = rows[go_left], rows[~go_left]
        l = tree._add(W[lrows].sum(axis=0))
        r = tree._add(W[rrows].sum(axis=0))
        tree.feature[node], tree.threshold[node] = int(f), float(thr)
        tree.left[node], tree.right[node] = l, r
        stack.append((r, rrows))
        stack.append((l, lrows))
    return tree


@dataclass
class ForestModel:
    trees: list[Tree]
    n_features: int
    n_classes: int
    class_weights: list[float]
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "n_features": self.n_features, "n_classes": self.n_classes, "seed": self.seed,
            "class_weights": self.class_weights, "trees": [vars(t) for t in self.trees],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ForestModel":
        return cls([Tree(**t) for t in d["trees"]], d["n_features"], d["n_classes"], d["class_weights"], d["seed"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "ForestModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def forest_train(X, y, seed: int = 0, n_trees: int = N_TREES, n_classes: int | None = None,
                 bootstrap: bool = True, max_features: int | None = None) -> ForestModel:
    """Bootstrap-aggregated CART trees with inverse-frequency class weights.

    Tree ``i`` draws from its own generator seeded by ``(seed, i)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or len(X) != len(y):
        raise DimensionError(f"features {X.shape} and labels {y.shape} do not align")
    if len(np.unique(y)) < 2:
        raise ForestError("training a classifier needs at least two classes")
    n_classes = n_classes or int(y.max()) + 1
    cw = balanced_weights(y, n_classes)
    m = max_features or max(1, int(np.sqrt(X.shape[1])))
    trees = []
    for i in range(n_trees):
        rng = np.random.default_rng([seed, i])
        if bootstrap:
            counts = np.bincount(rng.integers(0, len(y), len(y)), minlength=len(y))
        else:
            counts = np.ones(len(y))
        trees.append(grow_tree(X, y, counts * cw[y], n_classes, m, rng))
    return ForestModel(trees, X.shape[1], n_classes, cw.tolist(), seed)


def forest_proba(model: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_features:
        raise DimensionError(f"feature length {X.shape[1]}, model expects {model.n_features}")
    p = np.mean([t.proba(X) for t in model.trees], axis=0)
    return p[0] if single else p


def forest_predict(model: ForestModel, x):
    """Class index (ties to the lowest index) and the averaged leaf-histogram probabilities."""
    p = forest_proba(model, x)
    return np.argmax(p, axis=-1), p
