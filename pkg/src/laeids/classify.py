"""Tiered pool of from-scratch tree ensembles and the resource-based tier policy.

LIGHT is 30 boosted stumps, MEDIUM 60 depth-3 boosted trees, HEAVY 120
depth-5 boosted trees (or a 200-tree bagged forest). Boosting uses Newton
leaf values with L2 regularisation on the logistic (binary) or softmax
(multiclass) loss. Scores are rankings, not calibrated probabilities.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from laeids import kernels
from laeids.errors import DimensionMismatch, IncompletePool, InvalidRange, NonFiniteFeature, SingleClassInput


class Tier(str, Enum):
    LIGHT = "LIGHT"
    MEDIUM = "MEDIUM"
    HEAVY = "HEAVY"


class Kind(str, Enum):
    BOOSTED_STUMPS = "BOOSTED_STUMPS"
    GBDT = "GBDT"
    FOREST = "FOREST"


@dataclass(frozen=True)
class TierConfig:
    kind: Kind
    rounds: int
    depth: int
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    min_leaf: int = 1
    min_child_weight: float = 1e-3
    seed: int = 0


DEFAULT_TIERS = {
    Tier.LIGHT: TierConfig(Kind.BOOSTED_STUMPS, rounds=30, depth=1),
    Tier.MEDIUM: TierConfig(Kind.GBDT, rounds=60, depth=3),
    Tier.HEAVY: TierConfig(Kind.GBDT, rounds=120, depth=5),
}
FOREST_HEAVY = TierConfig(Kind.FOREST, rounds=200, depth=8, reg_lambda=0.0, min_child_weight=0.0)


def tier_config(tier: Tier, forest: bool = False, seed: int = 0) -> TierConfig:
    cfg = FOREST_HEAVY if (forest and Tier(tier) is Tier.HEAVY) else DEFAULT_TIERS[Tier(tier)]
    return replace(cfg, seed=seed)


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf. ``value`` has one column per output."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        leaf = kernels.apply_tree(X, self.feature, self.threshold, self.left, self.right)
        return self.value[leaf]


def build_tree(X, G, H, rows, max_depth, reg_lambda, min_leaf=1, min_child_weight=0.0,
               rng=None, max_features=None, min_gain=1e-12) -> Tree:
    """Grow one tree breadth-first on gradient/hessian columns ``G``/``H`` (n, K)."""
    d = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []
    all_ok = np.ones(d, dtype=np.bool_)

    def leaf_value(r):
        return -G[r].sum(axis=0) / (H[r].sum(axis=0) + reg_lambda)

    queue = [(np.asarray(rows, dtype=np.int64), 0)]
    feature.append(-1)
    threshold.append(0.0)
    left.append(-1)
    right.append(-1)
    value.append(None)
    head = 0
    while head < len(queue):
        r, depth = queue[head]
        node = head
        head += 1
        value[node] = leaf_value(r)
        if depth >= max_depth:
            continue
        ok = all_ok
        if max_features is not None and max_features < d:
            ok = np.zeros(d, dtype=np.bool_)
            ok[rng.choice(d, size=max_features, replace=False)] = True
        f, thr, gain = kernels.best_split(X, r, G, H, ok, float(reg_lambda), int(min_leaf), float(min_child_weight))
        if f < 0 or not gain > min_gain:
            continue
        go_left = X[r, f] <= thr
        feature[node] = int(f)
        threshold[node] = float(thr)
        for child_rows in (r[go_left], r[~go_left]):
            queue.append((child_rows, depth + 1))
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(None)
        left[node] = len(queue) - 2
        right[node] = len(queue) - 1
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64), np.vstack(value))


@dataclass
class ClassifierModel:
    tier: Tier
    kind: Kind
    trees: list
    base: np.ndarray  # initial margin per output column
    class_names: tuple
    n_inputs: int
    feature_mask: Optional[np.ndarray] = None  # tabular mask used at training time
    extra_dims: int = 0  # representation dims appended after the masked features
    train_loss: list = field(default_factory=list)
    train_accuracy: float = 0.0
    config: Optional[TierConfig] = None

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def margins(self, X: np.ndarray) -> np.ndarray:
        out = np.tile(self.base, (X.shape[0], 1))
        for t in self.trees:
            out += t.predict(X)
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.meta(), sort_keys=True).encode())
        for t in self.trees:
            for a in (t.feature, t.threshold, t.left, t.right, t.value):
                h.update(np.ascontiguousarray(a).tobytes())
        h.update(self.base.tobytes())
        return h.hexdigest()[:16]

    def meta(self) -> dict:
        return {
            "tier": self.tier.value,
            "kind": self.kind.value,
            "class_names": list(self.class_names),
            "n_inputs": self.n_inputs,
            "feature_mask": mask_to_bits(self.feature_mask) if self.feature_mask is not None else None,
            "extra_dims": self.extra_dims,
            "train_accuracy": self.train_accuracy,
            "train_loss": list(self.train_loss),
            "config": {**asdict(self.config), "kind": self.config.kind.value} if self.config else None,
        }

    def to_arrays(self) -> dict:
        starts = np.cumsum([0] + [t.n_nodes for t in self.trees]).astype(np.int64)
        cat = lambda name: (np.concatenate([getattr(t, name) for t in self.trees])
                            if self.trees else np.zeros(0))
        return {
            "tree_starts": starts,
            "feature": cat("feature").astype(np.int64),
            "threshold": cat("threshold").astype(np.float64),
            "left": cat("left").astype(np.int64),
            "right": cat("right").astype(np.int64),
            "value": (np.vstack([t.value for t in self.trees]) if self.trees
                      else np.zeros((0, self.base.size))),
            "base": self.base,
        }

    @classmethod
    def from_parts(cls, meta: dict, arrays: Mapping[str, np.ndarray]) -> "ClassifierModel":
        s = arrays["tree_starts"]
        trees = [Tree(*(arrays[n][s[i]:s[i + 1]].copy() for n in ("feature", "threshold", "left", "right", "value")))
                 for i in range(len(s) - 1)]
        cfg = meta.get("config")
        if cfg:
            cfg = TierConfig(**{**cfg, "kind": Kind(cfg["kind"])})
        mask = meta.get("feature_mask")
        return cls(Tier(meta["tier"]), Kind(meta["kind"]), trees, np.asarray(arrays["base"], dtype=np.float64),
                   tuple(meta["class_names"]), int(meta["n_inputs"]),
                   bits_to_mask(mask) if mask is not None else None, int(meta.get("extra_dims", 0)),
                   list(meta.get("train_loss", [])), float(meta.get("train_accuracy", 0.0)), cfg)


def mask_to_bits(mask) -> str:
    return "".join("1" if b else "0" for b in np.asarray(mask, dtype=bool))


def bits_to_mask(bits: str) -> np.ndarray:
    return np.array([c == "1" for c in bits], dtype=bool)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _logloss(F, y, K):
    if K == 2:
        f = F[:, 0]
        # log(1 + exp(-s f)) with s = +-1
        s = np.where(y == 1, 1.0, -1.0)
        return float(np.mean(np.logaddexp(0.0, -s * f)))
    Z = F - F.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Z).sum(axis=1))
    return float(np.mean(lse - Z[np.arange(len(y)), y]))


def _scores_from_margins(kind: Kind, M: np.ndarray, K: int) -> np.ndarray:
    if kind is Kind.FOREST:
        S = np.clip(M, 0.0, None)
        return S / S.sum(axis=1, keepdims=True)
    if K == 2:
        p = _sigmoid(M[:, 0])
        return np.column_stack([1.0 - p, p])
    return _softmax(M)


def _check_features(X):
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("feature matrix contains NaN or infinite values")


def _fit_boosted(X, y, K, cfg: TierConfig):
    n = X.shape[0]
    cols = 1 if K == 2 else K
    counts = np.bincount(y, minlength=K).astype(np.float64)
    prior = np.clip(counts / n, 1e-6, 1 - 1e-6)
    base = np.array([math.log(prior[1] / prior[0])]) if K == 2 else np.log(prior)
    F = np.tile(base, (n, 1))
    Y = np.eye(K)[y]
    rows = np.arange(n, dtype=np.int64)
    trees, losses = [], [_logloss(F, y, K)]
    for _ in range(cfg.rounds):
        if K == 2:
            p = _sigmoid(F[:, 0])
            g = (p - y)[:, None]
            h = np.maximum(p * (1.0 - p), 1e-16)[:, None]
            grads = [(g, h)]
        else:
            P = _softmax(F)
            grads = [((P[:, k] - Y[:, k])[:, None], np.maximum(P[:, k] * (1.0 - P[:, k]), 1e-16)[:, None])
                     for k in range(K)]
        round_trees = []
        step = np.zeros_like(F)
        for k, (g, h) in enumerate(grads):
            t = build_tree(X, g, h, rows, cfg.depth, cfg.reg_lambda, cfg.min_leaf, cfg.min_child_weight)
            leaf_vals = np.zeros((t.n_nodes, cols))
            leaf_vals[:, k] = cfg.learning_rate * t.value[:, 0]
            t.value = leaf_vals
            step += t.predict(X)
            round_trees.append(t)
        # backtrack so the training loss never goes up
        scale = 1.0
        new_loss = _logloss(F + step, y, K)
        while new_loss > losses[-1] and scale > 1e-3:
            scale *= 0.5
            new_loss = _logloss(F + scale * step, y, K)
        if new_loss > losses[-1]:
            scale, new_loss = 0.0, losses[-1]
        for t in round_trees:
            t.value = t.value * scale
        F = F + scale * step
        trees.extend(round_trees)
        losses.append(new_loss)
    return trees, base, losses


def _fit_forest(X, y, K, cfg: TierConfig):
    n, d = X.shape
    rng = np.random.default_rng(cfg.seed)
    Y = np.eye(K)[y]
    G, H = -Y, np.ones((n, K))
    max_features = max(1, int(math.ceil(math.sqrt(d))))
    trees = []
    for _ in range(cfg.rounds):
        rows = np.sort(rng.integers(0, n, size=n)).astype(np.int64)
        t = build_tree(X, G, H, rows, cfg.depth, 0.0, cfg.min_leaf, 0.0, rng=rng, max_features=max_features)
        t.value = t.value / cfg.rounds
        trees.append(t)
    return trees, np.zeros(K), []


def train_tier(tier: Tier, features, labels, cfg: Optional[TierConfig] = None,
               class_names: Optional[Sequence[str]] = None, feature_mask=None, extra_dims: int = 0,
               seed: int = 0) -> ClassifierModel:
    """Train one tier's ensemble on an already masked feature matrix.

    ``labels`` are class indices; ``class_names`` defaults to ``"0".."K-1"``.
    """
    tier = Tier(tier)
    cfg = cfg or tier_config(tier, seed=seed)
    X = np.ascontiguousarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _check_features(X)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch("features and labels disagree in length")
    K = len(class_names) if class_names is not None else int(y.max()) + 1
    K = max(K, 2)
    if np.unique(y).size < 2:
        raise SingleClassInput("training labels contain a single class")
    if cfg.kind is Kind.FOREST:
        trees, base, losses = _fit_forest(X, y, K, cfg)
    else:
        trees, base, losses = _fit_boosted(X, y, K, cfg)
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(K))
    mask = None if feature_mask is None else np.asarray(feature_mask, dtype=bool)
    model = ClassifierModel(tier, cfg.kind, trees, np.asarray(base, dtype=np.float64), names, X.shape[1],
                            mask, extra_dims, losses, 0.0, cfg)
    model.train_accuracy = float(np.mean(predict_batch(model, X).argmax(axis=1) == y))
    return model


def predict_batch(model: ClassifierModel, X) -> np.ndarray:
    """Class scores, shape (n, n_classes); each row sums to 1."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    if X.shape[1] != model.n_inputs:
        raise DimensionMismatch(f"model expects {model.n_inputs} features, got {X.shape[1]}")
    _check_features(X)
    return _scores_from_margins(model.kind, model.margins(X), model.n_classes)


@dataclass(frozen=True)
class Verdict:
    predicted: int
    is_malicious: bool
    scores: tuple
    tier: Tier
    n_features: int

    def to_json(self) -> dict:
        return {"predicted": self.predicted, "is_malicious": self.is_malicious,
                "scores": [round(s, 12) for s in self.scores], "tier": self.tier.value,
                "n_features": self.n_features}


def verdicts_from_scores(model: ClassifierModel, S: np.ndarray) -> list:
    out = []
    for row in S:
        k = int(np.argmax(row))
        out.append(Verdict(k, k != 0, tuple(float(v) for v in row), model.tier, model.n_inputs))
    return out


def predict(model: ClassifierModel, feature_vector) -> Verdict:
    v = np.asarray(feature_vector, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch("predict takes one feature vector")
    return verdicts_from_scores(model, predict_batch(model, v[None, :]))[0]


@dataclass(frozen=True)
class ResourceStatus:
    battery_fraction: float = 1.0
    cpu_load: float = 0.0
    memory_free_fraction: float = 1.0

    def __post_init__(self):
        for name in ("battery_fraction", "cpu_load", "memory_free_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidRange(f"{name}={v} outside [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ResourcePolicy:
    heavy_min_battery: float = 0.5
    heavy_max_cpu: float = 0.5
    light_below_battery: float = 0.2
    light_above_cpu: float = 0.8


def select_tier(pool, status: ResourceStatus, policy: ResourcePolicy = ResourcePolicy()) -> Tier:
    """LIGHT on low battery or high CPU, HEAVY with plenty of both, MEDIUM otherwise.

    ``pool`` is anything supporting ``in`` over tiers (a tier->model dict works).
    """
    missing = [t.value for t in Tier if t not in pool]
    if missing:
        raise IncompletePool(f"pool lacks tiers {missing}")
    if status.battery_fraction < policy.light_below_battery or status.cpu_load > policy.light_above_cpu:
        return Tier.LIGHT
    if status.battery_fraction >= policy.heavy_min_battery and status.cpu_load <= policy.heavy_max_cpu:
        return Tier.HEAVY
    return Tier.MEDIUM
