"""Gradient-boosted decision trees for binary pick success, and 5-member ensembles.

Logistic loss, Newton leaf values ``-sum(g) / (sum(h) + l2)`` with
``g = p - y`` and ``h = p (1 - p)``, exact greedy splits over the sorted
feature values of each node, level-wise growth to ``max_depth``.
A model predicts ``sigmoid(base_score + learning_rate * sum(tree outputs))``.
"""

import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, ModelFormatError, SchemaMismatchError, SingleClassError
from .evaluation import roc_auc
from .features import SCHEMA_VERSION, schema
from .seeding import derive_seed

MODEL_FORMAT = "pickrank.model/1"
RAW_CLIP = 30.0  # keeps probabilities strictly inside (0, 1)
N_MEMBERS = 5


@dataclass(frozen=True)
class TrainConfig:
    max_depth: int = 6
    learning_rate: float = 0.05
    max_trees: int = 1000
    early_stopping_rounds: int = 50
    min_samples_leaf: int = 20
    l2_leaf_reg: float = 3.0
    validation_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        if self.max_depth < 1:
            raise ConfigError("max_depth must be at least 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if self.max_trees < 0:
            raise ConfigError("max_trees must be non-negative")
        if self.early_stopping_rounds < 1:
            raise ConfigError("early_stopping_rounds must be positive")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be positive")
        if self.l2_leaf_reg < 0:
            raise ConfigError("l2_leaf_reg must be non-negative")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


# -- trees ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Tree:
    """Flat binary tree; node 0 is the root, leaves have ``feature == -1``."""

    feature: np.ndarray  # int32
    threshold: np.ndarray  # float64, go left when x <= threshold
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    default_left: np.ndarray  # uint8, direction for NaN inputs
    value: np.ndarray  # float64 leaf outputs (0 at splits)
    gain: np.ndarray  # float64 split gains (0 at leaves)
    cover: np.ndarray  # float64 hessian sum per node

    @property
    def n_nodes(self):
        return self.feature.size

    def depth(self):
        d = np.zeros(self.n_nodes, dtype=int)
        for n in range(self.n_nodes):  # children always follow their parent
            if self.feature[n] >= 0:
                d[self.left[n]] = d[n] + 1
                d[self.right[n]] = d[n] + 1
        return int(d.max())

    def scaled(self, factor):
        return Tree(self.feature, self.threshold, self.left, self.right, self.default_left,
                    self.value * factor, self.gain, self.cover)

    def to_dict(self, node=0):
        if self.feature[node] < 0:
            return {"leaf": float(self.value[node]), "cover": float(self.cover[node])}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "default_left": bool(self.default_left[node]),
            "gain": float(self.gain[node]),
            "cover": float(self.cover[node]),
            "left": self.to_dict(int(self.left[node])),
            "right": self.to_dict(int(self.right[node])),
        }

    @classmethod
    def from_dict(cls, doc, n_features):
        cols = {k: [] for k in ("feature", "threshold", "left", "right", "default_left",
                                "value", "gain", "cover")}
        queue = [doc]
        while queue:
            node = queue.pop(0)
            idx = len(cols["feature"])
            if "leaf" in node:
                for k, v in (("feature", -1), ("threshold", 0.0), ("left", -1), ("right", -1),
                             ("default_left", 0), ("value", node["leaf"]), ("gain", 0.0)):
                    cols[k].append(v)
            else:
                f = int(node["feature"])
                if not 0 <= f < n_features:
                    raise ModelFormatError(f"split feature {f} outside schema of {n_features}")
                first_child = idx + len(queue) + 1
                for k, v in (("feature", f), ("threshold", node["threshold"]),
                             ("left", first_child), ("right", first_child + 1),
                             ("default_left", int(node["default_left"])), ("value", 0.0),
                             ("gain", node["gain"])):
                    cols[k].append(v)
                queue.append(node["left"])
                queue.append(node["right"])
            cols["cover"].append(node["cover"])
        return cls(
            np.asarray(cols["feature"], dtype=np.int32),
            np.asarray(cols["threshold"], dtype=float),
            np.asarray(cols["left"], dtype=np.int32),
            np.asarray(cols["right"], dtype=np.int32),
            np.asarray(cols["default_left"], dtype=np.uint8),
            np.asarray(cols["value"], dtype=float),
            np.asarray(cols["gain"], dtype=float),
            np.asarray(cols["cover"], dtype=float),
        )


def _pack(trees):
    """Concatenate trees into one node table for the prediction kernel."""
    if not trees:
        z = np.zeros(0, dtype=np.int32)
        return z, np.zeros(0), z, z, np.zeros(0, dtype=np.uint8), np.zeros(0), z
    offsets = np.cumsum([0] + [t.n_nodes for t in trees[:-1]]).astype(np.int32)
    shift = lambda a, o: np.where(a >= 0, a + o, -1).astype(np.int32)  # noqa: E731
    return (
        np.concatenate([t.feature for t in trees]).astype(np.int32),
        np.concatenate([t.threshold for t in trees]),
        np.concatenate([shift(t.left, o) for t, o in zip(trees, offsets)]),
        np.concatenate([shift(t.right, o) for t, o in zip(trees, offsets)]),
        np.concatenate([t.default_left for t in trees]).astype(np.uint8),
        np.concatenate([t.value for t in trees]),
        offsets,
    )


def tree_sum(trees, X, packed=None):
    """Sum of tree outputs per row, accumulated in tree order.

    ``packed`` optionally supplies ``_pack(trees)`` computed earlier.
    """
    X = np.ascontiguousarray(X, dtype=float)
    out = np.zeros(X.shape[0])
    if trees:
        kernels.predict_forest(X, *(packed or _pack(trees)), out)
    return out


def grow_tree(sorted_vals, sorted_idx, X, g, h, w, max_depth, l2, min_leaf_weight):
    """Fit one regression tree to gradients ``g`` and hessians ``h`` (row weights ``w``).

    ``sorted_idx[f]`` lists rows in ascending order of feature ``f`` and
    ``sorted_vals[f]`` holds the matching values.
    """
    n = X.shape[0]
    gw = g * w
    hw = h * w
    node_of = np.where(w > 0, 0, -1).astype(np.int32)
    feature, threshold, left, right, value, gain, cover = [], [], [], [], [], [], []

    def new_node(G, H):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(-G / (H + l2))
        gain.append(0.0)
        cover.append(H)
        return len(feature) - 1

    live = w > 0
    open_nodes = [new_node(float(gw[live].sum()), float(hw[live].sum()))]
    G = np.array([gw[live].sum()])
    H = np.array([hw[live].sum()])
    W = np.array([w[live].sum()])
    for _ in range(max_depth):
        bf, bt, bg = kernels.best_splits(sorted_vals, sorted_idx, node_of, gw, hw, w,
                                         G, H, W, float(l2), float(min_leaf_weight))
        child = np.full(2 * len(open_nodes), -1, dtype=np.int32)
        next_open = []
        for k, tn in enumerate(open_nodes):
            if bf[k] < 0:
                continue
            feature[tn] = int(bf[k])
            threshold[tn] = float(bt[k])
            gain[tn] = float(bg[k])
            value[tn] = 0.0
            child[2 * k] = len(next_open)
            child[2 * k + 1] = len(next_open) + 1
            next_open.extend([-1, -1])  # filled once child sums are known
        if not next_open:
            break
        node_of, G, H, W = kernels.partition_rows(X, node_of, bf, bt, child, gw, hw, w,
                                                  len(next_open))
        for k, tn in enumerate(open_nodes):
            if bf[k] < 0:
                continue
            li, ri = child[2 * k], child[2 * k + 1]
            left[tn] = new_node(float(G[li]), float(H[li]))
            right[tn] = new_node(float(G[ri]), float(H[ri]))
            next_open[li] = left[tn]
            next_open[ri] = right[tn]
        open_nodes = next_open
    return Tree(
        np.asarray(feature, dtype=np.int32),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32),
        np.zeros(len(feature), dtype=np.uint8),
        np.asarray(value, dtype=float),
        np.asarray(gain, dtype=float),
        np.asarray(cover, dtype=float),
    )


# -- models ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BoostedModel:
    base_score: float
    trees: tuple
    learning_rate: float
    schema_version: str = SCHEMA_VERSION
    training_meta: dict = None

    @cached_property
    def _packed(self):
        return _pack(self.trees)

    def raw_score(self, X):
        X = _check_matrix(X)
        raw = self.base_score + self.learning_rate * tree_sum(self.trees, X, self._packed)
        return np.clip(raw, -RAW_CLIP, RAW_CLIP)

    def predict_prob(self, X):
        return sigmoid(self.raw_score(X))

    @property
    def n_trees(self):
        return len(self.trees)

    def to_dict(self):
        return {
            "kind": "boosted",
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "schema_version": self.schema_version,
            "trees": [t.to_dict() for t in self.trees],
            "training_meta": self.training_meta or {},
        }

    @classmethod
    def from_dict(cls, doc):
        d = schema().d
        return cls(
            float(doc["base_score"]),
            tuple(Tree.from_dict(t, d) for t in doc["trees"]),
            float(doc["learning_rate"]),
            doc["schema_version"],
            doc.get("training_meta", {}),
        )


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    members: tuple
    schema_version: str = SCHEMA_VERSION
    training_meta: dict = None

    def __post_init__(self):
        if len(self.members) != N_MEMBERS:
            raise ConfigError(f"an ensemble has exactly {N_MEMBERS} members")
        if any(m.schema_version != self.schema_version for m in self.members):
            raise SchemaMismatchError("ensemble members disagree on schema_version")

    def predict_prob(self, X):
        total = np.zeros(np.asarray(X).shape[0])
        for m in self.members:
            total += m.predict_prob(X)
        return total / len(self.members)

    def to_dict(self):
        return {
            "kind": "ensemble",
            "schema_version": self.schema_version,
            "members": [m.to_dict() for m in self.members],
            "training_meta": self.training_meta or {},
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(tuple(BoostedModel.from_dict(m) for m in doc["members"]),
                   doc["schema_version"], doc.get("training_meta", {}))


def predict_prob(model, X):
    """Success probabilities for feature rows ``X`` (n, d) or a single row (d,)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        return float(model.predict_prob(X[None, :])[0])
    return model.predict_prob(X)


def _check_matrix(X):
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != schema().d:
        raise SchemaMismatchError(f"expected (n, {schema().d}) features, got {X.shape}")
    return X


# -- training -------------------------------------------------------------------

def records_to_xy(records):
    """Feature matrix and labels from induct records (or an (X, y) pair)."""
    if isinstance(records, tuple) and len(records) == 2:
        X, y = records
        return _check_matrix(X), np.asarray(y, dtype=float)
    versions = {r.features.schema_version for r in records}
    if versions - {SCHEMA_VERSION}:
        raise SchemaMismatchError(f"records carry feature schema {sorted(versions)}")
    X = np.array([r.features.values for r in records], dtype=float).reshape(-1, schema().d)
    y = np.array([float(r.outcome.success) for r in records])
    return X, y


def _check_labels(y):
    if y.size < 2 or y.min() == y.max():
        raise SingleClassError("training needs at least one success and one failure")


def _logloss(raw, y, w):
    return float(np.sum(w * (np.logaddexp(0.0, raw) - y * raw)) / np.sum(w))


def _presort(X):
    idx = np.argsort(X, axis=0, kind="stable").T.astype(np.int32)
    vals = np.take_along_axis(X.T, idx, axis=1)
    return np.ascontiguousarray(vals), np.ascontiguousarray(idx)


def split_train_valid(y, fraction, seed):
    """Stratified index split; the validation part holds ``fraction`` of each class."""
    rng = np.random.default_rng(derive_seed(seed, "validation-split"))
    train, valid = [], []
    for label in (0.0, 1.0):
        idx = np.flatnonzero(y == label)
        idx = idx[rng.permutation(idx.size)]
        n_valid = int(round(fraction * idx.size))
        valid.append(idx[:n_valid])
        train.append(idx[n_valid:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(valid))


def fit_boosted(X, y, config, sample_weight=None, X_valid=None, y_valid=None):
    """Boost on arrays; early stopping applies when a two-class validation set is given."""
    config.validate()
    X = _check_matrix(X)
    y = np.asarray(y, dtype=float)
    w = np.ones(y.size) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    live = w > 0
    _check_labels(y[live])
    # Rows with zero weight never influence a split; dropping them is exact.
    X, y, w = np.ascontiguousarray(X[live]), y[live], w[live]
    rate = float(np.sum(w * y) / np.sum(w))
    base = math.log(rate / (1.0 - rate))
    raw = np.full(y.size, base)
    sorted_vals, sorted_idx = _presort(X)

    use_valid = X_valid is not None and len(np.unique(y_valid)) == 2
    if use_valid:
        X_valid = _check_matrix(X_valid)
        raw_valid = np.full(X_valid.shape[0], base)
        auc_trace = [roc_auc(raw_valid, y_valid)]
    else:
        auc_trace = []
    best_auc, best_n = (auc_trace[0], 0) if use_valid else (None, 0)

    lr = config.learning_rate
    loss = _logloss(raw, y, w)
    deviance = [loss]
    trees = []
    stop_reason = "max_trees"
    for _ in range(config.max_trees):
        p = sigmoid(raw)
        g = p - y
        h = p * (1.0 - p)
        tree = grow_tree(sorted_vals, sorted_idx, X, g, h, w, config.max_depth,
                         config.l2_leaf_reg, config.min_samples_leaf)
        out = tree_sum([tree], X)
        # Newton steps can overshoot on the logistic loss; halve until the loss stops rising.
        scale = 1.0
        new_raw = raw + lr * out
        new_loss = _logloss(new_raw, y, w)
        while new_loss > loss and scale > 2.0 ** -20:
            scale *= 0.5
            new_raw = raw + lr * (out * scale)
            new_loss = _logloss(new_raw, y, w)
        if new_loss > loss or not np.any(out):
            stop_reason = "no_improvement"
            break
        if scale != 1.0:
            tree = tree.scaled(scale)
        trees.append(tree)
        raw, loss = new_raw, new_loss
        deviance.append(loss)
        if use_valid:
            raw_valid = raw_valid + lr * tree_sum([tree], X_valid)
            auc = roc_auc(raw_valid, y_valid)
            auc_trace.append(auc)
            if auc > best_auc:
                best_auc, best_n = auc, len(trees)
            elif len(trees) - best_n >= config.early_stopping_rounds:
                stop_reason = "early_stopping"
                break
    if use_valid:
        trees = trees[:best_n]
    meta = {
        "config": asdict(config),
        "n_trees": len(trees),
        "n_rows": int(y.size),
        "stop_reason": stop_reason,
        "train_deviance": deviance,
        "valid_auc": auc_trace,
        "best_valid_auc": best_auc,
    }
    return BoostedModel(base, tuple(trees), lr, SCHEMA_VERSION, meta)


def train_boosted(records, config=TrainConfig()):
    """Train one model, holding out ``validation_fraction`` of the rows for early stopping."""
    X, y = records_to_xy(records)
    _check_labels(y)
    if config.validation_fraction > 0:
        tr, va = split_train_valid(y, config.validation_fraction, config.seed)
        return fit_boosted(X[tr], y[tr], config, X_valid=X[va], y_valid=y[va])
    return fit_boosted(X, y, config)


def train_ensemble(records, config=TrainConfig(), n_members=N_MEMBERS):
    """Five models on bootstrap resamples of a shared training split, averaged."""
    if n_members != N_MEMBERS:
        raise ConfigError(f"an ensemble has exactly {N_MEMBERS} members")
    X, y = records_to_xy(records)
    _check_labels(y)
    if config.validation_fraction > 0:
        tr, va = split_train_valid(y, config.validation_fraction, config.seed)
    else:
        tr, va = np.arange(y.size), np.zeros(0, dtype=int)
    Xt, yt = X[tr], y[tr]
    members = []
    for k in range(n_members):
        rng = np.random.default_rng(derive_seed(config.seed, "member", k))
        for _ in range(100):
            counts = np.bincount(rng.integers(0, yt.size, size=yt.size), minlength=yt.size)
            if 0 < np.sum(counts * yt) < np.sum(counts):
                break
        else:
            counts = np.ones(yt.size, dtype=np.int64)  # tiny data: fall back to the full split
        members.append(fit_boosted(Xt, yt, config, counts.astype(float),
                                   X[va] if va.size else None, y[va] if va.size else None))
    meta = {"config": asdict(config), "member_trees": [m.n_trees for m in members]}
    return EnsembleModel(tuple(members), SCHEMA_VERSION, meta)


def feature_importance(model):
    """Total split gain per feature, normalized to sum to one (all zeros without splits)."""
    members = model.members if isinstance(model, EnsembleModel) else (model,)
    names = schema().names
    total = np.zeros(len(names))
    for m in members:
        for t in m.trees:
            split = t.feature >= 0
            np.add.at(total, t.feature[split], t.gain[split])
    s = total.sum()
    if s > 0:
        total = total / s
    return dict(zip(names, total.tolist()))


# -- persistence ----------------------------------------------------------------

def model_to_json(model):
    doc = {"format": MODEL_FORMAT, **model.to_dict()}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def model_from_json(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"expected model format {MODEL_FORMAT!r}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatchError(
            f"model feature schema {doc.get('schema_version')!r} != {SCHEMA_VERSION!r}"
        )
    try:
        if doc["kind"] == "boosted":
            return BoostedModel.from_dict(doc)
        if doc["kind"] == "ensemble":
            return EnsembleModel.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise ModelFormatError(f"corrupt model document: {exc!r}") from None
    raise ModelFormatError(f"unknown model kind {doc.get('kind')!r}")


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model_to_json(model))


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from None
    return model_from_json(text)
