"""Cross-validated KNN probes on the subject and task latent splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

METRIC_FIELDS = ("S.acc", "T⊢S.acc", "T.acc", "S⊢T.acc")


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


@dataclass
class FoldPlan:
    folds: list  # test indices per fold
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.folds)

    def split(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(train, test) indices for fold ``i``."""
        test = self.folds[i]
        mask = np.ones(len(self.labels), dtype=bool)
        mask[test] = False
        return np.flatnonzero(mask), test


def stratified_kfold(labels, k: int = 5, rng=None) -> FoldPlan:
    """Partition indices into ``k`` folds with per-class counts within one of even.

    Each class is shuffled and dealt round-robin; the dealing position carries
    over between classes so fold sizes stay balanced too.
    """
    labels = np.asarray(labels)
    rng = _rng(rng)
    classes, counts = np.unique(labels, return_counts=True)
    if k < 2:
        raise ValueError("k must be at least 2")
    if (counts < k).any():
        small = classes[counts < k]
        raise ValueError(f"classes {small.tolist()} have fewer than k={k} members")
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for cls in classes:
        members = rng.permutation(np.flatnonzero(labels == cls))
        for j, idx in enumerate(members):
            folds[(offset + j) % k].append(int(idx))
        offset = (offset + len(members)) % k
    return FoldPlan([np.sort(np.asarray(f, dtype=np.int64)) for f in folds], labels)


def undersample(labels, rng=None) -> np.ndarray:
    """Indices keeping a uniform random subset of every class at the minority count."""
    labels = np.asarray(labels)
    rng = _rng(rng)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) == 0:
        raise ValueError("undersample needs at least one class")
    n_min = counts.min()
    keep = [rng.choice(np.flatnonzero(labels == c), size=n_min, replace=False) for c in classes]
    return np.sort(np.concatenate(keep))


def _distances(train: np.ndarray, query: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty((len(query), len(train)))
    for lo in range(0, len(query), chunk):
        diff = query[lo : lo + chunk, None, :] - train[None, :, :]
        out[lo : lo + chunk] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def knn_classify(train_vectors, train_labels, query_vectors, k_neighbors: int = 5) -> np.ndarray:
    """Majority vote among the k nearest training vectors (Euclidean).

    Neighbours at equal distance are taken in training order. Vote ties go to
    the label with the smallest summed neighbour distance, then the lowest id.
    """
    train = np.asarray(train_vectors, dtype=np.float64)
    query = np.asarray(query_vectors, dtype=np.float64)
    labels = np.asarray(train_labels)
    if len(train) == 0:
        raise ValueError("knn_classify needs a nonempty training set")
    if not 1 <= k_neighbors <= len(train):
        raise ValueError(f"k_neighbors={k_neighbors} must be in [1, {len(train)}]")
    train = train.reshape(len(train), -1)
    query = query.reshape(len(query), -1)
    dist = _distances(train, query)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k_neighbors]
    classes = np.unique(labels)
    code = np.searchsorted(classes, labels)
    preds = np.empty(len(query), dtype=labels.dtype)
    rows = np.arange(len(query))[:, None]
    votes = np.zeros((len(query), len(classes)), dtype=np.int64)
    dsum = np.zeros((len(query), len(classes)))
    np.add.at(votes, (rows, code[nearest]), 1)
    np.add.at(dsum, (rows, code[nearest]), dist[rows, nearest])
    for i in range(len(query)):
        top = np.flatnonzero(votes[i] == votes[i].max())
        if len(top) > 1:
            best = dsum[i, top].min()
            top = top[dsum[i, top] == best]
        preds[i] = classes[top[0]]
    return preds


class KNNProbe(ClassifierMixin, BaseEstimator):
    """Scikit-learn compatible classifier around :func:`knn_classify`."""

    def __init__(self, n_neighbors: int = 5):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be at least 1")
        self.X_, self.y_ = X, y
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "X_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return knn_classify(self.X_, self.y_, X, min(self.n_neighbors, len(self.X_)))

    def score(self, X, y, sample_weight=None) -> float:
        """Balanced accuracy, the probe metric used throughout."""
        return balanced_accuracy(y, self.predict(X))


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    classes = np.unique(y_true)
    if len(classes) == 0:
        raise ValueError("balanced_accuracy of an empty label vector")
    recalls = [np.mean(y_pred[y_true == c] == c) for c in classes]
    return float(np.mean(recalls))


@dataclass
class MetricsReport:
    """Per-fold balanced accuracies for the four probe settings."""

    per_fold: dict = field(default_factory=dict)

    def mean(self, name: str) -> float:
        return float(np.mean(self.per_fold[name]))

    def sem(self, name: str) -> float:
        v = np.asarray(self.per_fold[name], dtype=float)
        return float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0

    def as_dict(self) -> dict[str, float]:
        return {name: self.mean(name) for name in METRIC_FIELDS}

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row"] + list(METRIC_FIELDS))
            n = len(self.per_fold[METRIC_FIELDS[0]])
            for i in range(n):
                w.writerow([f"fold{i}"] + [repr(float(self.per_fold[m][i])) for m in METRIC_FIELDS])
            w.writerow(["mean"] + [repr(self.mean(m)) for m in METRIC_FIELDS])
            w.writerow(["sem"] + [repr(self.sem(m)) for m in METRIC_FIELDS])


def _cv_scores(features, strat_labels, targets: dict, n_folds, k_neighbors, rng):
    plan = stratified_kfold(strat_labels, n_folds, rng)
    scores = {name: [] for name in targets}
    for i in range(len(plan)):
        train, test = plan.split(i)
        for name, y in targets.items():
            # only the training split is balanced; the test split stays as is
            keep = train[undersample(y[train], rng)]
            pred = knn_classify(features[keep], y[keep], features[test], min(k_neighbors, len(keep)))
            scores[name].append(balanced_accuracy(y[test], pred))
    return scores


def run_latent_cv(bank, n_folds: int = 5, k_neighbors: int = 5, seed: int = 0) -> MetricsReport:
    """Subject CV on pooled subject latents and task CV on pooled task latents."""
    zs, zt = bank.pooled()
    s, t = np.asarray(bank.subject_ids), np.asarray(bank.task_ids)
    rng = np.random.default_rng(seed)
    subj = _cv_scores(zs, s, {"S.acc": s, "T⊢S.acc": t}, n_folds, k_neighbors, rng)
    task = _cv_scores(zt, t, {"T.acc": t, "S⊢T.acc": s}, n_folds, k_neighbors, rng)
    return MetricsReport({**subj, **task})
