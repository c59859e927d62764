"""Class-structured minibatches: same-class pairs and subject/task quadruplets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EpochDataset
from .losses import LatentSpace

QUADRUPLET_RETRIES = 100


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class PairBatch:
    """K pairs ``(index_a[i], index_b[i])`` that share class ``classes[i]`` under ``selector``."""

    selector: LatentSpace
    index_a: np.ndarray
    index_b: np.ndarray
    classes: np.ndarray

    def __len__(self) -> int:
        return len(self.classes)

    def validate(self, dataset: EpochDataset) -> None:
        labels = dataset.labels(self.selector)
        if not (np.array_equal(labels[self.index_a], self.classes)
                and np.array_equal(labels[self.index_b], self.classes)):
            raise SamplingError(f"pair members do not share their {self.selector.value} class")
        if len(np.unique(self.classes)) != len(self.classes):
            raise SamplingError("pair classes must be distinct within a batch")


@dataclass(frozen=True)
class QuadrupletBatch:
    """Indices (a, b, c, d) per row with subjects (U, V, U, V) and tasks (M, M, N, N)."""

    index: np.ndarray  # (K, 4)
    collapsed: bool = False

    def __len__(self) -> int:
        return len(self.index)

    def validate(self, dataset: EpochDataset) -> None:
        if self.collapsed:
            return
        s = dataset.subject_ids[self.index]
        t = dataset.task_ids[self.index]
        ok = (
            (s[:, 0] == s[:, 2]) & (s[:, 1] == s[:, 3]) & (s[:, 0] != s[:, 1])
            & (t[:, 0] == t[:, 1]) & (t[:, 2] == t[:, 3]) & (t[:, 0] != t[:, 2])
        )
        if not ok.all():
            raise SamplingError("quadruplet does not follow the (U,M),(V,M),(U,N),(V,N) pattern")


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_pair_batch(dataset: EpochDataset, selector, K: int, rng=None) -> PairBatch:
    """Draw K distinct classes and two distinct epochs from each."""
    space = LatentSpace(selector)
    rng = _rng(rng)
    labels = dataset.labels(space)
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= 2]
    if K < 1:
        raise SamplingError("K must be at least 1")
    if len(eligible) < K:
        raise SamplingError(
            f"need {K} {space.value} classes with >= 2 epochs, dataset has {len(eligible)}"
        )
    chosen = rng.choice(eligible, size=K, replace=False)
    index_a = np.empty(K, dtype=np.int64)
    index_b = np.empty(K, dtype=np.int64)
    for i, cls in enumerate(chosen):
        members = np.flatnonzero(labels == cls)
        a, b = rng.choice(members, size=2, replace=False)
        index_a[i], index_b[i] = a, b
    return PairBatch(space, index_a, index_b, chosen.astype(np.int64))


def sample_quadruplet_batch(dataset: EpochDataset, K: int, rng=None,
                            retries: int = QUADRUPLET_RETRIES) -> QuadrupletBatch:
    """Draw K quadruplets; empty (subject, task) cells trigger a bounded redraw."""
    rng = _rng(rng)
    subjects, tasks = dataset.subjects, dataset.tasks
    if len(subjects) < 2 or len(tasks) < 2:
        raise SamplingError("quadruplets need at least 2 subjects and 2 tasks")
    cells: dict[tuple, np.ndarray] = {}
    for i, key in enumerate(zip(dataset.subject_ids.tolist(), dataset.task_ids.tolist())):
        cells.setdefault(key, []).append(i)
    cells = {k: np.asarray(v) for k, v in cells.items()}

    rows = []
    for _ in range(K):
        for _attempt in range(retries):
            u, v = rng.choice(subjects, size=2, replace=False)
            m, n = rng.choice(tasks, size=2, replace=False)
            keys = [(u, m), (v, m), (u, n), (v, n)]
            if all(k in cells for k in keys):
                rows.append([rng.choice(cells[k]) for k in keys])
                break
        else:
            raise SamplingError(f"no complete quadruplet found in {retries} draws")
    return QuadrupletBatch(np.asarray(rows, dtype=np.int64))


def collapse_pairs_to_quadruplets(pairs: PairBatch) -> QuadrupletBatch:
    """Duplicate pair members so the quadruplet loss reduces to the pair loss.

    Same-task pair (a, b) -> (a, b, a, b); same-subject pair (a, c) -> (a, a, c, c).
    """
    a, b = pairs.index_a, pairs.index_b
    if pairs.selector is LatentSpace.TASK:
        index = np.stack([a, b, a, b], axis=1)
    else:
        index = np.stack([a, a, b, b], axis=1)
    return QuadrupletBatch(index, collapsed=True)


def pair_arrays(dataset: EpochDataset, pairs: PairBatch) -> tuple[np.ndarray, np.ndarray]:
    return dataset.epochs[pairs.index_a], dataset.epochs[pairs.index_b]


def quadruplet_arrays(dataset: EpochDataset, quads: QuadrupletBatch) -> list[np.ndarray]:
    return [dataset.epochs[quads.index[:, j]] for j in range(4)]
