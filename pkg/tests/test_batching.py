import numpy as np
import pytest
from scipy import stats

from cslpae.batching import (
    PairBatch,
    QuadrupletBatch,
    SamplingError,
    collapse_pairs_to_quadruplets,
    sample_pair_batch,
    sample_quadruplet_batch,
)
from cslpae.data import EpochDataset
from cslpae.losses import LatentSpace


def make_dataset(cells, n_time=4):
    """``cells`` maps (subject, task) -> epoch count."""
    subj, task = [], []
    for (s, t), n in cells.items():
        subj += [s] * n
        task += [t] * n
    n = len(subj)
    epochs = np.arange(n * n_time, dtype=np.float32).reshape(n, 1, n_time)
    return EpochDataset(epochs, subj, task)


GRID = make_dataset({(s, t): 3 for s in range(5) for t in range(3)})


def test_forced_pair_partition():
    ds = make_dataset({(0, 0): 1, (0, 1): 1, (1, 0): 1, (1, 1): 1})
    batch = sample_pair_batch(ds, "subject", 2, rng=0)
    got = sorted(tuple(sorted(p)) for p in zip(batch.index_a, batch.index_b))
    assert got == [(0, 1), (2, 3)]


@pytest.mark.parametrize("selector", ["subject", "task"])
def test_pair_audit(selector):
    rng = np.random.default_rng(0)
    labels = GRID.labels(selector)
    K = 3
    for _ in range(1000):
        b = sample_pair_batch(GRID, selector, K, rng)
        assert len(b) == K
        assert (labels[b.index_a] == b.classes).all() and (labels[b.index_b] == b.classes).all()
        assert (b.index_a != b.index_b).all()
        assert len(set(b.classes.tolist())) == K
        b.validate(GRID)


def test_pair_too_many_classes():
    with pytest.raises(SamplingError):
        sample_pair_batch(GRID, "task", 4, rng=0)


def test_pair_single_epoch_classes_ineligible():
    ds = make_dataset({(0, 0): 1, (1, 0): 1, (2, 0): 2})
    with pytest.raises(SamplingError):
        sample_pair_batch(ds, "subject", 2, rng=0)
    assert sample_pair_batch(ds, "subject", 1, rng=0).classes.tolist() == [2]


def test_pair_determinism():
    a = sample_pair_batch(GRID, "subject", 4, rng=11)
    b = sample_pair_batch(GRID, "subject", 4, rng=11)
    assert np.array_equal(a.index_a, b.index_a) and np.array_equal(a.index_b, b.index_b)


def test_pair_validate_rejects_bad_batch():
    bad = PairBatch(LatentSpace.TASK, np.array([0]), np.array([3]), np.array([0]))
    with pytest.raises(SamplingError):
        bad.validate(GRID)


def test_pair_class_frequency_uniform():
    rng = np.random.default_rng(1)
    counts = np.zeros(5)
    n_draws = 2000
    for _ in range(n_draws):
        for c in sample_pair_batch(GRID, "subject", 2, rng).classes:
            counts[c] += 1
    expected = n_draws * 2 / 5
    assert np.all(np.abs(counts - expected) < 3 * np.sqrt(expected))
    assert stats.chisquare(counts).pvalue > 1e-3


def test_forced_quadruplet():
    ds = make_dataset({(0, 0): 1, (0, 1): 1, (1, 0): 1, (1, 1): 1})
    q = sample_quadruplet_batch(ds, 1, rng=0)
    s, t = ds.subject_ids[q.index[0]], ds.task_ids[q.index[0]]
    assert sorted(q.index[0].tolist()) == [0, 1, 2, 3]
    assert s[0] == s[2] and s[1] == s[3] and s[0] != s[1]
    assert t[0] == t[1] and t[2] == t[3] and t[0] != t[2]


def test_quadruplet_audit():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        q = sample_quadruplet_batch(GRID, 2, rng)
        q.validate(GRID)
        s, t = GRID.subject_ids[q.index], GRID.task_ids[q.index]
        assert (s[:, 0] != s[:, 1]).all() and (t[:, 0] != t[:, 2]).all()


def test_quadruplet_retries_around_missing_cells():
    cells = {(s, t): 2 for s in range(3) for t in range(2)}
    del cells[(2, 1)]
    ds = make_dataset(cells)
    q = sample_quadruplet_batch(ds, 20, rng=3)
    q.validate(ds)


def test_quadruplet_no_complete_combination():
    ds = make_dataset({(0, 0): 2, (1, 1): 2})
    with pytest.raises(SamplingError):
        sample_quadruplet_batch(ds, 1, rng=0)


def test_quadruplet_needs_two_tasks():
    with pytest.raises(SamplingError):
        sample_quadruplet_batch(make_dataset({(0, 0): 2, (1, 0): 2}), 1, rng=0)


def test_quadruplet_validate_rejects_bad_pattern():
    with pytest.raises(SamplingError):
        QuadrupletBatch(np.array([[0, 0, 0, 0]])).validate(GRID)


def test_collapse_layouts():
    task_pairs = PairBatch(LatentSpace.TASK, np.array([1, 5]), np.array([2, 6]), np.array([0, 1]))
    subj_pairs = PairBatch(LatentSpace.SUBJECT, np.array([1, 5]), np.array([2, 6]), np.array([0, 1]))
    assert collapse_pairs_to_quadruplets(task_pairs).index.tolist() == [[1, 2, 1, 2], [5, 6, 5, 6]]
    assert collapse_pairs_to_quadruplets(subj_pairs).index.tolist() == [[1, 1, 2, 2], [5, 5, 6, 6]]
