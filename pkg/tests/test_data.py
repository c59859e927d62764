import numpy as np
import pytest

from cslpae.data import (
    EpochDataset,
    FormatError,
    SynthSpec,
    generate_synthetic,
    read_epochs,
    split_by_subject,
    write_epochs,
)

# hand-encoded: magic, version 1, 1 epoch, 1 channel, 2 samples, subject 3, task 1, [1.0, -2.5]
GOLDEN = (
    b"EPZ1"
    + b"\x01\x00"
    + b"\x01\x00\x00\x00"
    + b"\x01\x00"
    + b"\x02\x00\x00\x00"
    + b"\x03\x00\x00\x00"
    + b"\x01\x00\x00\x00"
    + b"\x00\x00\x80\x3f"
    + b"\x00\x00\x20\xc0"
)


def test_golden_bytes_written(tmp_path):
    ds = EpochDataset(np.array([[[1.0, -2.5]]]), [3], [1])
    write_epochs(ds, tmp_path / "g.epz")
    assert (tmp_path / "g.epz").read_bytes() == GOLDEN


def test_golden_bytes_read(tmp_path):
    (tmp_path / "g.epz").write_bytes(GOLDEN)
    ds = read_epochs(tmp_path / "g.epz")
    assert ds.epochs.tolist() == [[[1.0, -2.5]]]
    assert ds.subject_ids.tolist() == [3] and ds.task_ids.tolist() == [1]


def test_round_trip_bitwise(tmp_path):
    ds = generate_synthetic(SynthSpec(n_subjects=3, n_tasks=2, epochs_per_cell=4, n_channels=3, n_time=16), seed=5)
    write_epochs(ds, tmp_path / "d.epz")
    back = read_epochs(tmp_path / "d.epz")
    assert back.epochs.tobytes() == ds.epochs.tobytes()
    assert np.array_equal(back.subject_ids, ds.subject_ids)
    assert np.array_equal(back.task_ids, ds.task_ids)


@pytest.mark.parametrize(
    "raw",
    [
        b"EPZ2" + GOLDEN[4:],  # magic
        GOLDEN[:4] + b"\x02\x00" + GOLDEN[6:],  # version
        GOLDEN[:-1],  # truncated
        GOLDEN + b"\x00" * 4,  # trailing data
        GOLDEN[:10],  # short header
    ],
)
def test_format_errors(tmp_path, raw):
    (tmp_path / "bad.epz").write_bytes(raw)
    with pytest.raises(FormatError):
        read_epochs(tmp_path / "bad.epz")


def test_dataset_validation():
    with pytest.raises(ValueError):
        EpochDataset(np.zeros((2, 1, 3)), [0], [0, 0])
    with pytest.raises(ValueError):
        EpochDataset(np.zeros((1, 3)), [0], [0])
    with pytest.raises(ValueError):
        EpochDataset(np.zeros((1, 1, 3)), [-1], [0])


def test_synthetic_counts_and_labels():
    spec = SynthSpec(n_subjects=3, n_tasks=2, epochs_per_cell=5, n_channels=2, n_time=16)
    ds = generate_synthetic(spec, seed=0)
    assert ds.epochs.shape == (30, 2, 16)
    cells, counts = np.unique(np.stack([ds.subject_ids, ds.task_ids], 1), axis=0, return_counts=True)
    assert len(cells) == 6 and (counts == 5).all()


def test_synthetic_noiseless_cells_equal_analytic_erp():
    spec = SynthSpec(n_subjects=2, n_tasks=3, epochs_per_cell=4, n_channels=3, n_time=32, noise_std=0.0)
    ds, truth = generate_synthetic(spec, seed=1, return_truth=True)
    for i in range(len(ds)):
        want = truth.erp[ds.subject_ids[i], ds.task_ids[i]]
        np.testing.assert_allclose(ds.epochs[i], want, atol=1e-6)


def test_background_rhythm_is_bounded_zero_mean_sinusoid():
    spec = SynthSpec(n_subjects=2, n_tasks=1, epochs_per_cell=400, n_channels=2, n_time=64,
                     noise_std=0.0, rhythm_amplitude=0.7)
    ds, truth = generate_synthetic(spec, seed=4, return_truth=True)
    for s in range(2):
        cell = ds.epochs[ds.subject_ids == s]
        unmixed = np.einsum("ij,ejk->eik", np.linalg.inv(truth.mixing[s]), cell - truth.erp[s, 0])
        assert np.abs(unmixed).max() <= 0.7 + 1e-9
        assert np.abs(unmixed).max() > 0.1
        # random phase per epoch averages the rhythm away
        assert np.abs(unmixed.mean(axis=0)).max() < 0.15


def test_synthetic_templates_distinct():
    _, truth = generate_synthetic(SynthSpec(n_tasks=4, epochs_per_cell=1, n_subjects=1), seed=2, return_truth=True)
    T = truth.templates
    for i in range(len(T)):
        for j in range(i):
            assert np.linalg.norm(T[i] - T[j]) > 0


def test_cell_means_converge():
    def err(n):
        spec = SynthSpec(n_subjects=1, n_tasks=1, epochs_per_cell=n, n_channels=2, n_time=32)
        ds, truth = generate_synthetic(spec, seed=3, return_truth=True)
        return np.linalg.norm(ds.epochs.mean(axis=0) - truth.erp[0, 0])

    small, large = err(10), err(1000)
    assert large < small
    # the error shrinks roughly like 1/sqrt(n)
    assert large < small / 3


def test_synthetic_deterministic():
    spec = SynthSpec(n_subjects=2, n_tasks=2, epochs_per_cell=2, n_channels=2, n_time=16)
    a, b = generate_synthetic(spec, seed=9), generate_synthetic(spec, seed=9)
    assert a.epochs.tobytes() == b.epochs.tobytes()


def test_split_sizes_and_disjointness():
    ds = generate_synthetic(SynthSpec(epochs_per_cell=1, n_time=16), seed=0)
    tr, ev, te = split_by_subject(ds, seed=4)
    assert (len(tr.subjects), len(ev.subjects), len(te.subjects)) == (7, 1, 2)
    sets = [set(x.subjects.tolist()) for x in (tr, ev, te)]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert len(tr) + len(ev) + len(te) == len(ds)


def test_split_deterministic():
    ds = generate_synthetic(SynthSpec(epochs_per_cell=1, n_time=16), seed=0)
    a = split_by_subject(ds, seed=4)
    b = split_by_subject(ds, seed=4)
    assert all(np.array_equal(x.subjects, y.subjects) for x, y in zip(a, b))


def test_split_errors():
    ds = generate_synthetic(SynthSpec(n_subjects=2, epochs_per_cell=1, n_time=16), seed=0)
    with pytest.raises(ValueError):
        split_by_subject(ds)
    ds = generate_synthetic(SynthSpec(n_subjects=3, epochs_per_cell=1, n_time=16), seed=0)
    with pytest.raises(ValueError):
        split_by_subject(ds, fractions=(0.9, 0.05, 0.05))
