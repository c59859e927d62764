"""Epoch datasets: synthetic generation, binary codec, subject-disjoint splits."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

EPOCH_MAGIC = b"EPZ1"
EPOCH_VERSION = 1
_HEADER = struct.Struct("<4sHIHI")
_LABELS = struct.Struct("<II")


class FormatError(ValueError):
    """Malformed or truncated file."""


@dataclass
class EpochDataset:
    """Epochs (n_epochs, n_channels, n_time) with per-epoch subject and task ids."""

    epochs: np.ndarray
    subject_ids: np.ndarray
    task_ids: np.ndarray
    erp_channel: int = 0

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.float32)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        self.task_ids = np.asarray(self.task_ids, dtype=np.int64)
        if self.epochs.ndim != 3:
            raise ValueError(f"epochs must be 3-D, got shape {self.epochs.shape}")
        n = len(self.epochs)
        if len(self.subject_ids) != n or len(self.task_ids) != n:
            raise ValueError("label arrays must match the epoch count")
        if n and (self.subject_ids.min() < 0 or self.task_ids.min() < 0):
            raise ValueError("subject and task ids must be nonnegative")

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def n_channels(self) -> int:
        return self.epochs.shape[1]

    @property
    def n_time(self) -> int:
        return self.epochs.shape[2]

    @property
    def subjects(self) -> np.ndarray:
        return np.unique(self.subject_ids)

    @property
    def tasks(self) -> np.ndarray:
        return np.unique(self.task_ids)

    def labels(self, selector) -> np.ndarray:
        from .losses import LatentSpace

        return self.subject_ids if LatentSpace(selector) is LatentSpace.SUBJECT else self.task_ids

    def subset(self, index) -> "EpochDataset":
        index = np.asarray(index)
        return EpochDataset(
            self.epochs[index], self.subject_ids[index], self.task_ids[index], self.erp_channel
        )

    def select_subjects(self, subjects) -> "EpochDataset":
        return self.subset(np.flatnonzero(np.isin(self.subject_ids, list(subjects))))


@dataclass
class SynthSpec:
    n_subjects: int = 10
    n_tasks: int = 2
    epochs_per_cell: int = 200
    n_channels: int = 8
    n_time: int = 256
    noise_std: float = 0.2
    noise_pole: float = 0.9
    mixing_jitter: float = 0.5
    amplitude_range: tuple = (0.6, 1.4)
    erp_channel: int = 0
    rhythm_amplitude: float = 0.0
    rhythm_cycles: tuple = (4.0, 16.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthTruth:
    """Generative factors behind a synthetic dataset."""

    mixing: np.ndarray  # (n_subjects, C, C)
    templates: np.ndarray  # (n_tasks, C, T)
    erp: np.ndarray = field(repr=False)  # (n_subjects, n_tasks, C, T)


def _task_templates(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(spec.n_time) / spec.n_time
    templates = np.empty((spec.n_tasks, spec.n_channels, spec.n_time))
    for task in range(spec.n_tasks):
        latency = 0.2 + 0.6 * (task + 0.5) / spec.n_tasks + rng.uniform(-0.03, 0.03)
        width = rng.uniform(0.04, 0.08)
        polarity = 1.0 if task % 2 == 0 else -1.0
        window = np.exp(-0.5 * ((t - latency) / width) ** 2)
        topo = rng.uniform(0.3, 1.0, size=spec.n_channels)
        topo[spec.erp_channel] = 1.0
        templates[task] = polarity * topo[:, None] * window[None, :]
    return templates


def _lowpass_noise(shape, std, pole, rng) -> np.ndarray:
    white = rng.standard_normal(shape)
    out = np.empty_like(white)
    acc = np.zeros(shape[:-1])
    for i in range(shape[-1]):
        acc = pole * acc + white[..., i]
        out[..., i] = acc
    # stationary variance of the one-pole filter is 1 / (1 - pole^2)
    return out * std * np.sqrt(1.0 - pole**2)


def _background_rhythm(shape, amplitude, cycles, topo, rng) -> np.ndarray:
    """Sinusoid at ``cycles`` per epoch with a uniform random phase per epoch (zero mean)."""
    n, _, T = shape
    phase = rng.uniform(0.0, 2 * np.pi, size=(n, 1, 1))
    wave = np.sin(2 * np.pi * cycles * np.arange(T) / T + phase)
    return amplitude * topo[None, :, None] * wave


def generate_synthetic(spec: SynthSpec, seed: int = 0, return_truth: bool = False):
    """Draw epochs ``mixing_s @ (template_t + noise)`` for every subject/task cell.

    Each subject has a channel-mixing matrix ``a_s * (I + jitter * G)``; each
    task has a Gaussian-windowed deflection with its own latency, width and
    polarity. The analytic cell ERP is ``mixing_s @ template_t``.
    """
    rng = np.random.default_rng(seed)
    c = spec.n_channels
    templates = _task_templates(spec, rng)
    lo, hi = spec.amplitude_range
    mixing = np.stack([
        rng.uniform(lo, hi) * (np.eye(c) + spec.mixing_jitter * rng.standard_normal((c, c)) / np.sqrt(c))
        for _ in range(spec.n_subjects)
    ])
    erp = np.einsum("sij,tjk->stik", mixing, templates)

    rhythm_freq = rng.uniform(*spec.rhythm_cycles, size=spec.n_subjects)
    rhythm_topo = rng.uniform(0.3, 1.0, size=(spec.n_subjects, c))

    epochs, subjects, tasks = [], [], []
    cell_seeds = rng.integers(0, 2**63 - 1, size=(spec.n_subjects, spec.n_tasks))
    for s in range(spec.n_subjects):
        for t in range(spec.n_tasks):
            cell_rng = np.random.default_rng(cell_seeds[s, t])
            shape = (spec.epochs_per_cell, c, spec.n_time)
            noise = _lowpass_noise(shape, spec.noise_std, spec.noise_pole, cell_rng)
            noise += _background_rhythm(shape, spec.rhythm_amplitude, rhythm_freq[s], rhythm_topo[s], cell_rng)
            epochs.append(np.einsum("ij,ejk->eik", mixing[s], templates[t][None] + noise))
            subjects.append(np.full(spec.epochs_per_cell, s))
            tasks.append(np.full(spec.epochs_per_cell, t))
    ds = EpochDataset(
        np.concatenate(epochs), np.concatenate(subjects), np.concatenate(tasks), spec.erp_channel
    )
    if return_truth:
        return ds, SynthTruth(mixing, templates, erp)
    return ds


def write_epochs(dataset: EpochDataset, path) -> None:
    n, c, t = dataset.epochs.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EPOCH_MAGIC, EPOCH_VERSION, n, c, t))
        for i in range(n):
            fh.write(_LABELS.pack(int(dataset.subject_ids[i]), int(dataset.task_ids[i])))
            fh.write(dataset.epochs[i].astype("<f4").tobytes(order="C"))


def read_epochs(path, erp_channel: int = 0) -> EpochDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("file too short for an epoch header")
    magic, version, n, c, t = _HEADER.unpack_from(raw, 0)
    if magic != EPOCH_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {EPOCH_MAGIC!r}")
    if version != EPOCH_VERSION:
        raise FormatError(f"unsupported epoch file version {version}")
    record = _LABELS.size + 4 * c * t
    expected = _HEADER.size + n * record
    if len(raw) < expected:
        raise FormatError(f"truncated epoch file: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise FormatError(f"epoch count mismatch: {len(raw) - expected} trailing bytes")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, record)
    labels = body[:, : _LABELS.size].copy().view("<u4").reshape(n, 2)
    epochs = body[:, _LABELS.size :].copy().view("<f4").reshape(n, c, t)
    return EpochDataset(epochs.astype(np.float32), labels[:, 0], labels[:, 1], erp_channel)


def split_by_subject(dataset: EpochDataset, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Partition subjects (not epochs) into train/eval/test datasets."""
    subjects = dataset.subjects
    n = len(subjects)
    if n < 3:
        raise ValueError(f"need at least 3 subjects to split, got {n}")
    fractions = np.asarray(fractions, dtype=float)
    fractions = fractions / fractions.sum()
    counts = np.rint(fractions * n).astype(int)
    counts[0] = n - counts[1:].sum()
    if (counts <= 0).any():
        raise ValueError(f"split sizes {counts.tolist()} leave a split empty for {n} subjects")
    order = np.random.default_rng(seed).permutation(subjects)
    bounds = np.cumsum(np.concatenate([[0], counts]))
    return tuple(
        dataset.select_subjects(order[bounds[i] : bounds[i + 1]]) for i in range(len(counts))
    )
