"""Scikit-learn style facade over model building, training and latent extraction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .conversion import LatentBank, build_latent_bank, decode_pairs
from .data import EpochDataset
from .losses import LossConfig
from .model import ModelConfig
from .training import TrainConfig, train

SPACES = ("both", "subject", "task")


def _check_epochs(X, n_channels=None, n_time=None) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=(np.float32, np.float64), ensure_min_samples=1)
    if X.ndim != 3:
        raise ValueError(f"expected epochs of shape (n_epochs, n_channels, n_time), got {X.shape}")
    if n_channels is not None and X.shape[1:] != (n_channels, n_time):
        raise ValueError(f"expected epochs of shape (n, {n_channels}, {n_time}), got {X.shape}")
    return X


def _check_labels(y, n: int) -> tuple[np.ndarray, np.ndarray]:
    if y is None:
        raise ValueError("fit needs labels y of shape (n_epochs, 2) holding subject and task ids")
    y = check_array(y, dtype=None, ensure_2d=True)
    if y.shape != (n, 2):
        raise ValueError(f"y must have shape ({n}, 2) with subject and task ids, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("subject and task ids must be integers")
        y = y.astype(np.int64)
    return y[:, 0], y[:, 1]


class SplitLatentAutoencoder(TransformerMixin, BaseEstimator):
    """Train a split-latent autoencoder variant and expose its pooled latents.

    ``fit(X, y)`` takes epochs ``X`` of shape (n, C, T) and labels ``y`` of
    shape (n, 2) whose columns are subject and task ids. ``transform``
    returns temporally pooled latents: the subject split, the task split, or
    both side by side, depending on ``space``. ``predict`` reconstructs the
    epochs and ``convert`` decodes a subject source with a task source.
    """

    def __init__(self, variant="CSLP-AE", n_blocks=4, conv_width=64, d_latent=32,
                 n_transformer_layers=4, n_heads=4, ff_mult=2, steps=1000, k_pairs=16,
                 lr=1e-3, temperature=0.1, space="both", random_state=0):
        self.variant = variant
        self.n_blocks = n_blocks
        self.conv_width = conv_width
        self.d_latent = d_latent
        self.n_transformer_layers = n_transformer_layers
        self.n_heads = n_heads
        self.ff_mult = ff_mult
        self.steps = steps
        self.k_pairs = k_pairs
        self.lr = lr
        self.temperature = temperature
        self.space = space
        self.random_state = random_state

    def _train_config(self, n_channels: int, n_time: int) -> TrainConfig:
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {SPACES}, got {self.space!r}")
        model = ModelConfig(n_channels=n_channels, n_time=n_time, n_blocks=self.n_blocks,
                            conv_width=self.conv_width, d_latent=self.d_latent,
                            n_transformer_layers=self.n_transformer_layers,
                            n_heads=self.n_heads, ff_mult=self.ff_mult)
        loss = LossConfig(variant=self.variant, temperature=self.temperature)
        return TrainConfig(model=model, loss=loss, steps=self.steps, k_pairs=self.k_pairs,
                           lr=self.lr, seed=int(self.random_state or 0), log_every=0)

    def fit(self, X, y):
        X = _check_epochs(X)
        subjects, tasks = _check_labels(y, len(X))
        cfg = self._train_config(X.shape[1], X.shape[2])
        self.model_, self.history_ = train(cfg, EpochDataset(X, subjects, tasks))
        self.n_channels_, self.n_time_ = X.shape[1], X.shape[2]
        self.subjects_, self.tasks_ = np.unique(subjects), np.unique(tasks)
        return self

    def _bank(self, X):
        check_is_fitted(self, "model_")
        X = _check_epochs(X, self.n_channels_, self.n_time_)
        n = len(X)
        return build_latent_bank(self.model_, EpochDataset(X, np.zeros(n, int), np.zeros(n, int)))

    def latents(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Per-frame subject and task latents, each (n, frames, d_latent)."""
        bank = self._bank(X)
        return bank.subject, bank.task

    def transform(self, X) -> np.ndarray:
        zs, zt = self._bank(X).pooled()
        if self.space == "subject":
            return zs
        if self.space == "task":
            return zt
        return np.concatenate([zs, zt], axis=1)

    def predict(self, X) -> np.ndarray:
        """Reconstruct epochs through the encoder and decoder."""
        return self.convert(X, X)

    def convert(self, subject_source, task_source) -> np.ndarray:
        """Decode the subject latents of one set of epochs with the task latents of another."""
        zs, _ = self.latents(subject_source)
        _, zt = self.latents(task_source)
        if len(zs) != len(zt):
            raise ValueError(f"sources differ in length: {len(zs)} vs {len(zt)}")
        idx = np.arange(len(zs))
        bank = LatentBank(zs, zt, np.zeros(len(zs), int), np.zeros(len(zs), int))
        return decode_pairs(self.model_, bank, (idx, idx))
