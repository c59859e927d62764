"""Training objectives for the split-latent autoencoder and its baselines.

All reconstruction-type terms use the element-mean squared error so that
loss magnitudes do not depend on epoch shape.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import Tensor, as_tensor, concat, l2_normalize, logsumexp, mse

log = logging.getLogger(__name__)

COMPONENTS = (
    "recon",
    "lp_subject",
    "lp_task",
    "clip_subject",
    "clip_task",
    "ce_subject",
    "ce_task",
    "qp",
)

VARIANTS: dict[str, frozenset] = {
    "CSLP-AE": frozenset({"lp_subject", "lp_task", "clip_subject", "clip_task"}),
    "SLP-AE": frozenset({"lp_subject", "lp_task"}),
    "C-AE": frozenset({"recon", "clip_subject", "clip_task"}),
    "AE": frozenset({"recon"}),
    "CL": frozenset({"clip_subject", "clip_task"}),
    "CE": frozenset({"ce_subject", "ce_task"}),
    "CE(t)": frozenset({"ce_task"}),
    "SQP-AE": frozenset({"qp"}),
    "CSQP-AE": frozenset({"qp", "clip_subject", "clip_task"}),
    "SQLP-AE": frozenset({"qp", "lp_subject", "lp_task"}),
    "CSQLP-AE": frozenset({"qp", "lp_subject", "lp_task", "clip_subject", "clip_task"}),
}

DECODER_COMPONENTS = frozenset({"recon", "lp_subject", "lp_task", "qp"})


class LatentSpace(str, Enum):
    SUBJECT = "subject"
    TASK = "task"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            key = value.strip().lower()
            if key in ("s", "subject"):
                return cls.SUBJECT
            if key in ("t", "task"):
                return cls.TASK
        return None


@dataclass(frozen=True)
class LossConfig:
    variant: str = "CSLP-AE"
    temperature: float = 0.1
    denominator_includes_positive: bool = False
    components: frozenset = field(default=None)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        comps = VARIANTS[self.variant] if self.components is None else frozenset(self.components)
        bad = comps - set(COMPONENTS)
        if bad:
            raise ValueError(f"unknown loss components {sorted(bad)}")
        object.__setattr__(self, "components", comps)

    @property
    def uses_decoder(self) -> bool:
        return bool(self.components & DECODER_COMPONENTS)


def reconstruction_loss(X, X_hat) -> Tensor:
    return mse(X_hat, X)


def _pair_mse(X, X_hat) -> Tensor:
    """Per-sample element-mean squared error, shape (N,)."""
    X, X_hat = as_tensor(X), as_tensor(X_hat)
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {X_hat.shape}")
    d = X_hat - X
    axes = tuple(range(1, X.ndim))
    return (d * d).mean(axis=axes)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; 0 (with a warning) for zero-norm input."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        log.warning("cosine similarity of a zero-norm vector; returning 0")
        return 0.0
    return float(a @ b / (na * nb))


def similarity_matrix(Z_a, Z_b, temperature: float) -> Tensor:
    """Cosine similarities ``sim(a_i, b_j) / tau`` for rows of (K, d) inputs."""
    Z_a, Z_b = as_tensor(Z_a), as_tensor(Z_b)
    if Z_a.ndim != 2 or Z_a.shape != Z_b.shape:
        raise ValueError(f"expected two (K, d) matrices of equal shape, got {Z_a.shape}, {Z_b.shape}")
    for Z in (Z_a, Z_b):
        if (np.linalg.norm(Z.data, axis=1) < 1e-12).any():
            log.warning("zero-norm latent in contrastive loss; its similarities are 0")
    return (l2_normalize(Z_a) @ l2_normalize(Z_b).T) * (1.0 / temperature)


def _negative_mask(k: int, include_positive: bool, dtype) -> np.ndarray:
    if include_positive:
        return np.zeros((k, k), dtype=dtype)
    # exp(-1e9) underflows to exactly 0
    return np.where(np.eye(k, dtype=bool), -1e9, 0.0).astype(dtype)


def nt_xent(Z_a, Z_b, k: int, temperature: float = 0.1, include_positive: bool = False) -> Tensor:
    """Contrastive term for anchor ``k``.

    ``-log(exp(s_kk) / sum_{i != k} exp(s_ki))`` with ``s = sim / tau``. The
    positive is left out of the denominator unless ``include_positive``.
    """
    Z_a, Z_b = as_tensor(Z_a), as_tensor(Z_b)
    K = Z_a.shape[0]
    if K < 2 and not include_positive:
        raise ValueError("nt_xent needs at least 2 pairs: the denominator is empty")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    row = similarity_matrix(Z_a, Z_b, temperature)[k]
    mask = _negative_mask(K, include_positive, row.dtype)[k]
    return logsumexp(row + mask, axis=0) - row[k]


def clip_loss(Z_A, Z_B, temperature: float = 0.1, include_positive: bool = False) -> Tensor:
    """Symmetric contrastive loss ``(1/K) sum_k [nt_xent(A,B,k) + nt_xent(B,A,k)]``."""
    Z_A, Z_B = as_tensor(Z_A), as_tensor(Z_B)
    K = Z_A.shape[0]
    if K < 2 and not include_positive:
        raise ValueError("clip_loss needs at least 2 pairs: the denominator is empty")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    S = similarity_matrix(Z_A, Z_B, temperature)
    mask = _negative_mask(K, include_positive, S.dtype)
    diag = np.arange(K)
    positives = S[diag, diag]
    rows = logsumexp(S + mask, axis=1)
    cols = logsumexp(S + mask, axis=0)
    return (rows + cols - positives * 2.0).sum() * (1.0 / K)


def latent_permutation_loss(model, selector, X_a, X_b, latents_a=None, latents_b=None,
                            labels_a=None, labels_b=None) -> Tensor:
    """Swap one latent split within same-class pairs and reconstruct both members.

    Returns ``(1/N) sum_i [mse(X_a_i, D(swap_a)) + mse(X_b_i, D(swap_b))]``.
    Pre-computed latents may be passed to avoid re-encoding.
    """
    space = LatentSpace(selector)
    if labels_a is not None and labels_b is not None:
        if not np.array_equal(np.asarray(labels_a), np.asarray(labels_b)):
            raise ValueError(f"pair members do not share their {space.value} class")
    X_a, X_b = as_tensor(X_a, dtype=model.dtype), as_tensor(X_b, dtype=model.dtype)
    if X_a.shape != X_b.shape:
        raise ValueError("pair members differ in shape")
    za = latents_a if latents_a is not None else model.encode(X_a)
    zb = latents_b if latents_b is not None else model.encode(X_b)
    if space is LatentSpace.TASK:
        dec_a, dec_b = (za.subject, zb.task), (zb.subject, za.task)
    else:
        dec_a, dec_b = (zb.subject, za.task), (za.subject, zb.task)
    n = X_a.shape[0]
    # one decoder pass over both halves
    out = model.decode((concat([dec_a[0], dec_b[0]]), concat([dec_a[1], dec_b[1]])))
    errs = _pair_mse(concat([X_a, X_b]), out)
    return errs.sum() * (1.0 / n)


def quadruplet_permutation_loss(model, X_a, X_b, X_c, X_d, latents=None) -> Tensor:
    """Cross-reconstruct a (U,M), (V,M), (U,N), (V,N) quadruplet with both splits swapped.

    a <- (S_c, T_b), b <- (S_d, T_a), c <- (S_a, T_d), d <- (S_b, T_c);
    the result is the mean of the four per-sample MSEs over the batch.
    """
    Xs = [as_tensor(x, dtype=model.dtype) for x in (X_a, X_b, X_c, X_d)]
    if len({x.shape for x in Xs}) != 1:
        raise ValueError("quadruplet members differ in shape")
    K = Xs[0].shape[0]
    if latents is None:
        z = model.encode(concat(Xs))
        parts = [(z.subject[i * K : (i + 1) * K], z.task[i * K : (i + 1) * K]) for i in range(4)]
    else:
        parts = [(l.subject, l.task) for l in latents]
    (sa, ta), (sb, tb), (sc, tc), (sd, td) = parts
    zs = concat([sc, sd, sa, sb])
    zt = concat([tb, ta, td, tc])
    out = model.decode((zs, zt))
    errs = _pair_mse(concat(Xs), out)
    return errs.sum() * (1.0 / (4 * K))


def cross_entropy_head(z, labels, weight, bias) -> Tensor:
    """Mean softmax cross-entropy of a linear head ``z @ weight + bias``."""
    z = as_tensor(z)
    squeeze = z.ndim == 1
    if squeeze:
        z = z.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_classes = weight.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range for a {n_classes}-class head")
    logits = z @ weight + bias
    picked = logits[np.arange(len(labels)), labels]
    return (logsumexp(logits, axis=1) - picked).mean()


def softmax_cross_entropy(logits, label: int) -> float:
    """Reference value of the cross-entropy for one row of logits."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max()
    return float(m + math.log(np.exp(logits - m).sum()) - logits[label])


def total_loss(config: LossConfig, components: dict) -> Tensor:
    """Unweighted sum of the enabled components."""
    missing = config.components - set(components)
    if missing:
        raise KeyError(f"missing loss components: {sorted(missing)}")
    extra = set(components) - config.components
    if extra:
        raise KeyError(f"components not enabled for {config.variant}: {sorted(extra)}")
    total = None
    for name in COMPONENTS:
        if name in config.components:
            total = components[name] if total is None else total + components[name]
    return as_tensor(total)
