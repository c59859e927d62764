"""Finite-difference gradient checks for every primitive and loss composite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import (
    clip_loss,
    cross_entropy_head,
    latent_permutation_loss,
    nt_xent,
    quadruplet_permutation_loss,
    reconstruction_loss,
)
from .model import ModelConfig, build_model

TOLERANCE = 1e-3


def tiny_configs(n: int = 3, seed: int = 0) -> list[ModelConfig]:
    """``n`` small random model shapes that keep a full check fast."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        heads = int(rng.choice([1, 2]))
        out.append(ModelConfig(
            n_channels=int(rng.integers(1, 4)),
            n_time=int(rng.choice([16, 32])),
            n_blocks=int(rng.integers(1, 3)),
            conv_width=heads * int(rng.integers(2, 4)),
            d_latent=int(rng.integers(1, 4)),
            n_transformer_layers=1,
            n_heads=heads,
            ff_mult=1,
        ))
    return out


def _primitive_cases(rng: np.random.Generator) -> dict:
    r = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    att_shapes = T.attention_block_shapes("a.", 4, 6)
    att = {k: r(*s) * 0.5 for k, s in att_shapes.items()}
    att_names = sorted(att)
    idx = np.array([0, 2, 2])

    def attention(x, *ws):
        return (T.attention_block(x, dict(zip(att_names, ws)), "a.", 2) ** 2).sum()

    return {
        "add": (lambda a, b: ((a + b) ** 2).sum(), [r(3, 4), r(4)]),
        "sub": (lambda a, b: ((a - b) ** 2).sum(), [r(3, 1), r(3, 4)]),
        "mul": (lambda a, b: (a * b).sum(), [r(2, 3), r(2, 3)]),
        "div": (lambda a, b: (a / b).sum(), [r(2, 3), pos(3)]),
        "pow": (lambda a: (a ** 3).sum(), [r(5)]),
        "matmul": (lambda a, b: ((a @ b) ** 2).sum(), [r(2, 3, 4), r(4, 2)]),
        "getitem": (lambda a: (a[idx] ** 2).sum(), [r(4, 3)]),
        "sum_axis": (lambda a: (a.sum(axis=1) ** 2).sum(), [r(3, 4)]),
        "mean_axis": (lambda a: (a.mean(axis=0) ** 2).sum(), [r(3, 4)]),
        "exp": (lambda a: a.exp().sum(), [r(6)]),
        "log": (lambda a: a.log().sum(), [pos(6)]),
        "sqrt": (lambda a: a.sqrt().sum(), [pos(6)]),
        "relu": (lambda a: (a.relu() ** 2).sum(), [r(8) + np.sign(r(8)) * 0.1]),
        "reshape_transpose": (lambda a: (a.reshape(3, 4).T @ np.arange(3.0)).sum() ** 2, [r(2, 6)]),
        "concat": (lambda a, b: (T.concat([a, b], axis=1) ** 2).sum(), [r(2, 3), r(2, 1)]),
        "conv1d": (lambda x, w, b: (T.conv1d(x, w, b, stride=2, padding=1) ** 2).sum(), [r(2, 3, 9), r(4, 3, 3), r(4)]),
        "conv1d_transposed": (lambda x, w, b: (T.conv1d_transposed(x, w, b, stride=2, padding=1) ** 2).sum(),
                              [r(2, 3, 5), r(3, 2, 4), r(2)]),
        "instance_norm": (lambda x: (T.instance_norm(x) * np.arange(6.0)).sum(), [r(2, 3, 6)]),
        "layer_norm": (lambda x, g, b: (T.layer_norm(x, g, b) * np.arange(5.0)).sum(), [r(3, 5), r(5), r(5)]),
        "softmax": (lambda x: (T.softmax(x) * np.arange(4.0)).sum(), [r(3, 4)]),
        "logsumexp": (lambda x: T.logsumexp(x, axis=0).sum(), [r(3, 4)]),
        "l2_normalize": (lambda x: (T.l2_normalize(x) * np.arange(3.0)).sum(), [r(4, 3)]),
        "mse": (lambda a, b: T.mse(a, b), [r(3, 4), r(3, 4)]),
        "nt_xent": (lambda a, b: nt_xent(a, b, 1, 0.5), [r(4, 3), r(4, 3)]),
        "attention_block": (attention, [r(2, 5, 4)] + [att[k] for k in att_names]),
    }


@dataclass
class SuiteResult:
    errors: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _model_cases(cfg: ModelConfig, rng: np.random.Generator) -> tuple:
    model = build_model(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    # the output layer starts near zero; scale it so upstream gradients are not vanishing
    model.params["dec.out.weight"].data *= 100.0
    names = list(model.params)
    X = [rng.standard_normal((2, cfg.n_channels, cfg.n_time)) for _ in range(4)]
    W = rng.standard_normal((cfg.d_latent, 3))
    b = rng.standard_normal(3)

    def clip_pair(split):
        def fn():
            za, zb = model.encode(X[0]), model.encode(X[1])
            i = 0 if split == "subject" else 1
            return clip_loss(za.pooled()[i], zb.pooled()[i], 0.5)
        return fn

    composites = {
        "recon": lambda: reconstruction_loss(X[0], model.reconstruct(X[0])),
        "lp_subject": lambda: latent_permutation_loss(model, "subject", X[0], X[1]),
        "lp_task": lambda: latent_permutation_loss(model, "task", X[0], X[1]),
        "clip_subject": clip_pair("subject"),
        "clip_task": clip_pair("task"),
        "ce_subject": lambda: cross_entropy_head(model.encode(X[0]).pooled()[0], [0, 2], T.Tensor(W), T.Tensor(b)),
        "ce_task": lambda: cross_entropy_head(model.encode(X[1]).pooled()[1], [1, 1], T.Tensor(W), T.Tensor(b)),
        "qp": lambda: quadruplet_permutation_loss(model, *X),
    }
    return model, names, composites


def run_suite(n_configs: int = 3, seed: int = 0, max_coords: int | None = 4) -> SuiteResult:
    """Check all primitives on ``n_configs`` random draws and all composites on as many tiny models.

    Composite checks cover every model parameter tensor, sampling at most
    ``max_coords`` coordinates from each.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for c in range(n_configs):
        for name, (fn, point) in _primitive_cases(rng).items():
            err = T.gradcheck(fn, [np.array(p, dtype=np.float64) for p in point])
            errors[name] = max(errors.get(name, 0.0), err)
    for i, cfg in enumerate(tiny_configs(n_configs, seed)):
        model, names, composites = _model_cases(cfg, rng)
        for name, comp in composites.items():
            def wrapped(*weights, comp=comp):
                model.params = dict(zip(names, weights))
                return comp()

            err = T.gradcheck(wrapped, [model.params[n] for n in names], max_coords=max_coords, seed=seed + i)
            errors[name] = max(errors.get(name, 0.0), err)
    return SuiteResult(errors, time.perf_counter() - start)
