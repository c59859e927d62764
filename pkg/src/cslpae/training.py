"""Optimisation loop, Adam, training history and checkpoint files."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .batching import sample_pair_batch, sample_quadruplet_batch
from .data import EpochDataset, FormatError
from .losses import (
    COMPONENTS,
    LatentSpace,
    LossConfig,
    clip_loss,
    cross_entropy_head,
    latent_permutation_loss,
    mse,
    quadruplet_permutation_loss,
    total_loss,
)
from .model import Model, ModelConfig, build_model
from .tensor import NumericError, Tensor, concat

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SLPA"
CHECKPOINT_VERSION = 1

_SUBJECT_BATCH = {"recon", "lp_subject", "clip_subject", "ce_subject"}
_TASK_BATCH = {"recon", "lp_task", "clip_task", "ce_task"}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    steps: int = 1000
    k_pairs: int = 16
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    out_dir: str | None = None
    log_every: int = 100

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.k_pairs < 1:
            raise ValueError("k_pairs must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["loss"] = {
            "variant": self.loss.variant,
            "temperature": self.loss.temperature,
            "denominator_includes_positive": self.loss.denominator_includes_positive,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        loss = LossConfig(**d.pop("loss", {}))
        return cls(model=model, loss=loss, **d)


class TrainHistory:
    """Per-step loss components and their total."""

    def __init__(self, components):
        self.columns = [c for c in COMPONENTS if c in components] + ["total"]
        self.rows: list[dict[str, float]] = []

    def append(self, row: dict[str, float]) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step"] + self.columns)
            for i, row in enumerate(self.rows):
                writer.writerow([i + 1] + [repr(row[c]) for c in self.columns])


class Adam:
    """Adam with bias correction over a list of parameter tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.state = {"t": 0, "m": [np.zeros_like(p.data) for p in self.params],
                      "v": [np.zeros_like(p.data) for p in self.params]}

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, **self.hyper)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update of ``params`` (arrays); parameters with ``None`` grads are skipped."""
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


def _add_heads(model: Model, n_subjects: int, n_tasks: int, components, rng) -> None:
    d = model.config.d_latent
    dtype = model.dtype
    for name, n_cls, comp in (("subject", n_subjects, "ce_subject"), ("task", n_tasks, "ce_task")):
        if comp in components:
            bound = math.sqrt(3.0 / d)
            model.params[f"head.{name}.weight"] = Tensor(
                rng.uniform(-bound, bound, (d, n_cls)).astype(dtype), requires_grad=True)
            model.params[f"head.{name}.bias"] = Tensor(np.zeros(n_cls, dtype), requires_grad=True)


def training_step(model: Model, dataset: EpochDataset, loss_cfg: LossConfig, k_pairs: int,
                  rng: np.random.Generator, class_index: dict | None = None) -> tuple[Tensor, dict]:
    """Draw the variant's batches and compute its named loss components."""
    comps = loss_cfg.components
    tau, incl = loss_cfg.temperature, loss_cfg.denominator_includes_positive
    blocks: list[np.ndarray] = []
    batches = {}
    if comps & _SUBJECT_BATCH:
        k = min(k_pairs, _n_eligible(dataset.subject_ids))
        batches["subject"] = sample_pair_batch(dataset, LatentSpace.SUBJECT, k, rng)
    if comps & _TASK_BATCH:
        k = min(k_pairs, _n_eligible(dataset.task_ids))
        batches["task"] = sample_pair_batch(dataset, LatentSpace.TASK, k, rng)
    if "qp" in comps:
        batches["quad"] = sample_quadruplet_batch(dataset, k_pairs, rng)

    slices = {}
    pos = 0
    for key in ("subject", "task"):
        if key in batches:
            b = batches[key]
            for member, idx in (("a", b.index_a), ("b", b.index_b)):
                blocks.append(dataset.epochs[idx])
                slices[(key, member)] = (pos, pos + len(idx))
                pos += len(idx)
    pair_end = pos
    if "quad" in batches:
        q = batches["quad"].index
        for j in range(4):
            blocks.append(dataset.epochs[q[:, j]])
            slices[("quad", j)] = (pos, pos + len(q))
            pos += len(q)

    X_all = np.concatenate(blocks).astype(model.dtype, copy=False)
    z = model.encode(X_all)

    def take(key):
        lo, hi = slices[key]
        return type(z)(z.subject[lo:hi], z.task[lo:hi]), X_all[lo:hi]

    out: dict[str, Tensor] = {}
    for space in (LatentSpace.SUBJECT, LatentSpace.TASK):
        key = space.value
        if key not in batches:
            continue
        (za, Xa), (zb, Xb) = take((key, "a")), take((key, "b"))
        pick = (lambda l: l.subject) if space is LatentSpace.SUBJECT else (lambda l: l.task)
        if f"lp_{key}" in comps:
            out[f"lp_{key}"] = latent_permutation_loss(model, space, Xa, Xb, za, zb)
        if f"clip_{key}" in comps:
            out[f"clip_{key}"] = clip_loss(pick(za).mean(axis=1), pick(zb).mean(axis=1), tau, incl)
        if f"ce_{key}" in comps:
            cls = batches[key].classes
            idx = np.array([class_index[key][c] for c in cls])
            pooled = concat([pick(za).mean(axis=1), pick(zb).mean(axis=1)])
            out[f"ce_{key}"] = cross_entropy_head(
                pooled, np.concatenate([idx, idx]),
                model.params[f"head.{key}.weight"], model.params[f"head.{key}.bias"])
    if "recon" in comps:
        # every pair-batch epoch, reconstructed with its own latents
        recon = model.decode((z.subject[:pair_end], z.task[:pair_end]))
        out["recon"] = mse(recon, X_all[:pair_end])
    if "qp" in comps:
        lats = [take(("quad", j))[0] for j in range(4)]
        Xq = [take(("quad", j))[1] for j in range(4)]
        out["qp"] = quadruplet_permutation_loss(model, *Xq, latents=lats)
    return total_loss(loss_cfg, out), out


def _n_eligible(labels: np.ndarray) -> int:
    _, counts = np.unique(labels, return_counts=True)
    return int((counts >= 2).sum())


def train(config: TrainConfig, dataset: EpochDataset, model: Model | None = None):
    """Train the configured variant; returns ``(model, history)``."""
    cfg = config
    if dataset.epochs.shape[1:] != (cfg.model.n_channels, cfg.model.n_time):
        raise ValueError(
            f"dataset epochs {dataset.epochs.shape[1:]} do not match model "
            f"({cfg.model.n_channels}, {cfg.model.n_time})"
        )
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = build_model(cfg.model, seed=cfg.seed)
    comps = cfg.loss.components
    class_index = {
        "subject": {int(c): i for i, c in enumerate(dataset.subjects)},
        "task": {int(c): i for i, c in enumerate(dataset.tasks)},
    }
    _add_heads(model, len(dataset.subjects), len(dataset.tasks), comps, rng)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = TrainHistory(comps)
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None

    for step in range(1, cfg.steps + 1):
        opt.zero_grad()
        total, parts = training_step(model, dataset, cfg.loss, cfg.k_pairs, rng, class_index)
        row = {name: float(v.data) for name, v in parts.items()}
        row["total"] = float(total.data)
        if not all(math.isfinite(v) for v in row.values()):
            raise NumericError(f"non-finite loss at step {step}: {row}")
        total.backward()
        opt.step()
        history.append(row)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d %s", step, " ".join(f"{k}={v:.4g}" for k, v in row.items()))
        if out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"checkpoint_{step:06d}.slpa")
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    block = json.dumps({"model": model.config.to_dict(), "extra": extra or {}},
                       sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(block)))
        fh.write(block)
        for name, p in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("truncated checkpoint file")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Model:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
        config = ModelConfig.from_dict(meta["model"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint config block: {exc}") from exc
    if expected is not None and expected != config:
        raise FormatError(f"checkpoint config {config} does not match requested {expected}")
    model = build_model(config, seed=0)
    loaded = {}
    while not r.done:
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        loaded[name] = data
    missing = set(model.params) - set(loaded)
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, data in loaded.items():
        if name in model.params and model.params[name].shape != data.shape:
            raise FormatError(f"parameter {name} has shape {data.shape}, expected {model.params[name].shape}")
        model.params[name] = Tensor(data, requires_grad=True, name=name)
    return model
