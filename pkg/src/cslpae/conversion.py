"""Zero-shot conversion by latent swapping and ERP-conversion scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .data import EpochDataset
from .model import Model
from .tensor import as_tensor, no_grad

DECODE_BATCH = 256


@dataclass(frozen=True)
class ConversionCondition:
    """Whether task-latent donors share the target subject, and subject-latent donors the target task."""

    same_subject: bool
    same_task: bool

    @property
    def label(self) -> str:
        s = "S.s." if self.same_subject else "D.s."
        t = "S.t." if self.same_task else "D.t."
        return f"({s}, {t})"

    @property
    def key(self) -> str:
        return ("ss" if self.same_subject else "ds") + "-" + ("st" if self.same_task else "dt")

    @classmethod
    def parse(cls, text: str) -> "ConversionCondition":
        key = "".join(ch for ch in text.lower() if ch.isalpha())
        table = {"ssst": (True, True), "dsdt": (False, False),
                 "dsst": (False, True), "ssdt": (True, False)}
        if key not in table:
            raise ValueError(f"unknown conversion condition {text!r}; use ss-st, ds-dt, ds-st or ss-dt")
        return cls(*table[key])


SS_ST = ConversionCondition(True, True)
DS_DT = ConversionCondition(False, False)
DS_ST = ConversionCondition(False, True)
SS_DT = ConversionCondition(True, False)
CONDITIONS = (SS_ST, DS_DT, DS_ST, SS_DT)


class ErpTarget(NamedTuple):
    subject: int
    task: int
    channel: int


@dataclass
class LatentBank:
    """Encoded latents for every epoch of a dataset, with its labels."""

    subject: np.ndarray  # (n, frames, d)
    task: np.ndarray
    subject_ids: np.ndarray
    task_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.subject_ids)

    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        return self.subject.mean(axis=1), self.task.mean(axis=1)

    def save(self, path) -> None:
        np.savez(path, subject=self.subject, task=self.task,
                 subject_ids=self.subject_ids, task_ids=self.task_ids)

    @classmethod
    def load(cls, path) -> "LatentBank":
        with np.load(path) as f:
            return cls(f["subject"], f["task"], f["subject_ids"], f["task_ids"])


def convert(model: Model, style_source, content_source) -> np.ndarray:
    """Decode the subject latent of ``style_source`` with the task latent of ``content_source``."""
    with no_grad():
        zs = model.encode(style_source).subject
        zt = model.encode(content_source).task
        return model.decode((zs, zt)).data


def build_latent_bank(model: Model, dataset: EpochDataset, batch_size: int = DECODE_BATCH) -> LatentBank:
    subj, task = [], []
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            z = model.encode(dataset.epochs[lo : lo + batch_size])
            subj.append(z.subject.data)
            task.append(z.task.data)
    if not subj:
        cfg = model.config
        subj = task = [np.zeros((0, cfg.n_frames, cfg.d_latent), dtype=model.dtype)]
    return LatentBank(
        np.concatenate(subj),
        np.concatenate(task),
        dataset.subject_ids.copy(),
        dataset.task_ids.copy(),
    )


def eligible_donors(bank: LatentBank, target: ErpTarget, cond: ConversionCondition):
    """Indices of allowed subject-latent donors and task-latent donors."""
    s, t = bank.subject_ids, bank.task_ids
    task_ok = (t == target.task) if cond.same_task else (t != target.task)
    subj_ok = (s == target.subject) if cond.same_subject else (s != target.subject)
    return np.flatnonzero((s == target.subject) & task_ok), np.flatnonzero((t == target.task) & subj_ok)


def sample_condition_pairs(bank: LatentBank, target: ErpTarget, cond: ConversionCondition,
                           n: int, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` (subject-donor, task-donor) index pairs uniformly with replacement."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    subj_pool, task_pool = eligible_donors(bank, target, cond)
    if len(subj_pool) == 0:
        raise ValueError(f"no subject-latent donors for {target} under {cond.label}")
    if len(task_pool) == 0:
        raise ValueError(f"no task-latent donors for {target} under {cond.label}")
    return rng.choice(subj_pool, size=n), rng.choice(task_pool, size=n)


def ground_truth_erp(dataset: EpochDataset, target: ErpTarget) -> np.ndarray:
    """Mean of the target channel over epochs of the target subject and task."""
    match = (dataset.subject_ids == target.subject) & (dataset.task_ids == target.task)
    if not match.any():
        raise ValueError(f"no epochs for subject {target.subject}, task {target.task}")
    return dataset.epochs[match, target.channel].astype(np.float64).mean(axis=0)


def decode_pairs(model: Model, bank: LatentBank, pairs, batch_size: int = DECODE_BATCH) -> np.ndarray:
    """Decode each (subject-donor, task-donor) pair; returns (N, C, T)."""
    si, ti = (np.asarray(p) for p in pairs)
    out = []
    with no_grad():
        for lo in range(0, len(si), batch_size):
            zs = as_tensor(bank.subject[si[lo : lo + batch_size]])
            zt = as_tensor(bank.task[ti[lo : lo + batch_size]])
            out.append(model.decode((zs, zt)).data)
    return np.concatenate(out)


def converted_erp(model: Model, bank: LatentBank, pairs, channel: int) -> np.ndarray:
    """Average of the decoded target channel over all drawn pairs."""
    if len(pairs[0]) < 1:
        raise ValueError("converted_erp needs at least one latent pair")
    return decode_pairs(model, bank, pairs)[:, channel].astype(np.float64).mean(axis=0)


def erp_conversion_mse(erp, c_erp) -> float:
    erp, c_erp = np.asarray(erp, dtype=np.float64), np.asarray(c_erp, dtype=np.float64)
    if erp.shape != c_erp.shape:
        raise ValueError(f"length mismatch: {erp.shape} vs {c_erp.shape}")
    return float(np.mean((erp - c_erp) ** 2))


def global_mean_erp_mse(dataset: EpochDataset, channel: int) -> float:
    """Baseline: every cell's ERP predicted by the grand-average ERP."""
    grand = dataset.epochs[:, channel].astype(np.float64).mean(axis=0)
    errs = [
        erp_conversion_mse(ground_truth_erp(dataset, ErpTarget(s, t, channel)), grand)
        for s in dataset.subjects for t in dataset.tasks
        if ((dataset.subject_ids == s) & (dataset.task_ids == t)).any()
    ]
    return float(np.mean(errs))


@dataclass
class ConversionReport:
    rows: list  # (condition label, subject, task, n, mse)

    def summary(self) -> dict[str, float]:
        """Unweighted mean MSE over (subject, task) cells per condition."""
        out: dict[str, list] = {}
        for label, _, _, _, err in self.rows:
            out.setdefault(label, []).append(err)
        return {k: float(np.mean(v)) for k, v in out.items()}

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "subject", "task", "n", "mse"])
            for label, s, t, n, err in self.rows:
                w.writerow([label, s, t, n, repr(err)])


def conversion_report(model: Model, bank: LatentBank, dataset: EpochDataset,
                      conditions: Sequence[ConversionCondition] = CONDITIONS, n: int = 2000,
                      seed: int = 0, channel: int | None = None) -> ConversionReport:
    """C-ERP MSE for every target (subject, task) cell under each condition.

    Each (condition, subject, task) cell uses its own RNG stream derived from
    ``seed`` so cells are independent of evaluation order.
    """
    if len(bank) != len(dataset):
        raise ValueError("latent bank was not built from this dataset")
    channel = dataset.erp_channel if channel is None else channel
    rows = []
    for cond in conditions:
        ci = CONDITIONS.index(cond)
        for s in dataset.subjects:
            for t in dataset.tasks:
                target = ErpTarget(int(s), int(t), channel)
                rng = np.random.default_rng([seed, ci, int(s), int(t)])
                pairs = sample_condition_pairs(bank, target, cond, n, rng)
                err = erp_conversion_mse(ground_truth_erp(dataset, target),
                                         converted_erp(model, bank, pairs, channel))
                rows.append((cond.label, int(s), int(t), n, err))
    return ConversionReport(rows)
