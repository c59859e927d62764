"""Command-line entry point: ``cslpae <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numeric failure. Every command writes ``manifest.json`` into its
output directory, recording inputs, outputs and their SHA-256 hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .conversion import CONDITIONS, ConversionCondition, build_latent_bank, conversion_report
from .data import EpochDataset, FormatError, SynthSpec, generate_synthetic, read_epochs, split_by_subject, write_epochs
from .evaluation import run_latent_cv
from .gradsuite import TOLERANCE, run_suite
from .losses import LossConfig
from .model import ModelConfig
from .tensor import NumericError
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("cslpae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config_path: str | None
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    version: str = __version__

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = sha256(path)

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

SECTIONS = ("model", "loss", "train", "synth", "eval", "convert")
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"model", "loss", "out_dir"}


def load_config(path) -> dict:
    """Read a JSON config with optional sections ``model``, ``loss``, ``train``, ``synth``, ``eval``, ``convert``."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}; expected {list(SECTIONS)}")
    return cfg


def _build(cls, section: dict, name: str):
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid [{name}] config: {exc}") from exc


def resolve_train_config(cfg: dict, args) -> TrainConfig:
    model_d = dict(cfg.get("model", {}))
    loss_d = dict(cfg.get("loss", {}))
    train_d = dict(cfg.get("train", {}))
    unknown = set(train_d) - _TRAIN_KEYS
    if unknown:
        raise UsageError(f"unknown [train] keys {sorted(unknown)}")
    if args.variant:
        loss_d["variant"] = args.variant
    for flag, key in (("seed", "seed"), ("k_pairs", "k_pairs"), ("steps", "steps")):
        if getattr(args, flag, None) is not None:
            train_d[key] = getattr(args, flag)
    model = _build(ModelConfig, model_d, "model")
    loss = _build(LossConfig, loss_d, "loss")
    return _build(lambda **kw: TrainConfig(model=model, loss=loss, **kw), train_d, "train")


def parse_conditions(text: str | None, section: dict):
    raw = text if text is not None else section.get("conditions")
    if raw is None:
        return list(CONDITIONS)
    items = raw.split(",") if isinstance(raw, str) else list(raw)
    try:
        return [ConversionCondition.parse(item.strip()) for item in items if item.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_data(path) -> EpochDataset:
    if path is None:
        raise UsageError("--data is required")
    return read_epochs(path)


def cmd_synth(args, cfg, manifest: RunManifest) -> int:
    spec = _build(SynthSpec, dict(cfg.get("synth", {})), "synth")
    seed = 0 if args.seed is None else args.seed
    manifest.seed = seed
    manifest.config = {"synth": asdict(spec)}
    out = _out_dir(args)
    ds = generate_synthetic(spec, seed=seed)
    files = {"epochs.epz": ds}
    if args.split:
        files.update(zip(("train.epz", "eval.epz", "test.epz"), split_by_subject(ds, seed=seed)))
    for name, part in files.items():
        write_epochs(part, out / name)
        manifest.add_output(out / name)
        print(f"{name}: {len(part)} epochs, subjects {part.subjects.tolist()}")
    return EXIT_OK


def cmd_train(args, cfg, manifest: RunManifest) -> int:
    tcfg = resolve_train_config(cfg, args)
    ds = _read_data(args.data)
    manifest.add_input(args.data)
    manifest.seed = tcfg.seed
    manifest.config = tcfg.to_dict()
    out = _out_dir(args)
    if tcfg.checkpoint_every:
        tcfg.out_dir = str(out)
    print(f"training {tcfg.loss.variant} components={sorted(tcfg.loss.components)} steps={tcfg.steps}")
    model, history = train(tcfg, ds)
    save_checkpoint(model, out / "model.slpa", extra={"train": manifest.config})
    history.write(out / "history.csv")
    for name in sorted(p.name for p in out.glob("*.slpa")) + ["history.csv"]:
        manifest.add_output(out / name)
    last = history.rows[-1]
    print("final " + " ".join(f"{k}={v:.6g}" for k, v in last.items()))
    return EXIT_OK


def cmd_eval(args, cfg, manifest: RunManifest) -> int:
    section = cfg.get("eval", {})
    ds = _read_data(args.data)
    model = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    manifest.add_input(args.data)
    manifest.add_input(args.checkpoint)
    seed = 0 if args.seed is None else args.seed
    manifest.seed = seed
    manifest.config = {"eval": {**section, "seed": seed}}
    out = _out_dir(args)
    report = run_latent_cv(build_latent_bank(model, ds), seed=seed, **section)
    report.write(out / "metrics.csv")
    manifest.add_output(out / "metrics.csv")
    for name, value in report.as_dict().items():
        print(f"{name}: {value:.4f} ± {report.sem(name):.4f}")
    return EXIT_OK


def cmd_convert(args, cfg, manifest: RunManifest) -> int:
    section = dict(cfg.get("convert", {}))
    conditions = parse_conditions(args.conditions, section)
    n = args.n_samples if args.n_samples is not None else int(section.get("n_samples", 2000))
    if n < 1:
        raise UsageError("--n-samples must be positive")
    ds = _read_data(args.data)
    model = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    manifest.add_input(args.data)
    manifest.add_input(args.checkpoint)
    seed = 0 if args.seed is None else args.seed
    manifest.seed = seed
    manifest.config = {"convert": {"conditions": [c.key for c in conditions], "n_samples": n, "seed": seed}}
    out = _out_dir(args)
    report = conversion_report(model, build_latent_bank(model, ds), ds, conditions, n=n, seed=seed)
    report.write(out / "conversion.csv")
    manifest.add_output(out / "conversion.csv")
    for label, value in report.summary().items():
        print(f"{label}: {value:.6g}")
    return EXIT_OK


def cmd_export_latents(args, cfg, manifest: RunManifest) -> int:
    ds = _read_data(args.data)
    model = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    manifest.add_input(args.data)
    manifest.add_input(args.checkpoint)
    out = _out_dir(args)
    bank = build_latent_bank(model, ds)
    bank.save(out / "latents.npz")
    manifest.add_output(out / "latents.npz")
    print(f"latents.npz: {len(bank)} epochs, subject {bank.subject.shape[1:]}, task {bank.task.shape[1:]}")
    return EXIT_OK


def cmd_gradcheck(args, cfg, manifest: RunManifest) -> int:
    seed = 0 if args.seed is None else args.seed
    manifest.seed = seed
    manifest.config = {"gradcheck": {"n_configs": 3, "tolerance": TOLERANCE}}
    out = _out_dir(args)
    result = run_suite(n_configs=3, seed=seed)
    for name, err in result.errors.items():
        print(f"{name:20s} {err:.3e}")
    print(f"max_rel_error {result.max_error:.3e} ({result.seconds:.1f}s)")
    (out / "gradcheck.json").write_text(json.dumps(result.errors, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.add_output(out / "gradcheck.json")
    if not result.passed:
        raise NumericError(f"gradient check failed: max relative error {result.max_error:.3e} >= {TOLERANCE}")
    return EXIT_OK


def _need(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "convert": cmd_convert,
    "export-latents": cmd_export_latents,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cslpae", description="Split-latent autoencoder pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_, data=False, checkpoint=False, out_required=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, default=".", help="output directory")
        if data:
            p.add_argument("--data", help="epoch file")
        if checkpoint:
            p.add_argument("--checkpoint", help="model checkpoint")
        return p

    p = add("synth", "generate a synthetic epoch file")
    p.add_argument("--split", action="store_true", help="also write subject-disjoint train/eval/test files")
    p = add("train", "train a model variant", data=True)
    p.add_argument("--variant")
    p.add_argument("--k-pairs", type=int)
    p.add_argument("--steps", type=int)
    add("eval", "cross-validated latent probes", data=True, checkpoint=True)
    p = add("convert", "ERP conversion report", data=True, checkpoint=True)
    p.add_argument("--conditions", help="comma list, e.g. ss-st,ds-st")
    p.add_argument("--n-samples", type=int)
    add("export-latents", "write the latent bank of a dataset", data=True, checkpoint=True)
    add("gradcheck", "run the finite-difference gradient suite", out_required=False)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    manifest = RunManifest(args.command, argv, args.config, {}, args.seed, started=_now())
    try:
        cfg = load_config(args.config)
        if args.config:
            manifest.add_input(args.config)
        code = COMMANDS[args.command](args, cfg, manifest)
    except UsageError as exc:
        print(f"cslpae {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"cslpae {args.command}: numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (FormatError, OSError, ValueError) as exc:
        print(f"cslpae {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out = Path(args.out)
    if out.is_dir():
        manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
