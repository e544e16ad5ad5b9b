"""Command-line entry point: ``cmim {gen-data,train,eval,ablate}``.

Every command reads one YAML experiment config. Defaults are filled in and
the result is written to ``<out>/resolved_config.yaml`` before any work is
done, so a run can always be replayed from its output directory. Timestamps
only ever go to ``<out>/run.log``; all other outputs are byte-reproducible
for a fixed config and seed.

Exit codes: 0 success, 1 I/O error, 2 config or usage error, 3 numerical
failure during training.
"""
from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
from collections import Counter
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import yaml

from .data import (
    MultiModalDataset,
    SyntheticConfig,
    generate_synthetic_classification,
    generate_synthetic_segmentation,
    load_manifest,
    save_dataset,
    split_dataset,
)
from .encoders import build_model
from .evaluation import MetricsReport, ablation_compare, evaluate_modality_dropping
from .losses import LossWeights
from .training import NumericalError, TrainConfig, load_checkpoint, save_checkpoint, train, write_history_csv

__all__ = ["main", "ConfigError", "resolve_config", "cmd_gen_data", "cmd_train", "cmd_eval", "cmd_ablate"]

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("cmim")


class ConfigError(ValueError):
    """Invalid experiment configuration or command-line usage."""


_SEG_MODEL = dict(
    modalities=["flair", "t1", "t1c", "t2"], image_size=32, widths=[8, 16, 32, 32],
    num_labels=2, critic_hidden=64, critic_layers=2,
)
_CLS_MODEL = dict(
    image_size=32, image_widths=[16, 32, 64, 64], vocab_size=64, seq_len=16, embed_dim=64,
    text_channels=64, text_blocks=2, fused_local_dim=64, fused_dim=128, rank=8, num_classes=14,
    critic_hidden=64, critic_layers=2, default_momentum=0.1,
)
_SYNTHETIC = dict(
    num_samples=200, image_size=32, num_classes=14, modality_noise={}, modality_contrast={},
    seq_len=16, vocab_size=64, keywords_per_class=2, tumour_probability=0.9,
)
_TRAIN = dict(
    learning_rate=1e-4, batch_size=32, max_epochs=100, patience=10, grad_clip=5.0,
    modality_dropout=0.0, pair_subsample=None, eval_modality_schedule=None,
)
_WEIGHTS = dict(lambda_ll=1.0, lambda_lg=0.5, lambda_gg=0.0, lambda_task=1.0)

# Sections whose contents are free-form maps (keys are modality names).
_OPEN_MAPS = {("data", "synthetic", "modality_noise"), ("data", "synthetic", "modality_contrast")}


def _defaults(task: str) -> dict:
    return {
        "task": task,
        "seed": 0,
        "out": "runs/default",
        "data": {
            "manifest": None,
            "splits": {"train": 0.6, "val": 0.2, "test": 0.2},
            "synthetic": dict(_SYNTHETIC),
        },
        "model": dict(_SEG_MODEL if task == "segmentation" else _CLS_MODEL),
        "train": dict(_TRAIN),
        "weights": dict(_WEIGHTS),
        "eval": {"subsets": None},
        "ablate": {"baseline_weights": {"lambda_ll": 0.0, "lambda_lg": 0.0, "lambda_gg": 0.0}},
    }


def _merge(defaults: dict, given: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = ".".join(path + (str(key),))
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and path + (key,) not in _OPEN_MAPS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be a mapping")
            out[key] = _merge(defaults[key], value, path + (key,))
        else:
            out[key] = value
    return out


def resolve_config(raw: dict, seed: Optional[int] = None, out: Optional[str] = None) -> dict:
    """Apply defaults and command-line overrides, then validate everything.

    Raises :class:`ConfigError` naming the offending key.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    task = raw.get("task")
    if task not in ("classification", "segmentation"):
        raise ConfigError(f"config key task must be 'classification' or 'segmentation', got {task!r}")
    cfg = _merge(_defaults(task), raw)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("config key seed must be an integer")
    # Build each typed object once so its own checks run before any work.
    try:
        LossWeights(**cfg["weights"])
        LossWeights(**{**cfg["weights"], **cfg["ablate"]["baseline_weights"]})
        _train_config(cfg, cfg["weights"])
        if cfg["data"]["manifest"] is None:
            _synthetic_config(cfg)
            _check_data_matches_model(cfg)
        splits = cfg["data"]["splits"]
        if set(splits) != {"train", "val", "test"} or any(not v > 0 for v in splits.values()):
            raise ConfigError("config key data.splits needs positive train, val and test fractions")
        modalities = _model_modalities(cfg)
        for key in ("eval.subsets", "train.eval_modality_schedule"):
            section, name = key.split(".")
            subsets = cfg[section][name]
            if subsets is not None:
                _check_subsets(subsets, modalities, key)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def _check_data_matches_model(cfg: dict) -> None:
    syn, model = cfg["data"]["synthetic"], cfg["model"]
    shared = ["image_size"]
    if cfg["task"] == "classification":
        shared += ["num_classes", "seq_len", "vocab_size"]
    for key in shared:
        if syn[key] != model[key]:
            raise ConfigError(f"config keys data.synthetic.{key} ({syn[key]}) and model.{key} ({model[key]}) differ")
    if cfg["task"] == "segmentation" and list(model["modalities"]) != ["flair", "t1", "t1c", "t2"]:
        raise ConfigError("config key model.modalities must be [flair, t1, t1c, t2] for synthetic data")


def _model_modalities(cfg: dict) -> List[str]:
    if cfg["task"] == "segmentation":
        return list(cfg["model"]["modalities"])
    return ["image", "text"]


def _check_subsets(subsets, modalities: Sequence[str], key: str) -> None:
    if not isinstance(subsets, list) or not subsets:
        raise ConfigError(f"{key} must be a non-empty list of modality lists")
    for s in subsets:
        if not isinstance(s, list) or not s:
            raise ConfigError(f"{key}: every subset must be a non-empty list")
        unknown = sorted(set(s) - set(modalities))
        if unknown:
            raise ConfigError(f"{key}: unknown modalities {unknown}")


def _synthetic_config(cfg: dict) -> SyntheticConfig:
    return SyntheticConfig(task=cfg["task"], seed=cfg["seed"], **cfg["data"]["synthetic"])


def _train_config(cfg: dict, weights: dict) -> TrainConfig:
    return TrainConfig(task=cfg["task"], seed=cfg["seed"], weights=LossWeights(**weights), **cfg["train"])


def _load_yaml(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config file is not valid YAML: {e}") from None
    return raw if raw is not None else {}


# ---------------------------------------------------------------------------
# run directory plumbing


@contextmanager
def _run_dir(out: Path, cfg: dict):
    """Create ``out``, hold its lock file, write the resolved config and log."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {out} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    handler = logging.FileHandler(out / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    try:
        (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
        yield out
    finally:
        log.removeHandler(handler)
        handler.close()
        lock.unlink(missing_ok=True)


def _say(msg: str) -> None:
    print(msg)
    log.info(msg)


def _generate(cfg: dict) -> Dict[str, MultiModalDataset]:
    syn = _synthetic_config(cfg)
    gen = generate_synthetic_segmentation if cfg["task"] == "segmentation" else generate_synthetic_classification
    return split_dataset(gen(syn), cfg["data"]["splits"], cfg["seed"])


def _manifest_path(cfg: dict, out: Path) -> Path:
    given = cfg["data"]["manifest"]
    return Path(given) if given is not None else out / "data" / "manifest.jsonl"


def _load_splits(cfg: dict, manifest: Path, names: Sequence[str]) -> Dict[str, MultiModalDataset]:
    if not manifest.is_file():
        raise ConfigError(f"dataset manifest not found: {manifest} (run gen-data or set data.manifest)")
    extra = {}
    if cfg["task"] == "classification":
        extra = dict(num_classes=cfg["model"]["num_classes"], seq_len=cfg["model"]["seq_len"])
    out = {}
    for name in names:
        ds = load_manifest(manifest, split=name, **extra)
        if cfg["task"] == "segmentation":
            # keep every configured channel, in model order, even if a split lacks one
            ds = _align_modalities(ds, _model_modalities(cfg))
        out[name] = ds
    return out


def _align_modalities(ds: MultiModalDataset, names: Sequence[str]) -> MultiModalDataset:
    if ds.modality_names == list(names):
        return ds
    shape = next(iter(ds.modalities.values())).shape
    modalities, present = {}, np.zeros((len(ds), len(names)), dtype=bool)
    for j, m in enumerate(names):
        if m in ds.modalities:
            modalities[m] = ds.modalities[m]
            present[:, j] = ds.present[:, ds.modality_names.index(m)]
        else:
            modalities[m] = np.zeros(shape, dtype=np.float32)
    return MultiModalDataset(ds.task, modalities, ds.targets, present, ds.ids, ds.num_classes)


def _eval_subsets(cfg: dict, override: Optional[List[List[str]]] = None) -> List[List[str]]:
    if override is not None:
        return override
    if cfg["eval"]["subsets"] is not None:
        return cfg["eval"]["subsets"]
    return [[m] for m in _model_modalities(cfg)]


def _fit(cfg: dict, weights: dict, splits: Dict[str, MultiModalDataset], out: Path, label: str = ""):
    torch.manual_seed(cfg["seed"])
    model = build_model({"task": cfg["task"], **cfg["model"]})
    tcfg = _train_config(cfg, weights)
    prefix = f"[{label}] " if label else ""
    try:
        ckpt, history = train(model, splits, tcfg, log=lambda m: log.info(prefix + m))
    except NumericalError as e:
        raise NumericalError(f"{prefix}{e}") from None
    save_checkpoint(ckpt, out / "best.ckpt")
    write_history_csv(history, out / "metrics.csv")
    _say(f"{prefix}best epoch {ckpt.epoch}, validation score {ckpt.best_metric:.4f}")
    return ckpt


def _write_report(report: MetricsReport, out: Path, stem: str = "report") -> None:
    (out / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / f"{stem}.txt").write_text(report.to_text(), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict) -> Path:
    """Write ``<out>/data/<split>/...`` and ``<out>/data/manifest.jsonl``."""
    out = Path(cfg["out"])
    with _run_dir(out, cfg):
        splits = _generate(cfg)
        manifest = save_dataset(splits, out / "data")
        for name, ds in splits.items():
            if ds.task == "classification":
                counts = Counter(int(t) for t in ds.targets)
                summary = ", ".join(f"{k}:{counts[k]}" for k in sorted(counts))
                _say(f"{name}: {len(ds)} samples; class counts {summary}")
            else:
                counts = np.bincount(ds.targets.ravel(), minlength=ds.num_classes)
                summary = ", ".join(f"{k}:{int(c)}" for k, c in enumerate(counts))
                _say(f"{name}: {len(ds)} samples; pixel counts per label {summary}")
        _say(f"wrote {manifest}")
    return manifest


def cmd_train(cfg: dict):
    """Train on the train/val splits; writes ``best.ckpt`` and ``metrics.csv``."""
    out = Path(cfg["out"])
    splits = _load_splits(cfg, _manifest_path(cfg, out), ["train", "val"])
    with _run_dir(out, cfg):
        return _fit(cfg, cfg["weights"], splits, out)


def cmd_eval(cfg: dict, checkpoint: Optional[str] = None, subsets: Optional[List[List[str]]] = None) -> MetricsReport:
    """Modality-dropping evaluation on the test split; writes ``report.csv``/``report.txt``."""
    out = Path(cfg["out"])
    subsets = _eval_subsets(cfg, subsets)
    _check_subsets(subsets, _model_modalities(cfg), "--modalities")
    ckpt_path = Path(checkpoint) if checkpoint else out / "best.ckpt"
    if not ckpt_path.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    test = _load_splits(cfg, _manifest_path(cfg, out), ["test"])["test"]
    with _run_dir(out, cfg):
        ckpt = load_checkpoint(ckpt_path)
        report = evaluate_modality_dropping(ckpt, test, subsets)
        _write_report(report, out)
        _say(report.to_text().rstrip())
    return report


def cmd_ablate(cfg: dict):
    """Train CMIM and the MI-free baseline on identical data and seeds, then compare."""
    out = Path(cfg["out"])
    manifest = _manifest_path(cfg, out)
    with _run_dir(out, cfg):
        if not manifest.is_file():
            if cfg["data"]["manifest"] is not None:
                raise ConfigError(f"dataset manifest not found: {manifest}")
            save_dataset(_generate(cfg), out / "data")
            _say(f"generated dataset at {manifest}")
        splits = _load_splits(cfg, manifest, ["train", "val", "test"])
        arms = {
            "baseline": {**cfg["weights"], **cfg["ablate"]["baseline_weights"]},
            "cmim": cfg["weights"],
        }
        reports = {}
        for label, weights in arms.items():
            arm_dir = out / label
            arm_dir.mkdir(exist_ok=True)
            ckpt = _fit(cfg, weights, splits, arm_dir, label)
            reports[label] = evaluate_modality_dropping(ckpt, splits["test"], _eval_subsets(cfg))
            _write_report(reports[label], arm_dir)
        table = ablation_compare(reports)
        (out / "comparison.csv").write_text(table.to_csv(), encoding="utf-8")
        (out / "comparison.txt").write_text(table.to_text(), encoding="utf-8")
        _say(table.to_text().rstrip())
    return table


# ---------------------------------------------------------------------------
# argument parsing


def _parse_subsets(values: Optional[List[str]]) -> Optional[List[List[str]]]:
    if values is None:
        return None
    return [[m for m in v.replace(",", "+").split("+") if m] for v in values]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmim", description="Cross-modal mutual information experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("gen-data", "generate a synthetic dataset and manifest"),
        ("train", "train a model and write best.ckpt and metrics.csv"),
        ("eval", "evaluate a checkpoint with modality dropping"),
        ("ablate", "train CMIM and the MI-free baseline and compare them"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("--out", help="override the output directory")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint path (default: <out>/best.ckpt)")
            p.add_argument(
                "--modalities", nargs="+", metavar="SUBSET",
                help="modality subsets to evaluate, e.g. 'flair' 't1+t2' (default: every single modality)",
            )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    log.setLevel(logging.INFO)
    try:
        cfg = resolve_config(_load_yaml(args.config), seed=args.seed, out=args.out)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, _parse_subsets(args.modalities))
        else:
            cmd_ablate(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        # malformed manifests and other invalid inputs
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
