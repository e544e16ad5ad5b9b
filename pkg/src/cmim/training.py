"""Optimisation loop, early stopping and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"CMIM" | u32 version | u32 meta_len | meta (UTF-8 JSON)
    u32 n_tensors
    n_tensors x ( u16 name_len | name | u8 dtype | u8 ndim | ndim x u64 shape
                  | u64 nbytes | payload )
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .data import MultiModalDataset, make_batches
from .encoders import build_model
from .evaluation import subset_metric
from .losses import LossWeights, model_losses
from .mi_estimators import make_marginal_pairing

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "CheckpointError",
    "NumericalError",
    "HistoryRow",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "write_history_csv",
    "config_fingerprint",
]

MAGIC = b"CMIM"
FORMAT_VERSION = 1
_DTYPES = {
    torch.float32: (0, "<f4"),
    torch.float64: (1, "<f8"),
    torch.int64: (2, "<i8"),
    torch.int32: (3, "<i4"),
    torch.bool: (4, "|b1"),
    torch.uint8: (5, "|u1"),
}
_TAGS = {tag: (dt, np_dt) for dt, (tag, np_dt) in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class NumericalError(RuntimeError):
    """Raised when a loss component becomes NaN or infinite."""


@dataclass
class TrainConfig:
    task: str = "segmentation"
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    eval_modality_schedule: Optional[List[List[str]]] = None
    grad_clip: float = 5.0
    modality_dropout: float = 0.0
    pair_subsample: Optional[int] = None
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.task not in ("classification", "segmentation"):
            raise ValueError(f"unknown task {self.task!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class HistoryRow:
    epoch: int
    split: str
    modality_subset: str
    metric_name: str
    value: float


@dataclass
class Checkpoint:
    model_config: dict
    model_state: Dict[str, torch.Tensor]
    optimizer_state: dict
    epoch: int
    best_metric: float
    fingerprint: str
    train_config: dict = field(default_factory=dict)

    def build_model(self) -> nn.Module:
        model = build_model(self.model_config)
        dtype = next(iter(self.model_state.values())).dtype
        model.to(dtype)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def config_fingerprint(model_config: dict, cfg: TrainConfig) -> str:
    relevant = {k: v for k, v in cfg.to_dict().items() if k not in ("max_epochs", "patience")}
    blob = json.dumps({"model": model_config, "train": relevant}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _subset_name(subset: Sequence[str]) -> str:
    return "+".join(subset)


def _default_schedule(model) -> List[List[str]]:
    return [[m] for m in model.modalities]


def train(
    model: nn.Module,
    datasets: Dict[str, MultiModalDataset],
    cfg: TrainConfig,
    resume: Optional[Checkpoint] = None,
    val_metric_fn: Optional[Callable[[nn.Module, MultiModalDataset, List[str]], float]] = None,
    log: Optional[Callable[[str], None]] = None,
) -> Tuple[Checkpoint, List[HistoryRow]]:
    """Fit ``model`` on ``datasets['train']`` with early stopping on ``datasets['val']``.

    The validation score is the mean of the task metric (macro AUC or Dice)
    over ``cfg.eval_modality_schedule``, single-modality subsets by default.
    Returns the checkpoint of the best validation epoch and the metric
    history.
    """
    if model.task != cfg.task:
        raise ValueError(f"model task {model.task!r} does not match config task {cfg.task!r}")
    train_ds, val_ds = datasets["train"], datasets["val"]
    if cfg.task == "segmentation":
        train_ds, val_ds = train_ds.binarized(), val_ds.binarized()
    if train_ds.modality_names != list(model.modalities):
        raise ValueError(f"dataset modalities {train_ds.modality_names} != model modalities {model.modalities}")
    schedule = cfg.eval_modality_schedule or _default_schedule(model)
    metric_fn = val_metric_fn or subset_metric
    fingerprint = config_fingerprint(model.config, cfg)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    start_epoch, best, best_state = 0, -math.inf, None
    if resume is not None:
        if resume.fingerprint != fingerprint:
            warnings.warn(
                f"checkpoint fingerprint {resume.fingerprint} differs from current config {fingerprint}",
                stacklevel=2,
            )
        model.load_state_dict(resume.model_state)
        optimizer.load_state_dict(resume.optimizer_state)
        start_epoch, best = resume.epoch, resume.best_metric
        best_state = resume

    history: List[HistoryRow] = []
    stale = 0
    for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
        model.train()
        sums: Dict[str, float] = {}
        n_batches = 0
        for batch in make_batches(train_ds, cfg.batch_size, cfg.seed, cfg.modality_dropout, epoch):
            out = model(batch.inputs, batch.present)
            pairing = make_marginal_pairing(len(batch), batch.pairing_seed)
            parts = model_losses(
                model, out, batch.targets, cfg.weights, pairing, cfg.pair_subsample, batch.pairing_seed
            )
            for name in ("task", "ll", "lg", "gg", "total"):
                value = getattr(parts, name)
                if not math.isfinite(float(value.detach() if isinstance(value, torch.Tensor) else value)):
                    raise NumericalError(f"non-finite loss component {name!r} at epoch {epoch}")
            optimizer.zero_grad()
            parts.total.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            for name, value in parts.as_floats().items():
                sums[name] = sums.get(name, 0.0) + value
            n_batches += 1
        for name, total in sums.items():
            history.append(HistoryRow(epoch, "train", "all", f"loss_{name}", total / n_batches))

        model.eval()
        scores = []
        for subset in schedule:
            score = float(metric_fn(model, val_ds, list(subset)))
            scores.append(score)
            history.append(HistoryRow(epoch, "val", _subset_name(subset), _metric_name(cfg.task), score))
        score = float(np.mean(scores))
        history.append(HistoryRow(epoch, "val", "mean", _metric_name(cfg.task), score))
        if log:
            log(f"epoch {epoch}: loss={sums.get('total', 0.0) / max(n_batches, 1):.4f} val={score:.4f}")

        if score > best:
            best, stale = score, 0
            best_state = Checkpoint(
                model_config=copy.deepcopy(model.config),
                model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
                optimizer_state=copy.deepcopy(optimizer.state_dict()),
                epoch=epoch,
                best_metric=best,
                fingerprint=fingerprint,
                train_config=cfg.to_dict(),
            )
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is None:
        raise RuntimeError("training produced no checkpoint (max_epochs already reached?)")
    model.load_state_dict(best_state.model_state)
    return best_state, history


def _metric_name(task: str) -> str:
    return "auc" if task == "classification" else "dice"


def write_history_csv(history: Sequence[HistoryRow], path) -> None:
    lines = ["epoch,split,modality_subset,metric_name,value"]
    for r in history:
        lines.append(f"{r.epoch},{r.split},{r.modality_subset},{r.metric_name},{r.value!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# serialisation


def _flatten_optimizer(state: dict):
    tensors = {}
    entries = {}
    for idx, pstate in state["state"].items():
        keys = {}
        for key, value in pstate.items():
            if isinstance(value, torch.Tensor):
                tensors[f"optim/{idx}/{key}"] = value
                keys[key] = "tensor"
            else:
                keys[key] = value
        entries[str(idx)] = keys
    return tensors, {"param_groups": state["param_groups"], "entries": entries}


def _unflatten_optimizer(meta: dict, tensors: Dict[str, torch.Tensor]) -> dict:
    state = {}
    for idx, keys in meta["entries"].items():
        state[int(idx)] = {
            key: tensors[f"optim/{idx}/{key}"] if kind == "tensor" else kind for key, kind in keys.items()
        }
    groups = [{k: tuple(v) if k == "betas" else v for k, v in g.items()} for g in meta["param_groups"]]
    return {"state": state, "param_groups": groups}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    opt_tensors, opt_meta = _flatten_optimizer(ckpt.optimizer_state)
    meta = {
        "model_config": ckpt.model_config,
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "fingerprint": ckpt.fingerprint,
        "train_config": ckpt.train_config,
        "optimizer": opt_meta,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    named = [(f"model/{k}", v) for k, v in ckpt.model_state.items()] + sorted(opt_tensors.items())
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(named))]
    for name, tensor in named:
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        tag, np_dtype = _DTYPES[t.dtype]
        payload = t.numpy().astype(np_dtype, copy=False).tobytes()
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)) + name_b)
        chunks.append(struct.pack("<BB", tag, t.dim()) + struct.pack(f"<{t.dim()}Q", *t.shape))
        chunks.append(struct.pack("<Q", len(payload)) + payload)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.offset = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(
                f"corrupt checkpoint: truncated while reading {what} at offset {self.offset} "
                f"(need {n} bytes, {len(self.data) - self.offset} left)"
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic at offset 0")
    version, meta_len = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    meta_off = r.offset
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: bad metadata at offset {meta_off}: {e}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "tensor name").decode("utf-8", errors="replace")
        tag_off = r.offset
        tag, ndim = r.unpack("<BB", f"header of {name}")
        if tag not in _TAGS:
            raise CheckpointError(f"corrupt checkpoint: unknown dtype tag {tag} at offset {tag_off}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        (nbytes,) = r.unpack("<Q", f"size of {name}")
        dtype, np_dtype = _TAGS[tag]
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dtype).itemsize
        if nbytes != expected:
            raise CheckpointError(f"corrupt checkpoint: size mismatch for {name} at offset {r.offset - 8}")
        payload = r.take(nbytes, f"payload of {name}")
        arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr).to(dtype)
    if r.offset != len(r.data):
        raise CheckpointError(f"corrupt checkpoint: trailing bytes at offset {r.offset}")
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    optimizer_state = _unflatten_optimizer(meta["optimizer"], tensors)
    return Checkpoint(
        model_config=meta["model_config"],
        model_state=model_state,
        optimizer_state=optimizer_state,
        epoch=meta["epoch"],
        best_metric=meta["best_metric"],
        fingerprint=meta["fingerprint"],
        train_config=meta["train_config"],
    )
