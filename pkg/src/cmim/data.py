"""Synthetic multi-modal datasets, manifest ingestion and batching.

Two synthetic generators stand in for real clinical data:

* classification -- an image modality (class-specific blob pattern plus
  noise) and a token-sequence modality (class keywords mixed with random
  distractors);
* segmentation -- four co-registered "MR" channels rendered from a 5-label
  tumour field, each with its own intensity table and noise. A modality's
  *contrast* scales how far the target (enhancing) class departs from the
  surrounding oedema, so low contrast makes a weak modality.

Images are quantised to 8-bit levels at generation time so they survive a
PNG round trip unchanged.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .encoders import ModalityKind

__all__ = [
    "SEGMENTATION_MODALITIES",
    "CLASSIFICATION_MODALITIES",
    "ENHANCING_LABEL",
    "SyntheticConfig",
    "MultiModalDataset",
    "ModalityBatch",
    "ModalityRecord",
    "generate_synthetic_classification",
    "generate_synthetic_segmentation",
    "binarize_target",
    "load_manifest",
    "save_dataset",
    "make_batches",
    "split_dataset",
]

SEGMENTATION_MODALITIES = ("flair", "t1", "t1c", "t2")
CLASSIFICATION_MODALITIES = ("image", "text")
NUM_SEG_LABELS = 5
ENHANCING_LABEL = 4
PAD_ID = 0

# Intensity of labels 0..3 (background, necrosis, oedema, non-enhancing) per
# modality, and the enhancing-class intensity at full contrast.
_SEG_INTENSITY = {
    "flair": ([0.20, 0.45, 0.85, 0.65], 0.05),
    "t1": ([0.45, 0.20, 0.35, 0.30], 0.80),
    "t1c": ([0.25, 0.10, 0.35, 0.45], 0.95),
    "t2": ([0.20, 0.60, 0.70, 0.45], 0.05),
}
_OEDEMA = 2

_DEFAULT_NOISE = {
    "segmentation": {"flair": 0.10, "t1": 0.10, "t1c": 0.05, "t2": 0.05},
    "classification": {"image": 0.6, "text": 0.3},
}
_DEFAULT_CONTRAST = {
    "segmentation": {"flair": 0.15, "t1": 0.25, "t1c": 1.0, "t2": 0.8},
    "classification": {"image": 1.0, "text": 1.0},
}


@dataclass
class SyntheticConfig:
    """Parameters of a synthetic dataset.

    ``modality_noise`` is a per-modality noise level: Gaussian std for image
    channels, distractor probability (in ``[0, 1]``) for text.
    ``modality_contrast`` scales each segmentation channel's target-class
    contrast (1 = full, 0 = invisible); it is ignored for classification.
    Missing entries take the task defaults.
    """

    task: str = "segmentation"
    num_samples: int = 200
    image_size: int = 32
    num_classes: int = 14
    modality_noise: Dict[str, float] = field(default_factory=dict)
    modality_contrast: Dict[str, float] = field(default_factory=dict)
    seq_len: int = 16
    vocab_size: int = 64
    keywords_per_class: int = 2
    tumour_probability: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("classification", "segmentation"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        names = SEGMENTATION_MODALITIES if self.task == "segmentation" else CLASSIFICATION_MODALITIES
        for key, table in (("modality_noise", self.modality_noise), ("modality_contrast", self.modality_contrast)):
            unknown = set(table) - set(names)
            if unknown:
                raise ValueError(f"{key}: unknown modalities {sorted(unknown)}")
            for v in table.values():
                if not math.isfinite(v) or v < 0:
                    raise ValueError(f"{key} values must be finite and >= 0")
        self.modality_noise = {**_DEFAULT_NOISE[self.task], **self.modality_noise}
        self.modality_contrast = {**_DEFAULT_CONTRAST[self.task], **self.modality_contrast}
        if self.task == "classification":
            if self.num_classes < 2:
                raise ValueError("num_classes must be >= 2")
            if self.modality_noise["text"] > 1:
                raise ValueError("text noise is a probability and must be <= 1")
            if 1 + self.num_classes * self.keywords_per_class > self.vocab_size:
                raise ValueError("vocab_size too small for the class keywords")


@dataclass
class MultiModalDataset:
    """Aligned per-modality arrays plus targets and a presence mask.

    ``modalities`` maps a name to ``[N, H, W]`` float32 images or ``[N, L]``
    int64 token ids. ``targets`` is ``[N]`` class labels or ``[N, H, W]``
    label masks; ``present`` is ``[N, M]`` in ``modality_names`` order.
    """

    task: str
    modalities: Dict[str, np.ndarray]
    targets: np.ndarray
    present: np.ndarray
    ids: List[str]
    num_classes: int
    kinds: Dict[str, ModalityKind] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.ids)
        for name, arr in self.modalities.items():
            if arr.shape[0] != n:
                raise ValueError(f"modality {name!r} has {arr.shape[0]} rows, expected {n}")
        if self.targets.shape[0] != n or self.present.shape != (n, len(self.modalities)):
            raise ValueError("targets/present are not aligned with the samples")
        if n and not np.all(self.present.any(axis=1)):
            raise ValueError("every sample needs at least one modality present")

    @property
    def modality_names(self) -> List[str]:
        return list(self.modalities)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "MultiModalDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            modalities={k: v[idx] for k, v in self.modalities.items()},
            targets=self.targets[idx],
            present=self.present[idx],
            ids=[self.ids[i] for i in idx],
        )

    def binarized(self, target_class: int = ENHANCING_LABEL) -> "MultiModalDataset":
        """Segmentation targets reduced to the 1-vs-rest ``target_class`` map."""
        if self.task != "segmentation":
            raise ValueError("only segmentation datasets can be binarized")
        if self.num_classes == 2:
            return self
        return replace(self, targets=binarize_target(self.targets, target_class, self.num_classes), num_classes=2)


@dataclass
class ModalityRecord:
    id: str
    payload: Dict[str, str]
    label: Optional[int] = None
    mask: Optional[str] = None
    split: Optional[str] = None

    @property
    def present(self) -> Dict[str, bool]:
        return {k: bool(v) for k, v in self.payload.items()}


@dataclass
class ModalityBatch:
    inputs: Dict[str, torch.Tensor]
    targets: torch.Tensor
    present: torch.Tensor
    pairing_seed: int
    indices: np.ndarray

    def __len__(self) -> int:
        return self.present.shape[0]

    def validate(self, modality_names: Sequence[str]):
        b = len(self)
        if list(self.inputs) != list(modality_names):
            raise ValueError("batch modalities out of order")
        if self.present.shape != (b, len(modality_names)) or self.present.dtype != torch.bool:
            raise ValueError("present mask has the wrong shape or dtype")
        if any(t.shape[0] != b for t in self.inputs.values()) or self.targets.shape[0] != b:
            raise ValueError("batch arrays are not aligned")
        if not bool(self.present.any(dim=1).all()):
            raise ValueError("sample without any present modality")
        if len(self.indices) != b:
            raise ValueError("indices not aligned")


# ---------------------------------------------------------------------------
# generators


def _quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _class_templates(num_classes: int, size: int) -> np.ndarray:
    # Fixed per-class patterns, independent of the dataset seed.
    rng = np.random.default_rng(12345)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    templates = np.zeros((num_classes, size, size))
    for c in range(num_classes):
        for _ in range(3):
            cy, cx = rng.uniform(0.15, 0.85, size=2) * size
            sigma = rng.uniform(0.06, 0.12) * size
            templates[c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        templates[c] /= templates[c].max()
    return templates


def generate_synthetic_classification(cfg: SyntheticConfig) -> MultiModalDataset:
    """Paired image/text samples sharing a latent class label."""
    if cfg.task != "classification":
        raise ValueError("config task must be 'classification'")
    rng = np.random.default_rng(cfg.seed)
    n, k, size = cfg.num_samples, cfg.num_classes, cfg.image_size
    labels = rng.integers(0, k, size=n)
    templates = _class_templates(k, size)
    amplitude = rng.uniform(0.6, 0.9, size=n)
    noise = rng.normal(0.0, 1.0, size=(n, size, size))
    images = _quantize(0.05 + amplitude[:, None, None] * templates[labels] + cfg.modality_noise["image"] * noise)

    kpc = cfg.keywords_per_class
    lengths = rng.integers(cfg.seq_len // 2, cfg.seq_len + 1, size=n)
    is_keyword = rng.random((n, cfg.seq_len)) >= cfg.modality_noise["text"]
    keyword = 1 + labels[:, None] * kpc + rng.integers(0, kpc, size=(n, cfg.seq_len))
    distractor = rng.integers(1, cfg.vocab_size, size=(n, cfg.seq_len))
    tokens = np.where(is_keyword, keyword, distractor)
    tokens[np.arange(cfg.seq_len)[None, :] >= lengths[:, None]] = PAD_ID

    return MultiModalDataset(
        task="classification",
        modalities={"image": images, "text": tokens.astype(np.int64)},
        targets=labels.astype(np.int64),
        present=np.ones((n, 2), dtype=bool),
        ids=[f"s{i:05d}" for i in range(n)],
        num_classes=k,
        kinds={"image": ModalityKind.IMAGE_2D, "text": ModalityKind.TOKEN_SEQUENCE},
    )


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v


def _tumour_labels(rng: np.random.Generator, size: int, p_tumour: float) -> np.ndarray:
    labels = np.zeros((size, size), dtype=np.int64)
    if rng.random() >= p_tumour:
        return labels
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    radius = rng.uniform(0.16, 0.28) * size
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    ry, rx = radius * rng.uniform(0.75, 1.0, size=2)
    theta = rng.uniform(0, math.pi)
    r2 = _ellipse(yy, xx, cy, cx, ry, rx, theta)
    labels[r2 <= 1.0] = 2
    # non-enhancing patch inside the oedema, off-centre
    ang = rng.uniform(0, 2 * math.pi)
    py, px = cy + 0.7 * ry * math.sin(ang), cx + 0.7 * rx * math.cos(ang)
    patch = _ellipse(yy, xx, py, px, 0.3 * ry, 0.3 * rx, theta)
    labels[(patch <= 1.0) & (r2 <= 1.0)] = 3
    inner, core = rng.uniform(0.5, 0.65), rng.uniform(0.25, 0.35)
    labels[r2 <= inner**2] = ENHANCING_LABEL
    labels[r2 <= core**2] = 1
    return labels


def generate_synthetic_segmentation(cfg: SyntheticConfig) -> MultiModalDataset:
    """Four co-registered channels rendered from a 5-label tumour field."""
    if cfg.task != "segmentation":
        raise ValueError("config task must be 'segmentation'")
    rng = np.random.default_rng(cfg.seed)
    n, size = cfg.num_samples, cfg.image_size
    masks = np.stack([_tumour_labels(rng, size, cfg.tumour_probability) for _ in range(n)])
    volumes = {}
    for m in SEGMENTATION_MODALITIES:
        base, target = _SEG_INTENSITY[m]
        ref = base[_OEDEMA]
        table = np.array(base + [ref + cfg.modality_contrast[m] * (target - ref)])
        noise = rng.normal(0.0, 1.0, size=(n, size, size))
        volumes[m] = _quantize(table[masks] + cfg.modality_noise[m] * noise)
    return MultiModalDataset(
        task="segmentation",
        modalities=volumes,
        targets=masks,
        present=np.ones((n, len(SEGMENTATION_MODALITIES)), dtype=bool),
        ids=[f"s{i:05d}" for i in range(n)],
        num_classes=NUM_SEG_LABELS,
        kinds={m: ModalityKind.VOLUME_CHANNEL for m in SEGMENTATION_MODALITIES},
    )


def binarize_target(mask, target_class: int, num_labels: int = NUM_SEG_LABELS) -> np.ndarray:
    """1 where ``mask == target_class``, else 0."""
    if not 0 <= target_class < num_labels:
        raise ValueError(f"target_class must be in [0, {num_labels})")
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_labels):
        raise ValueError("mask labels out of range")
    return (mask == target_class).astype(np.int64)


def split_dataset(ds: MultiModalDataset, fractions: Dict[str, float], seed: int) -> Dict[str, MultiModalDataset]:
    """Seeded random partition into named splits (the last takes the remainder)."""
    order = np.random.default_rng(seed).permutation(len(ds))
    total = sum(fractions.values())
    out, start = {}, 0
    names = list(fractions)
    for i, name in enumerate(names):
        stop = len(ds) if i == len(names) - 1 else start + int(round(len(ds) * fractions[name] / total))
        out[name] = ds.subset(np.sort(order[start:stop]))
        start = stop
    return out


# ---------------------------------------------------------------------------
# manifest I/O

_PAYLOAD_FIELDS = ("image", "text") + SEGMENTATION_MODALITIES
_KNOWN_FIELDS = {"id", "label", "mask", "split"} | set(_PAYLOAD_FIELDS)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def _parse_record(line: str, lineno: int) -> ModalityRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ValueError(f"manifest line {lineno}: malformed JSON ({e.msg})") from None
    if not isinstance(obj, dict) or "id" not in obj:
        raise ValueError(f"manifest line {lineno}: record must be an object with an 'id'")
    unknown = set(obj) - _KNOWN_FIELDS
    if unknown:
        raise ValueError(f"manifest line {lineno}: unknown fields {sorted(unknown)}")
    if ("label" in obj) == ("mask" in obj):
        raise ValueError(f"manifest line {lineno}: exactly one of 'label' or 'mask' required")
    if "label" in obj and not isinstance(obj["label"], int):
        raise ValueError(f"manifest line {lineno}: 'label' must be an integer")
    payload = {k: obj[k] for k in _PAYLOAD_FIELDS if obj.get(k)}
    if not payload:
        raise ValueError(f"manifest line {lineno}: no modality present")
    return ModalityRecord(
        id=str(obj["id"]), payload=payload, label=obj.get("label"), mask=obj.get("mask"), split=obj.get("split")
    )


def load_manifest(path, split: Optional[str] = None, num_classes: Optional[int] = None,
                  seq_len: Optional[int] = None) -> MultiModalDataset:
    """Read a JSONL manifest (paths relative to the manifest's directory).

    A modality is absent for a record when its field is missing or empty.
    ``split`` keeps only records with that ``split`` value.
    """
    path = Path(path)
    root = path.parent
    lines = path.read_text(encoding="utf-8").splitlines()
    records: List[tuple] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        rec = _parse_record(line, lineno)
        if split is None or rec.split == split:
            records.append((lineno, rec))
    if not records:
        raise ValueError("empty manifest" if split is None else f"no records for split {split!r}")
    task = "classification" if records[0][1].label is not None else "segmentation"
    if any((r.label is not None) != (task == "classification") for _, r in records):
        raise ValueError("manifest mixes classification and segmentation records")

    names = [m for m in _PAYLOAD_FIELDS if any(m in r.payload for _, r in records)]
    arrays: Dict[str, list] = {m: [] for m in names}
    present = np.zeros((len(records), len(names)), dtype=bool)
    targets = []

    def resolve(p, lineno):
        full = root / p
        if not full.is_file():
            raise FileNotFoundError(f"manifest line {lineno}: missing file {p}")
        return full

    for i, (lineno, rec) in enumerate(records):
        for j, m in enumerate(names):
            if m not in rec.payload:
                arrays[m].append(None)
                continue
            present[i, j] = True
            f = resolve(rec.payload[m], lineno)
            if m == "text":
                try:
                    arrays[m].append(np.array([int(t) for t in f.read_text().split()], dtype=np.int64))
                except ValueError:
                    raise ValueError(f"manifest line {lineno}: text file must hold integer token ids") from None
            else:
                arrays[m].append(_read_png(f).astype(np.float32) / 255.0)
        if task == "classification":
            targets.append(rec.label)
        else:
            targets.append(_read_png(resolve(rec.mask, lineno)).astype(np.int64))

    modalities = {}
    for m in names:
        items = arrays[m]
        if m == "text":
            length = seq_len or max(len(t) for t in items if t is not None)
            out = np.full((len(items), length), PAD_ID, dtype=np.int64)
            for i, t in enumerate(items):
                if t is not None:
                    out[i, : min(len(t), length)] = t[:length]
            modalities[m] = out
        else:
            shape = next(a.shape for a in items if a is not None)
            if any(a is not None and a.shape != shape for a in items):
                raise ValueError(f"modality {m!r}: images differ in size")
            modalities[m] = np.stack([a if a is not None else np.zeros(shape, np.float32) for a in items])
    targets_arr = np.asarray(targets, dtype=np.int64) if task == "classification" else np.stack(targets)
    if num_classes is None:
        num_classes = int(targets_arr.max()) + 1 if task == "classification" else NUM_SEG_LABELS
    kinds = {
        m: ModalityKind.TOKEN_SEQUENCE if m == "text" else
        (ModalityKind.IMAGE_2D if m == "image" else ModalityKind.VOLUME_CHANNEL)
        for m in names
    }
    return MultiModalDataset(
        task=task, modalities=modalities, targets=targets_arr, present=present,
        ids=[r.id for _, r in records], num_classes=num_classes, kinds=kinds,
    )


def save_dataset(splits: Dict[str, MultiModalDataset], root) -> Path:
    """Write ``<root>/<split>/<id>.<modality>.png|txt`` and ``<root>/manifest.jsonl``."""
    root = Path(root)
    lines = []
    for split, ds in splits.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i, sid in enumerate(ds.ids):
            rec = {"id": sid, "split": split}
            for j, m in enumerate(ds.modality_names):
                if not ds.present[i, j]:
                    continue
                arr = ds.modalities[m][i]
                if m == "text":
                    name = f"{sid}.{m}.txt"
                    toks = arr[arr != PAD_ID]
                    (d / name).write_text(" ".join(str(int(t)) for t in toks) + "\n")
                else:
                    name = f"{sid}.{m}.png"
                    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(d / name)
                rec[m] = f"{split}/{name}"
            if ds.task == "classification":
                rec["label"] = int(ds.targets[i])
            else:
                name = f"{sid}.mask.png"
                Image.fromarray(ds.targets[i].astype(np.uint8), mode="L").save(d / name)
                rec["mask"] = f"{split}/{name}"
            lines.append(json.dumps(rec, sort_keys=True))
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# ---------------------------------------------------------------------------
# batching


def make_batches(
    dataset: MultiModalDataset,
    batch_size: int,
    seed: int,
    train_modality_dropout: float = 0.0,
    epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[ModalityBatch]:
    """Yield one epoch of batches, reproducible from ``(seed, epoch)``.

    With ``train_modality_dropout > 0`` each present modality of each sample
    is dropped independently; if that would leave a sample with nothing, the
    sample keeps its original modalities. A trailing batch of one sample is
    merged into the previous batch.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (MI losses need marginals)")
    if not 0.0 <= train_modality_dropout < 1.0:
        raise ValueError("train_modality_dropout must be in [0, 1)")
    n = len(dataset)
    if n < 2:
        raise ValueError("dataset needs at least 2 samples")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n) if shuffle else np.arange(n)
    present = dataset.present.copy()
    if train_modality_dropout > 0:
        drop = rng.random(present.shape) < train_modality_dropout
        kept = present & ~drop
        emptied = ~kept.any(axis=1)
        kept[emptied] = present[emptied]
        present = kept
    starts = list(range(0, n, batch_size))
    if n - starts[-1] < 2:
        starts.pop()
    for k, start in enumerate(starts):
        stop = n if k == len(starts) - 1 else start + batch_size
        idx = order[start:stop]
        inputs = {m: torch.from_numpy(dataset.modalities[m][idx]) for m in dataset.modality_names}
        yield ModalityBatch(
            inputs=inputs,
            targets=torch.from_numpy(dataset.targets[idx]),
            present=torch.from_numpy(present[idx]),
            pairing_seed=int(rng.integers(0, 2**31 - 1)),
            indices=idx,
        )
