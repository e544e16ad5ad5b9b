"""Modality-dropping evaluation, AUC / Dice metrics and comparison reports."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

__all__ = [
    "auc",
    "macro_auc",
    "dice",
    "mean_dice",
    "predict_logits",
    "subset_metric",
    "evaluate",
    "evaluate_modality_dropping",
    "ReportRow",
    "MetricsReport",
    "ComparisonTable",
    "ablation_compare",
]


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    ranks = rankdata(scores)  # average ranks resolve ties as half-wins
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auc(probabilities, labels, num_classes: Optional[int] = None) -> float:
    """Mean one-vs-rest AUC over the classes that have both positives and negatives."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    k = num_classes or probabilities.shape[1]
    per_class = []
    for c in range(k):
        y = (labels == c).astype(int)
        if 0 < y.sum() < len(y):
            per_class.append(auc(probabilities[:, c], y))
    if not per_class:
        raise ValueError("AUC undefined: labels contain a single class")
    return float(np.mean(per_class))


def dice(pred, truth) -> float:
    """``2 |P & T| / (|P| + |T|)``; two empty masks score 1."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    denom = int(pred.sum()) + int(truth.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / denom


def mean_dice(preds, truths) -> float:
    """Per-sample Dice averaged over the batch axis, summed in index order."""
    scores = [dice(p, t) for p, t in zip(preds, truths)]
    return float(np.mean(scores))


def _present_for(model, dataset, subset: Optional[Sequence[str]]) -> np.ndarray:
    if subset is None:
        return dataset.present
    unknown = set(subset) - set(model.modalities)
    if unknown:
        raise ValueError(f"unknown modalities: {sorted(unknown)}")
    if not subset:
        raise ValueError("modality subset must be non-empty")
    wanted = np.array([m in subset for m in dataset.modality_names])
    present = dataset.present & wanted[None, :]
    if not present.any(axis=1).all():
        raise ValueError(f"some samples have none of the modalities {list(subset)}")
    return present


@torch.no_grad()
def predict_logits(model, dataset, subset: Optional[Sequence[str]] = None, batch_size: int = 64) -> np.ndarray:
    """Logits for every sample with only ``subset`` flagged present (all if ``None``)."""
    was_training = model.training
    model.eval()
    present = torch.from_numpy(_present_for(model, dataset, subset))
    outs = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        inputs = {m: torch.from_numpy(dataset.modalities[m][sl]) for m in dataset.modality_names}
        outs.append(model(inputs, present[sl]).logits.cpu().numpy())
    model.train(was_training)
    return np.concatenate(outs)


def _metric_from_logits(task: str, logits: np.ndarray, dataset) -> float:
    if task == "classification":
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        return macro_auc(probs, dataset.targets, dataset.num_classes)
    pred = logits.argmax(axis=-1)
    truth = dataset.targets if dataset.num_classes == 2 else dataset.binarized().targets
    return mean_dice(pred == 1, truth == 1)


def subset_metric(model, dataset, subset: Optional[Sequence[str]] = None) -> float:
    """Task metric (macro AUC or mean Dice) using only ``subset`` at inference."""
    return _metric_from_logits(model.task, predict_logits(model, dataset, subset), dataset)


def evaluate(model, dataset) -> float:
    """Standard evaluation with every available modality."""
    return subset_metric(model, dataset, None)


@dataclass(frozen=True)
class ReportRow:
    present_modalities: tuple
    metric: str
    value: float
    n_samples: int

    @property
    def subset(self) -> str:
        return "+".join(self.present_modalities)


@dataclass
class MetricsReport:
    rows: List[ReportRow]

    def __post_init__(self):
        for r in self.rows:
            if not 0.0 <= r.value <= 1.0:
                raise ValueError(f"metric value {r.value} outside [0, 1]")

    def to_csv(self) -> str:
        lines = ["subset,metric,value,n"]
        lines += [f"{r.subset},{r.metric},{r.value!r},{r.n_samples}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max([len("subset")] + [len(r.subset) for r in self.rows])
        lines = [f"{'subset':<{width}}  metric  value    n"]
        for r in self.rows:
            lines.append(f"{r.subset:<{width}}  {r.metric:<6}  {r.value:.4f}  {r.n_samples}")
        return "\n".join(lines) + "\n"

    def value(self, subset: Sequence[str]) -> float:
        key = tuple(subset)
        for r in self.rows:
            if r.present_modalities == key:
                return r.value
        raise KeyError(subset)


def evaluate_modality_dropping(ckpt_or_model, dataset, subsets: Sequence[Sequence[str]]) -> MetricsReport:
    """One report row per modality subset, inferring with only that subset present."""
    model = ckpt_or_model.build_model() if hasattr(ckpt_or_model, "build_model") else ckpt_or_model
    metric = "AUC" if model.task == "classification" else "DSC"
    rows = []
    for subset in subsets:
        value = subset_metric(model, dataset, list(subset))
        rows.append(ReportRow(tuple(subset), metric, value, len(dataset)))
    return MetricsReport(rows)


@dataclass
class ComparisonTable:
    names: List[str]
    subsets: List[str]
    metric: str
    values: Dict[str, List[float]]
    deltas: List[float]  # second report minus first, per subset

    def to_csv(self) -> str:
        header = ["subset", "metric"] + self.names + ["delta"]
        lines = [",".join(header)]
        for i, s in enumerate(self.subsets):
            vals = [repr(self.values[n][i]) for n in self.names]
            lines.append(",".join([s, self.metric, *vals, repr(self.deltas[i])]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max([len("subset")] + [len(s) for s in self.subsets])
        cols = [f"{n:>12}" for n in self.names]
        lines = [f"{'subset':<{width}}  " + "  ".join(cols) + f"  {'delta':>8}"]
        for i, s in enumerate(self.subsets):
            vals = "  ".join(f"{self.values[n][i]:>12.4f}" for n in self.names)
            lines.append(f"{s:<{width}}  {vals}  {self.deltas[i]:>+8.4f}")
        return "\n".join(lines) + "\n"


def ablation_compare(reports: Dict[str, MetricsReport]) -> ComparisonTable:
    """Side-by-side table of two reports with per-subset deltas (second - first)."""
    if len(reports) != 2:
        raise ValueError("ablation_compare needs exactly two reports")
    (name_a, rep_a), (name_b, rep_b) = reports.items()
    subsets_a = [r.subset for r in rep_a.rows]
    subsets_b = [r.subset for r in rep_b.rows]
    if subsets_a != subsets_b:
        raise ValueError(f"reports cover different subsets: {subsets_a} vs {subsets_b}")
    metrics = {r.metric for r in rep_a.rows + rep_b.rows}
    if len(metrics) != 1:
        raise ValueError(f"reports use different metrics: {sorted(metrics)}")
    va = [r.value for r in rep_a.rows]
    vb = [r.value for r in rep_b.rows]
    return ComparisonTable(
        names=[name_a, name_b],
        subsets=subsets_a,
        metric=metrics.pop(),
        values={name_a: va, name_b: vb},
        deltas=[b - a for a, b in zip(va, vb)],
    )
