"""Cross-modal MI losses, task losses and their weighted compositions.

Every MI loss is the *negated* JSD estimate so the full objective is
minimised. A loss is averaged over all (location, location) pairs with equal
weight per pair, which for a fixed batch is the same as averaging the
per-pair estimates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .critics import Critic
from .encoders import FeatureBundle, FusedFeatures, ModelOutput
from .mi_estimators import jsd_estimate, make_marginal_pairing

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "loss_local_local",
    "loss_local_global",
    "loss_global_global",
    "classification_loss",
    "segmentation_loss",
    "total_classification_loss",
    "total_segmentation_loss",
    "model_losses",
]

LN2 = math.log(2.0)


@dataclass(frozen=True)
class LossWeights:
    lambda_ll: float = 1.0
    lambda_lg: float = 0.5
    lambda_gg: float = 0.0
    lambda_task: float = 1.0

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in fields(self)]
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError("loss weights must be finite and non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossBreakdown:
    ll: torch.Tensor | float = 0.0
    lg: torch.Tensor | float = 0.0
    gg: torch.Tensor | float = 0.0
    task: torch.Tensor | float = 0.0
    total: torch.Tensor | float = 0.0

    def as_floats(self) -> Dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def _pairing_tensor(batch: int, pairing, seed: Optional[int]) -> torch.Tensor:
    if batch < 2:
        raise ValueError("insufficient batch for marginals")
    if pairing is None:
        pairing = make_marginal_pairing(batch, 0 if seed is None else seed)
    pairing = torch.as_tensor(np.asarray(pairing), dtype=torch.long)
    if pairing.shape != (batch,):
        raise ValueError("pairing must be a permutation of the batch")
    return pairing


def _ones(t: torch.Tensor) -> torch.Tensor:
    return t.new_ones(t.shape[:2])


def loss_local_local(
    bundle_i: FeatureBundle,
    fused: FusedFeatures,
    critic: Critic,
    pairing=None,
    seed: Optional[int] = None,
    num_pairs: Optional[int] = None,
) -> torch.Tensor:
    """Negated JSD estimate averaged over all ``N_i x N_M`` location pairs.

    ``pairing`` is the batch derangement defining marginal samples (built
    from ``seed`` if omitted). ``num_pairs`` draws that many location pairs
    uniformly instead of using all of them.
    """
    a, b = bundle_i.local, fused.local
    batch = a.shape[0]
    perm = _pairing_tensor(batch, pairing, seed)
    mask_a = bundle_i.mask if bundle_i.mask is not None else _ones(a)
    mask_b = fused.mask if fused.mask is not None else _ones(b)
    masked = bundle_i.mask is not None or fused.mask is not None

    if num_pairs is not None and num_pairs < a.shape[1] * b.shape[1]:
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        n_idx = torch.randint(a.shape[1], (num_pairs,), generator=gen)
        m_idx = torch.randint(b.shape[1], (num_pairs,), generator=gen)
        joint = critic(a[:, n_idx], b[:, m_idx])
        marginal = critic(a[:, n_idx], b[perm][:, m_idx])
        w_joint = mask_a[:, n_idx] * mask_b[:, m_idx]
        w_marg = mask_a[:, n_idx] * mask_b[perm][:, m_idx]
    else:
        a_exp = a.unsqueeze(2)
        joint = critic(a_exp, b.unsqueeze(1))
        marginal = critic(a_exp, b[perm].unsqueeze(1))
        w_joint = mask_a.unsqueeze(2) * mask_b.unsqueeze(1)
        w_marg = mask_a.unsqueeze(2) * mask_b[perm].unsqueeze(1)
    if not masked:
        return -jsd_estimate(joint, marginal)
    return -jsd_estimate(joint, marginal, w_joint, w_marg)


def loss_local_global(
    bundle_i: FeatureBundle,
    fused_global: torch.Tensor,
    critic: Critic,
    pairing=None,
    seed: Optional[int] = None,
) -> torch.Tensor:
    """Negated JSD estimate averaged over the ``N`` locations vs the fused global."""
    a = bundle_i.local
    perm = _pairing_tensor(a.shape[0], pairing, seed)
    joint = critic(a, fused_global.unsqueeze(1))
    marginal = critic(a, fused_global[perm].unsqueeze(1))
    if bundle_i.mask is None:
        return -jsd_estimate(joint, marginal)
    return -jsd_estimate(joint, marginal, bundle_i.mask, bundle_i.mask)


def loss_global_global(
    g_i: torch.Tensor,
    fused_global: torch.Tensor,
    critic: Critic,
    pairing=None,
    seed: Optional[int] = None,
    weights: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Negated JSD estimate on (modality global, fused global) pairs.

    ``weights`` (``[B]``) excludes samples where the modality is absent.
    """
    perm = _pairing_tensor(g_i.shape[0], pairing, seed)
    joint = critic(g_i, fused_global)
    marginal = critic(g_i, fused_global[perm])
    if weights is None:
        return -jsd_estimate(joint, marginal)
    return -jsd_estimate(joint, marginal, weights, weights)


def classification_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    k = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return F.cross_entropy(logits, labels)


def segmentation_loss(pixel_logits: torch.Tensor, masks) -> torch.Tensor:
    """Mean pixel-wise cross-entropy; ``pixel_logits`` is ``[B, H, W, K]``."""
    masks = torch.as_tensor(masks, dtype=torch.long)
    k = pixel_logits.shape[-1]
    if masks.numel() and (masks.min() < 0 or masks.max() >= k):
        raise ValueError(f"mask label out of range [0, {k})")
    return F.cross_entropy(pixel_logits.reshape(-1, k), masks.reshape(-1))


def _get(parts, name):
    if isinstance(parts, LossBreakdown):
        return getattr(parts, name)
    return parts.get(name, 0.0)


def total_classification_loss(parts, w: LossWeights) -> LossBreakdown:
    """``lambda_lg * lg + lambda_ll * ll + lambda_task * task`` (+ ``lambda_gg * gg``).

    The g->g term is only kept when ``lambda_gg > 0``; by default it is zeroed.
    """
    ll, lg, task = _get(parts, "ll"), _get(parts, "lg"), _get(parts, "task")
    gg = _get(parts, "gg") if w.lambda_gg > 0 else 0.0
    total = w.lambda_lg * lg + w.lambda_ll * ll + w.lambda_task * task
    if w.lambda_gg > 0:
        total = total + w.lambda_gg * gg
    return LossBreakdown(ll=ll, lg=lg, gg=gg, task=task, total=total)


def total_segmentation_loss(parts, w: LossWeights) -> LossBreakdown:
    ll, task = _get(parts, "ll"), _get(parts, "task")
    total = w.lambda_ll * ll + w.lambda_task * task
    return LossBreakdown(ll=ll, lg=0.0, gg=0.0, task=task, total=total)


def _mean_terms(terms):
    return torch.stack(terms).mean() if terms else 0.0


def model_losses(
    model,
    output: ModelOutput,
    targets: torch.Tensor,
    weights: LossWeights,
    pairing,
    num_pairs: Optional[int] = None,
    pair_seed: Optional[int] = None,
) -> LossBreakdown:
    """Compose the task objective for a forward pass of ``model``.

    MI terms are computed only when their weight is positive and are averaged
    over the modalities present in the batch.
    """
    fused = output.fused
    ll_terms, lg_terms, gg_terms = [], [], []
    for m, bundle in output.bundles.items():
        if weights.lambda_ll > 0:
            ll_terms.append(
                loss_local_local(bundle, fused, model.critics[f"ll/{m}"], pairing, pair_seed, num_pairs)
            )
        if model.task == "classification":
            if weights.lambda_lg > 0:
                lg_terms.append(loss_local_global(bundle, fused.global_, model.critics[f"lg/{m}"], pairing))
            if weights.lambda_gg > 0:
                w = bundle.mask[:, 0] if bundle.mask is not None else None
                gg_terms.append(
                    loss_global_global(bundle.global_, fused.global_, model.critics[f"gg/{m}"], pairing, weights=w)
                )
    parts = {"ll": _mean_terms(ll_terms), "lg": _mean_terms(lg_terms), "gg": _mean_terms(gg_terms)}
    if model.task == "classification":
        parts["task"] = classification_loss(output.logits, targets)
        return total_classification_loss(parts, weights)
    parts["task"] = segmentation_loss(output.logits, targets)
    return total_segmentation_loss(parts, weights)
