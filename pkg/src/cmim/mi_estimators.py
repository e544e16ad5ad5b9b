"""Variational lower bounds on mutual information and exact oracles.

Two bounds are provided on top of critic scores:

* ``jsd`` -- the Jensen-Shannon surrogate ``E_P[-sp(-T)] - E_Q[sp(T)]`` whose
  supremum is ``2 * JSD(P || Q) - 2 ln 2``;
* ``dv`` -- the Donsker-Varadhan bound ``E_P[T] - log E_Q[exp T]`` whose
  supremum is the KL divergence, i.e. the mutual information.

``P`` is the joint distribution (aligned pairs) and ``Q`` the product of the
marginals (pairs mismatched by a derangement of the batch). All values are in
nats.

The ``*_estimate`` functions operate on tensors and are differentiable; the
``*_mi_lower_bound`` functions take a :class:`ScorePair` and return a plain
:class:`MIEstimate`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import torch

__all__ = [
    "EstimatorKind",
    "ScorePair",
    "MIEstimate",
    "softplus",
    "softplus_tensor",
    "jsd_estimate",
    "dv_estimate",
    "jsd_mi_lower_bound",
    "dv_mi_lower_bound",
    "make_marginal_pairing",
    "discrete_mi_oracle",
    "gaussian_mi_oracle",
]


class EstimatorKind(str, Enum):
    JSD = "jsd"
    DV = "dv"


@dataclass(frozen=True)
class ScorePair:
    """Critic outputs on joint (aligned) and marginal (shuffled) samples."""

    joint_scores: Sequence[float]
    marginal_scores: Sequence[float]

    def __post_init__(self):
        joint = np.asarray(self.joint_scores, dtype=np.float64).ravel()
        marginal = np.asarray(self.marginal_scores, dtype=np.float64).ravel()
        if joint.size == 0 or marginal.size == 0:
            raise ValueError("empty sample")
        if not (np.all(np.isfinite(joint)) and np.all(np.isfinite(marginal))):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "joint_scores", joint)
        object.__setattr__(self, "marginal_scores", marginal)


@dataclass(frozen=True)
class MIEstimate:
    value: float
    estimator_kind: EstimatorKind


def softplus(z: float) -> float:
    """``log(1 + e^z)`` evaluated without overflow or cancellation."""
    z = float(z)
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


def softplus_tensor(z: torch.Tensor) -> torch.Tensor:
    # logaddexp keeps the exact derivative sigmoid(z) at z == 0, unlike the
    # relu/abs split which has a zero subgradient there.
    return torch.logaddexp(z, torch.zeros_like(z))


def _weighted_mean(values: torch.Tensor, weights: Optional[torch.Tensor]) -> torch.Tensor:
    if weights is None:
        return values.mean()
    total = weights.sum()
    if total <= 0:
        raise ValueError("empty sample")
    return (values * weights).sum() / total


def jsd_estimate(
    joint: torch.Tensor,
    marginal: torch.Tensor,
    joint_weights: Optional[torch.Tensor] = None,
    marginal_weights: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Differentiable Jensen-Shannon MI surrogate.

    Optional weights (same shape as the scores) turn each expectation into a
    weighted mean, which is how masked locations are excluded.
    """
    if joint.numel() == 0 or marginal.numel() == 0:
        raise ValueError("empty sample")
    e_joint = _weighted_mean(-softplus_tensor(-joint), joint_weights)
    e_marginal = _weighted_mean(softplus_tensor(marginal), marginal_weights)
    return e_joint - e_marginal


def dv_estimate(joint: torch.Tensor, marginal: torch.Tensor) -> torch.Tensor:
    """Differentiable Donsker-Varadhan bound, log-mean-exp with max shift."""
    if joint.numel() == 0 or marginal.numel() == 0:
        raise ValueError("empty sample")
    marginal = marginal.reshape(-1)
    log_mean_exp = torch.logsumexp(marginal, dim=0) - math.log(marginal.numel())
    return joint.mean() - log_mean_exp


def jsd_mi_lower_bound(scores: ScorePair) -> MIEstimate:
    joint = torch.as_tensor(scores.joint_scores, dtype=torch.float64)
    marginal = torch.as_tensor(scores.marginal_scores, dtype=torch.float64)
    return MIEstimate(float(jsd_estimate(joint, marginal)), EstimatorKind.JSD)


def dv_mi_lower_bound(scores: ScorePair) -> MIEstimate:
    joint = torch.as_tensor(scores.joint_scores, dtype=torch.float64)
    marginal = torch.as_tensor(scores.marginal_scores, dtype=torch.float64)
    return MIEstimate(float(dv_estimate(joint, marginal)), EstimatorKind.DV)


def make_marginal_pairing(batch_size: int, seed: int) -> np.ndarray:
    """Seeded uniformly random derangement of ``range(batch_size)``.

    ``x[i]`` paired with ``y[perm[i]]`` never reuses an aligned pair, so the
    marginal term is uncontaminated by positives.
    """
    if int(batch_size) != batch_size or batch_size < 2:
        raise ValueError("cannot form marginal pairs: batch_size must be >= 2")
    batch_size = int(batch_size)
    rng = np.random.default_rng(seed)
    identity = np.arange(batch_size)
    # Rejection sampling: acceptance probability tends to 1/e.
    while True:
        perm = rng.permutation(batch_size)
        if not np.any(perm == identity):
            return perm


def discrete_mi_oracle(joint_table) -> float:
    """Exact mutual information of a finite joint probability table."""
    p = np.asarray(joint_table, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("joint table must be a matrix")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("joint table entries must be finite and non-negative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"joint table must sum to 1 (got {p.sum():.12g})")
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (px * py)[nz])))


def gaussian_mi_oracle(rho: float) -> float:
    """MI of a standard bivariate Gaussian with correlation ``rho``."""
    if not abs(rho) < 1:
        raise ValueError("|rho| must be < 1")
    return -0.5 * math.log1p(-rho * rho)
