"""Concat-and-convolve critics scoring representation pairs.

A critic concatenates its two inputs along the channel axis and runs a stack
of 1x1 convolutions. On location vectors a 1x1 convolution is a linear layer
over the channel axis, so the stack is written with ``nn.Linear`` acting on
the trailing dimension and broadcasts over any leading (batch, location)
axes.
"""
from __future__ import annotations

from enum import Enum

import numpy as np
import torch
from torch import nn

from .mi_estimators import EstimatorKind, MIEstimate, dv_estimate, jsd_estimate, make_marginal_pairing

__all__ = [
    "CriticKind",
    "Critic",
    "score_local_local",
    "score_local_global",
    "score_global_global",
    "estimate_mutual_information",
]


class CriticKind(str, Enum):
    LOCAL_LOCAL = "local_local"
    LOCAL_GLOBAL = "local_global"
    GLOBAL_GLOBAL = "global_global"


class Critic(nn.Module):
    """``T(a, b)``: concat -> (linear, ReLU) x n_hidden -> linear to one score.

    Parameters
    ----------
    dim_a, dim_b : int
        Channel widths of the two inputs.
    hidden_dim : int
        Width of every hidden layer.
    n_hidden : int
        Number of hidden ReLU layers (at least one).
    """

    def __init__(
        self,
        kind: CriticKind | str,
        dim_a: int,
        dim_b: int,
        hidden_dim: int = 256,
        n_hidden: int = 2,
    ):
        super().__init__()
        if n_hidden < 1:
            raise ValueError("critic needs at least one hidden layer")
        self.kind = CriticKind(kind)
        self.input_dims = (int(dim_a), int(dim_b))
        self.hidden_dim = int(hidden_dim)
        widths = [dim_a + dim_b] + [hidden_dim] * n_hidden
        self.layers = nn.ModuleList(nn.Linear(i, o) for i, o in zip(widths[:-1], widths[1:]))
        self.out = nn.Linear(hidden_dim, 1)
        self.reset_parameters()

    def reset_parameters(self):
        # Fan-in scaled uniform weights, zero biases.
        for layer in [*self.layers, self.out]:
            bound = 1.0 / layer.in_features**0.5
            nn.init.uniform_(layer.weight, -bound, bound)
            nn.init.zeros_(layer.bias)

    def _check(self, a: torch.Tensor, b: torch.Tensor):
        if a.shape[-1] != self.input_dims[0] or b.shape[-1] != self.input_dims[1]:
            raise ValueError(
                f"critic expects dims {self.input_dims}, got ({a.shape[-1]}, {b.shape[-1]})"
            )

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Score broadcastable inputs ``a[..., dim_a]`` and ``b[..., dim_b]``.

        The first layer is split into its ``a`` and ``b`` column blocks so the
        concatenation never materialises; the result is identical to applying
        the layer to ``cat([a, b])``.
        """
        self._check(a, b)
        first = self.layers[0]
        w_a = first.weight[:, : self.input_dims[0]]
        w_b = first.weight[:, self.input_dims[0] :]
        h = torch.relu(a @ w_a.T + b @ w_b.T + first.bias)
        for layer in self.layers[1:]:
            h = torch.relu(layer(h))
        return self.out(h).squeeze(-1)


def score_local_local(critic: Critic, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Score one location vector of each input; batched over leading axes."""
    return critic(a, b)


def score_local_global(critic: Critic, local_map: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Score every location of ``local_map[..., N, dim_a]`` against ``g[..., dim_b]``.

    Returns ``[..., N]`` scores, one per location.
    """
    if local_map.dim() < 2:
        raise ValueError("local_map must have a location axis")
    return critic(local_map, g.unsqueeze(-2))


def score_global_global(critic: Critic, g1: torch.Tensor, g2: torch.Tensor) -> torch.Tensor:
    return critic(g1, g2)


def estimate_mutual_information(
    x,
    y,
    estimator: EstimatorKind | str = EstimatorKind.DV,
    hidden_dim: int = 128,
    n_hidden: int = 1,
    epochs: int = 10,
    batch_size: int = 500,
    learning_rate: float = 1e-3,
    holdout: float = 0.2,
    seed: int = 0,
) -> MIEstimate:
    """Train a critic on paired samples and report its bound on held-out pairs.

    Parameters
    ----------
    x, y : array-like
        Aligned samples ``[n]`` or ``[n, d]`` drawn from the joint distribution.
    estimator : {"dv", "jsd"}
        Bound that is both maximised during training and reported.
    n_hidden : int
        Hidden ReLU layers of the critic; 1 gives a two-layer network.
    holdout : float
        Fraction of the samples kept out of training. The critic is fixed
        when the bound is evaluated there, so the DV value is a lower bound
        on the mutual information up to sampling error.

    Returns
    -------
    MIEstimate
        Bound in nats over the held-out pairs, with marginal pairs formed by
        a seeded derangement of the held-out set.
    """
    kind = EstimatorKind(estimator)
    bound = dv_estimate if kind is EstimatorKind.DV else jsd_estimate
    x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    y = torch.as_tensor(np.asarray(y, dtype=np.float32))
    x = x.unsqueeze(-1) if x.dim() == 1 else x
    y = y.unsqueeze(-1) if y.dim() == 1 else y
    if x.dim() != 2 or y.dim() != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("x and y must be aligned [n, d] sample arrays")
    if not 0.0 < holdout < 1.0:
        raise ValueError("holdout must be in (0, 1)")
    n = x.shape[0]
    n_eval = int(round(n * holdout))
    n_train = n - n_eval
    if n_eval < 2 or n_train < batch_size or batch_size < 2:
        raise ValueError("not enough samples for the requested batch size and holdout")

    rng = np.random.default_rng(seed)
    order = torch.from_numpy(rng.permutation(n))
    train_idx, eval_idx = order[:n_train], order[n_train:]
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        critic = Critic(CriticKind.GLOBAL_GLOBAL, x.shape[1], y.shape[1], hidden_dim, n_hidden)
    opt = torch.optim.Adam(critic.parameters(), lr=learning_rate)
    n_batches = n_train // batch_size
    for epoch in range(epochs):
        perm = train_idx[torch.randperm(n_train, generator=gen)]
        for b in range(n_batches):
            idx = perm[b * batch_size : (b + 1) * batch_size]
            shuffle = torch.from_numpy(make_marginal_pairing(batch_size, int(rng.integers(2**31))))
            xb, yb = x[idx], y[idx]
            loss = -bound(critic(xb, yb), critic(xb, yb[shuffle]))
            opt.zero_grad()
            loss.backward()
            opt.step()

    with torch.no_grad():
        xe, ye = x[eval_idx].double(), y[eval_idx].double()
        critic = critic.double()
        shuffle = torch.from_numpy(make_marginal_pairing(n_eval, int(rng.integers(2**31))))
        value = bound(critic(xe, ye), critic(xe, ye[shuffle]))
    return MIEstimate(float(value), kind)
