"""Per-modality encoders, fusion operators, prediction heads and the two
composite networks used for classification and segmentation.

Tensor layout conventions: images are ``[B, C, H, W]`` internally, token
sequences ``[B, L]`` (``pad_id`` right-padded), local features ``[B, N, C]``
and global features ``[B, G]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .critics import Critic, CriticKind

__all__ = [
    "ModalityKind",
    "ModalityId",
    "FeatureBundle",
    "FusedFeatures",
    "ModelOutput",
    "ImageEncoder",
    "TextEncoder",
    "BilinearFusion",
    "LocalFusion",
    "SegmentationNet",
    "ClassificationNet",
    "encode_image",
    "encode_text",
    "encode_modalities_segmentation",
    "fuse_global",
    "fuse_local",
    "predict_class_logits",
    "predict_pixel_logits",
    "build_model",
]


class ModalityKind(str, Enum):
    IMAGE_2D = "image2d"
    TOKEN_SEQUENCE = "token_sequence"
    VOLUME_CHANNEL = "volume_channel"


@dataclass(frozen=True)
class ModalityId:
    name: str
    kind: ModalityKind


@dataclass
class FeatureBundle:
    """Local location vectors ``[B, N, C]`` and their pooled global ``[B, C]``.

    ``mask`` (``[B, N]`` float) marks valid locations; ``None`` means all
    valid. ``global_`` is ``None`` for segmentation bundles.
    """

    local: torch.Tensor
    global_: Optional[torch.Tensor] = None
    mask: Optional[torch.Tensor] = None


@dataclass
class FusedFeatures:
    local: torch.Tensor
    global_: Optional[torch.Tensor] = None
    mask: Optional[torch.Tensor] = None


@dataclass
class ModelOutput:
    bundles: Dict[str, FeatureBundle]
    fused: FusedFeatures
    logits: torch.Tensor
    extras: dict = field(default_factory=dict)


def _masked_mean(local: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        return local.mean(dim=1)
    weights = mask.to(local.dtype).unsqueeze(-1)
    return (local * weights).sum(dim=1) / weights.sum(dim=1).clamp_min(1.0)


def _flatten_map(fmap: torch.Tensor) -> torch.Tensor:
    # [B, C, H, W] -> [B, H*W, C]
    return fmap.flatten(2).transpose(1, 2)


# ---------------------------------------------------------------------------
# image


class _ResBlock2d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return torch.relu(x + self.conv2(torch.relu(self.conv1(x))))


class ImageEncoder(nn.Module):
    """Small residual CNN: stem, then one strided conv + residual block per stage."""

    def __init__(self, in_channels: int = 1, image_size: int = 32, widths: Sequence[int] = (16, 32, 64, 64)):
        super().__init__()
        self.in_channels = in_channels
        self.image_size = image_size
        self.widths = tuple(widths)
        if image_size % (2 ** len(widths)):
            raise ValueError("image_size must be divisible by 2**n_stages")
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        stages = []
        prev = widths[0]
        for w in widths:
            stages.append(nn.Sequential(nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.ReLU(), _ResBlock2d(w)))
            prev = w
        self.stages = nn.ModuleList(stages)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    @property
    def n_locations(self) -> int:
        return (self.image_size // 2 ** len(self.widths)) ** 2

    def forward(self, x: torch.Tensor) -> FeatureBundle:
        if x.dim() != 4 or x.shape[1:] != (self.in_channels, self.image_size, self.image_size):
            raise ValueError(
                f"expected images [B, {self.in_channels}, {self.image_size}, {self.image_size}], "
                f"got {tuple(x.shape)}"
            )
        h = torch.relu(self.stem(x))
        for stage in self.stages:
            h = stage(h)
        local = _flatten_map(h)
        return FeatureBundle(local=local, global_=local.mean(dim=1))


def encode_image(encoder: ImageEncoder, pixels) -> FeatureBundle:
    """Encode channel-last pixels ``[H, W, C]`` or ``[B, H, W, C]`` in ``[0, 1]``."""
    x = torch.as_tensor(pixels, dtype=next(encoder.parameters()).dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError("pixels must be [H, W, C] or [B, H, W, C]")
    return encoder(x.permute(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# text


class _ResBlock1d(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(channels, channels, kernel_size, padding=pad)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size, padding=pad)

    def forward(self, x, mask):
        h = torch.relu(self.conv1(x)) * mask
        return torch.relu(x + self.conv2(h)) * mask


class TextEncoder(nn.Module):
    """Frozen embedding table followed by residual 1D conv blocks.

    Pad positions are zeroed after every layer. With right padding and zero
    conv padding this makes every non-pad feature independent of how many
    pads follow the content.
    """

    def __init__(
        self,
        vocab_size: int,
        embed_dim: int = 64,
        channels: int = 64,
        n_blocks: int = 2,
        max_len: int = 16,
        pad_id: int = 0,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.pad_id = pad_id
        table = torch.randn(vocab_size, embed_dim) / embed_dim**0.5
        table[pad_id] = 0.0
        # A buffer, not a parameter: the embedding is never fine-tuned.
        self.register_buffer("embedding", table)
        self.inp = nn.Conv1d(embed_dim, channels, 3, padding=1)
        self.blocks = nn.ModuleList(_ResBlock1d(channels) for _ in range(n_blocks))
        self.channels = channels

    @property
    def out_channels(self) -> int:
        return self.channels

    def forward(self, tokens: torch.Tensor) -> FeatureBundle:
        if tokens.dim() != 2 or tokens.shape[1] < 1 or tokens.shape[1] > self.max_len:
            raise ValueError(f"expected tokens [B, L] with 1 <= L <= {self.max_len}")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ValueError("token id out of vocabulary")
        mask = (tokens != self.pad_id).to(self.embedding.dtype)
        x = self.embedding[tokens].transpose(1, 2)
        m = mask.unsqueeze(1)
        h = torch.relu(self.inp(x)) * m
        for block in self.blocks:
            h = block(h, m)
        local = h.transpose(1, 2)
        return FeatureBundle(local=local, global_=_masked_mean(local, mask), mask=mask)


def encode_text(encoder: TextEncoder, tokens) -> FeatureBundle:
    t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if t.dim() == 1:
        t = t.unsqueeze(0)
    if t.numel() and (t.min() < 0 or t.max() >= encoder.vocab_size):
        raise ValueError("token id out of vocabulary")
    if torch.any((t != encoder.pad_id).sum(dim=1) == 0):
        raise ValueError("empty sequence after masking")
    return encoder(t)


# ---------------------------------------------------------------------------
# fusion and heads


class BilinearFusion(nn.Module):
    """Low-rank bilinear map ``out_k = sum_r P[k, r] (U[:, r] . a)(V[:, r] . b)``."""

    def __init__(self, dim_a: int, dim_b: int, out_dim: int = 128, rank: int = 8):
        super().__init__()
        self.dim_a, self.dim_b = dim_a, dim_b
        self.u = nn.Linear(dim_a, rank, bias=False)
        self.v = nn.Linear(dim_b, rank, bias=False)
        self.p = nn.Linear(rank, out_dim, bias=False)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape[-1] != self.dim_a or b.shape[-1] != self.dim_b:
            raise ValueError(f"bilinear fusion expects dims ({self.dim_a}, {self.dim_b})")
        return self.p(self.u(a) * self.v(b))


def fuse_global(fusion: BilinearFusion, g_image: torch.Tensor, g_text: torch.Tensor) -> torch.Tensor:
    return fusion(g_image, g_text)


class LocalFusion(nn.Module):
    """Project each modality's locations to a common width and concatenate them."""

    def __init__(self, in_dims: Dict[str, int], out_dim: int, identity_init: bool = False):
        super().__init__()
        self.order = list(in_dims)
        self.proj = nn.ModuleDict({m: nn.Linear(d, out_dim) for m, d in in_dims.items()})
        if identity_init:
            for m, lin in self.proj.items():
                if lin.in_features != out_dim:
                    raise ValueError("identity init needs square projections")
                nn.init.eye_(lin.weight)
                nn.init.zeros_(lin.bias)

    def forward(self, locals_: Dict[str, FeatureBundle]) -> FusedFeatures:
        parts, masks = [], []
        for m in self.order:
            if m not in locals_:
                continue
            b = locals_[m]
            parts.append(self.proj[m](b.local))
            mask = b.mask if b.mask is not None else b.local.new_ones(b.local.shape[:2])
            masks.append(mask)
        if not parts:
            raise ValueError("at least one modality must be present")
        return FusedFeatures(local=torch.cat(parts, dim=1), mask=torch.cat(masks, dim=1))


def fuse_local(fusion: LocalFusion, locals_: Dict[str, FeatureBundle]) -> torch.Tensor:
    return fusion(locals_).local


def predict_class_logits(head: nn.Linear, fused_global: torch.Tensor) -> torch.Tensor:
    return head(fused_global)


def predict_pixel_logits(head: nn.Conv2d, decoder_features: torch.Tensor) -> torch.Tensor:
    """``[B, C, H, W]`` decoder features -> ``[B, H, W, K]`` label logits."""
    return head(decoder_features).permute(0, 2, 3, 1)


# ---------------------------------------------------------------------------
# segmentation


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    groups = min(4, cout)
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(groups, cout), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(groups, cout), nn.ReLU(),
    )


class _UNetBranch(nn.Module):
    """Encoder half of a U-Net for one modality: returns skips and bottleneck."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        self.levels = nn.ModuleList()
        prev = 1
        for w in widths:
            self.levels.append(_double_conv(prev, w))
            prev = w

    def forward(self, x):
        skips = []
        h = x
        for i, level in enumerate(self.levels):
            if i:
                h = F.max_pool2d(h, 2)
            h = level(h)
            skips.append(h)
        return skips[:-1], skips[-1]


class SegmentationNet(nn.Module):
    """U-Net with one encoder branch per modality and a shared trunk/decoder.

    Branch bottlenecks and skip maps are averaged over the modalities present
    in each sample, so any non-empty subset of modalities is a valid input.

    A modality's local features are the trunk output computed from that
    modality alone, which is exactly what the network sees when only that
    modality is available. The fused local features are the trunk output on
    the averaged bottleneck of all present modalities.
    """

    task = "segmentation"

    def __init__(
        self,
        modalities: Sequence[str] = ("flair", "t1", "t1c", "t2"),
        image_size: int = 32,
        widths: Sequence[int] = (8, 16, 32, 32),
        num_labels: int = 2,
        critic_hidden: int = 64,
        critic_layers: int = 2,
    ):
        super().__init__()
        if image_size % (2 ** (len(widths) - 1)):
            raise ValueError("image_size must be divisible by the total downsampling")
        self.modalities = list(modalities)
        self.image_size = image_size
        self.widths = tuple(widths)
        self.num_labels = num_labels
        self.config = dict(
            task="segmentation", modalities=list(modalities), image_size=image_size,
            widths=list(widths), num_labels=num_labels,
            critic_hidden=critic_hidden, critic_layers=critic_layers,
        )
        self.branches = nn.ModuleDict({m: _UNetBranch(widths) for m in modalities})
        c = widths[-1]
        self.trunk = _double_conv(c, c)
        self.ups = nn.ModuleList()
        self.decs = nn.ModuleList()
        for i in range(len(widths) - 1, 0, -1):
            self.ups.append(nn.ConvTranspose2d(widths[i], widths[i - 1], 2, stride=2))
            self.decs.append(_double_conv(2 * widths[i - 1], widths[i - 1]))
        self.head = nn.Conv2d(widths[0], num_labels, 1)
        self.critics = nn.ModuleDict(
            {f"ll/{m}": Critic(CriticKind.LOCAL_LOCAL, c, c, critic_hidden, critic_layers) for m in modalities}
        )

    @property
    def n_locations(self) -> int:
        return (self.image_size // 2 ** (len(self.widths) - 1)) ** 2

    def encode(self, inputs: Dict[str, torch.Tensor], present: torch.Tensor, with_bundles: bool = True):
        """Run the encoder side.

        Returns ``(bundles, fused, fused_bottleneck, decoder_features)`` where
        ``fused_bottleneck`` is the presence-weighted mean of the branch
        bottlenecks fed to the trunk.
        """
        present = present.to(torch.bool)
        if present.dim() != 2 or present.shape[1] != len(self.modalities):
            raise ValueError("present mask has wrong number of modalities")
        if torch.any(present.sum(dim=1) == 0):
            raise ValueError("at least one modality must be present in every sample")
        dtype = next(self.parameters()).dtype
        weights = present.to(dtype)
        weights = weights / weights.sum(dim=1, keepdim=True)
        bottlenecks: Dict[str, torch.Tensor] = {}
        skip_sum = None
        bottleneck_sum = None
        # Summation follows self.modalities, so the result does not depend on
        # how the caller orders its inputs.
        for j, m in enumerate(self.modalities):
            if not bool(present[:, j].any()):
                continue
            x = inputs[m]
            if x.dim() == 3:
                x = x.unsqueeze(1)
            if x.shape[-2:] != (self.image_size, self.image_size):
                raise ValueError(f"modality {m!r}: expected {self.image_size}x{self.image_size} slices")
            skips, bottleneck = self.branches[m](x.to(dtype))
            bottlenecks[m] = bottleneck
            w = weights[:, j].view(-1, 1, 1, 1)
            if bottleneck_sum is None:
                bottleneck_sum = w * bottleneck
                skip_sum = [w * s for s in skips]
            else:
                bottleneck_sum = bottleneck_sum + w * bottleneck
                skip_sum = [acc + w * s for acc, s in zip(skip_sum, skips)]
        h = self.trunk(bottleneck_sum)
        fused = FusedFeatures(local=_flatten_map(h))
        bundles: Dict[str, FeatureBundle] = {}
        if with_bundles:
            for j, m in enumerate(self.modalities):
                if m in bottlenecks:
                    local = _flatten_map(self.trunk(bottlenecks[m]))
                    mask = present[:, j : j + 1].to(dtype).expand(-1, local.shape[1])
                    bundles[m] = FeatureBundle(local=local, mask=mask)
        for up, dec, skip in zip(self.ups, self.decs, reversed(skip_sum)):
            h = dec(torch.cat([up(h), skip], dim=1))
        return bundles, fused, bottleneck_sum, h

    def forward(self, inputs: Dict[str, torch.Tensor], present: torch.Tensor) -> ModelOutput:
        # Per-modality features only feed the MI losses.
        bundles, fused, bottleneck, dec = self.encode(inputs, present, with_bundles=self.training)
        logits = predict_pixel_logits(self.head, dec)
        return ModelOutput(bundles=bundles, fused=fused, logits=logits, extras={"fused_bottleneck": bottleneck})


def encode_modalities_segmentation(net: SegmentationNet, volumes: Dict[str, torch.Tensor], present):
    """Per-modality bundles, fused features and full-resolution decoder features.

    ``present`` is either a ``[B, M]`` mask or a collection of modality names
    applied to the whole batch.
    """
    batch = next(iter(volumes.values())).shape[0]
    if not isinstance(present, torch.Tensor):
        names = set(present)
        unknown = names - set(net.modalities)
        if unknown:
            raise ValueError(f"unknown modalities: {sorted(unknown)}")
        present = torch.tensor([[m in names for m in net.modalities]] * batch)
    bundles, fused, _, dec = net.encode(volumes, present)
    return bundles, fused, dec


# ---------------------------------------------------------------------------
# classification


class ClassificationNet(nn.Module):
    """Image + text encoders, bilinear global fusion, linear class head.

    A missing modality's global vector is replaced by a running mean of that
    modality's globals over training batches (``default/<name>`` buffers).
    """

    task = "classification"

    def __init__(
        self,
        image_size: int = 32,
        image_widths: Sequence[int] = (16, 32, 64, 64),
        vocab_size: int = 64,
        seq_len: int = 16,
        embed_dim: int = 64,
        text_channels: int = 64,
        text_blocks: int = 2,
        fused_local_dim: int = 64,
        fused_dim: int = 128,
        rank: int = 8,
        num_classes: int = 14,
        critic_hidden: int = 64,
        critic_layers: int = 2,
        default_momentum: float = 0.1,
    ):
        super().__init__()
        self.modalities = ["image", "text"]
        self.num_classes = num_classes
        self.default_momentum = default_momentum
        self.config = dict(
            task="classification", image_size=image_size, image_widths=list(image_widths),
            vocab_size=vocab_size, seq_len=seq_len, embed_dim=embed_dim,
            text_channels=text_channels, text_blocks=text_blocks,
            fused_local_dim=fused_local_dim, fused_dim=fused_dim, rank=rank,
            num_classes=num_classes, critic_hidden=critic_hidden,
            critic_layers=critic_layers, default_momentum=default_momentum,
        )
        self.image_encoder = ImageEncoder(1, image_size, image_widths)
        self.text_encoder = TextEncoder(vocab_size, embed_dim, text_channels, text_blocks, seq_len)
        ci, ct = self.image_encoder.out_channels, self.text_encoder.out_channels
        self.fusion = BilinearFusion(ci, ct, fused_dim, rank)
        self.local_fusion = LocalFusion({"image": ci, "text": ct}, fused_local_dim)
        self.head = nn.Linear(fused_dim, num_classes)
        self.register_buffer("default_image", torch.zeros(ci))
        self.register_buffer("default_text", torch.zeros(ct))
        dims = {"image": ci, "text": ct}
        critics = {}
        for m, d in dims.items():
            critics[f"ll/{m}"] = Critic(CriticKind.LOCAL_LOCAL, d, fused_local_dim, critic_hidden, critic_layers)
            critics[f"lg/{m}"] = Critic(CriticKind.LOCAL_GLOBAL, d, fused_dim, critic_hidden, critic_layers)
            critics[f"gg/{m}"] = Critic(CriticKind.GLOBAL_GLOBAL, d, fused_dim, critic_hidden, critic_layers)
        self.critics = nn.ModuleDict(critics)

    def _update_default(self, name: str, g: torch.Tensor, present: torch.Tensor):
        if not self.training or not bool(present.any()):
            return
        buf = getattr(self, f"default_{name}")
        batch_mean = g.detach()[present].mean(dim=0)
        buf.mul_(1 - self.default_momentum).add_(self.default_momentum * batch_mean)

    def forward(self, inputs: Dict[str, torch.Tensor], present: torch.Tensor) -> ModelOutput:
        present = present.to(torch.bool)
        if torch.any(present.sum(dim=1) == 0):
            raise ValueError("at least one modality must be present in every sample")
        dtype = next(self.parameters()).dtype
        bundles: Dict[str, FeatureBundle] = {}
        globals_ = {}
        for j, m in enumerate(self.modalities):
            p = present[:, j]
            if not bool(p.any()):
                continue
            if m == "image":
                x = inputs[m]
                if x.dim() == 3:
                    x = x.unsqueeze(1)
                b = self.image_encoder(x.to(dtype))
            else:
                tokens = inputs[m].clone()
                # absent samples may carry all-pad rows; give them a dummy token
                tokens[~p, 0] = torch.where(tokens[~p, 0] == self.text_encoder.pad_id, 1, tokens[~p, 0])
                b = self.text_encoder(tokens)
            pm = p.to(dtype).unsqueeze(1).expand(-1, b.local.shape[1])
            b.mask = pm if b.mask is None else b.mask * pm
            bundles[m] = b
            self._update_default(m, b.global_, p)
        batch = present.shape[0]
        g_pair = []
        for j, m in enumerate(self.modalities):
            default = getattr(self, f"default_{m}").to(dtype).expand(batch, -1)
            if m in bundles:
                g_pair.append(torch.where(present[:, j : j + 1], bundles[m].global_, default))
            else:
                g_pair.append(default)
        fused_global = fuse_global(self.fusion, g_pair[0], g_pair[1])
        fused = self.local_fusion(bundles)
        fused.global_ = fused_global
        logits = predict_class_logits(self.head, fused_global)
        return ModelOutput(bundles=bundles, fused=fused, logits=logits)


def build_model(config: dict) -> nn.Module:
    """Instantiate a network from its ``config`` dict (as stored in checkpoints)."""
    cfg = dict(config)
    task = cfg.pop("task")
    if task == "segmentation":
        return SegmentationNet(**cfg)
    if task == "classification":
        return ClassificationNet(**cfg)
    raise ValueError(f"unknown task {task!r}")
