"""Adaptive feature maximizer: gated local/global fusion of two bottlenecks.

Each path (denoising encoder ``x``, semantic encoder ``y``) is split into a
local branch (two 3x3 convs) and a global branch (convs + global average
pooling). A sigmoid gate computed from the pooled global features reweights
the global branch per channel, the local branch is added back, and the two
paths are joined and mixed by a 1x1 conv.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F


def _check_map(f: torch.Tensor, channels: int) -> None:
    if f.dim() != 4 or f.shape[1] != channels:
        raise ValueError(f"expected [B, {channels}, H, W] feature map, got {tuple(f.shape)}")


class LocalExtractor(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        _check_map(f, self.channels)
        return self.conv2(F.silu(self.conv1(f)))


class GlobalExtractor(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def pre_pool(self, f: torch.Tensor) -> torch.Tensor:
        _check_map(f, self.channels)
        return self.conv2(F.silu(self.conv1(f)))

    def pooled(self, f: torch.Tensor) -> torch.Tensor:
        """Global average pool of the conv features, shape [B, C]."""
        return self.pre_pool(f).mean(dim=(2, 3))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        g = self.pooled(f)
        return g[:, :, None, None].expand_as(f)


class FeatureAdapt(nn.Module):
    """FC -> SiLU -> FC -> sigmoid, producing per-channel weights in (0, 1)."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def logits(self, g: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(g)))

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(g))


class FeatureMaximizer(nn.Module):
    """Fuse denoising-path and semantic-path bottlenecks into one latent.

    ``join="concat"`` concatenates the two weighted paths (2C channels);
    ``join="add"`` sums them (C channels). A 1x1 conv maps the result to
    ``out_channels``.
    """

    def __init__(self, channels: int, out_channels: int | None = None, join: str = "concat"):
        super().__init__()
        if join not in ("concat", "add"):
            raise ValueError(f"join must be 'concat' or 'add', got {join!r}")
        self.channels = channels
        self.join = join
        self.out_channels = out_channels or 2 * channels
        self.local_x = LocalExtractor(channels)
        self.global_x = GlobalExtractor(channels)
        self.gate_x = FeatureAdapt(channels)
        self.local_y = LocalExtractor(channels)
        self.global_y = GlobalExtractor(channels)
        self.gate_y = FeatureAdapt(channels)
        joined = 2 * channels if join == "concat" else channels
        self.mix = nn.Conv2d(joined, self.out_channels, 1)

    @staticmethod
    def _path(f, local, glob, gate):
        g = glob.pooled(f)
        w = gate(g)
        return (g * w)[:, :, None, None] + local(f)

    def paths(self, de: torch.Tensor, se: torch.Tensor):
        """Weighted features of both paths before joining."""
        if de.shape != se.shape:
            raise ValueError(f"bottleneck shapes differ: {tuple(de.shape)} vs {tuple(se.shape)}")
        out_x = self._path(de, self.local_x, self.global_x, self.gate_x)
        out_y = self._path(se, self.local_y, self.global_y, self.gate_y)
        return out_x, out_y

    def aggregate(self, de: torch.Tensor, se: torch.Tensor) -> torch.Tensor:
        out_x, out_y = self.paths(de, se)
        if self.join == "concat":
            return torch.cat([out_x, out_y], dim=1)
        return out_x + out_y

    def forward(self, de: torch.Tensor, se: torch.Tensor) -> torch.Tensor:
        return self.mix(self.aggregate(de, se))


class PlainConcat(nn.Module):
    """Stand-in for :class:`FeatureMaximizer` when the fusion module is ablated."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.out_channels = 2 * channels

    def forward(self, de: torch.Tensor, se: torch.Tensor) -> torch.Tensor:
        if de.shape != se.shape:
            raise ValueError(f"bottleneck shapes differ: {tuple(de.shape)} vs {tuple(se.shape)}")
        return torch.cat([de, se], dim=1)


def fuse(de_bottleneck: torch.Tensor, se_bottleneck: torch.Tensor, module: nn.Module) -> torch.Tensor:
    """Functional entry point: ``module(de, se)``."""
    return module(de_bottleneck, se_bottleneck)
