"""Global supplement: map frozen text-image patch features into the segmenter
feature space and pool a support prototype."""

from __future__ import annotations

import torch
from torch import nn

from .layers import resize


def resize_to_grid(feat: torch.Tensor, target) -> torch.Tensor:
    """Bilinear (align_corners=False) resize of (..., C, h1, w1) to ``target``."""
    if any(s <= 0 for s in feat.shape[-2:]) or any(s <= 0 for s in target):
        raise ValueError("spatial dims must be positive")
    return resize(feat, tuple(target), mode="bilinear")


def downsample_mask(mask: torch.Tensor, target) -> torch.Tensor:
    """Nearest-neighbour resize of a binary mask, then threshold at 0.5."""
    m = torch.as_tensor(mask).to(torch.float32)
    return (resize(m, tuple(target), mode="nearest") > 0.5).to(torch.float32)


def masked_average_pool(feat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-channel mean of ``feat`` (..., C, h, w) over foreground of ``mask`` (..., h, w).

    ``mask`` must already live on the feature grid.
    """
    mask = mask.to(feat.dtype)
    if mask.shape[-2:] != feat.shape[-2:]:
        raise ValueError(
            f"mask grid {tuple(mask.shape[-2:])} != feature grid {tuple(feat.shape[-2:])}"
        )
    count = mask.sum(dim=(-2, -1))
    if (count == 0).any():
        raise ValueError("mask has no foreground pixels on the feature grid")
    total = (feat * mask.unsqueeze(-3)).sum(dim=(-2, -1))
    return total / count.unsqueeze(-1)


def kshot_prototype(prototypes) -> torch.Tensor:
    if isinstance(prototypes, torch.Tensor):
        stacked = prototypes
    else:
        if len(prototypes) == 0:
            raise ValueError("no prototypes to combine")
        stacked = torch.stack(list(prototypes))
    return stacked.mean(dim=0)


class FeatureMap(nn.Module):
    """1x1 convolution followed by a rectifier."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_dim, out_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.conv.in_channels:
            raise ValueError(f"expected {self.conv.in_channels} channels, got {x.shape[-3]}")
        return torch.relu(self.conv(x))


class GlobalSupplement(nn.Module):
    """Two parameter-independent maps, one for support and one for query features."""

    def __init__(self, clip_dim: int, sam_dim: int):
        super().__init__()
        self.support_map = FeatureMap(clip_dim, sam_dim)
        self.query_map = FeatureMap(clip_dim, sam_dim)

    def map_support(self, feat: torch.Tensor, grid) -> torch.Tensor:
        return self.support_map(resize_to_grid(feat, grid))

    def map_query(self, feat: torch.Tensor, grid) -> torch.Tensor:
        return self.query_map(resize_to_grid(feat, grid))

    def prototype(self, support_feats: torch.Tensor, support_masks: torch.Tensor, grid) -> torch.Tensor:
        """Mean prototype over K supports.

        support_feats: (B, K, d1, h1, w1) raw patch features;
        support_masks: (B, K, H, W) full-resolution binary masks.
        """
        b, k = support_feats.shape[:2]
        mapped = self.map_support(support_feats.flatten(0, 1), grid)
        masks = downsample_mask(support_masks.flatten(0, 1), grid)
        protos = masked_average_pool(mapped, masks).view(b, k, -1)
        return protos.mean(dim=1)
