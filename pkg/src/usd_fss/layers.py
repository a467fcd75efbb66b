"""Small attention building blocks shared by the frozen stand-ins and the
learnable modules."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


def positional_encoding(coords: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of (row, col) coordinates, shape (..., 2) -> (..., dim).

    Half the channels encode the row, half the column.
    """
    if dim % 4 != 0:
        raise ValueError("positional encoding dim must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    out = []
    for axis in range(2):
        angles = coords[..., axis : axis + 1].to(torch.float64) * freqs
        out += [torch.sin(angles), torch.cos(angles)]
    return torch.cat(out, dim=-1)


def grid_positional_encoding(h: int, w: int, dim: int) -> torch.Tensor:
    """(h*w, dim) encoding of a row-major grid."""
    rows, cols = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    coords = torch.stack([rows.reshape(-1), cols.reshape(-1)], dim=-1)
    return positional_encoding(coords, dim)


class MultiHeadAttention(nn.Module):
    """Multi-head attention that also returns the head-averaged attention map."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None):
        context = x if context is None else context
        b, lq, d = x.shape
        lk = context.shape[1]
        dh = d // self.heads
        q = self.q_proj(x).view(b, lq, self.heads, dh).transpose(1, 2)
        k = self.k_proj(context).view(b, lk, self.heads, dh).transpose(1, 2)
        v = self.v_proj(context).view(b, lk, self.heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        return self.out_proj(out), attn.mean(dim=1)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block returning (tokens, head-averaged attention)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention with residual: queries attend to a context."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim or dim)
        self.attn = MultiHeadAttention(dim, heads, kv_dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor):
        y, attn = self.attn(self.norm_q(x), self.norm_kv(context))
        return x + y, attn


def resize(x: torch.Tensor, size, mode: str = "bilinear") -> torch.Tensor:
    """Resize (..., H, W) maps; bilinear uses align_corners=False."""
    lead = x.shape[:-2]
    flat = x.reshape(-1, 1, *x.shape[-2:]) if x.dim() != 4 else x
    if tuple(flat.shape[-2:]) == tuple(size):
        return x
    if mode == "nearest":
        out = F.interpolate(flat, size=size, mode="nearest")
    else:
        out = F.interpolate(flat, size=size, mode="bilinear", align_corners=False)
    if x.dim() != 4:
        out = out.reshape(*lead, *size)
    return out


def clamped_bce(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Mean binary cross entropy with ``pred`` clamped to [eps, 1 - eps]."""
    p = pred.clamp(eps, 1.0 - eps)
    target = target.to(p.dtype)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def minmax_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Min-max normalise each (h, w) map of (..., h, w) to [0, 1]."""
    flat = x.flatten(-2)
    lo = flat.min(dim=-1, keepdim=True).values
    hi = flat.max(dim=-1, keepdim=True).values
    out = (flat - lo) / (hi - lo).clamp_min(eps)
    return out.view_as(x)
