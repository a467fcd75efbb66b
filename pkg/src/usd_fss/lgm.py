"""Local guidance: softmax-GradCAM guidance from the frozen text-image model,
consistent fusion, attention-based refinement and point sampling."""

from __future__ import annotations

import logging

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .gsm import FeatureMap
from .layers import TransformerBlock, clamped_bce, grid_positional_encoding, minmax_normalize

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.01


def similarity_scores(v_q, text_fg, text_bg, tau: float = DEFAULT_TAU):
    """Softmax over the two temperature-scaled cosine similarities.

    Accepts single vectors or batches along the leading dim.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    for name, t in (("v_q", v_q), ("text_fg", text_fg), ("text_bg", text_bg)):
        if (torch.linalg.vector_norm(t, dim=-1) == 0).any():
            raise ValueError(f"{name} has zero norm")
    cos_fg = F.cosine_similarity(v_q, text_fg, dim=-1, eps=0.0)
    cos_bg = F.cosine_similarity(v_q, text_bg, dim=-1, eps=0.0)
    probs = torch.softmax(torch.stack([cos_fg, cos_bg], dim=-1) / tau, dim=-1)
    return probs[..., 0], probs[..., 1]


def gradcam_guidance(patch_feats: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """Gradient-weighted map, rectified and min-max normalised per sample.

    Shapes (..., d1, h1, w1) -> (..., h1, w1).  A map that is zero everywhere
    after rectification stays all-zero and a warning is logged.
    """
    weights = grad.mean(dim=(-2, -1), keepdim=True)
    raw = torch.relu((weights * patch_feats).sum(dim=-3))
    flat = raw.flatten(-2)
    degenerate = flat.max(dim=-1).values <= 0
    if degenerate.any():
        log.warning("gradcam guidance is all-zero for %d sample(s)", int(degenerate.sum()))
    return minmax_normalize(raw)


def softmax_gradcam(bundle, image, text_fg, text_bg, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Fixed guidance for one image (or a batch): (h1, w1) in [0, 1]."""
    fg = text_fg.to(torch.float64)
    bg = text_bg.to(torch.float64)

    def score(patch):
        pooled = patch.mean(dim=(-2, -1))
        return similarity_scores(pooled, fg, bg, tau)[0]

    with torch.no_grad():
        feats = bundle.clip_visual_encode(image).patch_features.to(torch.float64)
    grad = bundle.clip_visual_gradient(image, score)
    g = gradcam_guidance(feats, grad)
    return g[0] if np.asarray(image).ndim == 3 else g


def average_attention(attn: list, last: int) -> torch.Tensor:
    if not 1 <= last <= len(attn):
        raise ValueError(f"average over last {last} of {len(attn)} attention maps")
    return torch.stack(attn[-last:]).mean(dim=0)


def sinkhorn_normalize(
    a: torch.Tensor, max_iters: int = 20, tol: float = 1e-6, return_iters: bool = False
):
    """Alternate row / column normalisation of a non-negative (..., n, n) matrix.

    One iteration is a row pass followed by a column pass.  Stops once every
    row and column sum is within ``tol`` of 1 or after ``max_iters``.
    """
    if (a < 0).any():
        raise ValueError("sinkhorn input must be non-negative")
    if (a.sum(dim=-1) == 0).any() or (a.sum(dim=-2) == 0).any():
        raise ValueError("sinkhorn input has an all-zero row or column")
    s = a
    iters = 0
    for iters in range(1, max_iters + 1):
        s = s / s.sum(dim=-1, keepdim=True)
        s = s / s.sum(dim=-2, keepdim=True)
        with torch.no_grad():
            row_err = (s.sum(dim=-1) - 1).abs().max()
            col_err = (s.sum(dim=-2) - 1).abs().max()
        if row_err <= tol and col_err <= tol:
            break
    return (s, iters) if return_iters else s


def high_order_refine(s: torch.Tensor) -> torch.Tensor:
    return torch.maximum(s, s @ s.transpose(-2, -1))


def box_from_guidance(g: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Tight filled bounding box of ``g >= threshold`` for each (h, w) map.

    Maps with nothing above the threshold get an all-ones box (logged).
    """
    g = g.detach()
    above = g >= threshold
    lead = g.shape[:-2]
    h, w = g.shape[-2:]
    flat = above.reshape(-1, h, w)
    boxes = torch.zeros_like(flat, dtype=g.dtype)
    for i, m in enumerate(flat):
        rows = torch.nonzero(m.any(dim=1)).flatten()
        cols = torch.nonzero(m.any(dim=0)).flatten()
        if rows.numel() == 0:
            log.warning("no guidance above %.2f; using full-image box", threshold)
            boxes[i] = 1
            continue
        boxes[i, rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = 1
    return boxes.reshape(*lead, h, w)


def refine_guidance(box: torch.Tensor, h_mat: torch.Tensor, g_ini: torch.Tensor) -> torch.Tensor:
    """Propagate the guidance through ``h_mat`` (row-major flattening), mask
    by the box and min-max normalise."""
    shape = g_ini.shape
    vec = g_ini.flatten(-2).unsqueeze(-1)
    if h_mat.shape[-1] != vec.shape[-2]:
        raise ValueError(f"refinement matrix {tuple(h_mat.shape)} vs guidance {tuple(shape)}")
    propagated = (h_mat @ vec).squeeze(-1).view(shape)
    return minmax_normalize(box * propagated)


def missed_foreground(query_mask: torch.Tensor, g_ini: torch.Tensor) -> torch.Tensor:
    """Foreground not covered by the fixed guidance; both on the same grid."""
    m = query_mask.to(g_ini.dtype)
    return torch.where(m == 0, torch.zeros_like(g_ini), (m - g_ini).clamp(0.0, 1.0))


def refinement_loss(g_ref: torch.Tensor, f_miss: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return clamped_bce(g_ref, f_miss, eps)


def final_guidance(g_ini: torch.Tensor, g_ref: torch.Tensor) -> torch.Tensor:
    return torch.maximum(g_ini, g_ref)


def sample_points(
    g_fin: np.ndarray,
    n_fg: int = 25,
    n_bg: int = 25,
    rng: np.random.Generator | None = None,
    threshold: float = 0.5,
) -> np.ndarray:
    """(n_fg + n_bg, 3) int array of (row, col, label), foreground first.

    Undersized pools are sampled with replacement; an empty pool falls back to
    the highest (foreground) or lowest (background) ranked pixels, ties broken
    in row-major order.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    g = np.asarray(g_fin, dtype=np.float64)
    h, w = g.shape
    flat = g.reshape(-1)
    fg_pool = np.flatnonzero(flat >= threshold)
    bg_pool = np.flatnonzero(flat < threshold)

    def draw(pool, n, fallback_order):
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        if pool.size == 0:
            return fallback_order[:n] if fallback_order.size >= n else np.resize(fallback_order, n)
        return rng.choice(pool, size=n, replace=pool.size < n)

    fg = draw(fg_pool, n_fg, np.argsort(-flat, kind="stable"))
    bg = draw(bg_pool, n_bg, np.argsort(flat, kind="stable"))
    idx = np.concatenate([fg, bg])
    labels = np.concatenate([np.ones(len(fg), np.int64), np.zeros(len(bg), np.int64)])
    return np.stack([idx // w, idx % w, labels], axis=1)


class SelfAttentionStack(nn.Module):
    """Transformer blocks over the flattened grid; returns per-block attention."""

    def __init__(self, dim: int, blocks: int = 6, heads: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(blocks))

    def forward(self, x: torch.Tensor):
        b, d, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2) + grid_positional_encoding(h, w, d).to(x.dtype)
        maps = []
        for block in self.blocks:
            tokens, attn = block(tokens)
            maps.append(attn)
        return tokens.transpose(1, 2).reshape(b, d, h, w), maps


class LocalGuidance(nn.Module):
    """Learnable part of the local guidance path: two reducers and the
    self-attention stack."""

    def __init__(
        self,
        dim: int,
        blocks: int = 6,
        heads: int = 4,
        avg_last: int = 4,
        sinkhorn_iters: int = 20,
        sinkhorn_tol: float = 1e-6,
        box_threshold: float = 0.5,
    ):
        super().__init__()
        self.fuse = FeatureMap(2 * dim + 1, dim)  # phi_1
        self.attention = SelfAttentionStack(dim, blocks, heads)
        self.reduce = FeatureMap(dim + 1, dim)  # phi_2
        self.avg_last = avg_last
        self.sinkhorn_iters = sinkhorn_iters
        self.sinkhorn_tol = sinkhorn_tol
        self.box_threshold = box_threshold

    def consistent_fusion(self, prototype, f_q_clip, g_ini):
        b, d, h, w = f_q_clip.shape
        if prototype.shape[-1] != d or g_ini.shape[-2:] != (h, w):
            raise ValueError("prototype / guidance do not match the query feature map")
        proto = prototype.view(b, d, 1, 1).expand(b, d, h, w)
        return self.fuse(torch.cat([proto, f_q_clip, g_ini.unsqueeze(1)], dim=1))

    def final_clip_feature(self, f_self, g_fin):
        if g_fin.shape[-2:] != f_self.shape[-2:]:
            raise ValueError("guidance must be resized to the feature grid")
        return self.reduce(torch.cat([f_self, g_fin.unsqueeze(1)], dim=1))

    def forward(self, prototype, f_q_clip, g_ini):
        """All tensors batched; ``g_ini`` already on the (h, w) grid."""
        f_con = self.consistent_fusion(prototype, f_q_clip, g_ini)
        f_self, attn = self.attention(f_con)
        a_bar = average_attention(attn, self.avg_last)
        s_norm = sinkhorn_normalize(a_bar, self.sinkhorn_iters, self.sinkhorn_tol)
        h_mat = high_order_refine(s_norm)
        box = box_from_guidance(g_ini, self.box_threshold)
        g_ref = refine_guidance(box, h_mat, g_ini)
        g_fin = final_guidance(g_ini, g_ref)
        f_fin = self.final_clip_feature(f_self, g_fin)
        return {
            "f_con": f_con,
            "f_self": f_self,
            "attn": attn,
            "box": box,
            "g_ref": g_ref,
            "g_fin": g_fin,
            "f_fin": f_fin,
        }
