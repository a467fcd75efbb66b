"""Warm-ups that give the frozen stand-ins the behaviour of their real
counterparts before they are frozen.

A frozen text-image model is only useful for guidance if text and image
embeddings agree, and a frozen promptable segmenter is only useful if it
segments the object its point prompts indicate.  Random stand-ins do neither.
So the visual and text stand-ins are fitted with a per-class present/absent
objective built from the downstream prompt pair ("a photo of X" vs "a photo
without X"), and the segmenter stand-ins are fitted on class-agnostic
point-prompted segmentation.  Both corpora are freshly rendered shapes from
their own random streams and never touch files of any dataset on disk.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
from torch.nn import functional as F

from .episodes import SHAPE_FAMILIES, render_sample, shape_region

log = logging.getLogger(__name__)

FG_TEMPLATE = "a photo of {}"
BG_TEMPLATE = "a photo without {}"
NONE_PROMPT = "a photo of background"


def render_batch(rng: np.random.Generator, families: list, size: int, batch: int, grid: int):
    """Images, per-class presence (B, C) and patch labels (B, grid, grid) with
    0 = background and k + 1 = family k (patches at least a quarter covered)."""
    cell = size // grid
    images = []
    present = np.zeros((batch, len(families)), dtype=np.float32)
    labels = np.zeros((batch, grid, grid), dtype=np.int64)
    for i in range(batch):
        t = int(rng.integers(len(families)))
        others = [f for j, f in enumerate(families) if j != t]
        img, _, shapes = render_sample(rng, families[t], size, others, 0.5)
        images.append(img)
        for s in shapes:
            k = families.index(s.family)
            present[i, k] = 1.0
            cover = shape_region(s.family, size, s.cx, s.cy, s.half)
            cover = cover.reshape(grid, cell, grid, cell).mean(axis=(1, 3)) > 0.25
            labels[i][cover] = k + 1
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    return x, torch.from_numpy(present), torch.from_numpy(labels)


def align_clip_standin(bundle, tau: float = 0.07, lr: float = 1e-3) -> list:
    """Fit the visual and text stand-ins in place; returns the loss log.

    Two terms: the present/absent softmax over ("a photo of X", "a photo
    without X") on the pooled vector, and a per-patch softmax over the
    "a photo of X" prompts plus a background prompt.
    """
    cfg = bundle.cfg
    families = list(cfg.pretrain_families) or list(SHAPE_FAMILIES)
    n = len(families)
    grid = cfg.image_size // cfg.patch
    visual, text = bundle.clip_visual, bundle.clip_text
    params = list(visual.parameters()) + list(text.parameters())
    for p in params:
        p.requires_grad_(True)
    visual.train()
    text.train()
    torch.manual_seed(cfg.seed + 1)
    rng = np.random.default_rng([cfg.seed, 7])
    opt = torch.optim.Adam(params, lr=lr)
    prompts = (
        [FG_TEMPLATE.format(f) for f in families]
        + [BG_TEMPLATE.format(f) for f in families]
        + [NONE_PROMPT]
    )
    losses = []
    for step in range(cfg.pretrain_steps):
        x, present, labels = render_batch(rng, families, cfg.image_size, cfg.pretrain_batch, grid)
        out = visual(x)
        t_all = F.normalize(text(prompts), dim=-1)
        t_fg, t_bg, t_none = t_all[:n], t_all[n : 2 * n], t_all[2 * n :]
        v = F.normalize(out.pooled, dim=-1)
        pair_logits = torch.stack([v @ t_fg.T, v @ t_bg.T], dim=-1) / tau
        loss_img = F.cross_entropy(pair_logits.reshape(-1, 2), (1 - present).long().reshape(-1))
        patches = F.normalize(out.patch_features.flatten(2).transpose(1, 2), dim=-1)
        patch_logits = torch.cat([patches @ t_none.T, patches @ t_fg.T], dim=-1) / tau
        loss_patch = F.cross_entropy(patch_logits.reshape(-1, n + 1), labels.reshape(-1))
        loss = loss_img + loss_patch
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % 200 == 0:
            log.info("clip stand-in warm-up step %d loss %.4f", step, losses[-1])
    for p in params:
        p.requires_grad_(False)
    visual.eval()
    text.eval()
    return losses


def noisy_points(
    mask_grid: np.ndarray, rng: np.random.Generator, n: int = 25, max_wrong: float = 0.3
) -> np.ndarray:
    """(2n, 3) point prompts from a grid mask; a random fraction (up to
    ``max_wrong``) of each label is drawn from the wrong region, mimicking
    imperfect guidance."""
    flat = mask_grid.reshape(-1)
    w = mask_grid.shape[1]
    fg, bg = np.flatnonzero(flat), np.flatnonzero(~flat)
    eps = rng.uniform(0.0, max_wrong)

    def draw(main, other):
        wrong = rng.uniform(size=n) < eps
        return np.where(wrong, rng.choice(other, n), rng.choice(main, n))

    idx = np.concatenate([draw(fg, bg), draw(bg, fg)])
    labels = np.r_[np.ones(n), np.zeros(n)]
    return np.stack([idx // w, idx % w, labels], axis=1)


def fit_sam_standin(bundle, lr: float = 1e-3, tokens: int = 8) -> list:
    """Fit the segmenter image encoder and decoder in place; returns the loss log.

    Prompt tokens are random during the warm-up, so the decoder accepts any
    token set and takes object location from the points.
    """
    cfg = bundle.cfg
    families = list(SHAPE_FAMILIES)
    grid = cfg.image_size // cfg.sam_stride
    cell = cfg.sam_stride
    encoder, decoder = bundle.sam_image, bundle.sam_decoder
    params = list(encoder.parameters()) + list(decoder.parameters())
    for p in params:
        p.requires_grad_(True)
    encoder.train()
    decoder.train()
    torch.manual_seed(cfg.seed + 2)
    rng = np.random.default_rng([cfg.seed, 11])
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    for step in range(cfg.sam_pretrain_steps):
        images, masks, points = [], [], []
        for _ in range(cfg.sam_pretrain_batch):
            t = int(rng.integers(len(families)))
            others = families[:t] + families[t + 1 :]
            img, mask, _ = render_sample(rng, families[t], cfg.image_size, others, 0.5)
            cover = mask.reshape(grid, cell, grid, cell).mean(axis=(1, 3))
            m_grid = cover >= 0.5
            if not m_grid.any():
                m_grid = cover == cover.max()
            images.append(img)
            masks.append(mask)
            points.append(noisy_points(m_grid, rng))
        x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
        m = torch.from_numpy(np.stack(masks)).float()
        pts = torch.from_numpy(np.stack(points)).float()
        tok = torch.randn(len(images), tokens, cfg.sam_dim)
        logits = decoder(encoder(x), tok, pts)
        loss = F.binary_cross_entropy_with_logits(logits, m)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % 200 == 0:
            log.info("segmenter stand-in warm-up step %d loss %.4f", step, losses[-1])
    for p in params:
        p.requires_grad_(False)
    encoder.eval()
    decoder.eval()
    return losses
