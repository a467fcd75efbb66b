"""Dual decoding through the frozen decoder, prediction fusion and losses."""

from __future__ import annotations

import numpy as np
import torch

from .layers import clamped_bce


def decode_pair(decoder, f_fin, f_sam, q_clip, q_sam, points=None):
    """Return ``(p_clip, p_sam)`` probability maps at image resolution.

    The clip path decodes the enhanced features alone; the segmenter path
    decodes its own features compensated by the enhanced ones.
    """
    if f_fin.shape != f_sam.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_fin.shape)} vs {tuple(f_sam.shape)}")
    p_clip = torch.sigmoid(decoder(f_fin, q_clip, points))
    p_sam = torch.sigmoid(decoder(f_sam + f_fin, q_sam, points))
    return p_clip, p_sam


def fuse(p_clip, p_sam, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * p_sam + (1.0 - alpha) * p_clip


def prediction_loss(p, query_mask, eps: float = 1e-6):
    return clamped_bce(p, query_mask, eps)


def total_loss(loss_ref, loss_pred, beta: float):
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return loss_ref + beta * loss_pred


def binarize(p, threshold: float = 0.5):
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if isinstance(p, torch.Tensor):
        return (p >= threshold).to(torch.uint8)
    return (np.asarray(p) >= threshold).astype(np.uint8)
