"""Visual-text target prompt generation."""

from __future__ import annotations

import torch
from torch import nn

from .layers import CrossAttentionBlock, TransformerBlock, grid_positional_encoding


class PromptGenerator(nn.Module):
    """Text tokens cross-attend to visual positions, then self-attend.

    With ``use_text=False`` the tokens are learned queries only, i.e. prompts
    are extracted from visual information alone.
    """

    def __init__(self, text_dim: int, dim: int, tokens: int = 8, heads: int = 4, use_text: bool = True):
        super().__init__()
        self.use_text = use_text
        self.fc = nn.Linear(text_dim, dim) if use_text else None
        self.offsets = nn.Parameter(torch.randn(tokens, dim) * 0.02)
        self.cross = CrossAttentionBlock(dim, heads)
        self.refine = TransformerBlock(dim, heads)

    @property
    def num_tokens(self) -> int:
        return self.offsets.shape[0]

    def expand_text(self, text: torch.Tensor) -> torch.Tensor:
        """(B, d_t) or (d_t,) -> (B, T, d) / (T, d)."""
        if self.fc is None:
            raise RuntimeError("text path disabled for this generator")
        return self.fc(text).unsqueeze(-2) + self.offsets

    def generate_prompt(self, text_tokens, visual_tokens, positions):
        """text_tokens (B, T, d); visual_tokens (B, L, d); positions (L, d) or (B, L, d).

        Returns ``(prompt tokens (B, T, d), cross-attention (B, T, L))``.
        """
        if visual_tokens.shape[-1] != text_tokens.shape[-1]:
            raise ValueError(
                f"visual dim {visual_tokens.shape[-1]} != prompt dim {text_tokens.shape[-1]}"
            )
        kv = visual_tokens + positions.to(visual_tokens.dtype)
        tokens, cross_attn = self.cross(text_tokens, kv)
        tokens, _ = self.refine(tokens)
        return tokens, cross_attn

    def forward(self, text: torch.Tensor | None, visual: torch.Tensor):
        b, d, h, w = visual.shape
        if self.use_text:
            tokens = self.expand_text(text)
        else:
            tokens = self.offsets.unsqueeze(0).expand(b, -1, -1)
        flat = visual.flatten(2).transpose(1, 2)
        pos = grid_positional_encoding(h, w, d)
        return self.generate_prompt(tokens, flat, pos)[0]
