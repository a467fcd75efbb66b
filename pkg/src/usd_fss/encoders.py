"""Frozen encoder contracts and the deterministic tiny stand-ins.

Four frozen components are exposed through :class:`FrozenBundle`:

* ``clip_visual``  patch transformer, returns patch tokens, a pooled vector and
  per-block head-averaged attention maps;
* ``clip_text``    bag-of-words text encoder;
* ``sam_image``    strided convolutional encoder (stride 4);
* ``sam_decoder``  token self-attention, token-to-image and image-to-token
  cross-attention, a 1x1 projection and bilinear upsampling to image
  resolution.

Stand-in weights come from a seeded initialisation followed by two short
warm-ups on rendered shapes: the text-image modules are aligned contrastively
(``EncoderConfig.pretrain_steps``) and the segmenter modules learn class-agnostic
point-prompted segmentation (``EncoderConfig.sam_pretrain_steps``).  After
construction every parameter is frozen and covered by
:attr:`FrozenBundle.fingerprint`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .layers import (
    CrossAttentionBlock,
    TransformerBlock,
    grid_positional_encoding,
    positional_encoding,
)

log = logging.getLogger(__name__)

FOREGROUND, BACKGROUND = 1, 0


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    seed: int = 0
    image_size: int = 64
    patch: int = 8
    clip_dim: int = 64
    clip_blocks: int = 4
    text_dim: int = 64
    vocab_size: int = 1024
    sam_dim: int = 64
    sam_stride: int = 4
    heads: int = 4
    pretrain_steps: int = 1200
    pretrain_batch: int = 32
    pretrain_families: tuple = ()
    sam_pretrain_steps: int = 1500
    sam_pretrain_batch: int = 16

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PatchTokenFeatures:
    patch_features: torch.Tensor  # (B, d1, h1, w1)
    pooled: torch.Tensor  # (B, d1)
    attention_maps: list  # block_count x (B, h1*w1, h1*w1)

    @property
    def block_count(self) -> int:
        return len(self.attention_maps)


def _as_batch(image) -> torch.Tensor:
    """HxWx3 / BxHxWx3 array in [0,1] -> Bx3xHxW float tensor."""
    t = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4 or t.shape[-1] != 3:
        raise EncoderError(f"expected HxWx3 image(s), got shape {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).contiguous()


class ClipVisual(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.image_size = cfg.image_size
        self.grid = cfg.image_size // cfg.patch
        self.patch_embed = nn.Conv2d(3, cfg.clip_dim, cfg.patch, stride=cfg.patch)
        self.pos_embed = nn.Parameter(torch.randn(self.grid * self.grid, cfg.clip_dim) * 0.1)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.clip_dim, cfg.heads) for _ in range(cfg.clip_blocks)
        )
        self.norm = nn.LayerNorm(cfg.clip_dim)

    def forward(self, x: torch.Tensor) -> PatchTokenFeatures:
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise EncoderError(
                f"image size {tuple(x.shape[-2:])} != configured {self.image_size}"
            )
        tokens = self.patch_embed(x - 0.5).flatten(2).transpose(1, 2) + self.pos_embed
        maps = []
        for block in self.blocks:
            tokens, attn = block(tokens)
            maps.append(attn)
        tokens = self.norm(tokens)
        b, n, d = tokens.shape
        feats = tokens.transpose(1, 2).reshape(b, d, self.grid, self.grid)
        return PatchTokenFeatures(feats, tokens.mean(dim=1), maps)


_WORD = re.compile(r"[a-z0-9]+")


def tokenize(prompt: str, vocab_size: int) -> list:
    return [zlib.crc32(w.encode()) % vocab_size for w in _WORD.findall(prompt.lower())]


class ClipText(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.bag = nn.EmbeddingBag(cfg.vocab_size, cfg.text_dim, mode="mean")
        self.proj = nn.Sequential(
            nn.Linear(cfg.text_dim, cfg.text_dim),
            nn.GELU(),
            nn.Linear(cfg.text_dim, cfg.text_dim),
        )

    def forward(self, prompts: list) -> torch.Tensor:
        ids, offsets = [], []
        for p in prompts:
            if not p or not p.strip():
                raise EncoderError("empty text prompt")
            toks = tokenize(p, self.vocab_size)
            if not toks:
                raise EncoderError(f"prompt {p!r} has no tokens")
            offsets.append(len(ids))
            ids.extend(toks)
        bag = self.bag(torch.tensor(ids), torch.tensor(offsets))
        return bag + self.proj(bag)


class SamImage(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.sam_stride != 4:
            raise EncoderError("the stand-in image encoder has stride 4")
        self.image_size = cfg.image_size
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, cfg.sam_dim, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(cfg.sam_dim, cfg.sam_dim, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise EncoderError(
                f"image size {tuple(x.shape[-2:])} != configured {self.image_size}"
            )
        return self.net((x - 0.5) * 2.0)


class SamDecoder(nn.Module):
    """Prompt-conditioned mask decoder.

    Prompt tokens and point embeddings (positional encoding + label embedding)
    self-attend, then attend to the image features; the image features in turn
    attend back to the prompts, which is how point locations reach the dense
    map.  The mask embedding is the mean of the updated prompt tokens plus the
    mean of the updated point tokens, so the output does not depend on point
    order.  Logits are the dot product of the projected image features with the
    mask embedding, upsampled bilinearly.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.dim = cfg.sam_dim
        self.image_size = cfg.image_size
        self.label_embed = nn.Embedding(2, cfg.sam_dim)
        self.token_attn = TransformerBlock(cfg.sam_dim, cfg.heads)
        self.cross = CrossAttentionBlock(cfg.sam_dim, cfg.heads)
        self.image_to_token = CrossAttentionBlock(cfg.sam_dim, cfg.heads)
        self.proj = nn.Sequential(
            nn.Conv2d(cfg.sam_dim, cfg.sam_dim, 1), nn.GELU(), nn.Conv2d(cfg.sam_dim, cfg.sam_dim, 1)
        )

    def embed_points(self, points: torch.Tensor) -> torch.Tensor:
        """(B, N, 3) rows of (row, col, label) -> (B, N, dim)."""
        pe = positional_encoding(points[..., :2], self.dim).to(self.label_embed.weight.dtype)
        return pe + self.label_embed(points[..., 2].long())

    def forward(
        self, features: torch.Tensor, tokens: torch.Tensor, points: torch.Tensor | None = None
    ) -> torch.Tensor:
        b, d, h, w = features.shape
        if d != self.dim or tokens.shape[-1] != self.dim:
            raise EncoderError(
                f"decoder dim {self.dim}, got features {d} and tokens {tokens.shape[-1]}"
            )
        n_tok = tokens.shape[1]
        pos = grid_positional_encoding(h, w, d).to(features.dtype)
        image = features.flatten(2).transpose(1, 2)
        queries = tokens
        query_pos = torch.zeros_like(tokens)
        n_pts = 0
        if points is not None and points.shape[1] > 0:
            rows, cols = points[..., 0], points[..., 1]
            if (rows < 0).any() or (rows >= h).any() or (cols < 0).any() or (cols >= w).any():
                raise EncoderError("point prompt outside the feature grid")
            point_pos = positional_encoding(points[..., :2], d).to(tokens.dtype)
            queries = torch.cat([tokens, self.embed_points(points).to(tokens.dtype)], dim=1)
            query_pos = torch.cat([query_pos, point_pos], dim=1)
            n_pts = points.shape[1]
        queries, _ = self.token_attn(queries)
        queries, _ = self.cross(queries + query_pos, image + pos)
        image, _ = self.image_to_token(image + pos, queries + query_pos)
        mask_embed = queries[:, :n_tok].mean(dim=1)
        if n_pts:
            mask_embed = mask_embed + queries[:, n_tok:].mean(dim=1)
        emb = self.proj(image.transpose(1, 2).reshape(b, d, h, w))
        logits = torch.einsum("bchw,bc->bhw", emb, mask_embed) / math.sqrt(d)
        return F.interpolate(
            logits.unsqueeze(1),
            size=(self.image_size, self.image_size),
            mode="bilinear",
            align_corners=False,
        ).squeeze(1)


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------


def save_weights(state: dict, directory: Path) -> None:
    """Write ``weights.bin`` (little-endian float32, concatenated) and
    ``manifest.json`` (name, shape, offset in elements)."""
    directory.mkdir(parents=True, exist_ok=True)
    manifest, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.reshape(-1))
        offset += arr.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    tmp = directory / "weights.bin.tmp"
    blob.tofile(tmp)
    os.replace(tmp, directory / "weights.bin")
    (directory / "manifest.json").write_text(json.dumps({"tensors": manifest}, indent=1))


def load_weights(directory: Path) -> dict:
    manifest = json.loads((directory / "manifest.json").read_text())["tensors"]
    blob = np.fromfile(directory / "weights.bin", dtype="<f4")
    state = {}
    for entry in manifest:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = blob[entry["offset"] : entry["offset"] + n]
        if chunk.size != n:
            raise EncoderError(f"weights.bin truncated at {entry['name']}")
        state[entry["name"]] = torch.from_numpy(chunk.reshape(entry["shape"]).copy())
    return state


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------


def default_cache_dir() -> Path:
    return Path(os.environ.get("USD_CACHE", Path.home() / ".cache" / "usd_fss"))


class FrozenBundle:
    """The four frozen components plus their parameter fingerprint."""

    def __init__(self, cfg: EncoderConfig, state: dict | None = None):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.clip_visual = ClipVisual(cfg)
        self.clip_text = ClipText(cfg)
        self.sam_image = SamImage(cfg)
        self.sam_decoder = SamDecoder(cfg)
        if state is not None:
            self.load_state(state)
        self.freeze()

    @property
    def modules(self) -> dict:
        return {
            "clip_visual": self.clip_visual,
            "clip_text": self.clip_text,
            "sam_image": self.sam_image,
            "sam_decoder": self.sam_decoder,
        }

    def state(self) -> dict:
        return {
            f"{name}.{k}": v
            for name, mod in self.modules.items()
            for k, v in mod.state_dict().items()
        }

    def load_state(self, state: dict) -> None:
        for name, mod in self.modules.items():
            prefix = name + "."
            sub = {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}
            mod.load_state_dict(sub)

    def freeze(self) -> None:
        for mod in self.modules.values():
            mod.eval()
            for p in mod.parameters():
                p.requires_grad_(False)

    def parameters(self):
        for mod in self.modules.values():
            yield from mod.parameters()

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.state().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    @classmethod
    def create(cls, cfg: EncoderConfig, cache_dir: Path | None = None) -> "FrozenBundle":
        """Build (or load from cache) the stand-ins for ``cfg``."""
        cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        target = cache_dir / f"standin-{cfg.key()}"
        if (target / "manifest.json").exists():
            try:
                return cls(cfg, load_weights(target))
            except (EncoderError, RuntimeError, KeyError, ValueError) as exc:
                log.warning("ignoring unreadable encoder cache %s: %s", target, exc)
        bundle = cls(cfg)
        if cfg.pretrain_steps > 0:
            from .pretrain import align_clip_standin

            align_clip_standin(bundle)
        if cfg.sam_pretrain_steps > 0:
            from .pretrain import fit_sam_standin

            fit_sam_standin(bundle)
        bundle.freeze()
        try:
            save_weights(bundle.state(), target)
            # round-trip through float32 file so cached and fresh bundles agree
            bundle = cls(cfg, load_weights(target))
        except OSError as exc:
            log.warning("could not cache encoder weights at %s: %s", target, exc)
        return bundle

    # -- encoder operations ------------------------------------------------

    @torch.no_grad()
    def clip_visual_encode(self, image) -> PatchTokenFeatures:
        return self.clip_visual(_as_batch(image))

    def clip_visual_gradient(self, image, score_fn: Callable) -> torch.Tensor:
        """d score / d patch_features, evaluated in float64.

        ``score_fn`` maps (B, d1, h1, w1) patch features to a scalar per batch
        (or a scalar); the gradient of its sum is returned.
        """
        with torch.no_grad():
            feats = self.clip_visual(_as_batch(image)).patch_features
        with torch.enable_grad():
            leaf = feats.to(torch.float64).requires_grad_(True)
            score = score_fn(leaf)
            (grad,) = torch.autograd.grad(score.sum(), leaf)
        if not torch.isfinite(grad).all():
            raise EncoderError("non-finite gradient from score function")
        return grad

    @torch.no_grad()
    def clip_text_encode(self, prompt: str) -> torch.Tensor:
        return self.clip_text([prompt])[0]

    @torch.no_grad()
    def sam_encode(self, image) -> torch.Tensor:
        return self.sam_image(_as_batch(image))

    def sam_decode(self, features, tokens, points=None) -> torch.Tensor:
        return self.sam_decoder(features, tokens, points)
