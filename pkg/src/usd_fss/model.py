"""End-to-end few-shot pipeline: frozen feature cache, learnable network and
the batched forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .decoding import decode_pair, fuse, prediction_loss, total_loss
from .encoders import FrozenBundle
from .episodes import Episode
from .gsm import FeatureMap, GlobalSupplement, downsample_mask
from .layers import minmax_normalize, resize
from .lgm import LocalGuidance, missed_foreground, refinement_loss, sample_points, softmax_gradcam
from .vtpg import PromptGenerator


class FeatureStore:
    """Memoises every frozen computation keyed by image identity.

    Frozen encoders are pure functions of their inputs, so caching is exact.
    """

    def __init__(self, bundle: FrozenBundle, cfg: TrainConfig):
        self.bundle = bundle
        self.tau = cfg.lgm.tau
        self.fg_template = cfg.text.foreground
        self.bg_template = cfg.text.background
        self._images: dict = {}
        self._texts: dict = {}
        self._guidance: dict = {}

    @staticmethod
    def _key(image, path):
        return str(path) if path is not None else image.tobytes()

    def image(self, image: np.ndarray, path=None) -> dict:
        key = self._key(image, path)
        if key not in self._images:
            clip = self.bundle.clip_visual_encode(image)
            self._images[key] = {
                "clip": clip.patch_features[0],
                "pooled": clip.pooled[0],
                "sam": self.bundle.sam_encode(image)[0],
            }
        return self._images[key]

    def text(self, class_name: str):
        if class_name not in self._texts:
            fg = self.bundle.clip_text_encode(self.fg_template.format(class_name))
            bg = self.bundle.clip_text_encode(self.bg_template.format(class_name))
            self._texts[class_name] = (fg, bg)
        return self._texts[class_name]

    def guidance(self, image: np.ndarray, class_name: str, path=None) -> torch.Tensor:
        key = (self._key(image, path), class_name)
        if key not in self._guidance:
            fg, bg = self.text(class_name)
            self._guidance[key] = softmax_gradcam(self.bundle, image, fg, bg, self.tau).to(
                torch.float32
            )
        return self._guidance[key]


def collate(episodes: list, store: FeatureStore) -> dict:
    """Stack frozen features for a list of episodes sharing the same K."""
    shots = {ep.shots for ep in episodes}
    if len(shots) != 1:
        raise ValueError("episodes in one batch must share the shot count")
    q_clip, q_sam, g_ini, text_fg, q_mask = [], [], [], [], []
    s_clip, s_sam, s_mask = [], [], []
    for ep in episodes:
        qf = store.image(ep.query_image, ep.query_path)
        q_clip.append(qf["clip"])
        q_sam.append(qf["sam"])
        g_ini.append(store.guidance(ep.query_image, ep.class_name, ep.query_path))
        text_fg.append(store.text(ep.class_name)[0])
        q_mask.append(torch.from_numpy(np.asarray(ep.query_mask, dtype=np.float32)))
        paths = ep.support_paths or [None] * ep.shots
        feats = [store.image(img, p) for (img, _), p in zip(ep.supports, paths)]
        s_clip.append(torch.stack([f["clip"] for f in feats]))
        s_sam.append(torch.stack([f["sam"] for f in feats]))
        s_mask.append(torch.stack([torch.from_numpy(np.asarray(m, np.float32)) for _, m in ep.supports]))
    return {
        "q_clip": torch.stack(q_clip),
        "q_sam": torch.stack(q_sam),
        "g_ini": torch.stack(g_ini),
        "text_fg": torch.stack(text_fg),
        "q_mask": torch.stack(q_mask),
        "s_clip": torch.stack(s_clip),
        "s_sam": torch.stack(s_sam),
        "s_mask": torch.stack(s_mask),
    }


class USDNet(nn.Module):
    """All learnable parameters of the pipeline."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        enc = cfg.encoder
        d = enc.sam_dim
        self.cfg = cfg
        self.gsm = GlobalSupplement(enc.clip_dim, d)
        if cfg.lgm.enabled:
            self.lgm = LocalGuidance(
                d,
                blocks=cfg.lgm.blocks,
                heads=cfg.lgm.heads,
                avg_last=cfg.lgm.avg_last,
                sinkhorn_iters=cfg.lgm.sinkhorn_iters,
                sinkhorn_tol=cfg.lgm.sinkhorn_tol,
                box_threshold=cfg.lgm.box_threshold,
            )
        else:
            self.fuse_plain = FeatureMap(2 * d, d)
        use_text = cfg.vtpg.enabled
        self.vtpg_clip = PromptGenerator(enc.text_dim, d, cfg.vtpg.tokens, cfg.vtpg.heads, use_text)
        self.vtpg_sam = PromptGenerator(enc.text_dim, d, cfg.vtpg.tokens, cfg.vtpg.heads, use_text)


def count_learnables(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


@dataclass
class Pipeline:
    net: USDNet
    bundle: FrozenBundle
    cfg: TrainConfig

    @property
    def grid(self):
        g = self.cfg.image_size // self.cfg.encoder.sam_stride
        return (g, g)

    def forward(
        self,
        batch: dict,
        rngs: list,
        alpha: float | None = None,
        feature_source: str | None = None,
        with_loss: bool = False,
        beta: float | None = None,
    ) -> dict:
        cfg = self.cfg
        net = self.net
        alpha = cfg.alpha if alpha is None else alpha
        source = feature_source or cfg.feature_source
        grid = self.grid
        b = batch["q_clip"].shape[0]

        prototype = net.gsm.prototype(batch["s_clip"], batch["s_mask"], grid)
        f_q_clip = net.gsm.map_query(batch["q_clip"], grid)
        out: dict = {}
        if cfg.lgm.enabled:
            g_ini = minmax_normalize(resize(batch["g_ini"], grid))
            lg = net.lgm(prototype, f_q_clip, g_ini)
            f_fin = lg["f_fin"]
            g_fin = lg["g_fin"].detach().numpy()
            pts = [
                sample_points(g_fin[i], cfg.lgm.n_fg, cfg.lgm.n_bg, rngs[i]) for i in range(b)
            ]
            points = torch.from_numpy(np.stack(pts)).to(torch.float32)
            out.update(g_ini=g_ini, g_ref=lg["g_ref"], g_fin=lg["g_fin"], box=lg["box"], points=points)
        else:
            proto = prototype.view(*prototype.shape, 1, 1).expand_as(f_q_clip)
            f_fin = net.fuse_plain(torch.cat([proto, f_q_clip], dim=1))
            points = None
        f_sam = batch["q_sam"]

        if cfg.prompt_source == "support":
            masks = downsample_mask(batch["s_mask"].flatten(0, 1), grid).unsqueeze(1)
            k = batch["s_clip"].shape[1]
            s_mapped = net.gsm.map_support(batch["s_clip"].flatten(0, 1), grid) * masks
            clip_visual = s_mapped.view(b, k, *s_mapped.shape[1:]).mean(dim=1)
            s_sam = batch["s_sam"].flatten(0, 1) * masks
            sam_visual = s_sam.view(b, k, *s_sam.shape[1:]).mean(dim=1)
        else:
            clip_visual, sam_visual = f_fin, f_sam

        decoder = self.bundle.sam_decoder
        text = batch["text_fg"]
        if source == "clip":
            q_clip = net.vtpg_clip(text, clip_visual)
            p_clip = torch.sigmoid(decoder(f_fin, q_clip, points))
            p_sam, p = None, p_clip
        elif source == "sam":
            q_sam = net.vtpg_sam(text, sam_visual)
            p_sam = torch.sigmoid(decoder(f_sam + f_fin, q_sam, points))
            p_clip, p = None, p_sam
        else:
            q_clip = net.vtpg_clip(text, clip_visual)
            q_sam = net.vtpg_sam(text, sam_visual)
            p_clip, p_sam = decode_pair(decoder, f_fin, f_sam, q_clip, q_sam, points)
            p = fuse(p_clip, p_sam, alpha)
        out.update(p_clip=p_clip, p_sam=p_sam, p=p, f_fin=f_fin)

        if with_loss:
            beta = cfg.beta if beta is None else beta
            q_mask = batch["q_mask"]
            loss_pred = prediction_loss(p, q_mask)
            if cfg.lgm.enabled:
                m_grid = downsample_mask(q_mask, grid)
                f_miss = missed_foreground(m_grid, out["g_ini"])
                loss_ref = refinement_loss(out["g_ref"], f_miss)
                out["f_miss"] = f_miss
            else:
                loss_ref = torch.zeros((), dtype=p.dtype)
            out.update(
                loss_ref=loss_ref,
                loss_pred=loss_pred,
                loss=total_loss(loss_ref, loss_pred, beta),
            )
        return out

    @torch.no_grad()
    def predict(
        self,
        episodes: list,
        store: FeatureStore,
        rngs: list,
        alpha: float | None = None,
        feature_source: str | None = None,
    ) -> np.ndarray:
        """Probability maps (N, H, W) for 1-shot episodes."""
        self.net.eval()
        out = self.forward(collate(episodes, store), rngs, alpha, feature_source)
        return out["p"].numpy()


def episode_rng(seed: int, *stream) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def one_shot_views(ep: Episode) -> list:
    """Split a K-shot episode into K one-shot episodes sharing the query."""
    paths = ep.support_paths or [None] * ep.shots
    return [
        Episode(
            supports=[s],
            query_image=ep.query_image,
            query_mask=ep.query_mask,
            class_name=ep.class_name,
            class_id=ep.class_id,
            query_path=ep.query_path,
            support_paths=[p] if p is not None else [],
        )
        for s, p in zip(ep.supports, paths)
    ]
