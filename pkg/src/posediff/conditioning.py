"""Image and pose conditioning signals.

The image signal is built from two token streams: a global embedding of
the input image (the stand-in for a CLIP image encoder) and patch tokens
taken from the input image's VAE latent. The adapter projects both into
one cross-attention context. Its VAE-stream projection starts at zero,
so a fresh adapter ignores the latent tokens entirely.

Null conditioning is the zero tensor in both streams.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import POSE_CHANNELS, WINDOW, PoseWindow
from .errors import BadShape, MissingExternalEmbedding, ShapeMismatch
from .tensor_format import read_blob

POSE_CONTEXT_CHANNELS = WINDOW * POSE_CHANNELS  # 10


@dataclass
class ConditioningConfig:
    embedder: str = "builtin"  # or "external"
    n_tok: int = 1
    d_emb: int = 64
    embed_downsample: int = 4  # input resolution reduction before the embedder
    embed_channels: int = 32
    latent_patch: int = 4
    latent_channels: int = 4
    latent_hw: tuple = (16, 16)
    d_ctx: int = 64
    use_vae: bool = True

    def __post_init__(self):
        self.latent_hw = tuple(self.latent_hw)
        if self.embedder not in ("builtin", "external"):
            raise ValueError(f"unknown embedder {self.embedder!r}")

    @property
    def m_tok(self) -> int:
        h, w = self.latent_hw
        return (h // self.latent_patch) * (w // self.latent_patch)

    @property
    def d_vae(self) -> int:
        return self.latent_channels * self.latent_patch ** 2

    @property
    def n_ctx(self) -> int:
        return self.n_tok + (self.m_tok if self.use_vae else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_hw"] = list(self.latent_hw)
        return d


class ImageEmbedder(nn.Module):
    """Global token embedding of an image, computed at reduced resolution.

    In ``external`` mode the module holds no weights and passes through
    precomputed embeddings (e.g. from a real pretrained image encoder).
    """

    def __init__(self, cfg: ConditioningConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.embedder == "builtin":
            c = cfg.embed_channels
            self.net = nn.Sequential(
                nn.Conv2d(3, c, 3, padding=1), nn.SiLU(),
                nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1), nn.SiLU(),
                nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                nn.Linear(2 * c, cfg.n_tok * cfg.d_emb),
            )

    def forward(self, images: torch.Tensor, external: Optional[torch.Tensor] = None) -> torch.Tensor:
        cfg = self.cfg
        if cfg.embedder == "external":
            if external is None:
                raise MissingExternalEmbedding("external embedder needs precomputed embeddings")
            if tuple(external.shape[-2:]) != (cfg.n_tok, cfg.d_emb):
                raise BadShape(f"external embedding {tuple(external.shape)} != [*, {cfg.n_tok}, {cfg.d_emb}]")
            return external
        if images.dim() != 4 or images.shape[1] != 3:
            raise BadShape(f"expected [B,3,H,W] images, got {tuple(images.shape)}")
        x = F.avg_pool2d(images, cfg.embed_downsample) if cfg.embed_downsample > 1 else images
        return self.net(x).view(-1, cfg.n_tok, cfg.d_emb)


def load_external_embedding(image_path, n_tok: int, d_emb: int) -> np.ndarray:
    """Read ``<image>.emb.pdtb`` next to an image file."""
    path = Path(str(image_path) + ".emb.pdtb")
    if not path.exists():
        raise MissingExternalEmbedding(f"no external embedding at {path}")
    emb = read_blob(path)
    if emb.shape != (n_tok, d_emb):
        raise BadShape(f"{path}: shape {emb.shape} != ({n_tok}, {d_emb})")
    return emb


def latent_tokens(z: torch.Tensor, patch: int) -> torch.Tensor:
    """[B,C,h,w] latent -> [B, (h/p)(w/p), C*p*p] patch tokens."""
    b, c, h, w = z.shape
    if h % patch or w % patch:
        raise BadShape(f"latent {h}x{w} not divisible by patch {patch}")
    t = z.view(b, c, h // patch, patch, w // patch, patch)
    return t.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


class Adapter(nn.Module):
    """Blend global-embedding tokens and VAE patch tokens into one context."""

    def __init__(self, cfg: ConditioningConfig):
        super().__init__()
        self.cfg = cfg
        self.proj_clip = nn.Linear(cfg.d_emb, cfg.d_ctx)
        if cfg.use_vae:
            self.proj_vae = nn.Linear(cfg.d_vae, cfg.d_ctx)
            nn.init.zeros_(self.proj_vae.weight)
            nn.init.zeros_(self.proj_vae.bias)
            self.pos_vae = nn.Parameter(0.02 * torch.randn(cfg.m_tok, cfg.d_ctx))
        self.norm = nn.LayerNorm(cfg.d_ctx)
        self.mix = nn.Linear(cfg.d_ctx, cfg.d_ctx)

    def forward(self, c_clip: torch.Tensor, c_vae: Optional[torch.Tensor]) -> torch.Tensor:
        cfg = self.cfg
        if tuple(c_clip.shape[1:]) != (cfg.n_tok, cfg.d_emb):
            raise ShapeMismatch(f"c_clip {tuple(c_clip.shape)} != [B,{cfg.n_tok},{cfg.d_emb}]")
        streams = [self.proj_clip(c_clip)]
        if cfg.use_vae:
            if c_vae is None or tuple(c_vae.shape[1:]) != (cfg.m_tok, cfg.d_vae):
                got = None if c_vae is None else tuple(c_vae.shape)
                raise ShapeMismatch(f"c_vae {got} != [B,{cfg.m_tok},{cfg.d_vae}]")
            streams.append(self.proj_vae(c_vae) + self.pos_vae)
        h = torch.cat(streams, dim=1)
        return h + self.mix(F.gelu(self.norm(h)))


def build_pose_conditioning(window: PoseWindow | np.ndarray, latent_dims: tuple[int, int]) -> torch.Tensor:
    """5 pose frames [5,2,H,W] -> [10,h,w] by area interpolation, window order kept."""
    frames = window.frames if isinstance(window, PoseWindow) else np.asarray(window)
    if frames.ndim != 4 or frames.shape[:2] != (WINDOW, POSE_CHANNELS):
        raise BadShape(f"pose window must be [5,2,H,W], got {frames.shape}")
    x = torch.as_tensor(np.ascontiguousarray(frames, dtype=np.float32))
    x = x.reshape(1, POSE_CONTEXT_CHANNELS, *x.shape[-2:])
    if tuple(x.shape[-2:]) != tuple(latent_dims):
        x = F.interpolate(x, size=tuple(latent_dims), mode="area")
    return x[0]


@dataclass
class ConditioningBundle:
    c_I: torch.Tensor  # [n_ctx, d_ctx] (or batched)
    c_p: torch.Tensor  # [10, h, w] (or batched)
    null_image: bool = False
    null_pose: bool = False


@dataclass(frozen=True)
class DropoutProbs:
    """Disjoint null events; the remainder keeps both signals."""

    pose_only: float = 0.05
    image_only: float = 0.05
    both: float = 0.05

    def __post_init__(self):
        if min(self.pose_only, self.image_only, self.both) < 0 or self.total > 1:
            raise ValueError("dropout probabilities must be >= 0 and sum to <= 1")

    @property
    def total(self) -> float:
        return self.pose_only + self.image_only + self.both


def dropout_flags(n: int, rng: np.random.Generator,
                  probs: DropoutProbs = DropoutProbs()) -> tuple[np.ndarray, np.ndarray]:
    """(null_image, null_pose) boolean arrays of length ``n``."""
    u = rng.random(n)
    pose_only = u < probs.pose_only
    image_only = (u >= probs.pose_only) & (u < probs.pose_only + probs.image_only)
    both = (u >= probs.pose_only + probs.image_only) & (u < probs.total)
    return image_only | both, pose_only | both


def null_like(x: torch.Tensor) -> torch.Tensor:
    return torch.zeros_like(x)


def apply_conditioning_dropout(bundle: ConditioningBundle, rng: np.random.Generator,
                               probs: DropoutProbs = DropoutProbs(),
                               enabled: bool = True) -> ConditioningBundle:
    if not enabled:
        return bundle
    null_image, null_pose = (bool(f[0]) for f in dropout_flags(1, rng, probs))
    return ConditioningBundle(
        c_I=null_like(bundle.c_I) if null_image else bundle.c_I,
        c_p=null_like(bundle.c_p) if null_pose else bundle.c_p,
        null_image=null_image or bundle.null_image,
        null_pose=null_pose or bundle.null_pose,
    )


def mask_batch(c_I: torch.Tensor, c_p: torch.Tensor, null_image, null_pose) -> tuple[torch.Tensor, torch.Tensor]:
    """Replace nulled rows of batched conditioning with zeros (+0.0, not -0.0)."""
    drop_i = torch.as_tensor(np.asarray(null_image, dtype=bool)).view(-1, 1, 1)
    drop_p = torch.as_tensor(np.asarray(null_pose, dtype=bool)).view(-1, 1, 1, 1)
    return (torch.where(drop_i, null_like(c_I), c_I),
            torch.where(drop_p, null_like(c_p), c_p))
