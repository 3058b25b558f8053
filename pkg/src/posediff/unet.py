"""Time-conditioned UNet with cross-attention and a widened pose input."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import POSE_CONTEXT_CHANNELS
from .errors import ShapeMismatch, WidthMismatch


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    extra_pose_channels: int = POSE_CONTEXT_CHANNELS
    base_channels: int = 32
    channel_multipliers: Sequence[int] = (1, 2)
    # downsample factors (relative to the latent) that get attention blocks
    attention_resolutions: Sequence[int] = (2,)
    d_ctx: int = 64
    time_embed_dim: int = 128
    num_heads: int = 4
    groups: int = 8

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_resolutions = tuple(self.attention_resolutions)
        if self.extra_pose_channels != POSE_CONTEXT_CHANNELS:
            raise ValueError(f"extra_pose_channels must be {POSE_CONTEXT_CHANNELS}")

    @property
    def input_width(self) -> int:
        return self.latent_channels + self.extra_pose_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Attention(nn.Module):
    def __init__(self, dim: int, ctx_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(ctx_dim, dim, bias=False)
        self.v = nn.Linear(ctx_dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, ctx):
        b, n, d = x.shape
        h = self.heads

        def split(t):
            return t.view(b, -1, h, d // h).transpose(1, 2)

        o = F.scaled_dot_product_attention(split(self.q(x)), split(self.k(ctx)), split(self.v(ctx)))
        return self.out(o.transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    """Self-attention, cross-attention over the image context, feed-forward."""

    def __init__(self, ch: int, d_ctx: int, heads: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.ln1 = nn.LayerNorm(ch)
        self.self_attn = Attention(ch, ch, heads)
        self.ln2 = nn.LayerNorm(ch)
        self.cross_attn = Attention(ch, d_ctx, heads)
        self.ln3 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(), nn.Linear(4 * ch, ch))
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, ctx):
        b, c, hh, ww = x.shape
        h = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        y = self.ln1(h)
        h = h + self.self_attn(y, y)
        h = h + self.cross_attn(self.ln2(h), ctx)
        h = h + self.ff(self.ln3(h))
        h = h.transpose(1, 2).reshape(b, c, hh, ww)
        return x + self.proj_out(h)


def widen_input_layer(conv: nn.Conv2d, extra: int, expected_in: int) -> nn.Conv2d:
    """Copy of ``conv`` with ``extra`` zero-initialised input channels appended."""
    if conv.in_channels != expected_in:
        raise WidthMismatch(f"input layer has {conv.in_channels} channels, expected {expected_in}")
    new = nn.Conv2d(conv.in_channels + extra, conv.out_channels, conv.kernel_size,
                    stride=conv.stride, padding=conv.padding, bias=conv.bias is not None)
    with torch.no_grad():
        new.weight.zero_()
        new.weight[:, :conv.in_channels] = conv.weight
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new


class UNet(nn.Module):
    """Denoiser eps(z_t, t, c_I, c_p); input is channel-concat(z_t, c_p)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        base, g = cfg.base_channels, cfg.groups
        chans = [base * m for m in cfg.channel_multipliers]
        self.time_embed = nn.Sequential(
            nn.Linear(base, cfg.time_embed_dim), nn.SiLU(), nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim)
        )
        # built latent-only, then widened: the pose columns start at exactly zero
        self.conv_in = nn.Conv2d(cfg.latent_channels, base, 3, padding=1)
        self.widen_input(cfg.extra_pose_channels)

        self.down = nn.ModuleList()
        prev, ds = base, 1
        for i, ch in enumerate(chans):
            level = nn.Module()
            level.res = ResBlock(prev, ch, cfg.time_embed_dim, g)
            level.attn = TransformerBlock(ch, cfg.d_ctx, cfg.num_heads, g) if ds in cfg.attention_resolutions else None
            last = i == len(chans) - 1
            level.downsample = None if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1)
            self.down.append(level)
            prev = ch
            ds = ds if last else ds * 2

        self.mid_res1 = ResBlock(prev, prev, cfg.time_embed_dim, g)
        self.mid_attn = TransformerBlock(prev, cfg.d_ctx, cfg.num_heads, g)
        self.mid_res2 = ResBlock(prev, prev, cfg.time_embed_dim, g)

        self.up = nn.ModuleList()
        for i, ch in reversed(list(enumerate(chans))):
            level = nn.Module()
            level.upsample = nn.Conv2d(prev, prev, 3, padding=1) if i != len(chans) - 1 else None
            level.res = ResBlock(prev + ch, ch, cfg.time_embed_dim, g)
            level.attn = TransformerBlock(ch, cfg.d_ctx, cfg.num_heads, g) if ds in cfg.attention_resolutions else None
            self.up.append(level)
            prev = ch
            if i:
                ds //= 2

        self.norm_out = nn.GroupNorm(g, prev)
        self.conv_out = nn.Conv2d(prev, cfg.latent_channels, 3, padding=1)

    def widen_input(self, extra: int) -> None:
        self.conv_in = widen_input_layer(self.conv_in, extra, self.cfg.latent_channels)

    @property
    def pose_input_weight(self) -> torch.Tensor:
        return self.conv_in.weight[:, self.cfg.latent_channels:]

    def forward(self, z: torch.Tensor, t: torch.Tensor, c_I: torch.Tensor, c_p: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if z.dim() != 4 or z.shape[1] != cfg.latent_channels:
            raise ShapeMismatch(f"latent must be [B,{cfg.latent_channels},h,w], got {tuple(z.shape)}")
        if c_p.shape[0] != z.shape[0] or c_p.shape[1] != cfg.extra_pose_channels or c_p.shape[2:] != z.shape[2:]:
            raise ShapeMismatch(f"pose conditioning {tuple(c_p.shape)} does not match latent {tuple(z.shape)}")
        if c_I.dim() != 3 or c_I.shape[0] != z.shape[0] or c_I.shape[2] != cfg.d_ctx:
            raise ShapeMismatch(f"image context {tuple(c_I.shape)} must be [B,n_ctx,{cfg.d_ctx}]")
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0])
        temb = self.time_embed(timestep_embedding(t, cfg.base_channels))

        h = self.conv_in(torch.cat([z, c_p], dim=1))
        skips = []
        for level in self.down:
            h = level.res(h, temb)
            if level.attn is not None:
                h = level.attn(h, c_I)
            skips.append(h)
            if level.downsample is not None:
                h = level.downsample(h)

        h = self.mid_res2(self.mid_attn(self.mid_res1(h, temb), c_I), temb)

        for level in self.up:
            if level.upsample is not None:
                h = level.upsample(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = level.res(torch.cat([h, skips.pop()], dim=1), temb)
            if level.attn is not None:
                h = level.attn(h, c_I)
        return self.conv_out(F.silu(self.norm_out(h)))
