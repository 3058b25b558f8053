"""Small convolutional VAE: image [3,H,W] <-> latent [C_lat, H/f, W/f]."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import BadShape, Divergence, EmptyDataset


@dataclass
class AutoencoderConfig:
    image_channels: int = 3
    latent_channels: int = 4
    downsample: int = 4
    channels: Sequence[int] = (32, 64)

    def __post_init__(self):
        self.channels = tuple(self.channels)
        levels = int(round(math.log2(self.downsample)))
        if 2 ** levels != self.downsample or levels < 1:
            raise ValueError("downsample must be a power of two >= 2")
        if len(self.channels) != levels:
            raise ValueError(f"need {levels} channel widths for downsample {self.downsample}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        c0 = cfg.channels[0]
        layers: list[nn.Module] = [nn.Conv2d(cfg.image_channels, c0, 3, padding=1), nn.SiLU()]
        prev = c0
        for ch in cfg.channels:
            layers += [nn.Conv2d(prev, ch, 4, stride=2, padding=1), nn.SiLU(),
                       nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU()]
            prev = ch
        layers.append(nn.Conv2d(prev, 2 * cfg.latent_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        mean, logvar = self.net(x).chunk(2, dim=1)
        return mean, logvar.clamp(-20.0, 10.0)


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        chans = list(reversed(cfg.channels))
        layers: list[nn.Module] = [nn.Conv2d(cfg.latent_channels, chans[0], 3, padding=1), nn.SiLU(),
                                   nn.Conv2d(chans[0], chans[0], 3, padding=1), nn.SiLU()]
        prev = chans[0]
        for ch in chans:
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(prev, ch, 3, padding=1), nn.SiLU()]
            prev = ch
        layers.append(nn.Conv2d(prev, cfg.image_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class Autoencoder(nn.Module):
    """Encoder/decoder pair with a fixed latent scale.

    ``encode`` returns the posterior mode multiplied by ``latent_scale`` so
    diffusion sees roughly unit-variance latents; ``decode`` undoes it.
    """

    def __init__(self, cfg: Optional[AutoencoderConfig] = None):
        super().__init__()
        self.cfg = cfg or AutoencoderConfig()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        self.register_buffer("latent_scale", torch.ones(1))

    @property
    def factor(self) -> int:
        return self.cfg.downsample

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return (self.cfg.latent_channels, h // self.factor, w // self.factor)

    def _check_image(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.cfg.image_channels:
            raise BadShape(f"expected [B,{self.cfg.image_channels},H,W], got {tuple(x.shape)}")
        if x.shape[2] % self.factor or x.shape[3] % self.factor:
            raise BadShape(f"image dims {tuple(x.shape[2:])} not divisible by {self.factor}")

    def posterior(self, x: torch.Tensor):
        self._check_image(x)
        return self.encoder(x)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        mean, _ = self.posterior(x)
        return mean * self.latent_scale

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.cfg.latent_channels:
            raise BadShape(f"expected [B,{self.cfg.latent_channels},h,w] latent, got {tuple(z.shape)}")
        return self.decoder(z / self.latent_scale)

    def decode(self, z: torch.Tensor, image_hw: Optional[tuple[int, int]] = None) -> torch.Tensor:
        if image_hw is not None:
            expected = self.latent_shape(*image_hw)
            if tuple(z.shape[1:]) != expected:
                raise BadShape(f"latent {tuple(z.shape[1:])} does not match {expected}")
        return self.decode_raw(z).clamp(0.0, 1.0)


def param_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _as_tensor(images) -> torch.Tensor:
    return torch.as_tensor(np.asarray(images, dtype=np.float32))


@torch.no_grad()
def recon_l1(ae: Autoencoder, images, batch: int = 64) -> float:
    x = _as_tensor(images)
    total = 0.0
    for i in range(0, len(x), batch):
        xb = x[i:i + batch]
        total += (ae.decode(ae.encode(xb)) - xb).abs().sum().item()
    return total / x.numel()


@dataclass
class AutoencoderTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    kl_weight: float = 1e-6
    seed: int = 0


@dataclass
class AutoencoderTrainResult:
    losses: list = field(default_factory=list)
    initial_l1: float = float("nan")
    final_l1: float = float("nan")


@torch.no_grad()
def calibrate_latent_scale(ae: Autoencoder, images, batch: int = 64) -> float:
    """Set ``latent_scale`` to 1 / std of posterior means over ``images``."""
    x = _as_tensor(images)
    ae.latent_scale.fill_(1.0)
    means = torch.cat([ae.posterior(x[i:i + batch])[0] for i in range(0, len(x), batch)])
    std = float(means.std())
    ae.latent_scale.fill_(1.0 / max(std, 1e-6))
    return std


def train_autoencoder(images, cfg: AutoencoderTrainConfig,
                      ae: Optional[Autoencoder] = None,
                      ae_cfg: Optional[AutoencoderConfig] = None) -> tuple[Autoencoder, AutoencoderTrainResult]:
    """Reconstruction training (L1 + small KL) on a stack of frames [N,3,H,W]."""
    x = _as_tensor(images)
    if len(x) == 0:
        raise EmptyDataset("no images to train the autoencoder on")
    torch.manual_seed(cfg.seed)
    if ae is None:
        ae = Autoencoder(ae_cfg)
    ae.latent_scale.fill_(1.0)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(ae.parameters(), lr=cfg.lr)
    result = AutoencoderTrainResult(initial_l1=recon_l1(ae, x))
    ae.train()
    for _ in range(cfg.steps):
        idx = torch.randint(len(x), (cfg.batch_size,), generator=gen)
        xb = x[idx]
        mean, logvar = ae.encoder(xb)
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=gen)
        rec = (ae.decoder(z) - xb).abs().mean()
        kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()
        loss = rec + cfg.kl_weight * kl
        if not torch.isfinite(loss):
            raise Divergence("autoencoder loss became non-finite")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        result.losses.append(rec.item())
    ae.eval()
    calibrate_latent_scale(ae, x)
    result.final_l1 = recon_l1(ae, x)
    return ae, result


def finetune_decoder(ae: Autoencoder, subject_images, steps: int = 1500, lr: float = 5e-5,
                     seed: int = 0, batch_size: int = 1) -> list[float]:
    """Decoder-only L1 finetuning on one or more subject images; encoder stays frozen."""
    x = _as_tensor(subject_images)
    if x.dim() == 3:
        x = x[None]
    if len(x) == 0:
        raise EmptyDataset("no subject images")
    flags = [p.requires_grad for p in ae.parameters()]
    for p in ae.encoder.parameters():
        p.requires_grad_(False)
    for p in ae.decoder.parameters():
        p.requires_grad_(True)
    with torch.no_grad():
        z = ae.encode(x)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(ae.decoder.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        idx = torch.randint(len(x), (batch_size,), generator=gen)
        loss = (ae.decode_raw(z[idx]) - x[idx]).abs().mean()
        if not torch.isfinite(loss):
            raise Divergence("decoder finetune loss became non-finite")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    for p, flag in zip(ae.parameters(), flags):
        p.requires_grad_(flag)
    return losses

