"""ModelSet container and checkpoint I/O.

A checkpoint directory holds ``manifest.json`` (part -> blob files, config
echo, step counts, seed) and one ``.pdtb`` file per parameter tensor.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .autoencoder import Autoencoder, AutoencoderConfig, param_checksum
from .conditioning import Adapter, ConditioningConfig, ImageEmbedder, latent_tokens, mask_batch
from .diffusion import DiffusionSchedule, linear_schedule
from .errors import CheckpointMissing
from .tensor_format import read_blob, write_blob
from .unet import DenoiserConfig, UNet

PARTS = ("autoencoder", "unet", "embedder", "adapter")
MANIFEST = "manifest.json"


@dataclass
class ModelConfig:
    image_size: int = 64
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    conditioning: Optional[ConditioningConfig] = None
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    window_mode: str = "five"

    def __post_init__(self):
        f = self.autoencoder.downsample
        hw = (self.image_size // f, self.image_size // f)
        if self.conditioning is None:
            self.conditioning = ConditioningConfig(latent_hw=hw, latent_channels=self.autoencoder.latent_channels,
                                                   d_ctx=self.denoiser.d_ctx)
        if tuple(self.conditioning.latent_hw) != hw:
            raise ValueError(f"conditioning latent_hw {self.conditioning.latent_hw} != {hw}")

    @property
    def latent_hw(self) -> tuple[int, int]:
        return tuple(self.conditioning.latent_hw)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "autoencoder": self.autoencoder.to_dict(),
            "denoiser": self.denoiser.to_dict(),
            "conditioning": self.conditioning.to_dict(),
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "window_mode": self.window_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            image_size=d["image_size"],
            autoencoder=AutoencoderConfig(**d["autoencoder"]),
            denoiser=DenoiserConfig(**d["denoiser"]),
            conditioning=ConditioningConfig(**d["conditioning"]),
            T=d["T"],
            beta_start=d["beta_start"],
            beta_end=d["beta_end"],
            window_mode=d.get("window_mode", "five"),
        )


class ModelSet(nn.Module):
    """Autoencoder, denoiser, image embedder and adapter plus the schedule."""

    def __init__(self, cfg: Optional[ModelConfig] = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        torch.manual_seed(seed)
        self.autoencoder = Autoencoder(self.cfg.autoencoder)
        self.unet = UNet(self.cfg.denoiser)
        self.embedder = ImageEmbedder(self.cfg.conditioning)
        self.adapter = Adapter(self.cfg.conditioning)
        self.schedule: DiffusionSchedule = linear_schedule(self.cfg.T, self.cfg.beta_start, self.cfg.beta_end)
        self.meta: dict = {"steps": {}, "history": []}
        self.eval()

    def part(self, name: str) -> nn.Module:
        if name not in PARTS:
            raise KeyError(name)
        return getattr(self, name)

    def set_trainable(self, *names: str) -> None:
        for name in PARTS:
            flag = name in names
            for p in self.part(name).parameters():
                p.requires_grad_(flag)

    def checksums(self) -> dict[str, str]:
        out = {name: param_checksum(self.part(name)) for name in PARTS}
        out["encoder"] = param_checksum(self.autoencoder.encoder)
        out["decoder"] = param_checksum(self.autoencoder.decoder)
        return out

    def image_context(self, images: torch.Tensor, latents: Optional[torch.Tensor] = None,
                      external: Optional[torch.Tensor] = None) -> torch.Tensor:
        """c_I = A(embedder(x), latent tokens of E(x)) for a batch of input images."""
        c_clip = self.embedder(images, external)
        c_vae = None
        if self.cfg.conditioning.use_vae:
            if latents is None:
                with torch.no_grad():
                    latents = self.autoencoder.encode(images)
            c_vae = latent_tokens(latents, self.cfg.conditioning.latent_patch)
        return self.adapter(c_clip, c_vae)

    def eps(self, z: torch.Tensor, t, c_I: torch.Tensor, c_p: torch.Tensor,
            null_image=None, null_pose=None) -> torch.Tensor:
        if null_image is not None or null_pose is not None:
            n = z.shape[0]
            c_I, c_p = mask_batch(c_I, c_p,
                                  null_image if null_image is not None else np.zeros(n, bool),
                                  null_pose if null_pose is not None else np.zeros(n, bool))
        return self.unet(z, t, c_I, c_p)


def save_checkpoint(model: ModelSet, out_dir, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = {}
    for name in PARTS:
        files = {}
        for key, value in model.part(name).state_dict().items():
            arr = value.detach().cpu().numpy().astype(np.float32)
            if arr.ndim == 0:
                arr = arr.reshape(1)
            rel = f"{name}/{key}.pdtb"
            write_blob(out / rel, arr)
            files[key] = {"file": rel, "shape": list(value.shape)}
        parts[name] = files
    manifest = {
        "format": "posediff-checkpoint",
        "version": 1,
        "config": model.cfg.to_dict(),
        "schedule": model.schedule.to_dict(),
        "parts": parts,
        "checksums": model.checksums(),
        "meta": model.meta,
    }
    if extra:
        manifest["extra"] = extra
    with open(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out


def read_manifest(ckpt_dir) -> dict:
    path = Path(ckpt_dir) / MANIFEST
    if not path.exists():
        raise CheckpointMissing(f"no checkpoint manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def load_checkpoint(ckpt_dir) -> ModelSet:
    root = Path(ckpt_dir)
    manifest = read_manifest(root)
    model = ModelSet(ModelConfig.from_dict(manifest["config"]))
    for name, files in manifest["parts"].items():
        module = model.part(name)
        state = {}
        for key, info in files.items():
            arr = read_blob(root / info["file"]).reshape(info["shape"])
            state[key] = torch.from_numpy(np.ascontiguousarray(arr))
        module.load_state_dict(state)
    model.meta = manifest.get("meta", {"steps": {}, "history": []})
    model.eval()
    return model
