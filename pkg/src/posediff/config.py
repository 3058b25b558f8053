"""Flat ``key = value`` run configuration.

Precedence, lowest first: built-in defaults, ``--profile`` preset, the
``POSEDIFF_SEED`` environment variable (seed only), the ``--config`` file,
then command-line flags. Unknown keys are rejected.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Mapping, Optional

from .errors import ConfigError

# key -> (default, description)
KEYS: dict[str, tuple[Any, str]] = {
    # synthetic data
    "videos": (16, "number of training videos to render"),
    "test_videos": (4, "number of held-out test videos to render"),
    "frames_per_video": (32, "frames per rendered video"),
    "image_size": (64, "square frame size in pixels"),
    "sprite_palette_size": (8, "number of palette colours for sprite parts"),
    "pose_noise": (0.0, "std in pixels of simulated pose-estimation error"),
    "seed": (0, "master random seed"),
    # model
    "latent_channels": (4, "autoencoder latent channels"),
    "downsample": (4, "autoencoder spatial downsample factor"),
    "ae_width": (32, "autoencoder width at full resolution; doubles per level"),
    "base_channels": (32, "UNet base width"),
    "d_ctx": (64, "cross-attention context width"),
    "T": (1000, "diffusion timesteps"),
    "beta_start": (1e-4, "first beta of the linear schedule"),
    "beta_end": (0.02, "last beta of the linear schedule"),
    "embedder": ("builtin", "image embedder: builtin or external"),
    "use_vae": (True, "feed VAE latent tokens to the adapter"),
    "window_mode": ("five", "pose window: five consecutive poses or center only"),
    # autoencoder training
    "ae_steps": (3000, "autoencoder training steps"),
    "ae_lr": (1e-3, "autoencoder learning rate"),
    "ae_batch": (16, "autoencoder batch size"),
    # base phase
    "base_lr": (5e-6, "base phase learning rate"),
    "base_epochs": (5.0, "base phase epochs (used when base_steps is 0)"),
    "base_steps": (0, "base phase optimizer steps; 0 derives from epochs"),
    "micro_batch": (4, "base phase micro batch"),
    "grad_accum": (4, "base phase gradient accumulation steps"),
    "dropout": (True, "conditioning dropout in the base phase"),
    # subject phase
    "subject_lr": (1e-5, "subject UNet/adapter learning rate"),
    "subject_steps": (500, "subject UNet/adapter steps"),
    "subject_batch": (4, "augmented copies per subject step"),
    "decoder_lr": (5e-5, "subject decoder learning rate"),
    "decoder_steps": (1500, "subject decoder steps"),
    "augment": (True, "random-crop augmentation in the subject phase"),
    "crop_min": (0.9, "smallest crop scale"),
    # inference
    "s_image": (3.0, "image guidance weight"),
    "s_pose": (5.0, "pose guidance weight"),
    "steps": (100, "sampler steps"),
    "sampler": ("pndm", "sampler: pndm, ddim or ddpm"),
    "seed_policy": ("derived", "per-frame seed: derived or fixed"),
    "jobs": (1, "parallel frame workers"),
}

# Desk-scale training budget for a from-scratch model on one CPU.
PROFILES: dict[str, dict[str, Any]] = {
    "reference": {},
    "desk": {
        "ae_width": 16,
        "ae_steps": 1500,
        "ae_lr": 2e-3,
        "base_lr": 1e-3,
        "base_steps": 6000,
        "micro_batch": 8,
        "grad_accum": 1,
        "subject_lr": 1e-4,
        "subject_steps": 300,
        "decoder_lr": 1e-3,
        "decoder_steps": 300,
        "steps": 50,
    },
}


def _coerce(key: str, raw: Any) -> Any:
    default = KEYS[key][0]
    if not isinstance(raw, str):
        return type(default)(raw) if not isinstance(default, bool) else bool(raw)
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return text


def parse_config_text(text: str) -> dict[str, Any]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config_file(path) -> dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def resolve(file_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
            profile: str = "reference", env: Optional[Mapping[str, str]] = None) -> dict[str, Any]:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = {k: v[0] for k, v in KEYS.items()}
    cfg.update(PROFILES[profile])
    env = os.environ if env is None else env
    if env.get("POSEDIFF_SEED"):
        cfg["seed"] = _coerce("seed", env["POSEDIFF_SEED"])
    if file_path:
        cfg.update(load_config_file(file_path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def dump(cfg: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))
