"""Two-phase finetuning: base (full dataset) then subject-specific."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .autoencoder import finetune_decoder
from .conditioning import DropoutProbs, build_pose_conditioning, dropout_flags
from .data import PoseWindow, SampleRecord, VideoDataset, build_pose_window, sample_indices
from .diffusion import denoising_loss
from .errors import ConfigError, Divergence, EmptyDataset, MissingPose, NonFinite
from .models import ModelSet
from .tensor_format import read_blob, write_blob

PHASES = ("base", "subject_unet", "subject_vae")

# Learning rates, lengths and batch sizes for finetuning a pretrained model.
REFERENCE_DEFAULTS = {
    "base": dict(lr=5e-6, epochs=5, micro_batch=4, grad_accum=4, dropout_enabled=True, augment_enabled=False),
    "subject_unet": dict(lr=1e-5, steps=500, micro_batch=4, grad_accum=1, dropout_enabled=False, augment_enabled=True),
    "subject_vae": dict(lr=5e-5, steps=1500, micro_batch=1, grad_accum=1, dropout_enabled=False, augment_enabled=False),
}


@dataclass
class TrainConfig:
    phase: str = "base"
    lr: float = 5e-6
    steps: int = 0  # 0 -> derived from epochs
    epochs: float = 5
    micro_batch: int = 4
    grad_accum: int = 4
    dropout_enabled: bool = True
    augment_enabled: bool = False
    seed: int = 0
    dropout: DropoutProbs = field(default_factory=DropoutProbs)
    crop_scale: tuple = (0.9, 1.0)
    log_path: Optional[str] = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.micro_batch < 1 or self.grad_accum < 1:
            raise ConfigError("micro_batch and grad_accum must be >= 1")
        if self.dropout_enabled and self.phase != "base":
            raise ConfigError("conditioning dropout is only used in the base phase")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> "TrainConfig":
        kw = dict(REFERENCE_DEFAULTS[phase])
        kw.update(overrides)
        return cls(phase=phase, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        return d


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    steps: int = 0


@dataclass
class Batch:
    """One effective batch; every random draw is made before splitting into micro batches."""

    inputs: torch.Tensor  # input images [B,3,H,W]
    input_latents: torch.Tensor  # E(inputs) [B,C,h,w]
    targets: torch.Tensor  # target latents [B,C,h,w]
    c_p: torch.Tensor  # [B,10,h,w]
    t: torch.Tensor
    eps: torch.Tensor
    null_image: np.ndarray
    null_pose: np.ndarray

    def __len__(self):
        return len(self.targets)

    def slice(self, sl: slice) -> "Batch":
        return Batch(self.inputs[sl], self.input_latents[sl], self.targets[sl], self.c_p[sl],
                     self.t[sl], self.eps[sl], self.null_image[sl], self.null_pose[sl])


def batch_loss(model: ModelSet, batch: Batch, reduction: str = "mean") -> torch.Tensor:
    c_I = model.image_context(batch.inputs, batch.input_latents)

    def eps_fn(z, t):
        return model.eps(z, t, c_I, batch.c_p, batch.null_image, batch.null_pose)

    return denoising_loss(eps_fn, batch.targets, model.schedule, t=batch.t, eps=batch.eps,
                          reduction=reduction)


def _noise(model: ModelSet, n: int, gen: torch.Generator):
    c, h, w = model.autoencoder.latent_shape(model.cfg.image_size, model.cfg.image_size)
    t = torch.randint(1, model.schedule.T + 1, (n,), generator=gen)
    eps = torch.randn((n, c, h, w), generator=gen)
    return t, eps


@torch.no_grad()
def records_to_batch(model: ModelSet, records: Sequence[SampleRecord], gen: torch.Generator,
                     rng: Optional[np.random.Generator] = None, dropout: Optional[DropoutProbs] = None) -> Batch:
    if not records:
        raise EmptyDataset("empty batch")
    hw = model.cfg.latent_hw
    inputs = torch.as_tensor(np.stack([r.input_image for r in records]), dtype=torch.float32)
    targets = torch.as_tensor(np.stack([r.target_frame for r in records]), dtype=torch.float32)
    c_p = torch.stack([build_pose_conditioning(r.pose_window, hw) for r in records])
    t, eps = _noise(model, len(records), gen)
    n = len(records)
    if dropout is not None:
        null_i, null_p = dropout_flags(n, rng, dropout)
    else:
        null_i, null_p = np.zeros(n, bool), np.zeros(n, bool)
    ae = model.autoencoder
    return Batch(inputs, ae.encode(inputs), ae.encode(targets), c_p, t, eps, null_i, null_p)


def training_loss(model: ModelSet, records: Sequence[SampleRecord], gen: torch.Generator,
                  rng: Optional[np.random.Generator] = None,
                  dropout: Optional[DropoutProbs] = None) -> torch.Tensor:
    """Mean squared noise-prediction error over a list of training records."""
    return batch_loss(model, records_to_batch(model, records, gen, rng, dropout))


class FrameCache:
    """Frozen-encoder latents and latent-resolution pose maps for every frame."""

    def __init__(self, model: ModelSet, dataset: VideoDataset, window_mode: str = "five"):
        if len(dataset) == 0 or dataset.num_frames == 0:
            raise EmptyDataset("dataset has no frames")
        self.dataset = dataset
        hw = model.cfg.latent_hw
        frames = np.concatenate([v.frames for v in dataset.videos])
        poses = np.concatenate([v.poses for v in dataset.videos])
        self.images = torch.as_tensor(frames)
        with torch.no_grad():
            self.latents = torch.cat([model.autoencoder.encode(self.images[i:i + 64])
                                      for i in range(0, len(self.images), 64)])
            self.poses = F.interpolate(torch.as_tensor(poses), size=hw, mode="area") \
                if tuple(poses.shape[-2:]) != tuple(hw) else torch.as_tensor(poses)
        self.offsets = np.cumsum([0] + [len(v) for v in dataset.videos])
        self.window_mode = window_mode

    def window_indices(self, v: int, i: int) -> list[int]:
        n = len(self.dataset.videos[v])
        if self.window_mode == "center":
            local = [i] * 5
        else:
            local = [min(max(i + k, 0), n - 1) for k in range(-2, 3)]
        return [int(self.offsets[v]) + j for j in local]

    def pose_conditioning(self, v: int, i: int) -> torch.Tensor:
        return self.poses[self.window_indices(v, i)].reshape(-1, *self.poses.shape[-2:])

    def sample_batch(self, model: ModelSet, n: int, rng: np.random.Generator, gen: torch.Generator,
                     dropout: Optional[DropoutProbs]) -> Batch:
        draws = [sample_indices(self.dataset, rng) for _ in range(n)]
        src = [int(self.offsets[v]) + s for v, s, _ in draws]
        tgt = [int(self.offsets[v]) + g for v, _, g in draws]
        c_p = torch.stack([self.pose_conditioning(v, g) for v, _, g in draws])
        t, eps = _noise(model, n, gen)
        if dropout is not None:
            null_i, null_p = dropout_flags(n, rng, dropout)
        else:
            null_i, null_p = np.zeros(n, bool), np.zeros(n, bool)
        return Batch(self.images[src], self.latents[src], self.latents[tgt], c_p, t, eps, null_i, null_p)


class TrainLog:
    """Append-only ``step,loss,lr,phase`` lines."""

    def __init__(self, path: Optional[str]):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, step: int, loss: float, lr: float, phase: str) -> None:
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(f"{step},{loss:.8g},{lr:.8g},{phase}\n")


def optimizer_step(model: ModelSet, opt: torch.optim.Optimizer, batch: Batch, cfg: TrainConfig) -> float:
    """Accumulate gradients over ``grad_accum`` micro batches, then take one step."""
    opt.zero_grad(set_to_none=True)
    n_total = batch.targets.numel()
    total = 0.0
    for k in range(cfg.grad_accum):
        micro = batch.slice(slice(k * cfg.micro_batch, (k + 1) * cfg.micro_batch))
        loss = batch_loss(model, micro, reduction="sum") / n_total
        loss.backward()
        total += loss.item()
    if not math.isfinite(total):
        raise Divergence(f"loss diverged ({total})")
    opt.step()
    return total


def _trainable(model: ModelSet) -> list[torch.nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def base_trainable_parts(model: ModelSet) -> tuple[str, ...]:
    parts = ("unet", "adapter")
    if model.cfg.conditioning.embedder == "builtin":
        parts += ("embedder",)
    return parts


def steps_for(cfg: TrainConfig, num_frames: int) -> int:
    if cfg.steps:
        return cfg.steps
    return max(1, math.ceil(cfg.epochs * num_frames / cfg.effective_batch))


def train_base(model: ModelSet, dataset: VideoDataset, cfg: TrainConfig,
               optimizer_state: Optional[dict] = None, start_step: int = 0) -> tuple[TrainResult, torch.optim.Optimizer]:
    """Phase 1: UNet + adapter (+ built-in embedder) on the full dataset; VAE frozen."""
    if cfg.phase != "base":
        raise ConfigError("train_base needs a base-phase config")
    model.set_trainable(*base_trainable_parts(model))
    cache = FrameCache(model, dataset, model.cfg.window_mode)
    n_steps = steps_for(cfg, dataset.num_frames)
    rng = np.random.default_rng(cfg.seed + start_step)
    gen = torch.Generator().manual_seed(cfg.seed + start_step)
    opt = torch.optim.Adam(_trainable(model), lr=cfg.lr)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
        for g in opt.param_groups:
            g["lr"] = cfg.lr
    log = TrainLog(cfg.log_path)
    result = TrainResult()
    model.train()
    try:
        for step in range(start_step + 1, start_step + n_steps + 1):
            batch = cache.sample_batch(model, cfg.effective_batch, rng, gen,
                                       cfg.dropout if cfg.dropout_enabled else None)
            try:
                loss = optimizer_step(model, opt, batch, cfg)
            except NonFinite as exc:
                raise Divergence(str(exc)) from exc
            result.losses.append(loss)
            log.write(step, loss, cfg.lr, cfg.phase)
        result.steps = start_step + n_steps
    finally:
        model.eval()
        model.set_trainable(*())
    model.meta.setdefault("steps", {})["base"] = result.steps
    model.meta.setdefault("history", []).append({"phase": "base", "config": cfg.to_dict()})
    return result, opt


def random_crop(stack: np.ndarray, rng: np.random.Generator, scale_range: tuple = (0.9, 1.0)) -> np.ndarray:
    """Random square crop of a [C,H,W] stack, resized back to H x W in one interpolation call."""
    _, h, w = stack.shape
    scale = rng.uniform(*scale_range)
    ch, cw = max(1, int(round(scale * h))), max(1, int(round(scale * w)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    if (ch, cw) == (h, w):
        return stack
    crop = np.ascontiguousarray(stack[None, :, y0:y0 + ch, x0:x0 + cw])
    return F.interpolate(torch.as_tensor(crop), size=(h, w), mode="bilinear", align_corners=False)[0].numpy()


def augment_pair(image: np.ndarray, window: PoseWindow, rng: np.random.Generator,
                 scale_range: tuple = (0.9, 1.0)) -> tuple[np.ndarray, PoseWindow]:
    """Random crop applied jointly to the image and every pose frame. No flips."""
    pose = window.frames.reshape(-1, *window.frames.shape[-2:])
    out = random_crop(np.concatenate([image, pose], axis=0), rng, scale_range)
    new_image = np.ascontiguousarray(out[: image.shape[0]])
    new_pose = np.ascontiguousarray(out[image.shape[0]:]).reshape(window.frames.shape)
    return new_image, PoseWindow(frames=new_pose, center_index=window.center_index)


@dataclass
class SubjectResult:
    unet: TrainResult
    decoder_losses: list
    input_counts: list


def finetune_subject(model: ModelSet, subject_images: Sequence[np.ndarray],
                     input_windows: Sequence[PoseWindow],
                     unet_cfg: Optional[TrainConfig] = None,
                     vae_cfg: Optional[TrainConfig] = None) -> SubjectResult:
    """Phase 2: UNet + adapter on augmented subject pairs, then the VAE decoder."""
    unet_cfg = unet_cfg or TrainConfig.for_phase("subject_unet")
    vae_cfg = vae_cfg or TrainConfig.for_phase("subject_vae")
    images = [np.asarray(im, dtype=np.float32) for im in subject_images]
    if not images:
        raise EmptyDataset("no subject images")
    if len(input_windows) != len(images) or any(w is None for w in input_windows):
        raise MissingPose("every subject image needs a pose window")

    model.set_trainable("unet", "adapter")
    rng = np.random.default_rng(unet_cfg.seed)
    gen = torch.Generator().manual_seed(unet_cfg.seed)
    opt = torch.optim.Adam(_trainable(model), lr=unet_cfg.lr)
    log = TrainLog(unet_cfg.log_path)
    hw = model.cfg.latent_hw
    counts = [0] * len(images)
    result = TrainResult()
    model.train()
    try:
        for step in range(1, unet_cfg.steps + 1):
            n = unet_cfg.effective_batch
            cond, tgt, c_p = [], [], []
            for _ in range(n):
                k = int(rng.integers(len(images)))
                counts[k] += 1
                img, win, cond_img = images[k], input_windows[k], images[k]
                if unet_cfg.augment_enabled:
                    img, win = augment_pair(img, win, rng, unet_cfg.crop_scale)
                    # an independent crop for the conditioning copy: no pixel-aligned copy path, no scale offset
                    cond_img = random_crop(cond_img, rng, unet_cfg.crop_scale)
                cond.append(cond_img)
                tgt.append(img)
                c_p.append(build_pose_conditioning(win, hw))
            inputs = torch.as_tensor(np.stack(cond))
            with torch.no_grad():
                targets = model.autoencoder.encode(torch.as_tensor(np.stack(tgt)))
                input_latents = model.autoencoder.encode(inputs)
            t, eps = _noise(model, n, gen)
            batch = Batch(inputs, input_latents, targets, torch.stack(c_p), t, eps,
                          np.zeros(n, bool), np.zeros(n, bool))
            loss = optimizer_step(model, opt, batch, unet_cfg)
            result.losses.append(loss)
            log.write(step, loss, unet_cfg.lr, unet_cfg.phase)
        result.steps = unet_cfg.steps
    finally:
        model.eval()
        model.set_trainable(*())

    dec_losses = finetune_decoder(model.autoencoder, np.stack(images), steps=vae_cfg.steps,
                                  lr=vae_cfg.lr, seed=vae_cfg.seed, batch_size=vae_cfg.micro_batch)
    dlog = TrainLog(vae_cfg.log_path)
    for i, loss in enumerate(dec_losses, 1):
        dlog.write(i, loss, vae_cfg.lr, vae_cfg.phase)
    model.meta.setdefault("steps", {}).update(subject_unet=unet_cfg.steps, subject_vae=vae_cfg.steps)
    model.meta.setdefault("history", []).extend([
        {"phase": "subject_unet", "config": unet_cfg.to_dict()},
        {"phase": "subject_vae", "config": vae_cfg.to_dict()},
    ])
    return SubjectResult(result, dec_losses, counts)


def subject_windows(poses: np.ndarray, indices: Sequence[int], mode: str = "five") -> list[PoseWindow]:
    return [build_pose_window(poses, i, mode) for i in indices]


def save_optimizer(opt: torch.optim.Optimizer, out_dir) -> None:
    out = Path(out_dir)
    state = opt.state_dict()
    meta = {"param_groups": state["param_groups"], "state": {}}
    for idx, st in state["state"].items():
        entry = {}
        for key, value in st.items():
            if torch.is_tensor(value) and value.dim() > 0:
                rel = f"optimizer/{idx}.{key}.pdtb"
                write_blob(out / rel, value.detach().numpy().astype(np.float32))
                entry[key] = {"file": rel}
            else:
                entry[key] = {"value": float(value)}
        meta["state"][str(idx)] = entry
    with open(out / "optimizer.json", "w") as fh:
        json.dump(meta, fh)


def load_optimizer_state(ckpt_dir) -> Optional[dict]:
    root = Path(ckpt_dir)
    path = root / "optimizer.json"
    if not path.exists():
        return None
    with open(path) as fh:
        meta = json.load(fh)
    state = {}
    for idx, entry in meta["state"].items():
        st = {}
        for key, info in entry.items():
            if "file" in info:
                st[key] = torch.from_numpy(read_blob(root / info["file"]))
            else:
                st[key] = torch.tensor(info["value"])
        state[int(idx)] = st
    return {"state": state, "param_groups": meta["param_groups"]}
