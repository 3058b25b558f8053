"""Frame-by-frame video generation with dual classifier-free guidance."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from .conditioning import build_pose_conditioning, null_like
from .data import PoseWindow, build_pose_window, to_uint8
from .diffusion import sample
from .errors import EmptyPoseSequence, ShapeMismatch
from .models import ModelSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GuidanceWeights:
    s_I: float = 3.0
    s_p: float = 5.0

    def __post_init__(self):
        if not (math.isfinite(self.s_I) and math.isfinite(self.s_p)):
            raise ValueError("guidance weights must be finite")
        if self.s_I < 0 or self.s_p < 0:
            log.warning("negative guidance weight (s_I=%s, s_p=%s)", self.s_I, self.s_p)


def dual_cfg(eps_uu: torch.Tensor, eps_Iu: torch.Tensor, eps_Ip: torch.Tensor,
             w: GuidanceWeights) -> torch.Tensor:
    """eps(0,0) + s_I (eps(I,0) - eps(0,0)) + s_p (eps(I,p) - eps(I,0)).

    Evaluated in f64 as a weighted sum of the branches, so (1,1) and (0,0)
    reproduce a single branch bit for bit and large weights do not amplify
    f32 rounding.
    """
    if not (eps_uu.shape == eps_Iu.shape == eps_Ip.shape):
        raise ShapeMismatch("guidance branches differ in shape")
    uu, iu, ip = (e.double() for e in (eps_uu, eps_Iu, eps_Ip))
    return ((1.0 - w.s_I) * uu + (w.s_I - w.s_p) * iu + w.s_p * ip).to(eps_Ip.dtype)


class GuidedDenoiser:
    """Callable (z, t) -> guided eps; one batched UNet pass over the three branches.

    ``evaluations`` counts per-sample UNet evaluations (three per call).
    """

    def __init__(self, model: ModelSet, c_I: torch.Tensor, c_p: torch.Tensor, w: GuidanceWeights):
        self.model = model
        self.w = w
        self.c_I = torch.cat([null_like(c_I), c_I, c_I])
        self.c_p = torch.cat([null_like(c_p), null_like(c_p), c_p])
        self.evaluations = 0

    @torch.no_grad()
    def __call__(self, z: torch.Tensor, t: int) -> torch.Tensor:
        out = self.model.unet(z.repeat(3, 1, 1, 1), torch.tensor([t]), self.c_I, self.c_p)
        self.evaluations += 3 * z.shape[0]
        eps_uu, eps_Iu, eps_Ip = out.chunk(3)
        return dual_cfg(eps_uu, eps_Iu, eps_Ip, self.w)


def frame_seed(base_seed: int, frame_index: int, policy: str = "derived") -> int:
    if policy == "fixed":
        return int(base_seed)
    if policy == "derived":
        return int(np.random.SeedSequence([int(base_seed), int(frame_index)]).generate_state(1)[0])
    raise ValueError(f"unknown seed policy {policy!r}")


@torch.no_grad()
def subject_context(model: ModelSet, subject_image: np.ndarray,
                    external: Optional[np.ndarray] = None) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(subject_image, dtype=np.float32))[None]
    ext = None if external is None else torch.as_tensor(np.asarray(external, dtype=np.float32))[None]
    return model.image_context(x, external=ext)


@torch.no_grad()
def generate_latent(model: ModelSet, c_I: torch.Tensor, window: PoseWindow, w: GuidanceWeights,
                    steps: int, seed: int, sampler: str = "pndm") -> tuple[torch.Tensor, GuidedDenoiser]:
    c_p = build_pose_conditioning(window, model.cfg.latent_hw)[None]
    shape = model.autoencoder.latent_shape(model.cfg.image_size, model.cfg.image_size)
    gen = torch.Generator().manual_seed(seed)
    z_T = torch.randn((1, *shape), generator=gen)
    denoiser = GuidedDenoiser(model, c_I, c_p, w)
    z0 = sample(sampler, denoiser, z_T, steps, model.schedule, generator=gen)
    return z0, denoiser


@torch.no_grad()
def generate_frame(model: ModelSet, subject_image: np.ndarray, pose_window: PoseWindow,
                   w: GuidanceWeights = GuidanceWeights(), steps: int = 100, seed: int = 0,
                   sampler: str = "pndm", c_I: Optional[torch.Tensor] = None) -> np.ndarray:
    """One frame [3,H,W] in [0,1]."""
    if c_I is None:
        c_I = subject_context(model, subject_image)
    z0, _ = generate_latent(model, c_I, pose_window, w, steps, seed, sampler)
    return model.autoencoder.decode(z0)[0].numpy()


def generate_video(model: ModelSet, subject_image: np.ndarray, pose_sequence: Sequence[np.ndarray],
                   w: GuidanceWeights = GuidanceWeights(), steps: int = 100, seed: int = 0,
                   seed_policy: str = "derived", jobs: int = 1, sampler: str = "pndm",
                   frame_indices: Optional[Sequence[int]] = None,
                   external: Optional[np.ndarray] = None) -> list[np.ndarray]:
    """Frames for every pose (or for ``frame_indices``); frames are independent."""
    if len(pose_sequence) == 0:
        raise EmptyPoseSequence("pose sequence is empty")
    indices = list(range(len(pose_sequence))) if frame_indices is None else list(frame_indices)
    c_I = subject_context(model, subject_image, external)
    mode = model.cfg.window_mode

    def one(i: int) -> np.ndarray:
        window = build_pose_window(pose_sequence, i, mode)
        return generate_frame(model, subject_image, window, w, steps,
                              frame_seed(seed, i, seed_policy), sampler, c_I=c_I)

    if jobs <= 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, indices))


def guidance_grid(model: ModelSet, subject_image: np.ndarray, pose_window: PoseWindow,
                  s_I_list: Sequence[float], s_p_list: Sequence[float], steps: int = 100,
                  seed: int = 0, sampler: str = "pndm") -> tuple[np.ndarray, list[list[np.ndarray]]]:
    """Rows follow ``s_I_list``, columns ``s_p_list``; one shared seed for every cell."""
    if not s_I_list or not s_p_list:
        raise ValueError("weight lists must be non-empty")
    c_I = subject_context(model, subject_image)
    cells = [[generate_frame(model, subject_image, pose_window, GuidanceWeights(si, sp), steps, seed,
                             sampler, c_I=c_I) for sp in s_p_list] for si in s_I_list]
    return mosaic(cells, [f"sI={v:g}" for v in s_I_list], [f"sp={v:g}" for v in s_p_list]), cells


def mosaic(cells: list[list[np.ndarray]], row_labels: Sequence[str], col_labels: Sequence[str],
           margin: int = 14, label_w: int = 44) -> np.ndarray:
    """Tile [3,H,W] cells into an RGB uint8 image with labels burned in."""
    h, w = cells[0][0].shape[1:]
    rows, cols = len(cells), len(cells[0])
    canvas = Image.new("RGB", (label_w + cols * w, margin + rows * h), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for j, text in enumerate(col_labels):
        draw.text((label_w + j * w + 2, 1), text, fill=(0, 0, 0))
    for i, text in enumerate(row_labels):
        draw.text((2, margin + i * h + h // 2 - 5), text, fill=(0, 0, 0))
        for j in range(cols):
            canvas.paste(Image.fromarray(to_uint8(cells[i][j])), (label_w + j * w, margin + i * h))
    return np.asarray(canvas)
