"""Held-out evaluation of trained checkpoints on a synthetic test split."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import Video, VideoDataset
from .errors import CheckpointMissing, EmptyDataset
from .inference import GuidanceWeights, generate_video
from .metrics import (AblationReport, EvalReport, FrameScore, evaluate_ablations, held_out_indices, l1, psnr,
                      ssim, temporal_jitter)
from .models import ModelSet, load_checkpoint
from .synthetic import mask_centroid, sprite_centroid


@dataclass
class EvalSettings:
    weights: GuidanceWeights = GuidanceWeights()
    steps: int = 100
    seed: int = 0
    seed_policy: str = "derived"
    sampler: str = "pndm"
    input_index: int = 0
    max_videos: Optional[int] = None


def held_out_frames(model: ModelSet, video: Video, settings: EvalSettings,
                    subject_image: Optional[np.ndarray] = None) -> tuple[list[int], list[np.ndarray]]:
    """Generate every frame at least n/4 away from the input frame, in order."""
    idx = held_out_indices(len(video), settings.input_index)
    image = video.frames[settings.input_index] if subject_image is None else subject_image
    frames = generate_video(model, image, video.poses, settings.weights, settings.steps, settings.seed,
                            settings.seed_policy, sampler=settings.sampler, frame_indices=idx)
    return idx, frames


def centroid_errors(frames: Sequence[np.ndarray], video: Video, indices: Sequence[int]) -> np.ndarray:
    """Pixel distance between each output's sprite centroid and its driving pose centroid (inf if blank)."""
    out = []
    for f, i in zip(frames, indices):
        c, p = sprite_centroid(f), mask_centroid(video.poses[i][0])
        out.append(np.inf if c is None or p is None else float(np.hypot(*(c - p))))
    return np.array(out)


def score_video(frames: Sequence[np.ndarray], video: Video, indices: Sequence[int]) -> list[FrameScore]:
    return [FrameScore(i, l1(f, video.frames[i]), ssim(f, video.frames[i]), psnr(f, video.frames[i]))
            for f, i in zip(frames, indices)]


def merge_reports(parts: Sequence[tuple[list[FrameScore], float]], config: Optional[dict] = None) -> EvalReport:
    """Concatenate per-video rows; temporal jitter is averaged over videos."""
    rows = [r for p, _ in parts for r in p]
    jitter = float(np.mean([j for _, j in parts])) if parts else 0.0
    return EvalReport(per_frame=rows, temporal_jitter=jitter, config=dict(config or {}))


def evaluate_model(model: ModelSet, testset: VideoDataset, settings: EvalSettings = EvalSettings(),
                   config: Optional[dict] = None) -> EvalReport:
    """Base-model evaluation: each test video is animated from its own input frame."""
    videos = testset.videos[: settings.max_videos]
    if not videos:
        raise EmptyDataset("test split has no videos")
    parts = []
    for v in videos:
        idx, frames = held_out_frames(model, v, settings)
        parts.append((score_video(frames, v, idx), temporal_jitter(frames)))
    return merge_reports(parts, config)


def load_variants(checkpoints: Mapping[str, Sequence[str | Path]]) -> dict[str, list[ModelSet]]:
    out = {}
    for name, dirs in checkpoints.items():
        models = []
        for d in dirs:
            if not (Path(d) / "manifest.json").exists():
                raise CheckpointMissing(f"variant {name}: no checkpoint at {d}")
            models.append(load_checkpoint(d))
        out[name] = models
    return out


def evaluate_checkpoints(checkpoints: Mapping[str, Sequence[str | Path]], testset_root,
                         settings: EvalSettings = EvalSettings(), require_margin: bool = True) -> AblationReport:
    """Ablation harness: one report per (variant, checkpoint), then the ordering checks."""
    testset = VideoDataset.load(testset_root, "test")
    variants = load_variants(checkpoints)
    reports = {name: [evaluate_model(m, testset, settings, {"variant": name}) for m in models]
               for name, models in variants.items()}
    return evaluate_ablations(reports, require_margin)
