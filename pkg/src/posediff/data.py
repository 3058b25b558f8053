"""Dataset layout, pose windows and training-pair sampling.

On disk::

    <root>/{train,test}/<video_id>/frames/%06d.png
    <root>/{train,test}/<video_id>/poses/%06d.pdtb      # [2, H, W] float32
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import BadShape, EmptyDataset, IndexOutOfRange
from .tensor_format import read_blob

WINDOW = 5
POSE_CHANNELS = 2


def load_png(path) -> np.ndarray:
    """PNG -> [3,H,W] float32 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    return np.round(arr.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


@dataclass
class PoseWindow:
    """Five pose maps (p[i-2] .. p[i+2]) stacked as [5, 2, H, W]."""

    frames: np.ndarray
    center_index: int

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[:2] != (WINDOW, POSE_CHANNELS):
            raise BadShape(f"pose window must be [5,2,H,W], got {self.frames.shape}")

    @property
    def center(self) -> np.ndarray:
        return self.frames[WINDOW // 2]


def build_pose_window(poses: Sequence[np.ndarray], i: int, mode: str = "five") -> PoseWindow:
    """Window of 5 poses centred on ``i`` with edge replication at video bounds.

    ``mode="center"`` repeats p[i] five times; it is the single-pose
    ablation expressed with the same 10-channel layout.
    """
    n = len(poses)
    if n < 1 or not 0 <= i < n:
        raise IndexOutOfRange(f"pose index {i} outside [0, {n})")
    if mode == "five":
        idx = [min(max(i + k, 0), n - 1) for k in range(-2, 3)]
    elif mode == "center":
        idx = [i] * WINDOW
    else:
        raise ValueError(f"unknown window mode {mode!r}")
    frames = np.stack([np.asarray(poses[j], dtype=np.float32) for j in idx])
    return PoseWindow(frames=frames, center_index=i)


@dataclass
class Video:
    video_id: str
    frames: np.ndarray  # [N, 3, H, W]
    poses: np.ndarray  # [N, 2, H, W]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SampleRecord:
    input_image: np.ndarray
    target_frame: np.ndarray
    pose_window: PoseWindow
    video_id: str
    frame_index: int
    input_index: int


class VideoDataset:
    """All videos of one split, held in memory."""

    def __init__(self, videos: list[Video], root: Optional[Path] = None, split: str = ""):
        self.videos = videos
        self.root = root
        self.split = split

    @classmethod
    def load(cls, root, split: str = "train") -> "VideoDataset":
        base = Path(root) / split
        if not base.is_dir():
            raise EmptyDataset(f"no split directory {base}")
        videos = []
        for vdir in sorted(p for p in base.iterdir() if p.is_dir()):
            frame_paths = sorted((vdir / "frames").glob("*.png"))
            if not frame_paths:
                continue
            frames = np.stack([load_png(p) for p in frame_paths])
            poses = np.stack(
                [read_blob(vdir / "poses" / (p.stem + ".pdtb")) for p in frame_paths]
            )
            videos.append(Video(vdir.name, frames, poses))
        return cls(videos, Path(root), split)

    def __len__(self) -> int:
        return len(self.videos)

    @property
    def num_frames(self) -> int:
        return sum(len(v) for v in self.videos)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.videos[0].frames.shape[1:])

    def video(self, video_id: str) -> Video:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(video_id)


def sample_indices(dataset: VideoDataset, rng: np.random.Generator) -> tuple[int, int, int]:
    """(video, input frame, target frame) drawn uniformly with replacement."""
    if len(dataset) == 0 or dataset.num_frames == 0:
        raise EmptyDataset("dataset has no frames")
    v = int(rng.integers(len(dataset.videos)))
    n = len(dataset.videos[v])
    return v, int(rng.integers(n)), int(rng.integers(n))


def sample_training_pair(dataset: VideoDataset, rng: np.random.Generator,
                         window_mode: str = "five") -> SampleRecord:
    v, src, tgt = sample_indices(dataset, rng)
    video = dataset.videos[v]
    return SampleRecord(
        input_image=video.frames[src],
        target_frame=video.frames[tgt],
        pose_window=build_pose_window(video.poses, tgt, window_mode),
        video_id=video.video_id,
        frame_index=tgt,
        input_index=src,
    )
