"""Procedural sprite-figure videos used as a desk-scale training corpus.

Every subject is a stick-figure body (head, striped torso, two arms, two
legs) with its own palette, stripe texture and motion. Frames are rendered
from a per-pixel part-label map, and the 2-channel pose maps are rendered
from the same labels, so the figure silhouette and pose channel 0 coincide
exactly unless ``pose_noise`` is set.
"""
from __future__ import annotations

import colorsys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor_format import write_blob

N_PARTS = 6  # head, torso, left arm, right arm, left leg, right leg
HEAD, TORSO, LARM, RARM, LLEG, RLEG = range(1, N_PARTS + 1)
BACKGROUND = np.array([0.08, 0.08, 0.10], dtype=np.float32)


@dataclass
class SyntheticConfig:
    """Keys accepted by the synthetic-data config file."""

    videos: int = 16
    test_videos: int = 4
    frames_per_video: int = 32
    image_size: int = 64
    seed: int = 0
    sprite_palette_size: int = 8
    # std (pixels) of simulated pose-estimation error added to pose maps only
    pose_noise: float = 0.0

    def validate(self) -> None:
        if self.videos < 1 or self.test_videos < 0:
            raise ConfigError("need videos >= 1 and test_videos >= 0")
        if self.frames_per_video < 1:
            raise ConfigError("frames_per_video must be >= 1")
        if self.image_size < 16 or self.image_size % 8:
            raise ConfigError("image_size must be a multiple of 8 and >= 16")
        if self.sprite_palette_size < 3:
            raise ConfigError("sprite_palette_size must be >= 3")
        if self.pose_noise < 0:
            raise ConfigError("pose_noise must be >= 0")


@dataclass
class Skeleton:
    cx: float
    cy: float
    # radians from straight down; positive swings outward for arms, forward for legs
    left_arm: float
    right_arm: float
    left_leg: float
    right_leg: float


@dataclass
class Subject:
    head: np.ndarray
    torso_a: np.ndarray
    torso_b: np.ndarray
    arms: np.ndarray
    legs: np.ndarray
    stripe_period: int
    stripe_dir: int  # 0 horizontal, 1 vertical, 2 diagonal
    motion: dict = field(default_factory=dict)


def make_palette(n: int) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb(i / n, 0.75, 0.95) for i in range(n)]
    return np.asarray(cols, dtype=np.float32)


def random_subject(rng: np.random.Generator, palette: np.ndarray) -> Subject:
    idx = rng.choice(len(palette), size=5, replace=len(palette) < 5)
    head, ta, tb, arms, legs = (palette[i] for i in idx)
    motion = {
        "x_amp": rng.uniform(0.08, 0.15),
        "x_phase": rng.uniform(0, 2 * np.pi),
        "cycles": rng.uniform(1.0, 2.0),
        "y_amp": rng.uniform(0.0, 0.03),
        "arm_base": rng.uniform(0.4, 0.8),
        "arm_swing": rng.uniform(0.2, 0.5),
        "leg_base": rng.uniform(0.1, 0.25),
        "leg_swing": rng.uniform(0.1, 0.25),
        "limb_phase": rng.uniform(0, 2 * np.pi),
    }
    return Subject(
        head=head,
        torso_a=ta,
        torso_b=tb,
        arms=arms,
        legs=legs,
        stripe_period=int(rng.choice([6, 8, 10])),
        stripe_dir=int(rng.integers(0, 3)),
        motion=motion,
    )


def skeleton_at(subject: Subject, frame: int, n_frames: int, size: int) -> Skeleton:
    m = subject.motion
    phase = 2 * np.pi * m["cycles"] * frame / max(n_frames, 1)
    swing = np.sin(phase * 2 + m["limb_phase"])
    return Skeleton(
        cx=size * (0.5 + m["x_amp"] * np.sin(phase + m["x_phase"])),
        cy=size * (0.45 + m["y_amp"] * np.sin(2 * phase)),
        left_arm=m["arm_base"] + m["arm_swing"] * swing,
        right_arm=m["arm_base"] - m["arm_swing"] * swing,
        left_leg=m["leg_base"] + m["leg_swing"] * swing,
        right_leg=m["leg_base"] - m["leg_swing"] * swing,
    )


def perturb(skel: Skeleton, sigma: float, size: int, rng: np.random.Generator) -> Skeleton:
    """Skeleton seen through a noisy pose estimator (``sigma`` in pixels)."""
    if sigma <= 0:
        return skel
    limb = 0.18 * size
    da = rng.normal(0.0, sigma / limb, size=4)
    dx, dy = rng.normal(0.0, sigma, size=2)
    return Skeleton(
        cx=skel.cx + dx,
        cy=skel.cy + dy,
        left_arm=skel.left_arm + da[0],
        right_arm=skel.right_arm + da[1],
        left_leg=skel.left_leg + da[2],
        right_leg=skel.right_leg + da[3],
    )


def _segment_dist(px, py, ax, ay, bx, by):
    vx, vy = bx - ax, by - ay
    t = ((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy + 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(px - (ax + t * vx), py - (ay + t * vy))


def torso_box(skel: Skeleton, size: int) -> tuple[float, float, float, float]:
    hw, hh = 0.09 * size, 0.13 * size
    return skel.cx - hw, skel.cy - hh, skel.cx + hw, skel.cy + hh


def render_labels(skel: Skeleton, size: int) -> np.ndarray:
    """Per-pixel part label (0 = background), later parts drawn on top."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    labels = np.zeros((size, size), dtype=np.uint8)
    x0, y0, x1, y1 = torso_box(skel, size)

    leg_len, leg_r = 0.2 * size, 0.035 * size
    for label, hip_x, ang, sign in (
        (LLEG, skel.cx - 0.05 * size, skel.left_leg, -1),
        (RLEG, skel.cx + 0.05 * size, skel.right_leg, 1),
    ):
        ex = hip_x + sign * leg_len * np.sin(ang)
        ey = y1 + leg_len * np.cos(ang)
        labels[_segment_dist(xs, ys, hip_x, y1, ex, ey) <= leg_r] = label

    labels[(xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)] = TORSO

    arm_len, arm_r = 0.17 * size, 0.03 * size
    sy = skel.cy - 0.10 * size
    for label, sx, ang, sign in (
        (LARM, x0, skel.left_arm, -1),
        (RARM, x1, skel.right_arm, 1),
    ):
        ex = sx + sign * arm_len * np.sin(ang)
        ey = sy + arm_len * np.cos(ang)
        labels[_segment_dist(xs, ys, sx, sy, ex, ey) <= arm_r] = label

    hr = 0.07 * size
    hx, hy = skel.cx, y0 - hr * 1.05
    labels[np.hypot(xs - hx, ys - hy) <= hr] = HEAD
    return labels


def render_frame(subject: Subject, skel: Skeleton, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns (image [3,H,W] float32 in [0,1], labels [H,W])."""
    labels = render_labels(skel, size)
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = BACKGROUND

    x0, y0, _, _ = torso_box(skel, size)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    u, v = xs - x0, ys - y0
    coord = (v, u, u + v)[subject.stripe_dir]
    stripe = (np.floor(coord / (subject.stripe_period / 2)) % 2).astype(bool)

    torso = labels == TORSO
    img[torso & stripe] = subject.torso_a
    img[torso & ~stripe] = subject.torso_b
    img[labels == HEAD] = subject.head
    img[(labels == LARM) | (labels == RARM)] = subject.arms
    img[(labels == LLEG) | (labels == RLEG)] = subject.legs
    return np.ascontiguousarray(img.transpose(2, 0, 1)), labels


def pose_map(labels: np.ndarray) -> np.ndarray:
    """[2,H,W] float32: channel 0 body mask, channel 1 part index / N_PARTS."""
    mask = (labels > 0).astype(np.float32)
    part = labels.astype(np.float32) / N_PARTS
    return np.stack([mask, part])


def mask_centroid(mask: np.ndarray) -> np.ndarray | None:
    """(x, y) centroid in pixel-centre coordinates, ``None`` for an empty mask."""
    w = np.asarray(mask, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return None
    ys, xs = np.mgrid[0 : w.shape[0], 0 : w.shape[1]] + 0.5
    return np.array([(xs * w).sum() / total, (ys * w).sum() / total])


def foreground_mask(image: np.ndarray, threshold: float = 0.25) -> np.ndarray:
    """Pixels of a [3,H,W] image that differ visibly from the background."""
    diff = np.abs(np.asarray(image, dtype=np.float32) - BACKGROUND[:, None, None])
    return diff.max(axis=0) > threshold


def sprite_centroid(image: np.ndarray, threshold: float = 0.25) -> np.ndarray | None:
    return mask_centroid(foreground_mask(image, threshold))


def render_video(subject: Subject, n_frames: int, size: int, pose_noise: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    frames, poses = [], []
    for i in range(n_frames):
        skel = skeleton_at(subject, i, n_frames, size)
        img, labels = render_frame(subject, skel, size)
        if pose_noise > 0:
            labels = render_labels(perturb(skel, pose_noise, size, rng), size)
        frames.append(img)
        poses.append(pose_map(labels))
    return np.stack(frames), np.stack(poses)


def make_synthetic_dataset(config: SyntheticConfig, out_dir) -> dict:
    """Render train and test videos into ``out_dir`` using the on-disk dataset layout."""
    from .data import save_png  # local import keeps data <-> synthetic acyclic

    config.validate()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot create {root}: {exc}") from exc

    palette = make_palette(config.sprite_palette_size)
    rng = np.random.default_rng(config.seed)
    summary = {"root": str(root), "config": asdict(config), "splits": {}}
    for split, count in (("train", config.videos), ("test", config.test_videos)):
        ids = []
        for v in range(count):
            subject = random_subject(rng, palette)
            frames, poses = render_video(
                subject, config.frames_per_video, config.image_size, config.pose_noise, rng
            )
            vid = f"{split}_{v:04d}"
            vdir = root / split / vid
            for i, (img, pose) in enumerate(zip(frames, poses)):
                save_png(vdir / "frames" / f"{i:06d}.png", img)
                write_blob(vdir / "poses" / f"{i:06d}.pdtb", pose)
            ids.append(vid)
        summary["splits"][split] = ids

    with open(root / "synthetic.cfg", "w") as fh:
        for key, value in asdict(config).items():
            fh.write(f"{key} = {value}\n")
    return summary
