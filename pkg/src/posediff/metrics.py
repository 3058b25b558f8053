"""Image and video metrics, evaluation reports and the ablation harness."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy.signal import convolve2d

from .errors import ShapeMismatch, TooSmall

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class PerceptualMetric(Protocol):
    """Plug-in point for metrics that need pretrained networks (none shipped)."""

    name: str

    def __call__(self, a: np.ndarray, b: np.ndarray) -> float: ...


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.abs(a - b).mean())


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean SSIM over all valid window positions, averaged over channels.

    Accepts [H,W] or [C,H,W].
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise TooSmall(f"image {a.shape[-2:]} smaller than SSIM window {window}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    k = gaussian_window(window, sigma)[::-1, ::-1]

    def filt(x):
        return convolve2d(x, k, mode="valid")

    vals = []
    for x, y in zip(a, b):
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


def temporal_jitter(frames: Sequence[np.ndarray]) -> float:
    """Mean L1 between consecutive frames (0 for fewer than two frames)."""
    if len(frames) < 2:
        return 0.0
    return float(np.mean([l1(frames[i + 1], frames[i]) for i in range(len(frames) - 1)]))


def temporal_smooth(frames: Sequence[np.ndarray], radius: int = 1) -> list[np.ndarray]:
    """Box-filter frames over time (evaluation-only transform)."""
    arr = np.stack(frames)
    out = []
    for i in range(len(arr)):
        lo, hi = max(0, i - radius), min(len(arr), i + radius + 1)
        out.append(arr[lo:hi].mean(axis=0))
    return out


@dataclass
class FrameScore:
    frame_index: int
    l1: float
    ssim: float
    psnr: float


@dataclass
class EvalReport:
    per_frame: list = field(default_factory=list)
    temporal_jitter: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict:
        if not self.per_frame:
            return {"l1": math.nan, "ssim": math.nan, "psnr": math.nan}
        ps = [f.psnr for f in self.per_frame]
        return {
            "l1": float(np.mean([f.l1 for f in self.per_frame])),
            "ssim": float(np.mean([f.ssim for f in self.per_frame])),
            "psnr": math.inf if any(math.isinf(p) for p in ps) else float(np.mean(ps)),
        }

    def to_text(self) -> str:
        lines = [f"# config {k}={v}" for k, v in sorted(self.config.items())]
        lines.append("frame_index,l1,ssim,psnr")
        lines += [f"{f.frame_index},{f.l1:.8g},{f.ssim:.8g},{f.psnr:.8g}" for f in self.per_frame]
        agg = self.aggregate
        lines += ["[aggregate]", f"l1={agg['l1']:.8g}", f"ssim={agg['ssim']:.8g}",
                  f"psnr={agg['psnr']:.8g}", f"temporal_jitter={self.temporal_jitter:.8g}",
                  f"frames={len(self.per_frame)}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        report = cls()
        section = "rows"
        for line in text.splitlines():
            if not line or line.startswith("frame_index"):
                continue
            if line.startswith("# config "):
                k, _, v = line[len("# config "):].partition("=")
                report.config[k] = v
            elif line == "[aggregate]":
                section = "agg"
            elif section == "rows":
                i, a, s, p = line.split(",")
                report.per_frame.append(FrameScore(int(i), float(a), float(s), float(p)))
            elif line.startswith("temporal_jitter="):
                report.temporal_jitter = float(line.split("=", 1)[1])
        return report


def evaluate_frames(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray],
                    frame_indices: Optional[Sequence[int]] = None, config: Optional[dict] = None) -> EvalReport:
    if len(generated) != len(reference):
        raise ShapeMismatch(f"{len(generated)} generated vs {len(reference)} reference frames")
    idx = list(range(len(generated))) if frame_indices is None else list(frame_indices)
    rows = [FrameScore(i, l1(g, r), ssim(g, r), psnr(g, r)) for i, g, r in zip(idx, generated, reference)]
    return EvalReport(per_frame=rows, temporal_jitter=temporal_jitter(generated), config=dict(config or {}))


def held_out_indices(n_frames: int, input_index: int, min_gap: Optional[int] = None) -> list[int]:
    """Frames at least ``min_gap`` (default n/4) away from the input frame."""
    gap = max(1, n_frames // 4) if min_gap is None else min_gap
    return [i for i in range(n_frames) if abs(i - input_index) >= gap]


ABLATION_VARIANTS = ("full", "clip_only", "no_vae_ft", "one_pose")


@dataclass
class AblationReport:
    reports: dict  # variant -> list[EvalReport] (one per seed / subject group)
    checks: dict = field(default_factory=dict)

    def summary(self, variant: str) -> dict:
        rs = self.reports[variant]
        l1s = [r.aggregate["l1"] for r in rs]
        ssims = [r.aggregate["ssim"] for r in rs]
        jit = [r.temporal_jitter for r in rs]
        ddof = 1 if len(rs) > 1 else 0  # sample std, as in the margin check
        return {"l1_mean": float(np.mean(l1s)), "l1_std": float(np.std(l1s, ddof=ddof)),
                "ssim_mean": float(np.mean(ssims)), "ssim_std": float(np.std(ssims, ddof=ddof)),
                "jitter_mean": float(np.mean(jit)), "jitter_std": float(np.std(jit, ddof=ddof)), "n": len(rs)}

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def to_text(self) -> str:
        lines = ["variant,l1_mean,l1_std,ssim_mean,ssim_std,jitter_mean,jitter_std,n"]
        for v in self.reports:
            s = self.summary(v)
            lines.append(f"{v},{s['l1_mean']:.6g},{s['l1_std']:.3g},{s['ssim_mean']:.6g},{s['ssim_std']:.3g},"
                         f"{s['jitter_mean']:.6g},{s['jitter_std']:.3g},{s['n']}")
        lines.append("[checks]")
        lines += [f"{k}={'PASS' if v else 'FAIL'}" for k, v in self.checks.items()]
        return "\n".join(lines) + "\n"


def ordering_checks(reports: dict, require_margin: bool = True) -> dict:
    """Direction checks: full beats clip_only on L1, one_pose jitters at least as much as full.

    With ``require_margin`` each mean gap must exceed the larger of the two
    variants' across-seed standard deviations (ddof=1).
    """
    checks = {}

    def paired(metric, better, worse):
        a = np.array([metric(r) for r in reports[better]])
        b = np.array([metric(r) for r in reports[worse]])
        gap = float(b.mean() - a.mean())
        if not require_margin or min(len(a), len(b)) < 2:
            return gap >= 0
        return gap > max(float(a.std(ddof=1)), float(b.std(ddof=1)))

    if "full" in reports and "clip_only" in reports:
        checks["l1_full_le_clip_only"] = paired(lambda r: r.aggregate["l1"], "full", "clip_only")
    if "full" in reports and "one_pose" in reports:
        checks["jitter_one_pose_ge_full"] = paired(lambda r: r.temporal_jitter, "full", "one_pose")
    return checks


def evaluate_ablations(reports: dict, require_margin: bool = True) -> AblationReport:
    """Collect per-variant reports and run the ordering checks.

    ``reports`` maps each variant name to a list of :class:`EvalReport`
    (one per seed), all computed on the same held-out frames.
    """
    missing = [v for v in ("full",) if v not in reports]
    if missing:
        raise KeyError(f"missing ablation variants: {missing}")
    return AblationReport(reports=reports, checks=ordering_checks(reports, require_margin))
