"""Animate a still image with a pose- and image-conditioned latent diffusion model."""
from .data import PoseWindow, VideoDataset, build_pose_window
from .diffusion import DiffusionSchedule, linear_schedule
from .inference import GuidanceWeights, dual_cfg, generate_frame, generate_video
from .models import ModelConfig, ModelSet, load_checkpoint, save_checkpoint
from .training import TrainConfig, finetune_subject, train_base

__version__ = "0.1.0"

__all__ = [
    "DiffusionSchedule", "GuidanceWeights", "ModelConfig", "ModelSet", "PoseWindow", "TrainConfig",
    "VideoDataset", "build_pose_window", "dual_cfg", "finetune_subject", "generate_frame",
    "generate_video", "linear_schedule", "load_checkpoint", "save_checkpoint", "train_base",
]
