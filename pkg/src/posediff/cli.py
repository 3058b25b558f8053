"""``posediff`` command line.

Exit codes: 0 ok, 1 ablation ordering violated, 2 usage/config error,
3 training diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import config as cfgmod
from .autoencoder import AutoencoderConfig, AutoencoderTrainConfig, train_autoencoder
from .conditioning import ConditioningConfig
from .data import VideoDataset, build_pose_window, load_png, save_png
from .evaluation import EvalSettings, evaluate_checkpoints
from .errors import (CheckpointMissing, ConfigError, Divergence, EmptyDataset, EmptyPoseSequence,
                     MissingPose, PoseDiffError)
from .inference import GuidanceWeights, frame_seed, generate_video, guidance_grid
from .metrics import EvalReport, evaluate_ablations, evaluate_frames
from .models import ModelConfig, ModelSet, load_checkpoint, read_manifest, save_checkpoint
from .synthetic import SyntheticConfig, make_synthetic_dataset
from .tensor_format import read_blob
from .training import (TrainConfig, load_optimizer_state, save_optimizer, train_base, finetune_subject)
from .unet import DenoiserConfig

log = logging.getLogger("posediff")

EXIT_OK, EXIT_ORDER, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--profile", default="reference", choices=sorted(cfgmod.PROFILES),
                   help="preset below the config file (default: reference)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    p.add_argument("--seed", type=int)


def _resolve(args, **flags) -> dict:
    overrides = dict(flags)
    overrides["seed"] = args.seed
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    return cfgmod.resolve(args.config, overrides, args.profile)


def _write_manifest_txt(out_dir: Path, cfg: dict, extra: dict) -> None:
    with open(out_dir / "manifest.txt", "w") as fh:
        for k, v in extra.items():
            fh.write(f"{k}: {v}\n")
        fh.write("[config]\n")
        fh.write(cfgmod.dump(cfg))


def model_config_from(cfg: dict) -> ModelConfig:
    levels = int(round(np.log2(cfg["downsample"])))
    ae = AutoencoderConfig(latent_channels=cfg["latent_channels"], downsample=cfg["downsample"],
                           channels=tuple(cfg["ae_width"] * 2 ** i for i in range(levels)))
    den = DenoiserConfig(latent_channels=cfg["latent_channels"], base_channels=cfg["base_channels"],
                         d_ctx=cfg["d_ctx"])
    hw = (cfg["image_size"] // cfg["downsample"],) * 2
    cond = ConditioningConfig(embedder=cfg["embedder"], latent_channels=cfg["latent_channels"],
                              latent_hw=hw, d_ctx=cfg["d_ctx"], use_vae=cfg["use_vae"])
    return ModelConfig(image_size=cfg["image_size"], autoencoder=ae, denoiser=den, conditioning=cond,
                       T=cfg["T"], beta_start=cfg["beta_start"], beta_end=cfg["beta_end"],
                       window_mode=cfg["window_mode"])


def base_train_config(cfg: dict, log_path: Optional[str] = None) -> TrainConfig:
    return TrainConfig(phase="base", lr=cfg["base_lr"], steps=cfg["base_steps"], epochs=cfg["base_epochs"],
                       micro_batch=cfg["micro_batch"], grad_accum=cfg["grad_accum"],
                       dropout_enabled=cfg["dropout"], augment_enabled=False, seed=cfg["seed"],
                       log_path=log_path)


def subject_train_configs(cfg: dict, log_path: Optional[str] = None) -> tuple[TrainConfig, TrainConfig]:
    unet = TrainConfig(phase="subject_unet", lr=cfg["subject_lr"], steps=cfg["subject_steps"],
                       micro_batch=cfg["subject_batch"], grad_accum=1, dropout_enabled=False,
                       augment_enabled=cfg["augment"], crop_scale=(cfg["crop_min"], 1.0),
                       seed=cfg["seed"], log_path=log_path)
    vae = TrainConfig(phase="subject_vae", lr=cfg["decoder_lr"], steps=cfg["decoder_steps"], micro_batch=1,
                      grad_accum=1, dropout_enabled=False, augment_enabled=False, seed=cfg["seed"],
                      log_path=log_path)
    return unet, vae


# -- subcommands -------------------------------------------------------------

def cmd_make_synthetic(args) -> int:
    cfg = _resolve(args, videos=args.videos, test_videos=args.test_videos, frames_per_video=args.frames,
                   image_size=args.image_size, sprite_palette_size=args.palette, pose_noise=args.pose_noise)
    syn = SyntheticConfig(videos=cfg["videos"], test_videos=cfg["test_videos"],
                          frames_per_video=cfg["frames_per_video"], image_size=cfg["image_size"],
                          seed=cfg["seed"], sprite_palette_size=cfg["sprite_palette_size"],
                          pose_noise=cfg["pose_noise"])
    summary = make_synthetic_dataset(syn, args.out)
    n_train = len(summary["splits"]["train"])
    n_test = len(summary["splits"]["test"])
    print(f"wrote {n_train} train and {n_test} test videos to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args, base_steps=args.steps)
    out = Path(args.out)
    data = VideoDataset.load(args.data, "train")
    if len(data) == 0:
        raise EmptyDataset(f"no training videos under {args.data}")
    cfg["image_size"] = int(data.image_shape[-1])
    opt_state, start = None, 0
    if args.resume:
        model = load_checkpoint(out)
        opt_state = load_optimizer_state(out)
        start = int(model.meta.get("steps", {}).get("base", 0))
    else:
        model = ModelSet(model_config_from(cfg), seed=cfg["seed"])
        frames = np.concatenate([v.frames for v in data.videos])
        ae_cfg = AutoencoderTrainConfig(steps=cfg["ae_steps"], batch_size=cfg["ae_batch"], lr=cfg["ae_lr"],
                                        seed=cfg["seed"])
        _, ae_res = train_autoencoder(frames, ae_cfg, ae=model.autoencoder)
        log.info("autoencoder recon L1 %.4f -> %.4f", ae_res.initial_l1, ae_res.final_l1)
        model.meta.setdefault("steps", {})["autoencoder"] = cfg["ae_steps"]
    out.mkdir(parents=True, exist_ok=True)
    if not args.resume:
        (out / "train.log").unlink(missing_ok=True)
    tcfg = base_train_config(cfg, str(out / "train.log"))
    result, opt = train_base(model, data, tcfg, optimizer_state=opt_state, start_step=start)
    model.meta["seed"] = cfg["seed"]
    save_checkpoint(model, out, extra={"run_config": cfg, "command": "train"})
    save_optimizer(opt, out)
    print(f"base checkpoint at {out} (step {result.steps}, final loss {result.losses[-1]:.4f})")
    return EXIT_OK


def _pose_window_for(image_path: Path, pose_path: Optional[str], mode: str):
    """Window for a subject image: explicit pose file, or the dataset layout next to the frame."""
    if pose_path:
        return build_pose_window([read_blob(pose_path)], 0, mode)
    pose_dir = image_path.parent.parent / "poses"
    if not (pose_dir / (image_path.stem + ".pdtb")).exists():
        raise MissingPose(f"no pose for {image_path}; pass --pose")
    files = sorted(pose_dir.glob("*.pdtb"))
    names = [p.stem for p in files]
    poses = [read_blob(p) for p in files]
    return build_pose_window(poses, names.index(image_path.stem), mode)


def cmd_finetune(args) -> int:
    cfg = _resolve(args)
    model = load_checkpoint(args.base)
    images = [Path(p) for p in args.image]
    poses = args.pose or []
    if poses and len(poses) != len(images):
        raise UsageError("give one --pose per --image, or none")
    windows = [_pose_window_for(p, poses[i] if poses else None, model.cfg.window_mode)
               for i, p in enumerate(images)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    unet_cfg, vae_cfg = subject_train_configs(cfg, str(out / "train.log"))
    finetune_subject(model, [load_png(p) for p in images], windows, unet_cfg, vae_cfg)
    save_checkpoint(model, out, extra={"run_config": cfg, "command": "finetune",
                                       "base": str(args.base), "images": [str(p) for p in images],
                                       "subject_unet": {"steps": unet_cfg.steps, "lr": unet_cfg.lr},
                                       "subject_vae": {"steps": vae_cfg.steps, "lr": vae_cfg.lr}})
    print(f"subject checkpoint at {out}: unet {unet_cfg.steps} steps @ {unet_cfg.lr:g}, "
          f"decoder {vae_cfg.steps} steps @ {vae_cfg.lr:g}")
    return EXIT_OK


def _pose_sequence(args) -> list[np.ndarray]:
    src = Path(args.driver) / "poses" if args.driver else Path(args.poses)
    if not src.is_dir():
        raise UsageError(f"pose directory {src} does not exist")
    files = sorted(src.glob("*.pdtb"))
    if not files:
        raise EmptyPoseSequence(f"no .pdtb poses in {src}")
    return [read_blob(p) for p in files]


def cmd_animate(args) -> int:
    cfg = _resolve(args, s_image=args.s_image, s_pose=args.s_pose, steps=args.steps, jobs=args.jobs,
                   seed_policy=args.seed_policy, sampler=args.sampler)
    model = load_checkpoint(args.ckpt)
    poses = _pose_sequence(args)
    w = GuidanceWeights(cfg["s_image"], cfg["s_pose"])
    frames = generate_video(model, load_png(args.image), poses, w, cfg["steps"], cfg["seed"],
                            cfg["seed_policy"], cfg["jobs"], cfg["sampler"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        save_png(out / f"{i:06d}.png", f)
    seeds = [frame_seed(cfg["seed"], i, cfg["seed_policy"]) for i in range(len(frames))]
    _write_manifest_txt(out, cfg, {
        "checkpoint": Path(args.ckpt).resolve(),
        "checkpoint_checksums": json.dumps(read_manifest(args.ckpt)["checksums"], sort_keys=True),
        "image": args.image,
        "poses": args.driver or args.poses,
        "frames": len(frames),
        "weights": f"s_I={w.s_I} s_p={w.s_p}",
        "steps": cfg["steps"],
        "seeds": ",".join(map(str, seeds)),
    })
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"not a comma-separated number list: {text!r}") from exc
    if not vals:
        raise UsageError("empty weight list")
    return vals


def cmd_grid(args) -> int:
    s_I, s_p = _float_list(args.s_image_list), _float_list(args.s_pose_list)
    cfg = _resolve(args, steps=args.steps)
    model = load_checkpoint(args.ckpt)
    poses = _pose_sequence(args)
    window = build_pose_window(poses, args.frame, model.cfg.window_mode)
    image, _ = guidance_grid(model, load_png(args.image), window, s_I, s_p, cfg["steps"], cfg["seed"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(args.out)
    print(f"wrote {len(s_I)}x{len(s_p)} grid to {args.out}")
    return EXIT_OK


def _variant_args(items: Sequence[str], flag: str) -> dict[str, list[str]]:
    out = {}
    for item in items:
        name, sep, paths = item.partition("=")
        if not sep or not paths:
            raise UsageError(f"{flag} expects VARIANT=path1,path2,..., got {item!r}")
        out[name] = [p for p in paths.split(",") if p]
    return out


def cmd_evaluate(args) -> int:
    if args.ablation or args.ckpt:
        if args.ckpt:
            if not args.testset or not (Path(args.testset) / "test").is_dir():
                raise UsageError(f"missing test set {args.testset!r}")
            settings = EvalSettings(GuidanceWeights(args.s_image, args.s_pose), args.steps, args.seed,
                                    seed_policy=args.seed_policy, max_videos=args.max_videos)
            result = evaluate_checkpoints(_variant_args(args.ckpt, "--ckpt"), args.testset, settings,
                                          require_margin=not args.no_margin)
        else:
            reports = {}
            for name, paths in _variant_args(args.ablation, "--ablation").items():
                for p in paths:
                    if not Path(p).exists():
                        raise UsageError(f"missing report {p}")
                reports[name] = [EvalReport.from_text(Path(p).read_text()) for p in paths]
            result = evaluate_ablations(reports, require_margin=not args.no_margin)
        text = result.to_text()
        print(text, end="")
        if args.out:
            Path(args.out).write_text(text)
        return EXIT_OK if result.ok else EXIT_ORDER

    if not args.generated or not args.reference:
        raise UsageError("evaluate needs --generated and --reference (or --ablation)")
    gen_dir, ref_dir = Path(args.generated), Path(args.reference)
    ref_frames = ref_dir / "frames" if (ref_dir / "frames").is_dir() else ref_dir
    if not ref_frames.is_dir() or not gen_dir.is_dir():
        raise UsageError("missing generated or reference directory")
    names = sorted(p.name for p in gen_dir.glob("*.png"))
    pairs = [(gen_dir / n, ref_frames / n) for n in names if (ref_frames / n).exists()]
    if not pairs:
        raise UsageError("no matching frames between generated and reference")
    gen = [load_png(a) for a, _ in pairs]
    ref = [load_png(b) for _, b in pairs]
    idx = [int(a.stem) for a, _ in pairs]
    report = evaluate_frames(gen, ref, idx, config={"generated": str(gen_dir), "reference": str(ref_dir)})
    text = report.to_text()
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posediff", description="Pose- and image-conditioned latent diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="render a synthetic sprite-video dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset root")
    p.add_argument("--videos", type=int, help="training videos")
    p.add_argument("--test-videos", type=int)
    p.add_argument("--frames", type=int, help="frames per video")
    p.add_argument("--image-size", type=int)
    p.add_argument("--palette", type=int, help="sprite palette size")
    p.add_argument("--pose-noise", type=float, help="pose-map noise std in pixels")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="train the autoencoder, then the base model (phase 1)")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--steps", type=int, help="base optimizer steps (overrides epochs)")
    p.add_argument("--resume", action="store_true", help="continue base training from --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="subject-specific finetuning (phase 2)")
    _add_common(p)
    p.add_argument("--base", required=True, help="base checkpoint directory")
    p.add_argument("--image", required=True, action="append", help="subject image (repeatable)")
    p.add_argument("--pose", action="append", help="pose file per --image (else inferred from layout)")
    p.add_argument("--out", required=True, help="subject checkpoint directory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("animate", help="generate a video from a subject checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="subject image")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--poses", help="directory of .pdtb driving poses")
    src.add_argument("--driver", help="video directory whose poses/ drive the animation")
    p.add_argument("--out", required=True, help="output frame directory")
    p.add_argument("--s-image", type=float)
    p.add_argument("--s-pose", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--sampler", choices=("pndm", "ddim", "ddpm"))
    p.add_argument("--seed-policy", choices=("derived", "fixed"))
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("grid", help="guidance-weight sweep mosaic")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--poses")
    src.add_argument("--driver")
    p.add_argument("--frame", type=int, default=0, help="pose index for the window centre")
    p.add_argument("--s-image-list", default="1,3,5")
    p.add_argument("--s-pose-list", default="1,3,5")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True, help="mosaic PNG path")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("evaluate", help="score generated frames or check ablation ordering")
    p.add_argument("--generated", help="directory of generated %%06d.png frames")
    p.add_argument("--reference", help="ground-truth video directory (or its frames/)")
    p.add_argument("--ablation", action="append", help="VARIANT=report1,report2,... (repeatable)")
    p.add_argument("--ckpt", action="append", help="VARIANT=ckpt1,ckpt2,... evaluated on --testset (repeatable)")
    p.add_argument("--testset", help="dataset root whose test/ split is animated")
    p.add_argument("--s-image", type=float, default=3.0)
    p.add_argument("--s-pose", type=float, default=5.0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seed-policy", choices=("derived", "fixed"), default="fixed",
                   help="per-frame noise seeds for --ckpt runs (fixed isolates conditioning-driven jitter)")
    p.add_argument("--max-videos", type=int)
    p.add_argument("--no-margin", action="store_true", help="only check direction, not the seed-std margin")
    p.add_argument("--out", help="write the report here too")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointMissing, EmptyDataset, EmptyPoseSequence, MissingPose) as exc:
        parser.print_usage(sys.stderr)
        print(f"posediff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Divergence as exc:
        print(f"posediff: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except PoseDiffError as exc:
        print(f"posediff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
