import filecmp
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from posediff.cli import main
from posediff.data import load_png
from posediff.metrics import EvalReport

SMALL = ["--set", "ae_steps=30", "--set", "ae_width=8", "--set", "base_channels=16", "--set", "d_ctx=32",
         "--set", "base_steps=6", "--set", "micro_batch=4", "--set", "grad_accum=1", "--set", "base_lr=1e-3"]
FAST_SUBJECT = ["--set", "subject_steps=3", "--set", "decoder_steps=4"]


def _tree(root):
    return sorted(str(p.relative_to(root)) for p in Path(root).rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-synthetic", "--out", str(root / "ds"), "--videos", "4", "--test-videos", "1",
                 "--frames", "8", "--image-size", "32", "--seed", "7"]) == 0
    assert main(["train", "--data", str(root / "ds"), "--out", str(root / "base"), *SMALL]) == 0
    return root


def test_make_synthetic_layout_and_determinism(tmp_path):
    args = ["make-synthetic", "--videos", "4", "--frames", "16", "--seed", "7", "--test-videos", "0"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    files = _tree(tmp_path / "a")
    assert len([f for f in files if f.endswith(".png")]) == 64
    assert len([f for f in files if f.endswith(".pdtb")]) == 64
    assert files == _tree(tmp_path / "b")
    _, bad, err = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not bad and not err


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["make-synthetic", "--videos", "2"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_key_exits_2(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_key = 1\n")
    assert main(["make-synthetic", "--out", str(tmp_path / "x"), "--config", str(cfg)]) == 2


def test_train_writes_checkpoint(workspace):
    man = json.loads((workspace / "base" / "manifest.json").read_text())
    assert man["meta"]["steps"] == {"autoencoder": 30, "base": 6}
    assert man["extra"]["run_config"]["base_steps"] == 6
    assert (workspace / "base" / "optimizer.json").exists()
    assert len((workspace / "base" / "train.log").read_text().splitlines()) == 6


def test_resume_continues_counter(workspace, tmp_path):
    import shutil
    ckpt = tmp_path / "resumed"
    shutil.copytree(workspace / "base", ckpt)
    assert main(["train", "--data", str(workspace / "ds"), "--out", str(ckpt), "--resume", *SMALL]) == 0
    man = json.loads((ckpt / "manifest.json").read_text())
    assert man["meta"]["steps"]["base"] == 12
    steps = [int(l.split(",")[0]) for l in (ckpt / "train.log").read_text().splitlines()]
    assert steps == list(range(1, 13))


def test_divergence_exits_3(workspace, tmp_path, capsys):
    rc = main(["train", "--data", str(workspace / "ds"), "--out", str(tmp_path / "nan"), *SMALL,
               "--set", "base_lr=1e30", "--set", "base_steps=20", "--set", "ae_steps=1"])
    assert rc == 3
    assert "diverged" in capsys.readouterr().err


def _subject(workspace):
    vdir = next((workspace / "ds" / "test").iterdir())
    return vdir, vdir / "frames" / "000000.png"


def test_finetune_defaults_echoed(workspace, tmp_path):
    vdir, image = _subject(workspace)
    out = tmp_path / "subj"
    assert main(["finetune", "--base", str(workspace / "base"), "--image", str(image), "--out", str(out),
                 *FAST_SUBJECT]) == 0
    extra = json.loads((out / "manifest.json").read_text())["extra"]
    assert extra["subject_unet"] == {"steps": 3, "lr": 1e-5}
    assert extra["subject_vae"] == {"steps": 4, "lr": 5e-5}


def test_finetune_reference_defaults_in_manifest(workspace, tmp_path, monkeypatch):
    import posediff.cli as cli
    seen = {}

    def fake(model, images, windows, unet_cfg, vae_cfg):
        seen.update(unet=(unet_cfg.steps, unet_cfg.lr), vae=(vae_cfg.steps, vae_cfg.lr))

    monkeypatch.setattr(cli, "finetune_subject", fake)
    _, image = _subject(workspace)
    assert main(["finetune", "--base", str(workspace / "base"), "--image", str(image),
                 "--out", str(tmp_path / "s")]) == 0
    assert seen == {"unet": (500, 1e-5), "vae": (1500, 5e-5)}
    extra = json.loads((tmp_path / "s" / "manifest.json").read_text())["extra"]
    assert extra["subject_unet"] == {"steps": 500, "lr": 1e-5}
    assert extra["subject_vae"] == {"steps": 1500, "lr": 5e-5}


def test_finetune_multiple_images_and_errors(workspace, tmp_path):
    vdir, _ = _subject(workspace)
    imgs = [str(vdir / "frames" / f"{i:06d}.png") for i in (0, 4)]
    args = ["finetune", "--base", str(workspace / "base"), "--out", str(tmp_path / "m"), *FAST_SUBJECT]
    assert main([*args, "--image", imgs[0], "--image", imgs[1]]) == 0
    assert main(["finetune", "--base", str(tmp_path / "nope"), "--image", imgs[0], "--out", str(tmp_path / "z")]) == 2
    stray = tmp_path / "stray.png"
    Image.new("RGB", (32, 32)).save(stray)
    assert main([*args, "--image", str(stray)]) == 2


@pytest.fixture(scope="module")
def subject_ckpt(workspace):
    _, image = _subject(workspace)
    out = workspace / "subject"
    assert main(["finetune", "--base", str(workspace / "base"), "--image", str(image), "--out", str(out),
                 *FAST_SUBJECT]) == 0
    return out


def test_animate_from_pose_dir(workspace, subject_ckpt, tmp_path):
    vdir, image = _subject(workspace)
    out = tmp_path / "anim"
    assert main(["animate", "--ckpt", str(subject_ckpt), "--image", str(image), "--poses", str(vdir / "poses"),
                 "--out", str(out), "--s-image", "3", "--s-pose", "5", "--steps", "6", "--seed", "1"]) == 0
    frames = sorted(out.glob("*.png"))
    assert [f.name for f in frames] == [f"{i:06d}.png" for i in range(8)]
    manifest = (out / "manifest.txt").read_text()
    assert "weights: s_I=3.0 s_p=5.0" in manifest and "steps = 6" in manifest and "seed = 1" in manifest


def test_animate_is_deterministic_and_driver_works(workspace, subject_ckpt, tmp_path):
    _, image = _subject(workspace)
    driver = next((workspace / "ds" / "train").iterdir())
    runs = []
    for k in range(2):
        out = tmp_path / f"d{k}"
        assert main(["animate", "--ckpt", str(subject_ckpt), "--image", str(image), "--driver", str(driver),
                     "--out", str(out), "--steps", "5", "--jobs", str(k + 1)]) == 0
        runs.append([load_png(p) for p in sorted(out.glob("*.png"))])
    assert len(runs[0]) == 8 and all(np.array_equal(a, b) for a, b in zip(*runs))


def test_animate_empty_pose_dir(workspace, subject_ckpt, tmp_path):
    _, image = _subject(workspace)
    (tmp_path / "empty").mkdir()
    assert main(["animate", "--ckpt", str(subject_ckpt), "--image", str(image), "--poses", str(tmp_path / "empty"),
                 "--out", str(tmp_path / "o")]) == 2


def test_grid(workspace, subject_ckpt, tmp_path):
    vdir, image = _subject(workspace)
    base = ["grid", "--ckpt", str(subject_ckpt), "--image", str(image), "--poses", str(vdir / "poses"), "--steps", "4"]
    assert main([*base, "--out", str(tmp_path / "g.png")]) == 0
    w, h = Image.open(tmp_path / "g.png").size
    assert w > 3 * 32 and h > 3 * 32
    assert main([*base, "--s-image-list", "1", "--s-pose-list", "1", "--out", str(tmp_path / "one.png")]) == 0
    assert main([*base, "--s-image-list", "1,x", "--out", str(tmp_path / "bad.png")]) == 2


def test_evaluate_generated_against_reference(workspace, subject_ckpt, tmp_path):
    vdir, image = _subject(workspace)
    gen = tmp_path / "gen"
    main(["animate", "--ckpt", str(subject_ckpt), "--image", str(image), "--poses", str(vdir / "poses"),
          "--out", str(gen), "--steps", "4"])
    report_path = tmp_path / "r.txt"
    assert main(["evaluate", "--generated", str(gen), "--reference", str(vdir), "--out", str(report_path)]) == 0
    rep = EvalReport.from_text(report_path.read_text())
    assert len(rep.per_frame) == 8
    assert abs(rep.aggregate["l1"] - np.mean([r.l1 for r in rep.per_frame])) < 1e-12
    assert main(["evaluate", "--generated", str(gen), "--reference", str(tmp_path / "none")]) == 2


def test_evaluate_ablation_exit_codes(tmp_path):
    def write(name, l1_value, jitter):
        p = tmp_path / name
        p.write_text(f"frame_index,l1,ssim,psnr\n0,{l1_value},0.5,20\n[aggregate]\ntemporal_jitter={jitter}\n")
        return str(p)

    full = ",".join(write(f"f{i}", 0.10 + 0.001 * i, 0.02) for i in range(3))
    clip = ",".join(write(f"c{i}", 0.20 + 0.001 * i, 0.02) for i in range(3))
    worse = ",".join(write(f"w{i}", 0.05 + 0.001 * i, 0.02) for i in range(3))
    assert main(["evaluate", "--ablation", f"full={full}", "--ablation", f"clip_only={clip}"]) == 0
    assert main(["evaluate", "--ablation", f"full={full}", "--ablation", f"clip_only={worse}"]) == 1
    assert main(["evaluate", "--ablation", f"full={full}", "--ablation", "clip_only=/no/such"]) == 2


def test_evaluate_checkpoints(workspace, tmp_path):
    base = str(workspace / "base")
    args = ["evaluate", "--ckpt", f"full={base}", "--ckpt", f"clip_only={base}", "--steps", "4", "--no-margin"]
    assert main([*args, "--testset", str(workspace / "ds"), "--out", str(tmp_path / "abl.txt")]) == 0
    lines = (tmp_path / "abl.txt").read_text().splitlines()
    full, clip = (l.split(",")[1:] for l in lines[1:3])
    assert full == clip
    assert main([*args, "--testset", str(tmp_path / "none")]) == 2
    assert main(["evaluate", "--ckpt", f"full={tmp_path / 'missing'}", "--testset", str(workspace / "ds")]) == 2


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("POSEDIFF_SEED", "7")
    assert main(["make-synthetic", "--out", str(tmp_path / "env"), "--videos", "1", "--test-videos", "0",
                 "--frames", "2"]) == 0
    cfg = (tmp_path / "env" / "synthetic.cfg").read_text()
    assert "seed = 7" in cfg


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("make-synthetic", "train", "finetune", "animate", "grid", "evaluate"):
        assert cmd in out
