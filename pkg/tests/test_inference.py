import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_model
from posediff.data import build_pose_window
from posediff.errors import EmptyPoseSequence, ShapeMismatch
from posediff.inference import (GuidanceWeights, GuidedDenoiser, dual_cfg, frame_seed, generate_frame,
                                generate_video, guidance_grid, subject_context)


def _branches(seed=0, shape=(2, 4, 3, 3)):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(shape, generator=g) for _ in range(3)]


def test_unit_weights_give_conditional_branch():
    uu, iu, ip = _branches()
    assert torch.equal(dual_cfg(uu, iu, ip, GuidanceWeights(1, 1)), ip)


def test_zero_weights_give_unconditional_branch():
    uu, iu, ip = _branches()
    assert torch.equal(dual_cfg(uu, iu, ip, GuidanceWeights(0, 0)), uu)


def test_image_weight_only():
    _, iu, ip = _branches()
    out = dual_cfg(torch.zeros_like(iu), iu, ip, GuidanceWeights(2, 0))
    assert torch.equal(out, 2 * iu)


@settings(max_examples=25, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 2**16))
def test_matches_scalar_oracle(s_i, s_p, seed):
    uu, iu, ip = _branches(seed, (3, 5))
    out = dual_cfg(uu, iu, ip, GuidanceWeights(s_i, s_p))
    for idx in np.ndindex(3, 5):
        u, a, b = float(uu[idx]), float(iu[idx]), float(ip[idx])
        ref = u + s_i * (a - u) + s_p * (b - a)
        assert abs(float(out[idx]) - ref) < 1e-6 * max(1.0, abs(ref))


def test_linear_in_each_weight():
    uu, iu, ip = _branches(3)
    f = lambda si, sp: dual_cfg(uu, iu, ip, GuidanceWeights(si, sp))
    torch.testing.assert_close(f(3, 5) - f(2, 5), f(1, 5) - f(0, 5), rtol=0, atol=1e-5)
    torch.testing.assert_close(f(3, 5) - f(3, 4), f(3, 1) - f(3, 0), rtol=0, atol=1e-5)


def test_weight_validation(caplog):
    with pytest.raises(ValueError):
        GuidanceWeights(float("nan"), 1.0)
    with caplog.at_level(logging.WARNING):
        GuidanceWeights(-1.0, 2.0)
    assert "negative" in caplog.text
    with pytest.raises(ShapeMismatch):
        dual_cfg(torch.zeros(2), torch.zeros(2), torch.zeros(3), GuidanceWeights())


def test_frame_seeds():
    assert frame_seed(7, 3, "fixed") == 7
    seeds = {frame_seed(7, i) for i in range(50)}
    assert len(seeds) == 50 and frame_seed(7, 3) == frame_seed(7, 3)
    with pytest.raises(ValueError):
        frame_seed(7, 0, "weird")


@pytest.fixture(scope="module")
def model():
    m = small_model(seed=2)
    # perturb the zero-initialised pieces so conditioning actually matters
    with torch.no_grad():
        m.unet.pose_input_weight.normal_(0, 0.2)
        m.adapter.proj_vae.weight.normal_(0, 0.2)
    return m


@pytest.fixture(scope="module")
def clip():
    rng = np.random.default_rng(0)
    image = rng.random((3, 32, 32)).astype(np.float32)
    poses = [rng.random((2, 32, 32)).astype(np.float32) for _ in range(4)]
    return image, poses


def test_three_branches_per_call(model, clip):
    image, poses = clip
    c_I = subject_context(model, image)
    c_p = torch.rand(1, 10, 8, 8)
    den = GuidedDenoiser(model, c_I, c_p, GuidanceWeights())
    den(torch.randn(1, 4, 8, 8), 500)
    den(torch.randn(1, 4, 8, 8), 400)
    assert den.evaluations == 6


def test_same_seed_same_frame(model, clip):
    image, poses = clip
    w = build_pose_window(poses, 1)
    a = generate_frame(model, image, w, steps=8, seed=3)
    b = generate_frame(model, image, w, steps=8, seed=3)
    assert a.shape == (3, 32, 32) and np.array_equal(a, b)
    assert not np.array_equal(a, generate_frame(model, image, w, steps=8, seed=4))


def test_zero_weights_ignore_conditioning(model, clip):
    image, poses = clip
    w0 = GuidanceWeights(0, 0)
    a = generate_frame(model, image, build_pose_window(poses, 0), w0, steps=6, seed=1)
    b = generate_frame(model, 1 - image, build_pose_window(poses, 3), w0, steps=6, seed=1)
    assert np.array_equal(a, b)
    c = generate_frame(model, 1 - image, build_pose_window(poses, 3), GuidanceWeights(1, 1), steps=6, seed=1)
    assert not np.array_equal(a, c)


def test_single_pose_video_equals_frame(model, clip):
    image, poses = clip
    vid = generate_video(model, image, poses[:1], steps=5, seed=9)
    frame = generate_frame(model, image, build_pose_window(poses[:1], 0), steps=5, seed=frame_seed(9, 0))
    assert len(vid) == 1 and np.array_equal(vid[0], frame)


def test_parallel_matches_sequential(model, clip):
    image, poses = clip
    seq = generate_video(model, image, poses, steps=5, seed=2, jobs=1)
    par = generate_video(model, image, poses, steps=5, seed=2, jobs=3)
    assert all(np.array_equal(a, b) for a, b in zip(seq, par))


def test_frame_subset_and_empty(model, clip):
    image, poses = clip
    full = generate_video(model, image, poses, steps=4, seed=0, sampler="ddim")
    part = generate_video(model, image, poses, steps=4, seed=0, sampler="ddim", frame_indices=[2])
    assert np.array_equal(full[2], part[0])
    with pytest.raises(EmptyPoseSequence):
        generate_video(model, image, [], steps=4)


def test_grid_reduction_and_labels(model, clip):
    image, poses = clip
    w = build_pose_window(poses, 1)
    mosaic, cells = guidance_grid(model, image, w, [2.0], [4.0], steps=5, seed=6)
    assert np.array_equal(cells[0][0], generate_frame(model, image, w, GuidanceWeights(2, 4), 5, 6))
    mosaic, cells = guidance_grid(model, image, w, [1, 3, 5], [1, 3, 5], steps=5, seed=6)
    assert mosaic.dtype == np.uint8 and mosaic.shape[2] == 3
    flat = [c for row in cells for c in row]
    assert len(flat) == 9
    assert all(not np.array_equal(flat[i], flat[j]) for i in range(9) for j in range(i + 1, 9))
