import sys

import numpy as np
import pytest
import torch

from posediff.synthetic import SyntheticConfig, make_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 train + 1 test video, 8 frames of 32x32."""
    root = tmp_path_factory.mktemp("ds")
    make_synthetic_dataset(SyntheticConfig(videos=4, test_videos=1, frames_per_video=8, image_size=32, seed=3), root)
    return root


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def small_model(seed=0, **overrides):
    """32x32 images, 8x8 latents: fast enough for unit tests."""
    from posediff.autoencoder import AutoencoderConfig
    from posediff.models import ModelConfig, ModelSet
    from posediff.unet import DenoiserConfig

    kw = dict(image_size=32, autoencoder=AutoencoderConfig(channels=(8, 16)),
              denoiser=DenoiserConfig(base_channels=16, d_ctx=32, time_embed_dim=64))
    kw.update(overrides)
    return ModelSet(ModelConfig(**kw), seed=seed)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
