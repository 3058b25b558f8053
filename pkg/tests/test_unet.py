import pytest
import torch

from posediff.errors import ShapeMismatch, WidthMismatch
from posediff.models import ModelSet
from posediff.unet import DenoiserConfig, UNet, timestep_embedding, widen_input_layer


@pytest.fixture(scope="module")
def unet():
    torch.manual_seed(0)
    return UNet(DenoiserConfig()).eval()


def _inputs(b=2):
    return torch.randn(b, 4, 16, 16), torch.tensor([10, 900])[:b], torch.randn(b, 17, 64), torch.rand(b, 10, 16, 16)


def test_output_shape(unet):
    z, t, c_I, c_p = _inputs()
    assert unet(z, t, c_I, c_p).shape == z.shape


def test_pose_columns_start_at_zero(unet):
    assert unet.conv_in.in_channels == 14
    assert torch.count_nonzero(unet.pose_input_weight) == 0
    assert torch.count_nonzero(unet.conv_in.weight[:, :4]) > 0


def test_widening_twice_is_rejected(unet):
    with pytest.raises(WidthMismatch):
        widen_input_layer(unet.conv_in, 10, expected_in=4)


def test_widen_keeps_original_columns():
    conv = torch.nn.Conv2d(4, 8, 3, padding=1)
    wide = widen_input_layer(conv, 10, 4)
    x = torch.randn(1, 4, 8, 8)
    torch.testing.assert_close(wide(torch.cat([x, torch.randn(1, 10, 8, 8)], 1)), conv(x))


def test_fresh_model_ignores_pose_and_vae_tokens():
    torch.manual_seed(1)
    m = ModelSet(seed=1)
    images = torch.rand(2, 3, 64, 64)
    z, t = torch.randn(2, 4, 16, 16), torch.tensor([5, 700])
    with torch.no_grad():
        ref = m.eps(z, t, m.image_context(images, latents=torch.randn(2, 4, 16, 16)), torch.rand(2, 10, 16, 16))
        for _ in range(3):
            c_I = m.image_context(images, latents=10 * torch.randn(2, 4, 16, 16))
            out = m.eps(z, t, c_I, 5 * torch.randn(2, 10, 16, 16))
            assert (out - ref).abs().max().item() < 1e-6


def test_shape_errors(unet):
    z, t, c_I, c_p = _inputs()
    with pytest.raises(ShapeMismatch):
        unet(z, t, c_I, c_p[:, :6])
    with pytest.raises(ShapeMismatch):
        unet(z, t, c_I[..., :32], c_p)
    with pytest.raises(ShapeMismatch):
        unet(z[:, :3], t, c_I, c_p)


def test_timestep_embedding_distinct():
    e = timestep_embedding(torch.tensor([0, 1, 500, 1000]), 32)
    assert e.shape == (4, 32)
    assert torch.cdist(e, e).fill_diagonal_(1).min() > 0


def test_batch_rows_independent(unet):
    z, t, c_I, c_p = _inputs()
    with torch.no_grad():
        both = unet(z, t, c_I, c_p)
        first = unet(z[:1], t[:1], c_I[:1], c_p[:1])
    torch.testing.assert_close(both[:1], first, rtol=1e-5, atol=1e-5)
