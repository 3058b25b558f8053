import numpy as np
import pytest
import torch

from posediff.autoencoder import (Autoencoder, AutoencoderConfig, AutoencoderTrainConfig, finetune_decoder,
                                  param_checksum, recon_l1, train_autoencoder)
from posediff.data import VideoDataset
from posediff.errors import BadShape, EmptyDataset

SMALL = AutoencoderConfig(channels=(8, 16))


def test_latent_shape_and_determinism():
    ae = Autoencoder().eval()
    x = torch.rand(1, 3, 64, 64)
    z = ae.encode(torch.cat([x, x]))
    assert z.shape == (2, 4, 16, 16) and ae.latent_shape(64, 64) == (4, 16, 16)
    assert torch.equal(z[0], z[1])


def test_degenerate_inputs_stay_finite():
    ae = Autoencoder().eval()
    assert torch.isfinite(ae.encode(torch.zeros(1, 3, 64, 64))).all()
    img = ae.decode(torch.zeros(1, 4, 16, 16))
    assert torch.isfinite(img).all() and img.min() >= 0 and img.max() <= 1


def test_shape_errors():
    ae = Autoencoder()
    with pytest.raises(BadShape):
        ae.decode(torch.zeros(1, 3, 16, 16))
    with pytest.raises(BadShape):
        ae.decode(torch.zeros(1, 4, 8, 8), image_hw=(64, 64))
    with pytest.raises(BadShape):
        ae.encode(torch.zeros(1, 3, 30, 30))


def test_config_validation():
    with pytest.raises(ValueError):
        AutoencoderConfig(downsample=3)
    with pytest.raises(ValueError):
        AutoencoderConfig(downsample=8, channels=(8, 16))


@pytest.fixture(scope="module")
def frames(tiny_dataset):
    return np.concatenate([v.frames for v in VideoDataset.load(tiny_dataset, "train").videos])


def test_training_reduces_reconstruction_error(frames):
    ae, res = train_autoencoder(frames, AutoencoderTrainConfig(steps=200, batch_size=8, lr=2e-3), ae_cfg=SMALL)
    assert res.final_l1 < res.initial_l1
    assert len(res.losses) == 200
    # calibrated scale gives roughly unit-variance latents
    with torch.no_grad():
        z = ae.encode(torch.as_tensor(frames))
    assert abs(z.std().item() - 1.0) < 1e-3


def test_zero_lr_keeps_weights(frames):
    ae = Autoencoder(SMALL)
    before = {k: v.clone() for k, v in ae.state_dict().items() if k != "latent_scale"}
    _, res = train_autoencoder(frames, AutoencoderTrainConfig(steps=20, batch_size=8, lr=0.0), ae=ae)
    for k, v in before.items():
        assert torch.equal(ae.state_dict()[k], v)
    assert np.std(res.losses) < 0.5 * np.mean(res.losses)


def test_training_reproducible(frames):
    cfg = AutoencoderTrainConfig(steps=15, batch_size=4, seed=3)
    _, a = train_autoencoder(frames, cfg, ae_cfg=SMALL)
    _, b = train_autoencoder(frames, cfg, ae_cfg=SMALL)
    assert a.losses == b.losses


def test_empty_training_set():
    with pytest.raises(EmptyDataset):
        train_autoencoder(np.zeros((0, 3, 32, 32), np.float32), AutoencoderTrainConfig(steps=1))


def test_decoder_finetune_touches_decoder_only(frames):
    ae, _ = train_autoencoder(frames, AutoencoderTrainConfig(steps=100, batch_size=8, lr=2e-3), ae_cfg=SMALL)
    subject = frames[:1]
    enc_before, dec_before = param_checksum(ae.encoder), param_checksum(ae.decoder)
    before = recon_l1(ae, subject)
    losses = finetune_decoder(ae, subject, steps=150, lr=1e-3)
    assert len(losses) == 150
    assert param_checksum(ae.encoder) == enc_before
    assert param_checksum(ae.decoder) != dec_before
    assert recon_l1(ae, subject) <= before
    assert all(p.requires_grad for p in ae.parameters())


def test_decoder_finetune_defaults():
    import inspect
    sig = inspect.signature(finetune_decoder)
    assert sig.parameters["steps"].default == 1500
    assert sig.parameters["lr"].default == 5e-5
