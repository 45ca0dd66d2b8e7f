import math

import numpy as np
import pytest
import torch

from latentmark.codec import (LossWeights, WatermarkCodec, bce_loss, decode_latent, encode_message, hard_bits,
                              joint_loss, kl_loss)
from latentmark.errors import ConfigurationError, ContractError


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return WatermarkCodec(16).eval()


def test_shapes(codec):
    m = np.random.default_rng(0).integers(0, 2, (5, 16))
    z, mu, logvar = encode_message(m, torch.randn(5, 4, 8, 8), codec)
    assert z.shape == mu.shape == logvar.shape == (5, 4, 8, 8)
    assert decode_latent(z, codec).shape == (5, 16)
    z1, mu1, lv1 = encode_message(m[0], torch.randn(4, 8, 8), codec)
    assert z1.shape == (4, 8, 8) and decode_latent(z1, codec).shape == (16,)


def test_zero_noise_gives_mean_and_determinism(codec):
    m = np.ones(16)
    z, mu, _ = encode_message(m, torch.zeros(4, 8, 8), codec)
    assert torch.equal(z, mu)
    noise = torch.randn(4, 8, 8)
    assert torch.equal(encode_message(m, noise, codec)[0], encode_message(m, noise, codec)[0])
    zz = torch.randn(4, 8, 8)
    assert torch.equal(decode_latent(zz, codec), decode_latent(zz, codec))


def test_shape_contracts(codec):
    with pytest.raises(ContractError):
        encode_message(np.ones(15), torch.zeros(4, 8, 8), codec)
    with pytest.raises(ContractError):
        encode_message(np.ones(16), torch.zeros(4, 8, 9), codec)
    with pytest.raises(ContractError):
        decode_latent(torch.zeros(3, 8, 8), codec)
    with pytest.raises(ConfigurationError):
        WatermarkCodec(0)


def test_kl_examples():
    z = torch.zeros(10)
    assert float(kl_loss(z, z)) == 0.0
    assert float(kl_loss(torch.ones(10), z)) == pytest.approx(0.5)
    lv = torch.full((10,), math.log(4.0))
    assert float(kl_loss(z, lv)) == pytest.approx(0.5 * (4 - 1 - math.log(4)), abs=1e-6)
    assert float(kl_loss(torch.randn(20), torch.randn(20))) > 0
    assert math.isfinite(float(kl_loss(z, torch.full((10,), 500.0))))


def test_bce_examples():
    m = np.random.default_rng(0).integers(0, 2, 48)
    assert float(bce_loss(m, torch.zeros(48))) == pytest.approx(48 * math.log(2), rel=1e-6)
    perfect = torch.where(torch.as_tensor(m) == 1, 1e4, -1e4)
    assert float(bce_loss(m, perfect)) < 1e-5  # float32 clamp at 1 - 1e-7
    assert float(bce_loss([1], torch.tensor([math.log(3.0)]))) == pytest.approx(-math.log(0.75), abs=1e-6)
    # batch: summed over bits, averaged over items
    mb = np.stack([m, 1 - m])
    assert float(bce_loss(mb, torch.zeros(2, 48))) == pytest.approx(48 * math.log(2), rel=1e-6)
    with pytest.raises(ContractError):
        bce_loss(m[:10], torch.zeros(48))


def test_joint_loss_examples():
    m, logit = [1], torch.tensor([math.log(3.0)])
    mu, lv = torch.ones(1), torch.zeros(1)
    assert float(joint_loss(m, logit, mu, lv, LossWeights(1.0, 0.0))) == pytest.approx(float(bce_loss(m, logit)))
    assert float(joint_loss(m, logit, torch.zeros(1), lv, LossWeights(0.0, 1.0))) == 0.0
    assert float(joint_loss(m, logit, mu, lv, LossWeights(1.0, 2.0))) == pytest.approx(0.2877 + 1.0, abs=1e-4)
    with pytest.raises(ConfigurationError):
        LossWeights(-1, 1)
    with pytest.raises(ConfigurationError):
        LossWeights(0, 0)


def test_gradients_flow(codec):
    c = WatermarkCodec(8)
    m = torch.randint(0, 2, (4, 8)).float()
    z, mu, lv = encode_message(m, torch.randn(4, 4, 8, 8), c)
    joint_loss(m, decode_latent(z, c), mu, lv, LossWeights()).backward()
    assert all(p.grad is not None for p in c.parameters())


def test_hard_bits():
    assert hard_bits(torch.tensor([[-1.0, 0.0, 2.0]])).tolist() == [[0, 0, 1]]


def test_save_load_roundtrip(tmp_path, codec):
    p = tmp_path / "c.lmk"
    codec.save(p)
    back = WatermarkCodec.load(p)
    z = torch.randn(2, 4, 8, 8)
    assert torch.equal(decode_latent(z, back), decode_latent(z, codec))
    assert p.read_bytes() == back.to_bytes()
