import math
import warnings

import numpy as np
import pytest
import torch

from latentmark.attacks import table_attacks
from latentmark.codec import decode_latent, encode_message, hard_bits
from latentmark.detection import verify
from latentmark.diffusion import GuidanceConfig
from latentmark.ecc import bits_to_hex, default_ecc, rsc_decode
from latentmark.errors import ConfigurationError, ContractError
from latentmark.diffusion import make_schedule
from latentmark.toy import TinyAutoencoder, ToyBackend, ToyDenoiser
from latentmark.training import (Extractor, FinetuneConfig, PretrainConfig, codec_metrics, embed,
                                 evaluate_fidelity, finetune_decoder, generate_images, pretrain_codec,
                                 watermark_latents)

TINY_PRE = PretrainConfig(k=16, steps=20, batch_size=32, target_accuracy=0.0, ks_alpha=0.0)


def test_lambda2_annealing():
    cfg = PretrainConfig(steps=100, lambda2=0.5)
    assert cfg.weights_at(0).lambda2 == 0.0
    assert cfg.weights_at(25).lambda2 == pytest.approx(0.25)
    assert cfg.weights_at(50).lambda2 == pytest.approx(0.5)
    assert cfg.weights_at(99).lambda2 == pytest.approx(0.5)
    assert cfg.weights_at(10).lambda1 == 1.0


def test_pretrain_step0_loss_and_determinism(tmp_path):
    c1, log1 = pretrain_codec(TINY_PRE, log_path=tmp_path / "log.jsonl")
    c2, _ = pretrain_codec(TINY_PRE)
    # chance-level BCE, and no KL yet because lambda2 starts at 0
    assert log1[0]["bce"] == pytest.approx(16 * math.log(2), rel=0.1)
    assert log1[0]["lambda2"] == 0.0
    assert c1.to_bytes() == c2.to_bytes()
    assert (tmp_path / "log.jsonl").exists()


def test_pretrain_config_validation():
    with pytest.raises(ConfigurationError):
        PretrainConfig(steps=0)
    with pytest.raises(ConfigurationError):
        FinetuneConfig(clean_fraction=1.5)


# ---- trained reference codec -------------------------------------------------


def test_encoder_moments(artifacts):
    codec = artifacts.codec
    g = torch.Generator().manual_seed(77)
    m = torch.randint(0, 2, (10_000, 48), generator=g).float()
    with torch.no_grad():
        z = encode_message(m, torch.randn(10_000, 4, 8, 8, generator=g), codec)[0]
    assert -0.1 <= float(z.mean()) <= 0.1
    assert 0.8 <= float(z.var()) <= 1.2


def test_clean_decoder_inverse(artifacts):
    assert codec_metrics(artifacts.codec, n=1000, seed=3)["bit_accuracy"] >= 0.99


def test_encoder_distinctness(artifacts):
    g = torch.Generator().manual_seed(8)
    a = torch.randint(0, 2, (100, 48), generator=g).float()
    b = a.clone()
    flip = torch.randint(0, 48, (100,), generator=g)
    b[torch.arange(100), flip] = 1 - b[torch.arange(100), flip]
    with torch.no_grad():
        mu_a = artifacts.codec.encoder(a)[0].flatten(1)
        mu_b = artifacts.codec.encoder(b)[0].flatten(1)
    assert bool(((mu_a - mu_b).norm(dim=1) > 0).all())


# measured on the reference codec: perturbations of norm 1e-3 never flip a decision
ROBUST_RADIUS = 1e-3


def test_decoder_small_perturbation(artifacts):
    g = torch.Generator().manual_seed(9)
    m = torch.randint(0, 2, (200, 48), generator=g).float()
    with torch.no_grad():
        z = encode_message(m, torch.randn(200, 4, 8, 8, generator=g), artifacts.codec)[0]
        d = torch.randn(z.shape, generator=g)
        d = d / d.flatten(1).norm(dim=1).view(-1, 1, 1, 1) * ROBUST_RADIUS
        a = hard_bits(decode_latent(z, artifacts.codec))
        b = hard_bits(decode_latent(z + d, artifacts.codec))
    assert (a == b).mean() >= 0.999


def test_finetune_preserves_clean_path(artifacts):
    before = artifacts.finetune_summary["before"]
    after = artifacts.finetune_summary["after"]
    assert after["none"] >= before["none"] - 0.01


# Contrast x2 partly undoes the shrinkage of 5-step inversion, so the pretrained
# decoder already reads those latents better than clean ones; fine-tuning that
# corrects the clean-path offset costs about 1% there on held-out images, even
# when it trains on contrast alone.
CONTRAST_XFAIL = pytest.mark.xfail(strict=True, reason="held-out contrast:2 accuracy drops ~0.01 after fine-tuning")


@pytest.mark.parametrize("label", [pytest.param(a.label, marks=CONTRAST_XFAIL) if a.kind == "contrast" else a.label
                                   for a in table_attacks(0)])
def test_finetune_never_worse_at_table_strength(artifacts, label):
    before = artifacts.finetune_summary["before"][label]
    after = artifacts.finetune_summary["after"][label]
    assert after >= before, f"{label}: {before:.4f} -> {after:.4f}"


def test_encoder_frozen_bitwise(artifacts):
    for p, q in zip(artifacts.codec.encoder.parameters(), artifacts.finetuned.encoder.parameters()):
        assert torch.equal(p, q)


def test_chain_beats_chance_before_finetuning(artifacts):
    n = 100
    ex = Extractor(artifacts.backend, artifacts.codec, 5)
    g = torch.Generator().manual_seed(21)
    m = torch.randint(0, 2, (n, 48), generator=g)
    z = watermark_latents(m.numpy(), 21, artifacts.codec)
    imgs = generate_images(z, artifacts.backend, GuidanceConfig(5.0, 1, 20))
    acc = float((ex.extract_bits(imgs) == m.numpy()).mean())
    assert acc >= 0.5 + 4 * math.sqrt(0.25 / (n * 48))


def test_embed_then_verify(artifacts):
    ecc = default_ecc(48)
    payload = np.array([1, 1, 0, 1, 0, 0, 1, 0, 1, 0], dtype=np.uint8)
    g = GuidanceConfig(5.0, 2, 20)
    img, bits = embed(payload, 123, artifacts.finetuned, artifacts.backend, g, ecc)
    img2, _ = embed(payload, 123, artifacts.finetuned, artifacts.backend, g, ecc)
    other, _ = embed(1 - payload, 123, artifacts.finetuned, artifacts.backend, g, ecc)
    np.testing.assert_array_equal(img, img2)
    assert not np.array_equal(img, other)
    ex = Extractor(artifacts.backend, artifacts.finetuned, 5, ecc)
    report = verify(img, bits, ex, 0.01, registry={"u1": payload, "u2": 1 - payload})
    assert report.detected and report.matches >= report.threshold
    assert report.traced_user == "u1"
    assert report.traced_payload == bits_to_hex(payload)
    assert rsc_decode(bits, ecc)[0].tolist() == payload.tolist()


def test_embed_rejects_wrong_length(artifacts):
    with pytest.raises(ContractError):
        embed(np.zeros(12, dtype=np.uint8), 0, artifacts.codec, artifacts.backend, GuidanceConfig(), default_ecc(48))


def test_fidelity_report(artifacts):
    rep = evaluate_fidelity(artifacts.codec, artifacts.backend, 2000, seed=4)
    for name in ("latent_mean", "latent_var"):
        assert abs(rep.metrics[name]["delta"]) <= 0.1
    assert rep.ok
    assert evaluate_fidelity(artifacts.codec, None, 0).metrics == {}


def test_fidelity_missing_adapter_is_skipped(artifacts):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = evaluate_fidelity(artifacts.codec, artifacts.backend, 8,
                                {"niqe": None, "mean_pixel": lambda imgs: float(np.mean(imgs))})
    assert rep.skipped == ["niqe"]
    assert "mean_pixel" in rep.metrics
    assert any("niqe" in str(w.message) for w in caught)


def test_tiny_finetune_is_deterministic_and_freezes_encoder():
    torch.manual_seed(0)
    be = ToyBackend(ToyDenoiser(width=16, depth=1), make_schedule(), TinyAutoencoder(hidden=16))
    codec, _ = pretrain_codec(TINY_PRE)
    cfg = FinetuneConfig(steps=2, batch_size=4, pool_size=8, eval_size=4, sample_steps=2, inversion_steps=2,
                         max_clean_regression=1.0)
    a, rec = finetune_decoder(codec, be, cfg)
    b, _ = finetune_decoder(codec, be, cfg)
    assert a.to_bytes() == b.to_bytes()
    for p, q in zip(codec.encoder.parameters(), a.encoder.parameters()):
        assert torch.equal(p, q)
    assert not all(torch.equal(p, q) for p, q in zip(codec.decoder.parameters(), a.decoder.parameters()))
    assert set(rec[-1]["before"]) == set(rec[-1]["after"])
