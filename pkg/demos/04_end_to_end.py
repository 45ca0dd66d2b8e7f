"""
Embed, attack, verify
=====================

The full loop on the toy diffusion backend. Pass a work directory made by
``latentmark train`` (and optionally ``latentmark finetune``) to use real
checkpoints; without one the script trains a deliberately small model in a
few minutes, so expect lower accuracy than the reference run.

    python3 demos/04_end_to_end.py [WORKDIR]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from latentmark import cli
from latentmark.attacks import AttackSpec, apply_attack
from latentmark.codec import WatermarkCodec
from latentmark.detection import verify
from latentmark.diffusion import GuidanceConfig
from latentmark.ecc import default_ecc, rsc_decode
from latentmark.toy import ToyBackend
from latentmark.training import Extractor, embed

QUICK = {
    "toy": {"autoencoder": {"n_images": 2048, "steps": 400},
            "denoiser": {"steps": 1500, "width": 32, "depth": 2, "target_loss": 10.0}},
    "pretrain": {"steps": 1500, "target_accuracy": 0.0, "ks_alpha": 0.0},
}

if len(sys.argv) > 1:
    workdir = Path(sys.argv[1])
else:
    import json

    workdir = Path(tempfile.mkdtemp(prefix="latentmark-demo-"))
    cfg = workdir / "config.json"
    cfg.write_text(json.dumps({**QUICK, "workdir": str(workdir)}))
    print("training a small backend and codec in", workdir)
    cli.main(["train", "--config", str(cfg)])

backend = ToyBackend.load(workdir / cli.BACKEND_FILE)
codec_path = workdir / cli.FINETUNED_FILE
if not codec_path.exists():
    codec_path = workdir / cli.CODEC_FILE
codec = WatermarkCodec.load(codec_path)
ecc = default_ecc(codec.k)

payload = np.array([1, 0, 1, 1, 0, 0, 1, 1, 1, 0], dtype=np.uint8)
image, bits = embed(payload, 42, codec, backend, GuidanceConfig(5.0, 1, 20), ecc)
extractor = Extractor(backend, codec, 5, ecc)

for spec in (None, AttackSpec("gaussian_noise", 0.05), AttackSpec("brightness", 2.0), AttackSpec("jpeg", 50)):
    attacked = image if spec is None else apply_attack(image, spec)
    rep = verify(attacked, bits, extractor, 0.01, registry={"alice": payload})
    name = "no attack" if spec is None else spec.label
    print(f"{name:20s} {rep.matches}/{rep.k} bits match (threshold {rep.threshold}), "
          f"detected={rep.detected}, traced to {rep.traced_user}")

# an image carrying a different payload should not verify against this one
plain, _ = embed(1 - payload, 43, codec, backend, GuidanceConfig(5.0, 1, 20), ecc)
rep = verify(plain, bits, extractor, 0.01)
print(f"{'other payload':20s} {rep.matches}/{rep.k} bits match, detected={rep.detected}")
print("ECC payload from the clean image:", rsc_decode(extractor.extract_bits(image[None])[0], ecc)[0])
