"""Codec pretraining, attack-hardened decoder fine-tuning, embedding and fidelity checks."""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
from scipy import stats
from torch.nn import functional as F

from .attacks import AttackSpec, apply_attack, apply_attack_batch, sample_random_attack, table_attacks
from .codec import LossWeights, WatermarkCodec, bce_loss, decode_latent, encode_message, hard_bits, joint_loss
from .diffusion import Backend, GuidanceConfig, invert, invert_latents, sample
from .ecc import RSCConfig, rsc_encode
from .errors import ConfigurationError, ContractError, TrainingError

log = logging.getLogger(__name__)


def _write_log(path, records):
    if path is None:
        return
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def random_messages(n: int, k: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randint(0, 2, (n, k), generator=gen).float()


@dataclass
class PretrainConfig:
    k: int = 48
    latent_shape: tuple = (4, 8, 8)
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    lambda1: float = 1.0
    # kl_loss averages over latent elements while bce_loss sums over bits; 25.6 is
    # 0.1 per element on a 4x8x8 latent. Weaker weights leave the latents visibly
    # non-normal, stronger ones cost clean accuracy.
    lambda2: float = 25.6
    anneal_fraction: float = 0.5
    seed: int = 0
    target_accuracy: float = 0.99
    ks_alpha: float = 0.01

    def __post_init__(self):
        self.latent_shape = tuple(self.latent_shape)
        if self.steps < 1 or self.batch_size < 1 or self.k < 1:
            raise ConfigurationError("steps, batch_size and k must be positive")

    def weights_at(self, step: int) -> LossWeights:
        """lambda2 ramps linearly from 0 over the first ``anneal_fraction`` of training."""
        ramp = max(1, int(self.steps * self.anneal_fraction))
        return LossWeights(self.lambda1, self.lambda2 * min(1.0, step / ramp))


@torch.no_grad()
def codec_metrics(codec: WatermarkCodec, n: int = 1000, seed: int = 12345, ks_pool: int = 10_000) -> dict:
    """Clean round-trip bit accuracy and latent-moment/KS statistics on fresh draws."""
    gen = torch.Generator().manual_seed(seed)
    m = random_messages(n, codec.k, gen)
    noise = torch.randn((n, *codec.latent_shape), generator=gen)
    z, mu, logvar = encode_message(m, noise, codec)
    acc = float((torch.from_numpy(hard_bits(decode_latent(z, codec))).float() == m).float().mean())
    # pool of one element per draw so the KS sample is i.i.d.
    reps = math.ceil(ks_pool / n)
    pooled = []
    for r in range(reps):
        mm = random_messages(n, codec.k, gen)
        nz = torch.randn((n, *codec.latent_shape), generator=gen)
        zz = encode_message(mm, nz, codec)[0].flatten(1)
        idx = torch.randint(0, zz.shape[1], (n,), generator=gen)
        pooled.append(zz[torch.arange(n), idx])
    pool = torch.cat(pooled)[:ks_pool].double().numpy()
    ks = stats.kstest(pool, "norm")
    return {
        "bit_accuracy": acc,
        "latent_mean": float(pool.mean()),
        "latent_var": float(pool.var()),
        "ks_statistic": float(ks.statistic),
        "ks_pvalue": float(ks.pvalue),
    }


def pretrain_codec(cfg: PretrainConfig = PretrainConfig(), log_path=None, check_targets: bool = True):
    """Jointly train encoder and decoder on random messages; returns ``(codec, log)``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        codec = WatermarkCodec(cfg.k, cfg.latent_shape)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    records = []
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        m = random_messages(cfg.batch_size, cfg.k, gen)
        noise = torch.randn((cfg.batch_size, *cfg.latent_shape), generator=gen)
        z, mu, logvar = encode_message(m, noise, codec)
        logits = decode_latent(z, codec)
        w = cfg.weights_at(step)
        loss = joint_loss(m, logits, mu, logvar, w)
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError("codec pretraining diverged", {"step": step})
        if step % 100 == 0 or step == cfg.steps - 1:
            with torch.no_grad():
                acc = float(((logits > 0).float() == m).float().mean())
                records.append({"phase": "pretrain", "step": step, "loss": value,
                                "bce": bce_loss(m, logits).item(), "lambda2": w.lambda2, "batch_accuracy": acc})
    codec.eval()
    metrics = codec_metrics(codec)
    records.append({"phase": "pretrain", "final": metrics})
    _write_log(log_path, records)
    if check_targets and (metrics["bit_accuracy"] < cfg.target_accuracy or metrics["ks_pvalue"] < cfg.ks_alpha):
        raise TrainingError("codec pretraining missed its targets", metrics)
    return codec, records


class Extractor:
    """Image -> bits: encode, zero-text DDIM inversion, then the watermark decoder."""

    def __init__(self, backend: Backend, codec: WatermarkCodec, inversion_steps: int = 5,
                 ecc: Optional[RSCConfig] = None, batch_size: int = 256):
        self.backend = backend
        self.codec = codec
        self.inversion_steps = inversion_steps
        self.ecc = ecc
        self.batch_size = batch_size

    @torch.no_grad()
    def initial_latents(self, images) -> torch.Tensor:
        images = np.asarray(images, dtype=np.float32)
        chunks = [invert(images[i : i + self.batch_size], self.inversion_steps, self.backend)
                  for i in range(0, len(images), self.batch_size)]
        return torch.cat(chunks) if chunks else torch.empty((0, *self.codec.latent_shape))

    @torch.no_grad()
    def extract_logits(self, images) -> torch.Tensor:
        return decode_latent(self.initial_latents(images), self.codec)

    def extract_bits(self, images) -> np.ndarray:
        return hard_bits(self.extract_logits(images))


@torch.no_grad()
def watermark_latents(bits, seed: int, codec: WatermarkCodec) -> torch.Tensor:
    """Initial latents for (a batch of) watermark bit arrays under one seed."""
    bits = np.atleast_2d(np.asarray(bits))
    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.randn((bits.shape[0], *codec.latent_shape), generator=gen)
    return encode_message(bits, noise, codec)[0]


def generate_images(z_T: torch.Tensor, backend: Backend, guidance: GuidanceConfig, batch_size: int = 256) -> np.ndarray:
    """``sample`` in chunks; ``guidance.condition`` may be a per-image label array."""
    cond = guidance.condition
    out = []
    for i in range(0, z_T.shape[0], batch_size):
        c = cond
        if cond is not None and np.ndim(cond) > 0:
            c = np.asarray(cond)[i : i + batch_size]
        g = GuidanceConfig(guidance.scale, c, guidance.num_inference_steps)
        out.append(sample(z_T[i : i + batch_size], g, backend))
    return np.concatenate(out) if out else np.empty((0,))


def embed(payload, seed: int, codec: WatermarkCodec, backend: Backend, guidance: GuidanceConfig,
          ecc: Optional[RSCConfig] = None):
    """Returns ``(image, watermark_bits)``; with ECC the watermark is the RSC codeword."""
    payload = np.asarray(payload).astype(np.uint8)
    if ecc is not None:
        bits = rsc_encode(payload, ecc)
    else:
        bits = payload
    if bits.size != codec.k:
        raise ContractError(f"watermark has {bits.size} bits but the codec embeds k={codec.k}")
    z = watermark_latents(bits, seed, codec)
    return sample(z[0], guidance, backend), bits


@dataclass
class FinetuneConfig:
    steps: int = 600
    batch_size: int = 64
    lr: float = 3e-4
    pool_size: int = 2048
    inversion_steps: int = 5
    sample_steps: int = 20
    guidance_scales: tuple = (1.0, 7.0)
    clean_fraction: float = 0.25
    seed: int = 7
    eval_size: int = 200
    max_clean_regression: float = 0.01

    def __post_init__(self):
        self.guidance_scales = tuple(self.guidance_scales)
        if not 0 <= self.clean_fraction <= 1:
            raise ConfigurationError("clean_fraction must lie in [0, 1]")


def _generation_pool(codec, backend, n, seed, sample_steps, scales, n_classes):
    """Messages, initial latents and clean generations for fine-tuning or evaluation."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    m = random_messages(n, codec.k, gen)
    noise = torch.randn((n, *codec.latent_shape), generator=gen)
    with torch.no_grad():
        z = encode_message(m, noise, codec)[0]
    labels = rng.integers(0, n_classes, n)
    lo, hi = scales
    w = rng.uniform(lo, hi, n)
    # group into a few guidance buckets so sampling stays batched
    buckets = np.linspace(lo, hi, 5)
    which = np.clip(np.searchsorted(buckets, w), 0, len(buckets) - 1)
    out = [None] * n
    for b in np.unique(which):
        idx = np.nonzero(which == b)[0]
        imgs = generate_images(z[idx], backend, GuidanceConfig(float(buckets[b]), labels[idx], sample_steps))
        for j, i in enumerate(idx):
            out[i] = imgs[j]
    return m, z, np.stack(out)


def _attacked_accuracy(extractor: Extractor, images, messages, spec: Optional[AttackSpec]) -> float:
    attacked = apply_attack_batch(images, spec)
    bits = extractor.extract_bits(attacked)
    return float((bits == messages.numpy().astype(np.uint8)).mean())


def finetune_decoder(codec: WatermarkCodec, backend: Backend, cfg: FinetuneConfig = FinetuneConfig(),
                     attacks: Optional[Sequence[AttackSpec]] = None, log_path=None, validate: bool = True):
    """Fine-tune only the decoder on attacked, inverted generations.

    Each training example gets one random attack from the training pool
    (or none, with probability ``clean_fraction``). Returns ``(codec, log)``
    where ``log`` holds before/after accuracies per evaluation attack.
    """
    tuned = copy.deepcopy(codec)
    for p in tuned.encoder.parameters():
        p.requires_grad_(False)
    n_classes = getattr(backend, "n_classes", 1)
    m_pool, _, pool = _generation_pool(codec, backend, cfg.pool_size, cfg.seed, cfg.sample_steps,
                                       cfg.guidance_scales, n_classes)
    m_eval, _, eval_imgs = _generation_pool(codec, backend, cfg.eval_size, cfg.seed + 10_000, cfg.sample_steps,
                                            cfg.guidance_scales, n_classes)
    eval_attacks = [None] + list(attacks if attacks is not None else table_attacks(cfg.seed))

    before_ex = Extractor(backend, codec, cfg.inversion_steps)
    before = {(a.label if a else "none"): _attacked_accuracy(before_ex, eval_imgs, m_eval, a) for a in eval_attacks}

    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(tuned.decoder.parameters(), lr=cfg.lr)
    records = []
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        idx = torch.randint(0, cfg.pool_size, (cfg.batch_size,), generator=gen).numpy()
        imgs = pool[idx].copy()
        for j in range(len(imgs)):
            if rng.random() >= cfg.clean_fraction:
                imgs[j] = apply_attack(imgs[j], sample_random_attack(int(rng.integers(0, 2**63))))
        with torch.no_grad():
            z_hat = invert(imgs, cfg.inversion_steps, backend)
        logits = tuned.decoder(z_hat)
        loss = bce_loss(m_pool[idx], logits)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if not math.isfinite(loss.item()):
            raise TrainingError("decoder fine-tuning diverged", {"step": step})
        if step % 50 == 0 or step == cfg.steps - 1:
            records.append({"phase": "finetune", "step": step, "bce": loss.item()})
    tuned.eval()
    for p in tuned.encoder.parameters():
        p.requires_grad_(True)

    after_ex = Extractor(backend, tuned, cfg.inversion_steps)
    after = {(a.label if a else "none"): _attacked_accuracy(after_ex, eval_imgs, m_eval, a) for a in eval_attacks}
    summary = {"phase": "finetune", "before": before, "after": after}
    records.append(summary)
    _write_log(log_path, records)
    if validate and after["none"] < before["none"] - cfg.max_clean_regression:
        raise TrainingError("fine-tuning regressed clean-path bit accuracy", summary)
    return tuned, records


@dataclass
class FidelityReport:
    n_samples: int
    metrics: dict = field(default_factory=dict)  # name -> {"watermarked", "reference", "delta", "epsilon", "ok"}
    skipped: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(v["ok"] for v in self.metrics.values())

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_fidelity(codec: WatermarkCodec, backend: Optional[Backend], n_samples: int,
                      metric_adapters: Optional[Mapping[str, Optional[Callable]]] = None,
                      epsilon: float = 0.1, seed: int = 0, guidance: GuidanceConfig = GuidanceConfig()) -> FidelityReport:
    """Compare watermarked generations against ordinary ones.

    Built-in: mean/variance of the initial latents (watermarked vs standard
    normal draws). ``metric_adapters`` maps names to ``images -> float``
    callables (NIQE, PIQE, CLIP, ...); a ``None`` adapter is skipped with
    a warning.
    """
    report = FidelityReport(n_samples=n_samples)
    if n_samples <= 0:
        return report
    gen = torch.Generator().manual_seed(seed)
    m = random_messages(n_samples, codec.k, gen)
    noise = torch.randn((n_samples, *codec.latent_shape), generator=gen)
    ref = torch.randn((n_samples, *codec.latent_shape), generator=gen)
    with torch.no_grad():
        z = encode_message(m, noise, codec)[0]
    for name, fn in (("latent_mean", lambda t: float(t.mean())), ("latent_var", lambda t: float(t.var()))):
        a, b = fn(z), fn(ref)
        report.metrics[name] = {"watermarked": a, "reference": b, "delta": a - b,
                                "epsilon": epsilon, "ok": abs(a - b) <= epsilon}
    if metric_adapters:
        if backend is None:
            raise ContractError("image metrics need a backend to generate images")
        wm_imgs = generate_images(z, backend, guidance)
        ref_imgs = generate_images(ref, backend, guidance)
        for name, fn in metric_adapters.items():
            if fn is None:
                warnings.warn(f"metric adapter {name!r} is not available; skipped", RuntimeWarning)
                report.skipped.append(name)
                continue
            eps = epsilon
            if isinstance(fn, tuple):
                fn, eps = fn
            a, b = float(fn(wm_imgs)), float(fn(ref_imgs))
            report.metrics[name] = {"watermarked": a, "reference": b, "delta": a - b, "epsilon": eps,
                                    "ok": abs(a - b) <= eps}
    return report
