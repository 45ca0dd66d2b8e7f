"""Desk-scale diffusion backend: synthetic shapes, a tiny autoencoder and a small denoiser.

Images are 32x32 RGB, latents are 4x8x8. The autoencoder is two strided
convolutions each way; the denoiser is a handful of residual conv blocks
with timestep and class embeddings (class ``n_classes`` is the null prompt
used for classifier-free guidance and zero-text inversion).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint
from .diffusion import NoiseSchedule, make_schedule
from .errors import ContractError, TrainingError

SHAPE_CLASSES = ("circle", "square", "triangle")
IMAGE_SIZE = 32
LATENT_SHAPE = (4, 8, 8)


def make_shapes(n: int, seed: int, size: int = IMAGE_SIZE, grid: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Random shapes over smooth random-colour backgrounds.

    The background is a ``grid x grid`` colour field upsampled bilinearly,
    which gives the latent space plenty of independent directions; one
    shape (the class label) is painted on top with a random colour.
    """
    rng = np.random.default_rng(seed)
    coarse = torch.from_numpy(rng.uniform(0.1, 0.9, (n, 3, grid, grid)).astype(np.float32))
    bg = F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)
    images = bg.permute(0, 2, 3, 1).numpy().copy()
    labels = rng.integers(0, len(SHAPE_CLASSES), n)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for i in range(n):
        cx, cy = rng.uniform(0.3 * size, 0.7 * size, 2)
        r = rng.uniform(0.15 * size, 0.3 * size)
        color = rng.uniform(0.0, 1.0, 3).astype(np.float32)
        if labels[i] == 0:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
        elif labels[i] == 1:
            mask = (np.abs(xx - cx) <= r * 0.85) & (np.abs(yy - cy) <= r * 0.85)
        else:
            mask = (yy - cy <= r * 0.8) & (yy - cy >= -r) & (np.abs(xx - cx) <= (yy - cy + r) * 0.6)
        images[i][mask] = color
    return images.astype(np.float32), labels.astype(np.int64)


class TinyAutoencoder(nn.Module):
    def __init__(self, latent_channels: int = 4, hidden: int = 64):
        super().__init__()
        self.enc1 = nn.Conv2d(3, hidden, 4, stride=2, padding=1)
        self.enc2 = nn.Conv2d(hidden, latent_channels, 4, stride=2, padding=1)
        self.dec1 = nn.ConvTranspose2d(latent_channels, hidden, 4, stride=2, padding=1)
        self.dec2 = nn.ConvTranspose2d(hidden, 3, 4, stride=2, padding=1)

    def encode(self, x):  # x: (N, 3, H, W)
        return self.enc2(F.silu(self.enc1(x - 0.5)))

    def decode(self, z):
        return self.dec2(F.silu(self.dec1(z))) + 0.5


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class ToyDenoiser(nn.Module):
    """Noise predictor ``eps(x_t, t, class)``; output shape equals input shape."""

    def __init__(self, latent_channels: int = 4, width: int = 64, depth: int = 3,
                 n_classes: int = len(SHAPE_CLASSES), emb_dim: int = 128):
        super().__init__()
        self.n_classes = n_classes
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.class_emb = nn.Embedding(n_classes + 1, emb_dim)
        self.conv_in = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.blocks = nn.ModuleList([_ResBlock(width, emb_dim) for _ in range(depth)])
        self.norm_out = nn.GroupNorm(8, width)
        self.conv_out = nn.Conv2d(width, latent_channels, 3, padding=1)
        # zero-initialised head: an untrained model predicts eps = 0
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x, t, labels):
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim)) + self.class_emb(labels)
        emb = F.silu(emb)
        h = self.conv_in(x)
        for block in self.blocks:
            h = block(h, emb)
        return self.conv_out(F.silu(self.norm_out(h)))


@dataclass
class AutoencoderConfig:
    n_images: int = 8192
    steps: int = 3000
    batch_size: int = 128
    lr: float = 2e-3
    cycle_weight: float = 1.0
    seed: int = 0


@dataclass
class DenoiserConfig:
    steps: int = 4000
    batch_size: int = 128
    lr: float = 1e-3
    width: int = 64
    depth: int = 3
    cond_drop: float = 0.2
    target_loss: float = 0.9
    seed: int = 1


def _labels_tensor(condition: Any, n: int, n_classes: int) -> torch.Tensor:
    if condition is None:
        return torch.full((n,), n_classes, dtype=torch.long)
    lab = torch.as_tensor(condition, dtype=torch.long)
    if lab.ndim == 0:
        lab = lab.expand(n)
    if lab.shape != (n,):
        raise ContractError(f"condition must be a scalar or length-{n} label array")
    if (lab < 0).any() or (lab > n_classes).any():
        raise ContractError(f"class labels must lie in [0, {n_classes}]")
    return lab.clone()


def _lr_at(step: int, total: int, base: float) -> float:
    return base * 0.5 * (1 + math.cos(math.pi * step / total))


def train_autoencoder(images: np.ndarray, cfg: AutoencoderConfig) -> tuple[TinyAutoencoder, list[dict]]:
    """MSE reconstruction plus a latent cycle term ``|enc(dec(z)) - z|`` on perturbed latents."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        ae = TinyAutoencoder()
    gen = torch.Generator().manual_seed(cfg.seed)
    data = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
    opt = torch.optim.Adam(ae.parameters(), lr=cfg.lr)
    log = []
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = _lr_at(step, cfg.steps, cfg.lr)
        idx = torch.randint(0, data.shape[0], (cfg.batch_size,), generator=gen)
        x = data[idx]
        z = ae.encode(x)
        rec = F.mse_loss(ae.decode(z), x)
        zp = z.detach() + 0.3 * z.detach().std() * torch.randn(z.shape, generator=gen)
        cyc = F.mse_loss(ae.encode(ae.decode(zp).clamp(0, 1)), zp) / zp.var().clamp_min(1e-6)
        loss = rec + cfg.cycle_weight * 0.01 * cyc
        opt.zero_grad()
        loss.backward()
        opt.step()
        if not math.isfinite(loss.item()):
            raise TrainingError("autoencoder loss diverged", {"step": step})
        if step % 100 == 0 or step == cfg.steps - 1:
            log.append({"step": step, "rec": rec.item(), "cycle": cyc.item()})
    return ae.eval(), log


def train_toy_denoiser(latents: torch.Tensor, labels: np.ndarray, sched: NoiseSchedule,
                       cfg: DenoiserConfig) -> tuple[ToyDenoiser, list[dict]]:
    """Minimise ``E |eps_hat(sqrt(ab_t) x + sqrt(1-ab_t) eps, t, c) - eps|^2``.

    Labels are replaced by the null class with probability ``cfg.cond_drop``.
    Raises :class:`TrainingError` on NaN or when the mean loss over the last
    10% of steps does not reach ``cfg.target_loss``.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = ToyDenoiser(latents.shape[1], cfg.width, cfg.depth)
    gen = torch.Generator().manual_seed(cfg.seed)
    lab_all = torch.as_tensor(labels, dtype=torch.long)
    ab = torch.tensor(np.array(sched.alpha_bar), dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    log = []
    tail = []
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = _lr_at(step, cfg.steps, cfg.lr)
        idx = torch.randint(0, latents.shape[0], (cfg.batch_size,), generator=gen)
        x0 = latents[idx]
        t = torch.randint(1, sched.T + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        a = ab[t].view(-1, 1, 1, 1)
        xt = a.sqrt() * x0 + (1 - a).sqrt() * eps
        lab = lab_all[idx].clone()
        drop = torch.rand(cfg.batch_size, generator=gen) < cfg.cond_drop
        lab[drop] = model.n_classes
        loss = F.mse_loss(model(xt, t, lab), eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError("denoiser loss is not finite", {"step": step})
        if step >= cfg.steps * 0.9:
            tail.append(value)
        if step % 100 == 0 or step == cfg.steps - 1:
            log.append({"step": step, "loss": value})
    final = float(np.mean(tail)) if tail else float("nan")
    if not final < cfg.target_loss:
        raise TrainingError(f"final denoiser loss {final:.4f} not below target {cfg.target_loss}",
                            {"final_loss": final})
    return model.eval(), log


class ToyBackend:
    """Backend over the tiny autoencoder (or the identity codec) and a ToyDenoiser.

    With ``autoencoder=None`` the codec is the identity: "images" are the
    latents laid out as ``(N, 8, 8, 4)`` arrays, meant for latent-space tests
    only (pixel attacks do not apply).
    """

    latent_shape = LATENT_SHAPE

    def __init__(self, denoiser: Optional[ToyDenoiser], sched: NoiseSchedule,
                 autoencoder: Optional[TinyAutoencoder] = None, latent_shift: float = 0.0,
                 latent_scale: float = 1.0):
        self.denoiser = denoiser
        self.autoencoder = autoencoder
        self._sched = sched
        self.latent_shift = float(latent_shift)
        self.latent_scale = float(latent_scale)

    @property
    def n_classes(self) -> int:
        return self.denoiser.n_classes if self.denoiser is not None else len(SHAPE_CLASSES)

    def schedule(self) -> NoiseSchedule:
        return self._sched

    @torch.no_grad()
    def encode(self, images: np.ndarray) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
        if self.autoencoder is None:
            return x.contiguous()
        return (self.autoencoder.encode(x) - self.latent_shift) * self.latent_scale

    @torch.no_grad()
    def decode(self, latents: torch.Tensor) -> np.ndarray:
        z = torch.as_tensor(latents, dtype=torch.float32)
        if self.autoencoder is None:
            return z.permute(0, 2, 3, 1).contiguous().numpy()
        x = self.autoencoder.decode(z / self.latent_scale + self.latent_shift)
        # 8-bit quantisation: generated images are stored as PNG
        x = torch.round(x.clamp(0, 1) * 255) / 255
        return x.permute(0, 2, 3, 1).contiguous().numpy()

    @torch.no_grad()
    def predict_noise(self, latents: torch.Tensor, t: int, condition: Any = None) -> torch.Tensor:
        x = torch.as_tensor(latents, dtype=torch.float32)
        if self.denoiser is None:
            return torch.zeros_like(x)
        tt = torch.full((x.shape[0],), int(t), dtype=torch.long)
        return self.denoiser(x, tt, _labels_tensor(condition, x.shape[0], self.n_classes))

    # persistence -----------------------------------------------------------

    def to_bytes(self, metadata: Optional[dict] = None) -> bytes:
        tensors = {}
        arch = {}
        if self.autoencoder is not None:
            tensors.update(checkpoint.state_dict_tensors(self.autoencoder, "autoencoder/"))
            arch["autoencoder"] = {"hidden": self.autoencoder.enc1.out_channels}
        if self.denoiser is not None:
            tensors.update(checkpoint.state_dict_tensors(self.denoiser, "denoiser/"))
            arch["denoiser"] = {"width": self.denoiser.conv_in.out_channels,
                                "depth": len(self.denoiser.blocks),
                                "n_classes": self.denoiser.n_classes}
        meta = {"arch": arch, "latent_shift": self.latent_shift.hex(),
                "latent_scale": self.latent_scale.hex(), **(metadata or {})}
        return checkpoint.dumps("toy_backend", tensors, schedule=self._sched, metadata=meta)

    def save(self, path, metadata: Optional[dict] = None) -> None:
        checkpoint.atomic_write_bytes(path, self.to_bytes(metadata))

    @classmethod
    def load(cls, path) -> "ToyBackend":
        _, tensors, sched, meta = checkpoint.load(path, expect_section="toy_backend")
        arch = meta["arch"]
        ae = den = None
        if "autoencoder" in arch:
            ae = TinyAutoencoder(hidden=arch["autoencoder"]["hidden"])
            checkpoint.load_state_dict(ae, tensors, "autoencoder/")
            ae.eval()
        if "denoiser" in arch:
            d = arch["denoiser"]
            den = ToyDenoiser(width=d["width"], depth=d["depth"], n_classes=d["n_classes"])
            checkpoint.load_state_dict(den, tensors, "denoiser/")
            den.eval()
        return cls(den, sched, ae, float.fromhex(meta["latent_shift"]), float.fromhex(meta["latent_scale"]))


@dataclass
class ToyConfig:
    schedule_kind: str = "linear_beta"
    T: int = 1000
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    data_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        d = dict(d)
        ae = AutoencoderConfig(**d.pop("autoencoder", {}))
        den = DenoiserConfig(**d.pop("denoiser", {}))
        return cls(autoencoder=ae, denoiser=den, **d)


def build_toy_backend(cfg: ToyConfig = ToyConfig(), log_path=None) -> ToyBackend:
    """Train the autoencoder and then the denoiser on its normalised latents."""
    images, labels = make_shapes(cfg.autoencoder.n_images, cfg.data_seed)
    ae, ae_log = train_autoencoder(images, cfg.autoencoder)
    with torch.no_grad():
        raw = ae.encode(torch.from_numpy(images).permute(0, 3, 1, 2))
    shift = float(raw.mean())
    scale = float(1.0 / raw.std())
    latents = (raw - shift) * scale
    sched = make_schedule(cfg.schedule_kind, cfg.T)
    den, den_log = train_toy_denoiser(latents, labels, sched, cfg.denoiser)
    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in ae_log:
                fh.write(json.dumps({"phase": "autoencoder", **rec}, sort_keys=True) + "\n")
            for rec in den_log:
                fh.write(json.dumps({"phase": "denoiser", **rec}, sort_keys=True) + "\n")
    return ToyBackend(den, sched, ae, shift, scale)
