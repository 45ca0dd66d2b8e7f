"""Message -> latent watermark encoder and latent -> message decoder.

The encoder emits a per-element mean and log-variance over the latent
shape and samples ``z = mu + exp(logvar / 2) * noise`` with caller-supplied
noise. The KL term keeps the watermarked latents close to ``N(0, I)`` so
they can stand in for ordinary initial noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint
from .errors import ConfigurationError, ContractError

LOGVAR_CLAMP = 30.0
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 <= 0:
            raise ConfigurationError("loss weights must be non-negative and not both zero")


class MessageEncoder(nn.Module):
    def __init__(self, k: int, latent_shape=(4, 8, 8), hidden: int = 256, width: int = 64):
        super().__init__()
        c, h, w = latent_shape
        if h % 2 or w % 2:
            raise ConfigurationError("latent height and width must be even")
        self.latent_shape = tuple(latent_shape)
        self.width = width
        self.fc = nn.Sequential(nn.Linear(k, hidden), nn.SiLU(), nn.Linear(hidden, width * (h // 2) * (w // 2)), nn.SiLU())
        self.up = nn.ConvTranspose2d(width, width // 2, 4, stride=2, padding=1)
        self.head = nn.Conv2d(width // 2, 2 * c, 3, padding=1)

    def forward(self, bits: torch.Tensor):
        c, h, w = self.latent_shape
        x = self.fc(2.0 * bits - 1.0).view(-1, self.width, h // 2, w // 2)
        out = self.head(F.silu(self.up(x)))
        return out[:, :c], out[:, c:]


class LatentDecoder(nn.Module):
    def __init__(self, k: int, latent_shape=(4, 8, 8), hidden: int = 256, width: int = 64):
        super().__init__()
        c, h, w = latent_shape
        self.conv = nn.Sequential(
            nn.Conv2d(c, width // 2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width // 2, width, 4, stride=2, padding=1), nn.SiLU(),
        )
        self.fc = nn.Sequential(nn.Linear(width * (h // 2) * (w // 2), hidden), nn.SiLU(), nn.Linear(hidden, k))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc(self.conv(z).flatten(1))


class WatermarkCodec(nn.Module):
    """Encoder/decoder pair for ``k``-bit messages over one latent shape."""

    def __init__(self, k: int = 48, latent_shape=(4, 8, 8), hidden: int = 256, width: int = 64):
        super().__init__()
        if k < 1:
            raise ConfigurationError("k must be positive")
        self.k = k
        self.latent_shape = tuple(latent_shape)
        self.hidden = hidden
        self.width = width
        self.encoder = MessageEncoder(k, latent_shape, hidden, width)
        self.decoder = LatentDecoder(k, latent_shape, hidden, width)

    def to_bytes(self, metadata: Optional[dict] = None) -> bytes:
        meta = {"k": self.k, "latent_shape": list(self.latent_shape), "hidden": self.hidden,
                "width": self.width, **(metadata or {})}
        return checkpoint.dumps("codec", checkpoint.state_dict_tensors(self), metadata=meta)

    def save(self, path, metadata: Optional[dict] = None) -> None:
        checkpoint.atomic_write_bytes(path, self.to_bytes(metadata))

    @classmethod
    def load(cls, path) -> "WatermarkCodec":
        _, tensors, _, meta = checkpoint.load(path, expect_section="codec")
        codec = cls(meta["k"], tuple(meta["latent_shape"]), meta["hidden"], meta["width"])
        checkpoint.load_state_dict(codec, tensors)
        return codec.eval()


def _bits_tensor(m, k: int) -> tuple[torch.Tensor, bool]:
    bits = torch.as_tensor(np.asarray(m), dtype=torch.float32)
    single = bits.ndim == 1
    if single:
        bits = bits.unsqueeze(0)
    if bits.ndim != 2 or bits.shape[1] != k:
        raise ContractError(f"message length {bits.shape[-1]} does not match codec k={k}")
    return bits, single


def encode_message(m, noise, params: WatermarkCodec):
    """Return ``(z, mu, logvar)`` with ``z = mu + exp(logvar/2) * noise``.

    Accepts a single message ``(k,)`` with noise ``(C, H, W)`` or a batch.
    Gradients flow when called outside ``torch.no_grad``.
    """
    bits, single = _bits_tensor(m, params.k)
    noise = torch.as_tensor(noise, dtype=torch.float32)
    if single:
        noise = noise.unsqueeze(0)
    if tuple(noise.shape[1:]) != params.latent_shape or noise.shape[0] != bits.shape[0]:
        raise ContractError(f"noise shape {tuple(noise.shape)} does not match the latent shape")
    mu, logvar = params.encoder(bits)
    z = mu + torch.exp(0.5 * logvar) * noise
    if single:
        return z[0], mu[0], logvar[0]
    return z, mu, logvar


def decode_latent(z, params: WatermarkCodec) -> torch.Tensor:
    """Bit logits; the hard decision is ``logit > 0``."""
    z = torch.as_tensor(z, dtype=torch.float32)
    single = z.ndim == 3
    if single:
        z = z.unsqueeze(0)
    if tuple(z.shape[1:]) != params.latent_shape:
        raise ContractError(f"latent shape {tuple(z.shape[1:])} != {params.latent_shape}")
    logits = params.decoder(z)
    return logits[0] if single else logits


def hard_bits(logits) -> np.ndarray:
    return (torch.as_tensor(logits) > 0).to(torch.uint8).cpu().numpy()


def kl_loss(mu, logvar) -> torch.Tensor:
    """Mean over elements of ``KL(N(mu, exp(logvar)) || N(0, 1))``."""
    mu = torch.as_tensor(mu, dtype=torch.float32)
    logvar = torch.as_tensor(logvar, dtype=torch.float32).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
    return (0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)).mean()


def bce_loss(m, logits) -> torch.Tensor:
    """Binary cross-entropy summed over bits (averaged over a leading batch axis)."""
    logits = torch.as_tensor(logits, dtype=torch.float32)
    target = torch.as_tensor(np.asarray(m) if not isinstance(m, torch.Tensor) else m, dtype=torch.float32)
    if target.shape != logits.shape:
        raise ContractError(f"message shape {tuple(target.shape)} != logits shape {tuple(logits.shape)}")
    p = torch.sigmoid(logits).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_bit = -(target * torch.log(p) + (1 - target) * torch.log(1 - p))
    if per_bit.ndim == 1:
        return per_bit.sum()
    return per_bit.sum(-1).mean()


def joint_loss(m, logits, mu, logvar, weights: LossWeights) -> torch.Tensor:
    return weights.lambda1 * bce_loss(m, logits) + weights.lambda2 * kl_loss(mu, logvar)
