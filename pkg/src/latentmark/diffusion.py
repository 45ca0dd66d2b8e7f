"""Noise schedules, DDIM stepping/inversion and classifier-free guidance.

The closed-form helpers (``forward_diffuse``, ``predict_x0``, ``ddim_step``,
``ddim_invert_step``, ``cfg_noise``) only use ``+``, ``*`` and ``/`` with
Python-float coefficients, so they accept numpy arrays and torch tensors
alike. ``sample`` and ``invert`` drive a :class:`Backend`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Optional, Protocol, runtime_checkable

import numpy as np
import torch

from .errors import ConfigurationError, ContractError, NumericDomainError

ALPHA_BAR_FLOOR = 1e-8
SCHEDULE_KINDS = ("linear_beta", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha_bar[0..T]`` with ``alpha_bar[0] == 1``."""

    kind: str
    num_train_steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.num_train_steps + 1,):
            raise ConfigurationError(
                f"alpha_bar must have length T+1={self.num_train_steps + 1}, got {ab.shape}"
            )
        if ab[0] != 1.0 or np.any(ab <= 0) or np.any(np.diff(ab) > 0):
            raise ConfigurationError("alpha_bar must start at 1, stay positive and never increase")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.num_train_steps

    def sigma(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar[t])

    def signal(self, t: int) -> float:
        return math.sqrt(self.alpha_bar[t])

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.num_train_steps == other.num_train_steps
            and np.array_equal(self.alpha_bar, other.alpha_bar)
        )

    def __hash__(self):
        return hash((self.kind, self.num_train_steps, self.alpha_bar.tobytes()))


def make_schedule(kind: str = "linear_beta", T: int = 1000) -> NoiseSchedule:
    """Build a schedule of ``T`` training steps.

    ``linear_beta`` spaces beta linearly over [1e-4, 0.02] (so
    ``alpha_bar[1] == 1 - 1e-4``); ``cosine`` uses the squared-cosine
    cumulative form with offset 0.008 and betas capped at 0.999.
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 2:
        raise ConfigurationError(f"T must be an integer >= 2, got {T!r}")
    T = int(T)
    if kind == "linear_beta":
        betas = np.linspace(1e-4, 0.02, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind=kind, num_train_steps=T, alpha_bar=alpha_bar)


def _check_t(t: int, sched: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t <= sched.T:
        raise ContractError(f"timestep {t} outside [0, {sched.T}]")
    return t


def _check_same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ContractError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _safe_alpha_bar(t: int, sched: NoiseSchedule) -> float:
    ab = float(sched.alpha_bar[t])
    if ab < ALPHA_BAR_FLOOR:
        raise NumericDomainError(f"alpha_bar[{t}]={ab:.3e} below floor {ALPHA_BAR_FLOOR}")
    return ab


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule):
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``."""
    _check_same_shape(x0, eps, "forward_diffuse")
    t = _check_t(t, sched)
    if t == 0:
        return x0 * 1.0
    return sched.signal(t) * x0 + sched.sigma(t) * eps


def predict_x0(x_t, eps_hat, t: int, sched: NoiseSchedule):
    _check_same_shape(x_t, eps_hat, "predict_x0")
    t = _check_t(t, sched)
    ab = _safe_alpha_bar(t, sched)
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic DDIM update from ``t`` down to ``t_prev``."""
    if not t_prev < t:
        raise ContractError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    x0_hat = predict_x0(x_t, eps_hat, t, sched)
    t_prev = _check_t(t_prev, sched)
    if t_prev == 0:
        return x0_hat
    return sched.signal(t_prev) * x0_hat + sched.sigma(t_prev) * eps_hat


def ddim_invert_step(x_t, eps_hat, t: int, t_next: int, sched: NoiseSchedule):
    """Inverse DDIM update from ``t`` up to ``t_next`` holding ``eps_hat`` fixed."""
    if not t_next > t:
        raise ContractError(f"ddim_invert_step needs t_next > t, got t={t}, t_next={t_next}")
    x0_hat = predict_x0(x_t, eps_hat, t, sched)
    t_next = _check_t(t_next, sched)
    return sched.signal(t_next) * x0_hat + sched.sigma(t_next) * eps_hat


def cfg_noise(eps_cond, eps_uncond, w: float):
    """Classifier-free guidance ``eps_uncond + w * (eps_cond - eps_uncond)``.

    Evaluated as ``w * eps_cond + (1 - w) * eps_uncond`` so that w=1 and w=0
    return the conditional/unconditional prediction bit-for-bit.
    """
    _check_same_shape(eps_cond, eps_uncond, "cfg_noise")
    if w < 0:
        raise ContractError(f"guidance scale must be >= 0, got {w}")
    return w * eps_cond + (1.0 - w) * eps_uncond


def inference_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Uniform-stride timesteps ``[T, ..., 0]`` (``num_steps + 1`` entries, strictly decreasing)."""
    if num_steps < 0 or num_steps > T:
        raise ContractError(f"number of steps must lie in [0, {T}], got {num_steps}")
    if num_steps == 0:
        return np.array([T], dtype=np.int64)
    return np.round(np.linspace(T, 0, num_steps + 1)).astype(np.int64)


@runtime_checkable
class Backend(Protocol):
    """What an external latent diffusion model must provide to host the watermark.

    ``encode`` maps a batch of images ``(N, H, W, C)`` in [0, 1] to latents
    ``(N, c, h, w)``; ``decode`` is its counterpart. ``predict_noise`` takes a
    latent batch, an integer timestep and a condition (``None`` means the
    null/empty prompt).
    """

    latent_shape: tuple

    def encode(self, images: np.ndarray) -> torch.Tensor: ...

    def decode(self, latents: torch.Tensor) -> np.ndarray: ...

    def predict_noise(self, latents: torch.Tensor, t: int, condition: Any = None) -> torch.Tensor: ...

    def schedule(self) -> NoiseSchedule: ...


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.0
    condition: Any = None
    num_inference_steps: int = 20

    def __post_init__(self):
        if self.scale < 0:
            raise ConfigurationError(f"guidance scale must be >= 0, got {self.scale}")
        if self.num_inference_steps < 1:
            raise ConfigurationError("num_inference_steps must be positive")


def _as_batch(z) -> tuple[torch.Tensor, bool]:
    z = torch.as_tensor(z, dtype=torch.float32)
    if z.ndim == 3:
        return z.unsqueeze(0), True
    if z.ndim != 4:
        raise ContractError(f"latent must be (C,H,W) or (N,C,H,W), got shape {tuple(z.shape)}")
    return z, False


def guided_noise(backend: Backend, x: torch.Tensor, t: int, guidance: GuidanceConfig) -> torch.Tensor:
    if guidance.condition is None or guidance.scale == 1.0:
        return backend.predict_noise(x, t, guidance.condition)
    eps_c = backend.predict_noise(x, t, guidance.condition)
    if guidance.scale == 0.0:
        return backend.predict_noise(x, t, None)
    eps_u = backend.predict_noise(x, t, None)
    return cfg_noise(eps_c, eps_u, guidance.scale)


@torch.no_grad()
def sample_latents(z_T, guidance: GuidanceConfig, backend: Backend) -> torch.Tensor:
    """Run DDIM from ``z_T`` at t=T down to a clean latent at t=0."""
    z, single = _as_batch(z_T)
    if not torch.isfinite(z).all():
        raise NumericDomainError("z_T contains non-finite values")
    sched = backend.schedule()
    if guidance.num_inference_steps > sched.T:
        raise ConfigurationError("num_inference_steps exceeds the schedule length")
    ts = inference_timesteps(sched.T, guidance.num_inference_steps)
    x = z
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps = guided_noise(backend, x, int(t), guidance)
        x = ddim_step(x, eps, int(t), int(t_prev), sched)
    return x[0] if single else x


def sample(z_T, guidance: GuidanceConfig, backend: Backend) -> np.ndarray:
    """Generate images from initial latents (deterministic, no hidden RNG)."""
    x0 = sample_latents(z_T, guidance, backend)
    single = x0.ndim == 3
    images = backend.decode(x0.unsqueeze(0) if single else x0)
    return images[0] if single else images


@torch.no_grad()
def invert_latents(x0, steps: int, backend: Backend) -> torch.Tensor:
    """Zero-text DDIM inversion of clean latents from t=0 up to t=T."""
    x, single = _as_batch(x0)
    sched = backend.schedule()
    ts = inference_timesteps(sched.T, steps)[::-1]
    for t, t_next in zip(ts[:-1], ts[1:]):
        eps = backend.predict_noise(x, int(t), None)
        x = ddim_invert_step(x, eps, int(t), int(t_next), sched)
    return x[0] if single else x


def invert(images: np.ndarray, steps: int, backend: Backend) -> torch.Tensor:
    """Estimate the initial latent of (a batch of) images; ``steps=0`` returns the encoding."""
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    latents = backend.encode(images[None] if single else images)
    z = invert_latents(latents, steps, backend)
    return z[0] if single else z


def cosine_similarity(a, b) -> float:
    a = torch.as_tensor(a, dtype=torch.float64).flatten()
    b = torch.as_tensor(b, dtype=torch.float64).flatten()
    return float(a @ b / (a.norm() * b.norm()))
