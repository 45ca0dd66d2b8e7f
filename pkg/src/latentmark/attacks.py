"""Seeded image perturbations used for adversarial fine-tuning and evaluation.

Images are float arrays ``(H, W, 3)`` with values in [0, 1]. Every attack
returns an array of the same shape and range and is a pure function of
``(image, spec)``.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import AdapterMissingError, ConfigurationError, ContractError

KINDS = ("brightness", "gaussian_noise", "contrast", "hue_shift", "jpeg", "gaussian_blur", "resize", "external")

IDENTITY_STRENGTH = {
    "brightness": 1.0,
    "gaussian_noise": 0.0,
    "contrast": 1.0,
    "hue_shift": 0.0,
    "jpeg": 100,
    "gaussian_blur": 1,
    "resize": 1.0,
}

# evaluation strengths of the standard attack table
TABLE_STRENGTH = {
    "brightness": 2.0,
    "gaussian_noise": 0.05,
    "contrast": 2.0,
    "hue_shift": 0.25,
    "jpeg": 50,
    "gaussian_blur": 7,
    "resize": 0.3,
}

# adversarial-training pool: table strengths used as range endpoints
TRAINING_POOL = {
    "gaussian_noise": (0.0, 0.05),
    "gaussian_blur": (3, 5, 7),
    "brightness": (0.5, 2.0),
    "contrast": (0.5, 2.0),
    "hue_shift": (-0.25, 0.25),
    "jpeg": (50, 90),
    "resize": (0.3, 1.0),
}

_EXTERNAL: dict[str, Callable[[np.ndarray], np.ndarray]] = {}


def register_external_attack(name: str, attack: Callable[[np.ndarray], np.ndarray]) -> None:
    """Register an image->image attacker (BM3D, learned compression, diffusion regeneration...)."""
    _EXTERNAL[name] = attack


def unregister_external_attack(name: str) -> None:
    _EXTERNAL.pop(name, None)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    strength: float = 0.0
    seed: int = 0
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        s = self.strength
        k = self.kind
        ok = {
            "brightness": s >= 0,
            "contrast": s >= 0,
            "gaussian_noise": s >= 0,
            "hue_shift": -0.5 <= s <= 0.5,
            "jpeg": float(s).is_integer() and 1 <= s <= 100,
            "gaussian_blur": float(s).is_integer() and s >= 1 and int(s) % 2 == 1,
            "resize": 0 < s <= 1,
            "external": self.name is not None,
        }[k]
        if not ok:
            raise ConfigurationError(f"strength {s!r} outside the valid domain of {k}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")

    @property
    def label(self) -> str:
        if self.kind == "external":
            return f"external:{self.name}"
        return f"{self.kind}:{self.strength:g}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "AttackSpec":
        """Parse ``KIND:PARAM`` (``external:NAME`` for adapters, bare ``KIND`` for table strength)."""
        kind, _, param = text.partition(":")
        if kind == "external":
            return cls("external", 0.0, seed, name=param or None)
        if kind not in TABLE_STRENGTH:
            raise ConfigurationError(f"unknown attack kind {kind!r}")
        strength = float(param) if param else float(TABLE_STRENGTH[kind])
        return cls(kind, strength, seed)


def table_attacks(seed: int = 0) -> list[AttackSpec]:
    return [AttackSpec(k, float(v), seed) for k, v in TABLE_STRENGTH.items()]


def _rgb_to_hsv(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(-1)
    minc = rgb.min(-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], -1)


def _hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    return np.stack([r, g, b], -1)


def _gaussian_kernel(size: int) -> np.ndarray:
    # sigma convention shared by OpenCV/torchvision when only the size is given
    sigma = 0.3 * ((size - 1) * 0.5 - 1) + 0.8
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _jpeg(img: np.ndarray, quality: int) -> np.ndarray:
    u8 = np.round(img * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, "RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0


def _resize(img: np.ndarray, scale: float) -> np.ndarray:
    h, w = img.shape[:2]
    sh, sw = max(1, round(h * scale)), max(1, round(w * scale))
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        ch = Image.fromarray(img[..., c].astype(np.float32), mode="F")
        small = ch.resize((sw, sh), Image.BILINEAR)
        out[..., c] = np.asarray(small.resize((w, h), Image.BILINEAR))
    return out


def apply_attack(image: np.ndarray, spec: AttackSpec) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ContractError("image values must lie in [0, 1]")
    k, s = spec.kind, spec.strength
    if k == "external":
        if spec.name not in _EXTERNAL:
            raise AdapterMissingError(f"no external attacker registered under {spec.name!r}")
        out = np.asarray(_EXTERNAL[spec.name](img.copy()), dtype=np.float32)
        if out.shape != img.shape:
            raise ContractError(f"external attacker {spec.name!r} changed the image shape")
    elif k == "brightness":
        out = img * s
    elif k == "contrast":
        gray = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        mean = gray.mean()
        out = mean + s * (img - mean)
    elif k == "gaussian_noise":
        if s == 0:
            return img.copy()
        rng = np.random.default_rng(int(spec.seed))
        out = img + rng.normal(0.0, s, img.shape).astype(np.float32)
    elif k == "hue_shift":
        if s == 0:
            return img.copy()
        hsv = _rgb_to_hsv(img.astype(np.float64))
        hsv[..., 0] = (hsv[..., 0] + s) % 1.0
        out = _hsv_to_rgb(hsv)
    elif k == "jpeg":
        out = _jpeg(img, int(s))
    elif k == "gaussian_blur":
        if int(s) == 1:
            return img.copy()
        kern = _gaussian_kernel(int(s))
        out = ndimage.convolve1d(img, kern, axis=0, mode="reflect")
        out = ndimage.convolve1d(out, kern, axis=1, mode="reflect")
    elif k == "resize":
        if s == 1.0:
            return img.copy()
        out = _resize(img, s)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_attack_batch(images: np.ndarray, spec: Optional[AttackSpec]) -> np.ndarray:
    """Apply ``spec`` to each image; image ``i`` uses seed ``spec.seed + i``."""
    if spec is None:
        return np.asarray(images, dtype=np.float32).copy()
    out = np.empty_like(np.asarray(images, dtype=np.float32))
    for i, img in enumerate(images):
        out[i] = apply_attack(img, AttackSpec(spec.kind, spec.strength, (int(spec.seed) + i) % 2**64, spec.name))
    return out


def sample_random_attack(rng_seed: int) -> AttackSpec:
    """Uniform kind from the training pool, then a uniform parameter within its range."""
    rng = np.random.default_rng(int(rng_seed))
    kinds = list(TRAINING_POOL)
    kind = kinds[int(rng.integers(len(kinds)))]
    lo_hi = TRAINING_POOL[kind]
    if kind == "gaussian_blur":
        strength = float(lo_hi[int(rng.integers(len(lo_hi)))])
    elif kind == "jpeg":
        strength = float(rng.integers(lo_hi[0], lo_hi[1] + 1))
    else:
        strength = float(rng.uniform(*lo_hi))
    seed = int(rng.integers(0, 2**63))
    return AttackSpec(kind, strength, seed)
