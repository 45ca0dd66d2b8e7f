"""Batch evaluation: per-attack bit/detection accuracy, strength sweeps and ablations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .attacks import AttackSpec, IDENTITY_STRENGTH, apply_attack_batch
from .codec import WatermarkCodec
from .detection import min_threshold
from .diffusion import Backend, GuidanceConfig
from .ecc import RSCConfig, rsc_decode, rsc_encode
from .errors import AdapterMissingError, ContractError
from .training import Extractor, generate_images, watermark_latents


@dataclass
class EvalRun:
    backend: Backend
    codec: WatermarkCodec
    ecc: Optional[RSCConfig] = None
    attacks: Sequence[Optional[AttackSpec]] = (None,)
    n_images: int = 200
    seed: int = 0
    alpha: float = 0.01
    guidance_scale: float = 5.0
    sample_steps: int = 20
    inversion_steps: int = 5
    n_controls: int = 0
    paper_compat: bool = False

    def __post_init__(self):
        if self.n_images < 1:
            raise ContractError("n_images must be >= 1")


@dataclass
class AttackRow:
    attack: str
    n: int = 0
    bit_accuracy: float = float("nan")
    bit_accuracy_std: float = float("nan")
    detection_rate: float = float("nan")
    payload_recovery_rate: float = float("nan")
    exact_match_rate: float = float("nan")
    systematic_match_rate: float = float("nan")
    skipped: Optional[str] = None


@dataclass
class EvalResult:
    k: int
    threshold: int
    alpha: float
    rows: list = field(default_factory=list)
    control_detection_rate: Optional[float] = None
    n_controls: int = 0

    def row(self, label: str) -> AttackRow:
        for r in self.rows:
            if r.attack == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        """Aligned text table with ``bit/detect`` cells plus payload recovery."""
        head = f"{'attack':<22} {'bit/detect':>13} {'payload':>8} {'exact':>7}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            if r.skipped:
                lines.append(f"{r.attack:<22} {'skipped: ' + r.skipped:>13}")
                continue
            lines.append(f"{r.attack:<22} {r.bit_accuracy:>6.3f}/{r.detection_rate:<6.3f} "
                         f"{r.payload_recovery_rate:>8.3f} {r.exact_match_rate:>7.3f}")
        if self.control_detection_rate is not None:
            lines.append(f"{'control (no watermark)':<22} {'------/' + format(self.control_detection_rate, '.3f'):>13}")
        return "\n".join(lines)


def _label(spec: Optional[AttackSpec]) -> str:
    return "none" if spec is None else spec.label


def _payloads(run: EvalRun, n: int, rng: np.random.Generator):
    if run.ecc is not None:
        payloads = rng.integers(0, 2, (n, run.ecc.payload_length)).astype(np.uint8)
        bits = np.stack([rsc_encode(p, run.ecc) for p in payloads])
    else:
        payloads = rng.integers(0, 2, (n, run.codec.k)).astype(np.uint8)
        bits = payloads
    if bits.shape[1] != run.codec.k:
        raise ContractError(f"watermark length {bits.shape[1]} != codec k={run.codec.k}")
    return payloads, bits


def watermarked_set(run: EvalRun, n: Optional[int] = None):
    """Deterministic (payloads, watermark bits, clean images) for a run."""
    n = run.n_images if n is None else n
    rng = np.random.default_rng(run.seed)
    payloads, bits = _payloads(run, n, rng)
    labels = rng.integers(0, getattr(run.backend, "n_classes", 1), n)
    z = watermark_latents(bits, run.seed, run.codec)
    images = generate_images(z, run.backend, GuidanceConfig(run.guidance_scale, labels, run.sample_steps))
    return payloads, bits, images


def score(run: EvalRun, payloads, bits, images, spec: Optional[AttackSpec], extractor: Extractor) -> AttackRow:
    try:
        attacked = apply_attack_batch(images, spec)
    except AdapterMissingError as exc:
        return AttackRow(_label(spec), skipped=str(exc))
    got = extractor.extract_bits(attacked)
    tau = min_threshold(run.codec.k, run.alpha, paper_compat=run.paper_compat)
    matches = (got == bits).sum(1)
    per_image = matches / run.codec.k
    if run.ecc is not None:
        rec = np.array([np.array_equal(rsc_decode(g, run.ecc)[0], p) for g, p in zip(got, payloads)])
        systematic = np.all(got[:, : run.ecc.payload_length] == payloads, axis=1)
    else:
        rec = systematic = np.all(got == bits, axis=1)
    exact = np.all(got == bits, axis=1)
    return AttackRow(
        attack=_label(spec),
        n=len(images),
        bit_accuracy=float(per_image.mean()),
        bit_accuracy_std=float(per_image.std(ddof=1)) if len(images) > 1 else 0.0,
        detection_rate=float((matches >= tau).mean()),
        payload_recovery_rate=float(rec.mean()),
        exact_match_rate=float(exact.mean()),
        systematic_match_rate=float(systematic.mean()),
    )


def control_detection_rate(run: EvalRun, n: int) -> float:
    """Detection rate on generations from ordinary N(0, I) latents against random messages."""
    gen = torch.Generator().manual_seed(run.seed + 99_991)
    rng = np.random.default_rng(run.seed + 99_991)
    z = torch.randn((n, *run.codec.latent_shape), generator=gen)
    labels = rng.integers(0, getattr(run.backend, "n_classes", 1), n)
    images = generate_images(z, run.backend, GuidanceConfig(run.guidance_scale, labels, run.sample_steps))
    _, bits = _payloads(run, n, rng)
    got = Extractor(run.backend, run.codec, run.inversion_steps).extract_bits(images)
    tau = min_threshold(run.codec.k, run.alpha, paper_compat=run.paper_compat)
    return float(((got == bits).sum(1) >= tau).mean())


def run_gauntlet(run: EvalRun) -> EvalResult:
    """Embed ``n_images`` random payloads, apply each attack, extract and aggregate."""
    payloads, bits, images = watermarked_set(run)
    extractor = Extractor(run.backend, run.codec, run.inversion_steps, run.ecc)
    result = EvalResult(k=run.codec.k, threshold=min_threshold(run.codec.k, run.alpha, paper_compat=run.paper_compat),
                        alpha=run.alpha)
    for spec in run.attacks:
        result.rows.append(score(run, payloads, bits, images, spec, extractor))
    if run.n_controls:
        result.control_detection_rate = control_detection_rate(run, run.n_controls)
        result.n_controls = run.n_controls
    return result


@dataclass
class Curve:
    parameter: str
    values: list
    rows: list

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_table(self) -> str:
        lines = [f"{self.parameter:>10} {'bit_acc':>8} {'detect':>7} {'payload':>8}"]
        for v, r in zip(self.values, self.rows):
            lines.append(f"{v:>10g} {r.bit_accuracy:>8.3f} {r.detection_rate:>7.3f} {r.payload_recovery_rate:>8.3f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"parameter": self.parameter, "values": list(self.values), "rows": [asdict(r) for r in self.rows]}

    def render_svg(self, path) -> None:
        """Vector plot of bit accuracy and detection rate (needs matplotlib)."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(self.values, self.column("bit_accuracy"), "o-", label="bit accuracy")
        ax.plot(self.values, self.column("detection_rate"), "s--", label="detection rate")
        ax.set_xlabel(self.parameter)
        ax.set_ylim(0, 1.02)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)


def strength_sweep(attack_kind: str, strengths: Sequence[float], run: EvalRun) -> Curve:
    """One EvalResult row per strength (same watermarked set, same attack seed)."""
    if list(strengths) != sorted(strengths):
        raise ContractError("strengths must be sorted ascending")
    payloads, bits, images = watermarked_set(run)
    extractor = Extractor(run.backend, run.codec, run.inversion_steps, run.ecc)
    rows = []
    for s in strengths:
        spec = None if s == IDENTITY_STRENGTH.get(attack_kind) else AttackSpec(attack_kind, float(s), run.seed)
        row = score(run, payloads, bits, images, spec, extractor)
        row.attack = f"{attack_kind}:{s:g}"
        rows.append(row)
    return Curve(attack_kind, list(strengths), rows)


def guidance_sweep(scales: Sequence[float], run: EvalRun) -> Curve:
    """Regenerate the watermarked set at each guidance scale; no attack."""
    rows = []
    for w in scales:
        r = replace(run, guidance_scale=float(w))
        payloads, bits, images = watermarked_set(r)
        row = score(r, payloads, bits, images, None, Extractor(r.backend, r.codec, r.inversion_steps, r.ecc))
        row.attack = f"guidance:{w:g}"
        rows.append(row)
    return Curve("guidance_scale", list(scales), rows)


def stabilization_step(steps: Sequence[int], rates: Sequence[float], tol: float = 0.02) -> int:
    """First step count from which every later detection rate stays within ``tol`` of the last one."""
    rates = list(rates)
    final = rates[-1]
    for i, s in enumerate(steps):
        if all(abs(r - final) <= tol for r in rates[i:]):
            return int(s)
    return int(steps[-1])


def inversion_steps_ablation(steps_list: Sequence[int], run: EvalRun, tol: float = 0.02):
    """Detection/bit accuracy versus number of inversion steps; returns ``(curve, stabilization_step)``."""
    if not steps_list:
        raise ContractError("steps_list must be non-empty")
    payloads, bits, images = watermarked_set(run)
    rows = []
    for s in steps_list:
        row = score(run, payloads, bits, images, None, Extractor(run.backend, run.codec, int(s), run.ecc))
        row.attack = f"inversion:{s}"
        rows.append(row)
    curve = Curve("inversion_steps", list(steps_list), rows)
    return curve, stabilization_step(steps_list, curve.column("detection_rate"), tol)
