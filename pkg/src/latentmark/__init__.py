"""Latent-space watermarking for latent diffusion models.

A message (optionally RSC-encoded) is mapped by a learned encoder to the
initial noise latent ``z_T``; generation proceeds unchanged. Verification
inverts the image back to ``z_T`` with DDIM, decodes the bits and applies a
binomial hypothesis test.
"""

from .attacks import AttackSpec, apply_attack, apply_attack_batch, table_attacks
from .codec import WatermarkCodec, decode_latent, encode_message
from .detection import DetectionReport, detect, fpr_exceed, min_threshold, verify
from .diffusion import GuidanceConfig, NoiseSchedule, invert, make_schedule, sample
from .ecc import RSCConfig, default_ecc, rsc_decode, rsc_encode
from .errors import (AdapterMissingError, CapacityError, ConfigurationError, ContractError, FormatError,
                     LatentmarkError, NumericDomainError, TrainingError)
from .evaluation import EvalRun, inversion_steps_ablation, run_gauntlet, strength_sweep, guidance_sweep
from .registry import IdentityRegistry, registry_assign
from .toy import ToyBackend, ToyConfig, build_toy_backend
from .training import Extractor, FinetuneConfig, PretrainConfig, embed, finetune_decoder, pretrain_codec

__version__ = "0.1.0"
