"""``latentmark`` command line: train, finetune, embed, extract, verify, attack, eval, register.

Artifacts live in a work directory::

    backend.lmk            toy diffusion backend (autoencoder + denoiser)
    codec.lmk              pretrained watermark codec
    codec_finetuned.lmk    decoder fine-tuned against attacks (used when present)
    registry.json          user-id -> identity payload

Exit codes: 0 success / detected, 3 not detected, 64 usage, 65 bad data, 70 internal.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .attacks import AttackSpec, apply_attack, table_attacks
from .codec import WatermarkCodec
from .detection import verify as verify_image
from .diffusion import Backend, GuidanceConfig
from .ecc import RSCConfig, bits_to_hex, default_ecc, hex_to_bits, rsc_decode, rsc_encode
from .errors import (AdapterMissingError, CapacityError, ConfigurationError, ContractError, FormatError,
                     LatentmarkError)
from .evaluation import EvalRun, run_gauntlet
from .registry import DEFAULT_MIN_DISTANCE, IdentityRegistry, registry_assign
from .toy import ToyBackend, ToyConfig, build_toy_backend
from .training import Extractor, FinetuneConfig, PretrainConfig, embed, finetune_decoder, pretrain_codec

EXIT_OK = 0
EXIT_NOT_DETECTED = 3
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_INTERNAL = 70

BACKEND_FILE = "backend.lmk"
CODEC_FILE = "codec.lmk"
FINETUNED_FILE = "codec_finetuned.lmk"
REGISTRY_FILE = "registry.json"

log = logging.getLogger("latentmark")

_BACKEND_ADAPTERS: dict[str, Callable[[], Backend]] = {}


def register_backend_adapter(name: str, factory: Callable[[], Backend]) -> None:
    """Make ``--backend adapter:NAME`` resolve to ``factory()`` (e.g. a pretrained LDM wrapper)."""
    _BACKEND_ADAPTERS[name] = factory


class UsageError(LatentmarkError):
    pass


@dataclass
class RunConfig:
    """Everything a command needs; loaded from ``--config`` JSON and overridden by flags."""

    workdir: str = "latentmark-run"
    backend: str = "toy"
    k: int = 48
    alpha: float = 0.01
    seed: int = 0
    paper_compat: bool = False
    guidance_scale: float = 5.0
    sample_steps: int = 20
    inversion_steps: int = 5
    min_distance: int = DEFAULT_MIN_DISTANCE
    toy: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def ecc(self) -> Optional[RSCConfig]:
        return default_ecc(self.k)

    @property
    def payload_length(self) -> int:
        return self.ecc.payload_length if self.ecc else self.k

    def path(self, name: str) -> Path:
        return Path(self.workdir) / name


# image files -------------------------------------------------------------------

def save_png(path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


# artifact loading --------------------------------------------------------------

def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise UsageError(f"{path} not found; {hint}")
    return path


def load_backend(cfg: RunConfig) -> Backend:
    if cfg.backend == "toy":
        return ToyBackend.load(_require(cfg.path(BACKEND_FILE), "run `latentmark train` first"))
    if cfg.backend.startswith("adapter:"):
        name = cfg.backend.split(":", 1)[1]
        if name not in _BACKEND_ADAPTERS:
            raise AdapterMissingError(f"no backend adapter registered under {name!r}")
        return _BACKEND_ADAPTERS[name]()
    raise ConfigurationError(f"--backend must be 'toy' or 'adapter:NAME', got {cfg.backend!r}")


def load_codec(cfg: RunConfig, path: Optional[str] = None) -> WatermarkCodec:
    if path is not None:
        codec = WatermarkCodec.load(_require(Path(path), "check --codec"))
    elif cfg.path(FINETUNED_FILE).exists():
        codec = WatermarkCodec.load(cfg.path(FINETUNED_FILE))
    else:
        codec = WatermarkCodec.load(_require(cfg.path(CODEC_FILE), "run `latentmark train` first"))
    if codec.k != cfg.k:
        raise UsageError(f"codec embeds k={codec.k} bits but --k is {cfg.k}")
    return codec


def load_registry(cfg: RunConfig) -> Optional[IdentityRegistry]:
    p = cfg.path(REGISTRY_FILE)
    return IdentityRegistry.load(p) if p.exists() else None


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def _expected_payload(args, cfg: RunConfig) -> np.ndarray:
    """Payload from --user, --payload (``nbits:hex``) or --bits (0/1 string)."""
    given = [x for x in (args.user, args.payload, args.bits) if x is not None]
    if len(given) != 1:
        raise UsageError("give exactly one of --user, --payload or --bits")
    if args.user is not None:
        reg = load_registry(cfg)
        if reg is None or args.user not in reg:
            raise UsageError(f"user {args.user!r} is not registered")
        payload = reg[args.user]
    elif args.payload is not None:
        try:
            payload = hex_to_bits(args.payload)
        except (ValueError, FormatError) as exc:
            raise UsageError(f"bad --payload {args.payload!r}: {exc}") from exc
    else:
        if not args.bits or set(args.bits) - {"0", "1"}:
            raise UsageError("--bits must be a string of 0s and 1s")
        payload = np.array([int(c) for c in args.bits], dtype=np.uint8)
    if payload.size != cfg.payload_length:
        ecc = cfg.ecc
        why = (f"the rate-1/{ecc.n} K={ecc.constraint_length} ECC for k={cfg.k} carries a "
               f"{ecc.payload_length}-bit payload" if ecc else f"k={cfg.k} has no ECC, so the payload is all {cfg.k} bits")
        raise UsageError(f"payload has {payload.size} bits but {why}")
    return payload


def _watermark_bits(payload: np.ndarray, cfg: RunConfig) -> np.ndarray:
    return rsc_encode(payload, cfg.ecc) if cfg.ecc else payload


# commands ----------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig) -> int:
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    summary = {"elapsed_seconds": {}}
    t0 = time.perf_counter()
    if cfg.backend == "toy":
        if cfg.path(BACKEND_FILE).exists() and not args.retrain_backend:
            backend = ToyBackend.load(cfg.path(BACKEND_FILE))
            summary["backend"] = "reused"
        else:
            toy_cfg = ToyConfig.from_dict(cfg.toy)
            backend = build_toy_backend(toy_cfg, log_path=cfg.path("backend_log.jsonl"))
            backend.save(cfg.path(BACKEND_FILE), metadata={"config": toy_cfg.to_dict()})
            summary["backend"] = str(cfg.path(BACKEND_FILE))
    else:
        backend = load_backend(cfg)
    summary["elapsed_seconds"]["backend"] = round(time.perf_counter() - t0, 1)
    t0 = time.perf_counter()
    pre = PretrainConfig(**{"seed": cfg.seed, **cfg.pretrain, "k": cfg.k,
                            "latent_shape": tuple(backend.latent_shape)})
    codec, records = pretrain_codec(pre, log_path=cfg.path("codec_log.jsonl"))
    codec.save(cfg.path(CODEC_FILE), metadata={"config": asdict(pre)})
    if cfg.path(FINETUNED_FILE).exists():
        cfg.path(FINETUNED_FILE).unlink()  # stale: it was tuned from the previous codec
    summary["elapsed_seconds"]["codec"] = round(time.perf_counter() - t0, 1)
    summary["codec"] = str(cfg.path(CODEC_FILE))
    summary["metrics"] = records[-1]
    _emit(summary)
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    backend = load_backend(cfg)
    codec = WatermarkCodec.load(_require(cfg.path(CODEC_FILE), "run `latentmark train` first"))
    ft = FinetuneConfig(**{"seed": cfg.seed, "inversion_steps": cfg.inversion_steps,
                           "sample_steps": cfg.sample_steps, **cfg.finetune})
    attacks = [AttackSpec.parse(a, cfg.seed) for a in args.attack] if args.attack else None
    t0 = time.perf_counter()
    tuned, records = finetune_decoder(codec, backend, ft, attacks, log_path=cfg.path("finetune_log.jsonl"))
    tuned.save(cfg.path(FINETUNED_FILE), metadata={"config": asdict(ft)})
    _emit({"codec": str(cfg.path(FINETUNED_FILE)), "before": records[-1]["before"], "after": records[-1]["after"],
           "elapsed_seconds": round(time.perf_counter() - t0, 1)})
    return EXIT_OK


def cmd_embed(args, cfg: RunConfig) -> int:
    payload = _expected_payload(args, cfg)
    backend = load_backend(cfg)
    codec = load_codec(cfg, args.codec)
    guidance = GuidanceConfig(cfg.guidance_scale, args.condition, cfg.sample_steps)
    image, bits = embed(payload, cfg.seed, codec, backend, guidance, cfg.ecc)
    save_png(args.out, image)
    _emit({"image": str(args.out), "payload": bits_to_hex(payload), "watermark": bits_to_hex(bits),
           "seed": cfg.seed, "guidance_scale": cfg.guidance_scale, "condition": args.condition})
    return EXIT_OK


def _extractor(cfg: RunConfig, codec_path) -> Extractor:
    return Extractor(load_backend(cfg), load_codec(cfg, codec_path), cfg.inversion_steps, cfg.ecc)


def cmd_extract(args, cfg: RunConfig) -> int:
    image = load_png(args.image)
    bits = _extractor(cfg, args.codec).extract_bits(image[None])[0]
    out = {"raw_bits": "".join(map(str, bits.tolist())), "raw_hex": bits_to_hex(bits)}
    payload = bits
    if cfg.ecc:
        payload, dist = rsc_decode(bits, cfg.ecc)
        out["payload"] = bits_to_hex(payload)
        out["corrected_errors"] = dist
    reg = load_registry(cfg)
    out["user"] = reg.lookup(payload) if reg is not None and reg.payload_length == payload.size else None
    _emit(out)
    return EXIT_OK


def cmd_verify(args, cfg: RunConfig) -> int:
    payload = _expected_payload(args, cfg)
    image = load_png(args.image)
    context = [AttackSpec.parse(a, cfg.seed) for a in args.attack] if args.attack else ()
    report = verify_image(image, _watermark_bits(payload, cfg), _extractor(cfg, args.codec), cfg.alpha,
                          paper_compat=cfg.paper_compat, registry=load_registry(cfg), attack_context=context)
    print(report.to_json())
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    return EXIT_OK if report.detected else EXIT_NOT_DETECTED


def cmd_attack(args, cfg: RunConfig) -> int:
    if not args.attack or len(args.attack) != 1:
        raise UsageError("attack needs exactly one --attack KIND:PARAM")
    spec = AttackSpec.parse(args.attack[0], cfg.seed)
    save_png(args.out, apply_attack(load_png(args.image), spec))
    _emit({"image": str(args.out), "attack": spec.to_dict()})
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    attacks = [None] + ([AttackSpec.parse(a, cfg.seed) for a in args.attack] if args.attack
                        else table_attacks(cfg.seed))
    run = EvalRun(backend=load_backend(cfg), codec=load_codec(cfg, args.codec), ecc=cfg.ecc, attacks=attacks,
                  n_images=args.n, seed=cfg.seed, alpha=cfg.alpha, guidance_scale=cfg.guidance_scale,
                  sample_steps=cfg.sample_steps, inversion_steps=cfg.inversion_steps,
                  n_controls=args.controls, paper_compat=cfg.paper_compat)
    result = run_gauntlet(run)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(result.to_json() + "\n")
    print(result.to_table())
    return EXIT_OK


def cmd_register(args, cfg: RunConfig) -> int:
    payload = registry_assign(cfg.path(REGISTRY_FILE), args.user_id, payload_length=cfg.payload_length,
                              min_distance=cfg.min_distance, seed=cfg.seed, note=args.note)
    _emit({"user": args.user_id, "payload": bits_to_hex(payload), "bits": "".join(map(str, payload.tolist()))})
    return EXIT_OK


# parser ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--workdir", help="artifact directory (default: latentmark-run)")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=int, choices=(16, 32, 48))
    common.add_argument("--alpha", type=float)
    common.add_argument("--backend", help="toy | adapter:NAME")
    common.add_argument("--paper-compat", action="store_true", default=None,
                        help="pin detection thresholds to 34/48 and 24/32")
    common.add_argument("--attack", action="append", metavar="KIND:PARAM")
    common.add_argument("--codec", help="codec checkpoint (default: fine-tuned if present)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="latentmark", description="Latent-space watermarking for diffusion models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train the toy backend and pretrain the codec")
    t.add_argument("--retrain-backend", action="store_true")
    t.set_defaults(func=cmd_train)

    sub.add_parser("finetune", parents=[common], help="fine-tune the decoder against attacks").set_defaults(
        func=cmd_finetune)

    def identity_args(sp):
        sp.add_argument("--user")
        sp.add_argument("--payload", help="nbits:hex")
        sp.add_argument("--bits", help="payload as a 0/1 string")

    e = sub.add_parser("embed", parents=[common], help="generate a watermarked image")
    identity_args(e)
    e.add_argument("--condition", type=int, help="class label (omit for unconditional)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_embed)

    x = sub.add_parser("extract", parents=[common], help="print raw bits, ECC payload and matched user")
    x.add_argument("image")
    x.set_defaults(func=cmd_extract)

    v = sub.add_parser("verify", parents=[common], help="test an image against an expected payload")
    v.add_argument("image")
    identity_args(v)
    v.add_argument("--report", help="also write the JSON report here")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("attack", parents=[common], help="apply one attack to an image")
    a.add_argument("image")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    ev = sub.add_parser("eval", parents=[common], help="bit/detection accuracy per attack")
    ev.add_argument("--n", type=int, default=200)
    ev.add_argument("--controls", type=int, default=0, help="unwatermarked control images")
    ev.add_argument("--out", help="JSON report path")
    ev.set_defaults(func=cmd_eval)

    r = sub.add_parser("register", parents=[common], help="assign an identity payload to a user")
    r.add_argument("user_id")
    r.add_argument("--note", default="")
    r.set_defaults(func=cmd_register)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for name in ("workdir", "seed", "k", "alpha", "backend", "paper_compat"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if cfg.k not in (16, 32, 48):
        raise ConfigurationError(f"k must be 16, 32 or 48, got {cfg.k}")
    if not 0 < cfg.alpha < 1:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {cfg.alpha}")
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, resolve_config(args))
    except (UsageError, ConfigurationError, ContractError, CapacityError, AdapterMissingError) as exc:
        print(f"latentmark: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, UnidentifiedImageError, json.JSONDecodeError) as exc:
        print(f"latentmark: bad input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error exit code
        log.debug("internal error", exc_info=True)
        print(f"latentmark: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
