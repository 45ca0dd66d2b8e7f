"""Shared fixtures: trained reference artifacts (cached on disk) and acceptance-line reporting.

The reference run trains the toy backend, pretrains a k=48 codec and
fine-tunes its decoder by calling the CLI exactly as a user would. That
takes roughly 20-25 minutes on one CPU core, so the result is cached under
``LATENTMARK_TEST_CACHE`` (default ``<repo>/.artifact-cache``), keyed by a
hash of the configuration and of the modules that influence training.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from pathlib import Path

import pytest
import torch

import latentmark
from latentmark import cli
from latentmark.codec import WatermarkCodec
from latentmark.toy import ToyBackend

REPO = Path(__file__).resolve().parents[1]
SRC = Path(latentmark.__file__).resolve().parent
TRAINING_SOURCES = ("attacks.py", "codec.py", "diffusion.py", "toy.py", "training.py", "checkpoint.py")

# the configuration every artifact-dependent test runs against
REFERENCE_CONFIG = {"k": 48, "seed": 0, "guidance_scale": 5.0, "sample_steps": 20, "inversion_steps": 5}

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def _cache_key() -> str:
    h = hashlib.sha256(json.dumps(REFERENCE_CONFIG, sort_keys=True).encode())
    for name in TRAINING_SOURCES:
        h.update((SRC / name).read_bytes())
    h.update(torch.__version__.encode())
    return h.hexdigest()[:16]


class Artifacts:
    def __init__(self, root: Path):
        self.root = root
        self.config_path = root / "config.json"
        self.backend = ToyBackend.load(root / cli.BACKEND_FILE)
        self.codec = WatermarkCodec.load(root / cli.CODEC_FILE)
        self.finetuned = WatermarkCodec.load(root / cli.FINETUNED_FILE)
        self.train_summary = json.loads((root / "train.json").read_text())
        self.finetune_summary = json.loads((root / "finetune.json").read_text())
        el = self.train_summary["elapsed_seconds"]
        self.timing = {"train_backend_seconds": el["backend"], "train_codec_seconds": el["codec"],
                       "finetune_seconds": self.finetune_summary["elapsed_seconds"]}
        self.timing["total_seconds"] = sum(self.timing.values())

    def workdir_copy(self, dest: Path) -> Path:
        """A fresh work directory holding copies of the trained checkpoints."""
        dest.mkdir(parents=True, exist_ok=True)
        for name in (cli.BACKEND_FILE, cli.CODEC_FILE, cli.FINETUNED_FILE):
            shutil.copy(self.root / name, dest / name)
        return dest


def _run_cli(argv, out_path: Path) -> None:
    import contextlib
    import io

    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(argv)
    if code != 0:
        raise RuntimeError(f"latentmark {' '.join(argv)} exited with {code}:\n{buf.getvalue()}")
    out_path.write_text(buf.getvalue())


def build_reference(root: Path) -> None:
    tmp = root.with_name(root.name + ".partial")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    cfg_path = tmp / "config.json"
    cfg_path.write_text(json.dumps({**REFERENCE_CONFIG, "workdir": str(tmp)}, indent=2))
    _run_cli(["train", "--config", str(cfg_path)], tmp / "train.json")
    _run_cli(["finetune", "--config", str(cfg_path)], tmp / "finetune.json")
    cfg_path.write_text(json.dumps({**REFERENCE_CONFIG, "workdir": str(root)}, indent=2))
    shutil.rmtree(root, ignore_errors=True)
    tmp.rename(root)


@pytest.fixture(scope="session")
def artifacts() -> Artifacts:
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))
    base = Path(os.environ.get("LATENTMARK_TEST_CACHE", REPO / ".artifact-cache"))
    root = base / _cache_key()
    if not (root / "finetune.json").exists():
        build_reference(root)
    return Artifacts(root)
