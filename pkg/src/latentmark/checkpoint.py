"""Versioned ``LMK1`` checkpoint container.

Layout::

    b"LMK1" | uint32 LE header length | UTF-8 JSON header | tensor blobs

The header carries the section tag, an optional noise-schedule block, free
metadata and a table of tensors (name, dtype, shape, offset, nbytes) whose
little-endian bytes follow in name order. Keys are sorted and no wall-clock
values are written, so identical parameters give identical files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import torch

from .diffusion import NoiseSchedule
from .errors import FormatError

MAGIC = b"LMK1"
FORMAT_VERSION = 1


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.ascontiguousarray(value)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def dumps(section: str, tensors: Mapping[str, Any], *, schedule: Optional[NoiseSchedule] = None,
          metadata: Optional[Mapping[str, Any]] = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "section": section,
        "metadata": dict(metadata or {}),
        "schedule": None if schedule is None else {
            "kind": schedule.kind,
            "num_train_steps": schedule.num_train_steps,
            "alpha_bar": [float(a).hex() for a in schedule.alpha_bar],
        },
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)


def loads(data: bytes, *, expect_section: Optional[str] = None):
    """Parse a container; returns ``(section, tensors, schedule, metadata)``."""
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("not an LMK1 checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("corrupt checkpoint header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')!r}")
    section = header["section"]
    if expect_section is not None and section != expect_section:
        raise FormatError(f"expected section {expect_section!r}, found {section!r}")
    body = data[8 + hlen :]
    tensors = {}
    for e in header["tensors"]:
        chunk = body[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise FormatError(f"truncated tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    sched = None
    if header.get("schedule"):
        s = header["schedule"]
        sched = NoiseSchedule(kind=s["kind"], num_train_steps=s["num_train_steps"],
                              alpha_bar=np.array([float.fromhex(a) for a in s["alpha_bar"]]))
    return section, tensors, sched, header.get("metadata", {})


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, section: str, tensors, **kwargs) -> None:
    atomic_write_bytes(path, dumps(section, tensors, **kwargs))


def load(path, **kwargs):
    return loads(Path(path).read_bytes(), **kwargs)


def state_dict_tensors(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_dict(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state)
