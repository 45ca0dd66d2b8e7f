"""User-id -> identity payload registry persisted as JSON.

Payloads are spaced by a minimum pairwise Hamming distance so a few residual
bit errors after ECC cannot silently turn one user into another. Writes go
through a temp file + rename under an exclusive file lock.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from filelock import FileLock

from .checkpoint import atomic_write_bytes
from .errors import CapacityError, ConfigurationError, ContractError, FormatError

FORMAT_TAG = "latentmark-registry"
DEFAULT_MIN_DISTANCE = 4
EXHAUSTIVE_MAX_BITS = 20
RANDOM_TRIES = 4096


@dataclass
class Identity:
    payload: np.ndarray
    created_at: str = ""
    note: str = ""

    def to_dict(self) -> dict:
        return {"payload": "".join(map(str, self.payload.tolist())), "created_at": self.created_at, "note": self.note}


def _parse_bits(s: str, length: int) -> np.ndarray:
    if len(s) != length or set(s) - {"0", "1"}:
        raise FormatError(f"payload {s!r} is not a {length}-bit string")
    return np.frombuffer(s.encode(), dtype=np.uint8) - ord("0")


@dataclass
class IdentityRegistry:
    payload_length: int
    min_distance: int = DEFAULT_MIN_DISTANCE
    users: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.payload_length < 1:
            raise ConfigurationError("payload_length must be positive")
        if self.min_distance < 1:
            raise ConfigurationError("min_distance must be >= 1 (payloads must be unique)")

    # mapping-style access used by detection.attribute
    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for uid, ident in self.users.items():
            yield uid, ident.payload

    def __len__(self) -> int:
        return len(self.users)

    def __contains__(self, user_id: str) -> bool:
        return user_id in self.users

    def __getitem__(self, user_id: str) -> np.ndarray:
        return self.users[user_id].payload

    def lookup(self, payload) -> Optional[str]:
        p = np.asarray(payload, dtype=np.uint8)
        for uid, bits in self.items():
            if np.array_equal(bits, p):
                return uid
        return None

    def matrix(self) -> np.ndarray:
        if not self.users:
            return np.zeros((0, self.payload_length), dtype=np.uint8)
        return np.stack([i.payload for i in self.users.values()])

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "version": 1,
            "payload_length": self.payload_length,
            "min_distance": self.min_distance,
            "users": {uid: self.users[uid].to_dict() for uid in sorted(self.users)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "IdentityRegistry":
        if d.get("format") != FORMAT_TAG or d.get("version") != 1:
            raise FormatError("not a latentmark registry document")
        reg = cls(int(d["payload_length"]), int(d["min_distance"]))
        for uid, entry in d["users"].items():
            reg.users[uid] = Identity(_parse_bits(entry["payload"], reg.payload_length),
                                      entry.get("created_at", ""), entry.get("note", ""))
        return reg

    @classmethod
    def load(cls, path) -> "IdentityRegistry":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"corrupt registry {path}: {exc}") from exc

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_json().encode())

    def assign(self, user_id: str, *, seed: int = 0, note: str = "", created_at: Optional[str] = None) -> np.ndarray:
        """Add ``user_id`` with a fresh payload at distance >= ``min_distance`` from all others."""
        if user_id in self.users:
            raise ContractError(f"user {user_id!r} is already registered")
        payload = fresh_payload(self.matrix(), self.payload_length, self.min_distance, _user_seed(seed, user_id))
        if created_at is None:
            created_at = datetime.now(timezone.utc).isoformat(timespec="seconds")
        self.users[user_id] = Identity(payload, created_at, note)
        return payload


def _user_seed(seed: int, user_id: str) -> int:
    h = hashlib.sha256(f"{seed}:{user_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def _ok(existing: np.ndarray, cand: np.ndarray, floor: int) -> bool:
    return existing.shape[0] == 0 or int((existing != cand).sum(1).min()) >= floor


def fresh_payload(existing: np.ndarray, length: int, floor: int, seed: int) -> np.ndarray:
    """Random payload at Hamming distance >= ``floor`` from every row of ``existing``.

    Tries seeded random draws first; short payloads fall back to an exhaustive
    scan so a ``CapacityError`` really means no admissible word is left.
    """
    if floor > length:
        raise CapacityError(f"distance floor {floor} exceeds payload length {length}")
    existing = np.asarray(existing, dtype=np.uint8).reshape(-1, length)
    rng = np.random.default_rng(seed)
    for _ in range(RANDOM_TRIES):
        cand = rng.integers(0, 2, length).astype(np.uint8)
        if _ok(existing, cand, floor):
            return cand
    if length > EXHAUSTIVE_MAX_BITS:
        raise CapacityError(f"no payload found at distance >= {floor} after {RANDOM_TRIES} draws")
    words = np.arange(1 << length, dtype=np.int64)
    words = words[rng.permutation(words.size)]
    cand_bits = ((words[:, None] >> np.arange(length - 1, -1, -1)) & 1).astype(np.uint8)
    ok = np.ones(words.size, dtype=bool)
    for row in existing:
        ok &= (cand_bits != row).sum(1) >= floor
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        raise CapacityError(f"registry full: no {length}-bit payload at distance >= {floor} from {len(existing)} users")
    return cand_bits[idx[0]]


def registry_assign(path, user_id: str, *, payload_length: Optional[int] = None,
                    min_distance: int = DEFAULT_MIN_DISTANCE, seed: int = 0, note: str = "",
                    created_at: Optional[str] = None) -> np.ndarray:
    """Locked read-modify-write: load (or create) the registry at ``path`` and assign ``user_id``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        if path.exists():
            reg = IdentityRegistry.load(path)
            if payload_length is not None and payload_length != reg.payload_length:
                raise ContractError(f"registry payload length is {reg.payload_length}, not {payload_length}")
        else:
            if payload_length is None:
                raise ContractError("payload_length is required to create a registry")
            reg = IdentityRegistry(payload_length, min_distance)
        payload = reg.assign(user_id, seed=seed, note=note, created_at=created_at)
        reg.save(path)
    return payload
