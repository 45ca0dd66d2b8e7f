"""Recursive systematic convolutional (RSC) code with hard-decision Viterbi decoding.

Codeword layout: the systematic stream (payload followed by the ``K-1``
termination inputs) comes first, then one parity stream per feedforward
polynomial, each of the same length ``payload_length + K - 1``.

Polynomials are given in octal with the most significant bit tapping the
current register input, i.e. the usual convolutional-code convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError


@dataclass(frozen=True)
class RSCConfig:
    payload_length: int
    constraint_length: int = 7
    feedback: int = 0o171
    feedforward: tuple = (0o133, 0o165)

    def __post_init__(self):
        K = self.constraint_length
        if K < 2:
            raise ConfigurationError("constraint length must be >= 2")
        if self.payload_length < 1:
            raise ConfigurationError("payload_length must be positive")
        object.__setattr__(self, "feedforward", tuple(int(g) for g in self.feedforward))
        if len(self.feedforward) not in (1, 2):
            raise ConfigurationError("only rates 1/2 and 1/3 are supported")
        for g in (self.feedback, *self.feedforward):
            if not 0 < g < (1 << K):
                raise ConfigurationError(f"polynomial {oct(g)} does not fit constraint length {K}")
        if not self.feedback >> (K - 1) & 1:
            raise ConfigurationError("feedback polynomial must tap the register input")

    @property
    def n(self) -> int:
        """Output bits per trellis step (1/rate)."""
        return 1 + len(self.feedforward)

    @property
    def rate(self) -> float:
        return 1.0 / self.n

    @property
    def steps(self) -> int:
        return self.payload_length + self.constraint_length - 1

    @property
    def codeword_length(self) -> int:
        return self.n * self.steps

    @classmethod
    def for_codeword_length(cls, k: int, rate_n: int = 3, constraint_length: int = 7) -> "RSCConfig":
        """Largest payload whose codeword is exactly ``k`` bits."""
        if k % rate_n:
            raise ConfigurationError(f"codeword length {k} is not a multiple of n={rate_n}")
        payload = k // rate_n - (constraint_length - 1)
        ff = (0o133, 0o165) if rate_n == 3 else (0o133,)
        return cls(payload_length=payload, constraint_length=constraint_length, feedforward=ff)


def default_ecc(k: int) -> RSCConfig | None:
    """ECC paired with a watermark length: rate 1/3 for 48 bits, 1/2 for 32, none for 16."""
    if k == 48:
        return RSCConfig.for_codeword_length(48, rate_n=3)
    if k == 32:
        return RSCConfig.for_codeword_length(32, rate_n=2)
    return None


def _taps(poly: int, K: int) -> np.ndarray:
    # tap i multiplies the bit that entered i steps ago (i=0 is the current input)
    return np.array([(poly >> (K - 1 - i)) & 1 for i in range(K)], dtype=np.uint8)


@dataclass(frozen=True)
class _Trellis:
    next_state: np.ndarray  # (S, 2)
    outputs: np.ndarray  # (S, 2, n) output bits for input bit b
    tail_input: np.ndarray  # (S,) input bit that drives the feedback sum to zero


_TRELLIS_CACHE: dict = {}


def _trellis(cfg: RSCConfig) -> _Trellis:
    key = (cfg.constraint_length, cfg.feedback, cfg.feedforward)
    if key in _TRELLIS_CACHE:
        return _TRELLIS_CACHE[key]
    K = cfg.constraint_length
    m = K - 1
    S = 1 << m
    fb = _taps(cfg.feedback, K)
    ffs = [_taps(g, K) for g in cfg.feedforward]
    next_state = np.zeros((S, 2), dtype=np.int64)
    outputs = np.zeros((S, 2, cfg.n), dtype=np.uint8)
    tail_input = np.zeros(S, dtype=np.uint8)
    for s in range(S):
        # state bit j (MSB first) holds the register value delayed by j+1
        reg = [(s >> (m - 1 - j)) & 1 for j in range(m)]
        fb_sum = 0
        for j in range(m):
            fb_sum ^= fb[j + 1] & reg[j]
        tail_input[s] = fb_sum
        for u in (0, 1):
            a = u ^ fb_sum
            window = [a] + reg
            out = [u]
            for ff in ffs:
                p = 0
                for i in range(K):
                    p ^= ff[i] & window[i]
                out.append(p)
            outputs[s, u] = out
            ns = (a << (m - 1)) | (s >> 1)
            next_state[s, u] = ns
    tr = _Trellis(next_state, outputs, tail_input)
    _TRELLIS_CACHE[key] = tr
    return tr


def _as_bits(bits, what="bits") -> np.ndarray:
    arr = np.asarray(bits)
    if arr.ndim != 1 or not np.all((arr == 0) | (arr == 1)):
        raise ContractError(f"{what} must be a 1-D array of 0/1 values")
    return arr.astype(np.uint8)


def rsc_encode(payload, cfg: RSCConfig) -> np.ndarray:
    """Encode and terminate; returns the systematic block followed by the parity blocks."""
    u = _as_bits(payload, "payload")
    if u.size != cfg.payload_length:
        raise ContractError(
            f"payload has {u.size} bits, ECC configuration expects {cfg.payload_length}"
        )
    tr = _trellis(cfg)
    streams = np.zeros((cfg.n, cfg.steps), dtype=np.uint8)
    s = 0
    for i in range(cfg.steps):
        b = int(u[i]) if i < cfg.payload_length else int(tr.tail_input[s])
        streams[:, i] = tr.outputs[s, b]
        s = int(tr.next_state[s, b])
    assert s == 0, "termination failed to return the encoder to the zero state"
    return streams.reshape(-1)


def rsc_decode(received, cfg: RSCConfig) -> tuple[np.ndarray, int]:
    """Hard-decision Viterbi decoding.

    Returns the maximum-likelihood payload under the Hamming metric and the
    Hamming distance between ``received`` and the re-encoded decision.
    """
    r = _as_bits(received, "received codeword")
    if r.size != cfg.codeword_length:
        raise ContractError(
            f"received {r.size} bits, ECC configuration expects {cfg.codeword_length}"
        )
    tr = _trellis(cfg)
    S = tr.next_state.shape[0]
    symbols = r.reshape(cfg.n, cfg.steps).T  # (steps, n)
    inf = np.iinfo(np.int64).max // 4
    metric = np.full(S, inf, dtype=np.int64)
    metric[0] = 0
    prev_state = np.zeros((cfg.steps, S), dtype=np.int64)
    prev_input = np.zeros((cfg.steps, S), dtype=np.uint8)
    src = np.repeat(np.arange(S), 2)
    inp = np.tile(np.array([0, 1], dtype=np.uint8), S)
    dst = tr.next_state.reshape(-1)
    for i in range(cfg.steps):
        branch = np.count_nonzero(tr.outputs != symbols[i], axis=2).reshape(-1)
        cand = metric[src] + branch
        if i >= cfg.payload_length:
            # tail: only the terminating input is a valid branch
            cand = np.where(inp == tr.tail_input[src], cand, inf)
        new_metric = np.full(S, inf, dtype=np.int64)
        # lexsort keeps ties deterministic: lowest source state wins
        order = np.lexsort((src, cand, dst))
        first = np.ones(order.size, dtype=bool)
        first[1:] = dst[order][1:] != dst[order][:-1]
        winners = order[first]
        new_metric[dst[winners]] = cand[winners]
        prev_state[i, dst[winners]] = src[winners]
        prev_input[i, dst[winners]] = inp[winners]
        metric = np.minimum(new_metric, inf)
    s = 0
    decided = np.zeros(cfg.steps, dtype=np.uint8)
    for i in range(cfg.steps - 1, -1, -1):
        decided[i] = prev_input[i, s]
        s = prev_state[i, s]
    payload = decided[: cfg.payload_length].copy()
    distance = int(np.count_nonzero(rsc_encode(payload, cfg) != r))
    return payload, distance


def bits_to_hex(bits) -> str:
    """Big-endian hex, zero-padded on the right to a byte boundary, prefixed ``<nbits>:``."""
    b = _as_bits(bits)
    padded = np.concatenate([b, np.zeros((-b.size) % 8, dtype=np.uint8)])
    return f"{b.size}:{np.packbits(padded).tobytes().hex()}"


def hex_to_bits(text: str) -> np.ndarray:
    try:
        nbits_s, hexpart = text.split(":", 1)
        nbits = int(nbits_s)
        raw = np.frombuffer(bytes.fromhex(hexpart), dtype=np.uint8)
    except ValueError as exc:
        raise FormatError(f"malformed bit string {text!r}") from exc
    bits = np.unpackbits(raw)
    if nbits < 0 or nbits > bits.size or bits.size - nbits >= 8:
        raise FormatError(f"bit length {nbits} inconsistent with {raw.size} bytes")
    if np.any(bits[nbits:]):
        raise FormatError("non-zero padding bits")
    return bits[:nbits].copy()
