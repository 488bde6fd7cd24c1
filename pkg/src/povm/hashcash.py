"""Hashcash proof-of-work baseline: leading-zero-bit targets, sequential nonce scan."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

DIGEST_BITS = 256
NONCE_SPACE = 1 << 64


class OutOfRange(ValueError):
    pass


class Exhausted(Exception):
    """No nonce met the target within the attempt budget."""

    def __init__(self, attempts: int) -> None:
        super().__init__(f"no valid nonce after {attempts} attempts")
        self.attempts = attempts


@dataclass(frozen=True)
class Difficulty:
    leading_zero_bits: int

    def __post_init__(self) -> None:
        if not 0 <= self.leading_zero_bits <= 255:
            raise ValueError("leading_zero_bits must be in 0..255")

    @property
    def threshold(self) -> int:
        """Digests strictly below this value (read big-endian) meet the target."""
        return 1 << (DIGEST_BITS - self.leading_zero_bits)


@dataclass(frozen=True)
class MiningOutcome:
    nonce: bytes
    digest: bytes
    attempts: int


@dataclass
class HashCounter:
    """Running count of digest evaluations, the energy unit for proof-of-work."""

    hash_ops: int = 0


def meets_target(digest: bytes, d: Difficulty) -> bool:
    return int.from_bytes(digest, "big") < d.threshold


def encode_nonce(n: int) -> bytes:
    return struct.pack("<Q", n % NONCE_SPACE)


def mine(block_bytes: bytes, d: Difficulty, nonce_start: int | bytes = 0, max_attempts: int = 1 << 32,
         counter: HashCounter | None = None) -> MiningOutcome:
    """Scan nonces upward from ``nonce_start`` (wrapping at 2^64) until one meets ``d``.

    Every evaluated digest is added to ``counter``, including those of a failed scan.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    if isinstance(nonce_start, bytes):
        nonce_start = struct.unpack("<Q", nonce_start)[0]
    threshold = d.threshold
    prefix = hashlib.sha256(block_bytes)
    n = nonce_start
    for attempt in range(1, max_attempts + 1):
        h = prefix.copy()
        nonce = encode_nonce(n)
        h.update(nonce)
        digest = h.digest()
        if int.from_bytes(digest, "big") < threshold:
            if counter is not None:
                counter.hash_ops += attempt
            return MiningOutcome(nonce, digest, attempt)
        n = (n + 1) % NONCE_SPACE
    if counter is not None:
        counter.hash_ops += max_attempts
    raise Exhausted(max_attempts)


def verify(block_bytes: bytes, nonce: bytes, d: Difficulty) -> bool:
    return meets_target(hashlib.sha256(block_bytes + nonce).digest(), d)


def expected_attempts(d: Difficulty) -> int:
    if d.leading_zero_bits > 62:
        raise OutOfRange("expected_attempts supports at most 62 zero bits")
    return 1 << d.leading_zero_bits
