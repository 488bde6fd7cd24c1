"""Canonical little-endian byte encoding shared by every digest in the package.

Integers are fixed width, sequences and byte strings are prefixed with a
u32 length. Field order is fixed by the caller.
"""

from __future__ import annotations

import hashlib
import struct

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)
U64_MASK = (1 << 64) - 1


class DecodeError(ValueError):
    """Raised when a byte buffer does not hold a well-formed encoding."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, v: int) -> Writer:
        self._parts.append(struct.pack("<B", v))
        return self

    def u32(self, v: int) -> Writer:
        self._parts.append(struct.pack("<I", v))
        return self

    def u64(self, v: int) -> Writer:
        self._parts.append(struct.pack("<Q", v))
        return self

    def raw(self, b: bytes) -> Writer:
        self._parts.append(bytes(b))
        return self

    def blob(self, b: bytes) -> Writer:
        self.u32(len(b))
        self._parts.append(bytes(b))
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(bytes(data))
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise DecodeError(f"truncated buffer: need {n} bytes at offset {self._pos}")
        out = self._data[self._pos:self._pos + n].tobytes()
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        return self._take(self.u32())

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def expect_end(self) -> None:
        if self.remaining:
            raise DecodeError(f"{self.remaining} trailing bytes")


def u64_digest(*parts: bytes | str | int) -> int:
    """Map a tuple of labelled parts to a 64-bit identifier."""
    w = Writer()
    for p in parts:
        if isinstance(p, str):
            w.blob(p.encode())
        elif isinstance(p, int):
            w.u64(p & U64_MASK)
        else:
            w.blob(p)
    return int.from_bytes(sha256(w.getvalue())[:8], "little")
