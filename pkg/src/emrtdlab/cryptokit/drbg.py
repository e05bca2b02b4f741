"""Seedable deterministic random bit generators.

:class:`Drbg` is HMAC_DRBG (SHA-256) without reseeding.  Every component that
needs randomness takes a generator explicitly so a whole lab run can be
replayed from one seed.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from typing import Union

SeedLike = Union[bytes, str, int, None]


def _seed_bytes(seed: SeedLike) -> bytes:
    if seed is None:
        return os.urandom(32)
    if isinstance(seed, int):
        return b"int:" + str(seed).encode()
    if isinstance(seed, str):
        return b"str:" + seed.encode()
    return bytes(seed)


class Drbg:
    """HMAC_DRBG over SHA-256.

    Instances are single-owner mutable state and must not be shared between
    threads.
    """

    def __init__(self, seed: SeedLike = None, personalization: bytes = b""):
        self._key = b"\x00" * 32
        self._v = b"\x01" * 32
        self._update(_seed_bytes(seed) + personalization)

    def _hmac(self, key: bytes, data: bytes) -> bytes:
        return hmac.new(key, data, hashlib.sha256).digest()

    def _update(self, provided: bytes = b"") -> None:
        self._key = self._hmac(self._key, self._v + b"\x00" + provided)
        self._v = self._hmac(self._key, self._v)
        if provided:
            self._key = self._hmac(self._key, self._v + b"\x01" + provided)
            self._v = self._hmac(self._key, self._v)

    def random_bytes(self, n: int) -> bytes:
        if n < 0:
            raise ValueError("negative byte count")
        out = bytearray()
        while len(out) < n:
            self._v = self._hmac(self._key, self._v)
            out += self._v
        self._update()
        return bytes(out[:n])

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("upper bound must be positive")
        nbytes = (n.bit_length() + 7) // 8 + 8
        return int.from_bytes(self.random_bytes(nbytes), "big") % n

    def uniform(self, low: float, high: float) -> float:
        frac = int.from_bytes(self.random_bytes(7), "big") / float(1 << 56)
        return low + (high - low) * frac

    def choice(self, seq):
        return seq[self.randbelow(len(seq))]

    def fork(self, label: str) -> "Drbg":
        """Derive an independent child generator; advances this one."""
        return Drbg(self.random_bytes(32), personalization=label.encode())


class ConstantDrbg(Drbg):
    """Degenerate generator that repeats one byte forever.

    Models an implementation whose random number generation has failed.
    """

    def __init__(self, value: int = 0x5A):
        self.value = value & 0xFF

    def random_bytes(self, n: int) -> bytes:
        if n < 0:
            raise ValueError("negative byte count")
        return bytes([self.value]) * n

    def fork(self, label: str) -> "ConstantDrbg":
        return ConstantDrbg(self.value)


def drbg_bytes(drbg: Drbg, n: int) -> bytes:
    return drbg.random_bytes(n)
