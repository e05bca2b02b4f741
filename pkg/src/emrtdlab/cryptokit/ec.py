"""NIST P-256 arithmetic, ECDH and ECDSA.

Points are affine ``(x, y)`` tuples; the point at infinity is ``None``.
Internally multiplication runs in Jacobian coordinates.  No constant-time
guarantees are made.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Tuple

P = 0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF
A = P - 3
B = 0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B
N = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
GX = 0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296
GY = 0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5
G = (GX, GY)

COORD_LEN = 32
POINT_LEN = 1 + 2 * COORD_LEN

Point = Optional[Tuple[int, int]]
_Jac = Tuple[int, int, int]
_INF: _Jac = (1, 1, 0)


class InvalidPoint(ValueError):
    """Raised for off-curve, identity or badly encoded points."""


def is_on_curve(pt: Point) -> bool:
    if pt is None:
        return False
    x, y = pt
    if not (0 <= x < P and 0 <= y < P):
        return False
    return (y * y - (x * x * x - 3 * x + B)) % P == 0


def _dbl(p1: _Jac) -> _Jac:
    x1, y1, z1 = p1
    if z1 == 0 or y1 == 0:
        return _INF
    delta = z1 * z1 % P
    gamma = y1 * y1 % P
    beta = x1 * gamma % P
    alpha = 3 * (x1 - delta) * (x1 + delta) % P
    x3 = (alpha * alpha - 8 * beta) % P
    z3 = ((y1 + z1) ** 2 - gamma - delta) % P
    y3 = (alpha * (4 * beta - x3) - 8 * gamma * gamma) % P
    return x3, y3, z3


def _add(p1: _Jac, p2: _Jac) -> _Jac:
    x1, y1, z1 = p1
    x2, y2, z2 = p2
    if z1 == 0:
        return p2
    if z2 == 0:
        return p1
    z1z1 = z1 * z1 % P
    if z2 == 1:
        u1, s1 = x1, y1
        u2 = x2 * z1z1 % P
        s2 = y2 * z1 * z1z1 % P
    else:
        z2z2 = z2 * z2 % P
        u1 = x1 * z2z2 % P
        u2 = x2 * z1z1 % P
        s1 = y1 * z2 * z2z2 % P
        s2 = y2 * z1 * z1z1 % P
    h = (u2 - u1) % P
    r = (s2 - s1) % P
    if h == 0:
        return _dbl(p1) if r == 0 else _INF
    h2 = h * h % P
    h3 = h * h2 % P
    u1h2 = u1 * h2 % P
    x3 = (r * r - h3 - 2 * u1h2) % P
    y3 = (r * (u1h2 - x3) - s1 * h3) % P
    z3 = h * z1 * z2 % P
    return x3, y3, z3


def _to_affine(pj: _Jac) -> Point:
    x, y, z = pj
    if z == 0:
        return None
    zi = pow(z, -1, P)
    zi2 = zi * zi % P
    return x * zi2 % P, y * zi2 * zi % P


def _from_affine(pt: Point) -> _Jac:
    return _INF if pt is None else (pt[0], pt[1], 1)


def _mul_window(k: int, pt: Point) -> _Jac:
    base = _from_affine(pt)
    table = [_INF, base]
    for _ in range(14):
        table.append(_add(table[-1], base))
    acc = _INF
    for shift in range((k.bit_length() + 3) // 4 * 4 - 4, -4, -4):
        acc = _dbl(_dbl(_dbl(_dbl(acc))))
        nib = (k >> shift) & 0xF
        if nib:
            acc = _add(acc, table[nib])
    return acc


def _build_base_table() -> List[List[Point]]:
    # rows[i][j] = j * 16^i * G, affine so additions are mixed
    rows = []
    row_base = _from_affine(G)
    for _ in range(64):
        row = [None]
        acc = _INF
        for _ in range(15):
            acc = _add(acc, row_base)
            row.append(_to_affine(acc))
        rows.append(row)
        row_base = _dbl(_dbl(_dbl(_dbl(row_base))))
    return rows


_BASE_TABLE: Optional[List[List[Point]]] = None


def _base_mul(k: int) -> _Jac:
    global _BASE_TABLE
    if _BASE_TABLE is None:
        _BASE_TABLE = _build_base_table()
    acc = _INF
    i = 0
    while k:
        nib = k & 0xF
        if nib:
            acc = _add(acc, _from_affine(_BASE_TABLE[i][nib]))
        k >>= 4
        i += 1
    return acc


def scalar_mult(k: int, pt: Point) -> Point:
    """Return ``k * pt``; ``pt`` must already be a validated curve point."""
    k %= N
    if k == 0 or pt is None:
        return None
    if pt == G:
        return _to_affine(_base_mul(k))
    return _to_affine(_mul_window(k, pt))


def base_mult(k: int) -> Point:
    return scalar_mult(k, G)


def point_add(p1: Point, p2: Point) -> Point:
    return _to_affine(_add(_from_affine(p1), _from_affine(p2)))


def point_neg(pt: Point) -> Point:
    return None if pt is None else (pt[0], (-pt[1]) % P)


def encode_point(pt: Point) -> bytes:
    if pt is None:
        raise InvalidPoint("the point at infinity has no uncompressed encoding")
    return b"\x04" + pt[0].to_bytes(COORD_LEN, "big") + pt[1].to_bytes(COORD_LEN, "big")


def decode_point(data: bytes) -> Tuple[int, int]:
    """Parse an uncompressed point and check it lies on the curve."""
    if len(data) != POINT_LEN or data[0] != 0x04:
        raise InvalidPoint(f"expected {POINT_LEN}-byte uncompressed point")
    x = int.from_bytes(data[1 : 1 + COORD_LEN], "big")
    y = int.from_bytes(data[1 + COORD_LEN :], "big")
    pt = (x, y)
    if not is_on_curve(pt):
        raise InvalidPoint("point is not on P-256")
    return pt


def validate_point(pt: Point) -> Tuple[int, int]:
    if pt is None:
        raise InvalidPoint("identity point")
    if not is_on_curve(pt):
        raise InvalidPoint("point is not on P-256")
    return pt


def random_scalar(drbg) -> int:
    # 64 extra bits make the modular bias negligible and avoid rejection loops,
    # which matters for the degenerate constant generator
    raw = int.from_bytes(drbg.random_bytes(COORD_LEN + 8), "big")
    return 1 + raw % (N - 1)


@dataclass(frozen=True)
class EcKeyPair:
    private: int
    public: Tuple[int, int]

    @classmethod
    def generate(cls, drbg, generator: Point = G) -> "EcKeyPair":
        d = random_scalar(drbg)
        return cls(d, scalar_mult(d, generator))

    @classmethod
    def from_private(cls, d: int) -> "EcKeyPair":
        if not 1 <= d < N:
            raise ValueError("private scalar out of range")
        return cls(d, base_mult(d))

    @property
    def public_bytes(self) -> bytes:
        return encode_point(self.public)

    def __repr__(self):
        # keep scalars out of logs and tracebacks
        return f"EcKeyPair(public={encode_point(self.public)[:9].hex()}...)"


def ecdh(private: int, peer: Point) -> bytes:
    """x-coordinate of ``private * peer`` as 32 big-endian bytes."""
    validate_point(peer)
    shared = scalar_mult(private, peer)
    if shared is None:
        raise InvalidPoint("shared point is the identity")
    return shared[0].to_bytes(COORD_LEN, "big")


def _digest_int(digest: bytes) -> int:
    return int.from_bytes(digest[:COORD_LEN], "big")


def sign_digest(private: int, digest: bytes, drbg) -> bytes:
    """ECDSA over a precomputed digest; returns ``r || s`` (64 bytes)."""
    e = _digest_int(digest)
    while True:
        k = random_scalar(drbg)
        r_pt = base_mult(k)
        r = r_pt[0] % N
        if r == 0:
            continue
        s = pow(k, -1, N) * (e + r * private) % N
        if s == 0:
            continue
        return r.to_bytes(COORD_LEN, "big") + s.to_bytes(COORD_LEN, "big")


def verify_digest(public: Point, digest: bytes, signature: bytes) -> bool:
    if len(signature) != 2 * COORD_LEN or not is_on_curve(public):
        return False
    r = int.from_bytes(signature[:COORD_LEN], "big")
    s = int.from_bytes(signature[COORD_LEN:], "big")
    if not (1 <= r < N and 1 <= s < N):
        return False
    w = pow(s, -1, N)
    u1 = _digest_int(digest) * w % N
    u2 = r * w % N
    pt = _to_affine(_add(_base_mul(u1), _mul_window(u2, public)))
    if pt is None:
        return False
    return pt[0] % N == r


def sign(private: int, data: bytes, drbg) -> bytes:
    """ECDSA with SHA-256."""
    return sign_digest(private, hashlib.sha256(data).digest(), drbg)


def verify(public: Point, data: bytes, signature: bytes) -> bool:
    return verify_digest(public, hashlib.sha256(data).digest(), signature)
