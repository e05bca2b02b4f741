"""Constants and computations shared by the card and the inspection system."""

from __future__ import annotations

import enum
import hashlib
import hmac
from typing import Optional, Tuple

from . import codec
from .codec import TlvNode, tlv
from .cryptokit import ec
from .cryptokit.symmetric import (
    CipherSuite,
    KdfCounter,
    SessionKeys,
    cbc_decrypt,
    cbc_encrypt,
    kdf,
    mac,
    pad,
)

EMRTD_AID = bytes.fromhex("A0000002471001")
MF_FID = b"\x3F\x00"

FID_COM = 0x011E
FID_SOD = 0x011D
FID_SIGN_CERT = 0xC001


def dg_fid(number: int) -> int:
    return 0x0100 + number


FID_TO_DG = {dg_fid(n): n for n in range(1, 17)}

READ_CHUNK = 223

# instruction bytes
INS_SELECT = 0xA4
INS_READ_BINARY = 0xB0
INS_GET_CHALLENGE = 0x84
INS_EXTERNAL_AUTH = 0x82
INS_MSE = 0x22
INS_GENERAL_AUTH = 0x86
INS_INTERNAL_AUTH = 0x88
INS_VERIFY = 0x20
INS_PSO = 0x2A

CLA_PLAIN = 0x00
CLA_CHAIN = 0x10
CLA_SM = 0x0C

# MSE:SET P1/P2 pairs
MSE_PACE = (0xC1, 0xA4)
MSE_CA = (0x41, 0xA6)
MSE_TA = (0x81, 0xA4)

# PSO P1/P2 pairs
PSO_VERIFY_CERT = (0x00, 0xBE)
PSO_HASH = (0x90, 0xA0)
PSO_SIGN = (0x9E, 0x9A)

PIN_REFERENCE = 0x80
PIN_RETRIES = 3

PACE_OIDS = {
    CipherSuite.TDES_RETAIL: bytes.fromhex("04007F00070202040201"),
    CipherSuite.AES128_CMAC: bytes.fromhex("04007F00070202040202"),
}
CA_OIDS = {
    CipherSuite.TDES_RETAIL: bytes.fromhex("04007F00070202030201"),
    CipherSuite.AES128_CMAC: bytes.fromhex("04007F00070202030202"),
}
SUITE_BY_PACE_OID = {v: k for k, v in PACE_OIDS.items()}
SUITE_BY_CA_OID = {v: k for k, v in CA_OIDS.items()}

PACE_NONCE_LEN = 16

TAG_DYN_AUTH = 0x7C
TAG_OID = 0x80
TAG_PASSWORD_REF = 0x83
TAG_KEY_DO = 0x7F49
TAG_POINT = 0x86
TAG_HASH_DO = 0x90


class PasswordType(enum.IntEnum):
    MRZ = 1
    CAN = 2
    PIN = 3

    @property
    def label(self) -> str:
        return self.name.lower()


def pace_password_key(password: bytes, suite: CipherSuite) -> bytes:
    return kdf(password, KdfCounter.PACE, suite)


def encrypt_nonce(key: bytes, nonce: bytes, suite: CipherSuite) -> bytes:
    return cbc_encrypt(suite, key, b"\x00" * suite.block_size, nonce)


def decrypt_nonce(key: bytes, z: bytes, suite: CipherSuite) -> bytes:
    return cbc_decrypt(suite, key, b"\x00" * suite.block_size, z)


def map_generator(nonce: bytes, shared_point) -> Tuple[int, int]:
    """Generic mapping: ``G' = s*G + H``."""
    mapped = ec.point_add(ec.base_mult(int.from_bytes(nonce, "big")), shared_point)
    if mapped is None:
        raise ec.InvalidPoint("mapped generator is the identity")
    return mapped


def public_key_do(oid: bytes, point) -> bytes:
    return tlv(TAG_KEY_DO, tlv(0x06, oid), tlv(TAG_POINT, ec.encode_point(point))).encode()


def auth_token(keys: SessionKeys, oid: bytes, peer_point) -> bytes:
    """PACE authentication token over the peer's ephemeral public key."""
    data = public_key_do(oid, peer_point)
    if keys.suite is CipherSuite.TDES_RETAIL:
        data = pad(data, 8)
    return mac(keys.suite, keys.k_mac, data)


def dyn_auth(*children: TlvNode) -> bytes:
    return tlv(TAG_DYN_AUTH, *children).encode()


def parse_dyn_auth(data: bytes) -> TlvNode:
    node = codec.tlv_decode_exact(data)
    if node.tag != TAG_DYN_AUTH:
        raise codec.MalformedTlv("expected dynamic authentication data")
    return node


def single_object(node: TlvNode, tag: int) -> bytes:
    """Value of the only child of ``node``, which must carry ``tag``."""
    if len(node.children) != 1 or node.children[0].tag != tag:
        raise codec.MalformedTlv(f"expected exactly one object {tag:#x}")
    return node.children[0].value


def bac_keys(seed: bytes) -> Tuple[bytes, bytes]:
    return (kdf(seed, KdfCounter.ENC, CipherSuite.TDES_RETAIL),
            kdf(seed, KdfCounter.MAC, CipherSuite.TDES_RETAIL))


def bac_cryptogram(k_enc: bytes, k_mac: bytes, plaintext: bytes) -> bytes:
    """3DES-CBC encryption followed by a retail MAC, as exchanged during BAC."""
    suite = CipherSuite.TDES_RETAIL
    enc = cbc_encrypt(suite, k_enc, b"\x00" * 8, plaintext)
    return enc + mac(suite, k_mac, pad(enc, 8))


def bac_open(k_enc: bytes, k_mac: bytes, cryptogram: bytes) -> Optional[bytes]:
    """Verify and decrypt a BAC cryptogram; ``None`` if the MAC is wrong."""
    suite = CipherSuite.TDES_RETAIL
    if len(cryptogram) != 40:
        return None
    enc, tag = cryptogram[:32], cryptogram[32:]
    if not hmac.compare_digest(mac(suite, k_mac, pad(enc, 8)), tag):
        return None
    return cbc_decrypt(suite, k_enc, b"\x00" * 8, enc)


def bac_session(k_ifd: bytes, k_ic: bytes, rnd_ic: bytes, rnd_ifd: bytes) -> SessionKeys:
    seed = bytes(a ^ b for a, b in zip(k_ifd, k_ic))
    ssc = int.from_bytes(rnd_ic[4:] + rnd_ifd[4:], "big")
    return SessionKeys.derive(seed, CipherSuite.TDES_RETAIL, ssc)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()
