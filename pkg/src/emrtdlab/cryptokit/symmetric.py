"""Block-cipher modes, padding, MACs and key derivation for secure messaging.

The raw block ciphers come from ``cryptography``; CBC chaining, ISO 9797-1
padding, the retail MAC, AES-CMAC and the key derivation function are written
out here.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

from cryptography.hazmat.decrepit.ciphers.algorithms import TripleDES
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

MAC_LEN = 8
KEY_LEN = 16


class CryptoError(ValueError):
    pass


class PaddingError(CryptoError):
    pass


class CipherSuite(enum.Enum):
    TDES_RETAIL = "tdes"
    AES128_CMAC = "aes128"

    @property
    def block_size(self) -> int:
        return 8 if self is CipherSuite.TDES_RETAIL else 16

    @property
    def key_len(self) -> int:
        return KEY_LEN

    @property
    def mac_len(self) -> int:
        return MAC_LEN

    @property
    def ssc_len(self) -> int:
        return self.block_size


class KdfCounter(enum.IntEnum):
    ENC = 1
    MAC = 2
    PACE = 3


def _tdes_key(key: bytes) -> bytes:
    if len(key) == 8:
        return key * 3
    if len(key) == 16:
        return key + key[:8]
    if len(key) == 24:
        return key
    raise CryptoError(f"bad TDES key length {len(key)}")


def _algorithm(suite: CipherSuite, key: bytes):
    if suite is CipherSuite.AES128_CMAC:
        if len(key) != 16:
            raise CryptoError(f"bad AES-128 key length {len(key)}")
        return algorithms.AES(key)
    return TripleDES(_tdes_key(key))


def ecb_encrypt_block(suite: CipherSuite, key: bytes, block: bytes) -> bytes:
    enc = Cipher(_algorithm(suite, key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def ecb_decrypt_block(suite: CipherSuite, key: bytes, block: bytes) -> bytes:
    dec = Cipher(_algorithm(suite, key), modes.ECB()).decryptor()
    return dec.update(block) + dec.finalize()


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def cbc_encrypt(suite: CipherSuite, key: bytes, iv: bytes, plaintext: bytes) -> bytes:
    bs = suite.block_size
    if len(plaintext) % bs:
        raise CryptoError(f"plaintext length {len(plaintext)} not a multiple of {bs}")
    if len(iv) != bs:
        raise CryptoError(f"IV must be {bs} bytes")
    enc = Cipher(_algorithm(suite, key), modes.ECB()).encryptor()
    out = bytearray()
    prev = iv
    for i in range(0, len(plaintext), bs):
        prev = enc.update(_xor(plaintext[i : i + bs], prev))
        out += prev
    return bytes(out)


def cbc_decrypt(suite: CipherSuite, key: bytes, iv: bytes, ciphertext: bytes) -> bytes:
    bs = suite.block_size
    if len(ciphertext) % bs:
        raise CryptoError(f"ciphertext length {len(ciphertext)} not a multiple of {bs}")
    if len(iv) != bs:
        raise CryptoError(f"IV must be {bs} bytes")
    dec = Cipher(_algorithm(suite, key), modes.ECB()).decryptor()
    out = bytearray()
    prev = iv
    for i in range(0, len(ciphertext), bs):
        block = ciphertext[i : i + bs]
        out += _xor(dec.update(block), prev)
        prev = block
    return bytes(out)


def pad(data: bytes, block_size: int) -> bytes:
    """ISO/IEC 9797-1 padding method 2."""
    padded = data + b"\x80"
    return padded + b"\x00" * (-len(padded) % block_size)


def unpad(data: bytes) -> bytes:
    stripped = data.rstrip(b"\x00")
    if not stripped or stripped[-1] != 0x80 or len(data) - len(stripped) > 15:
        raise PaddingError("no 0x80 padding marker")
    return stripped[:-1]


def retail_mac(key: bytes, data: bytes) -> bytes:
    """ISO/IEC 9797-1 MAC algorithm 3 with DES; ``data`` must be padded."""
    if len(key) != 16:
        raise CryptoError("retail MAC needs a 16-byte key")
    if len(data) % 8:
        raise CryptoError("retail MAC input must be padded to 8 bytes")
    ka, kb = key[:8], key[8:]
    enc_a = Cipher(TripleDES(ka * 3), modes.ECB()).encryptor()
    h = b"\x00" * 8
    for i in range(0, len(data), 8):
        h = enc_a.update(_xor(h, data[i : i + 8]))
    h = ecb_decrypt_block(CipherSuite.TDES_RETAIL, kb, h)
    return ecb_encrypt_block(CipherSuite.TDES_RETAIL, ka, h)


def _dbl_block(block: bytes) -> bytes:
    n = int.from_bytes(block, "big") << 1
    if n >> 128:
        n = (n & ((1 << 128) - 1)) ^ 0x87
    return n.to_bytes(16, "big")


def aes_cmac(key: bytes, data: bytes) -> bytes:
    """Full 16-byte AES-CMAC (RFC 4493)."""
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    k1 = _dbl_block(enc.update(b"\x00" * 16))
    k2 = _dbl_block(k1)
    if data and len(data) % 16 == 0:
        last = _xor(data[-16:], k1)
        body = data[:-16]
    else:
        tail = len(data) % 16
        last = _xor(pad(data[len(data) - tail :], 16), k2)
        body = data[: len(data) - tail]
    x = b"\x00" * 16
    for i in range(0, len(body), 16):
        x = enc.update(_xor(x, body[i : i + 16]))
    return enc.update(_xor(x, last))


def mac(suite: CipherSuite, key: bytes, data: bytes) -> bytes:
    """8-byte secure-messaging MAC for the suite."""
    if suite is CipherSuite.TDES_RETAIL:
        return retail_mac(key, data)
    return aes_cmac(key, data)[:MAC_LEN]


def adjust_parity(key: bytes) -> bytes:
    """Set each byte to odd parity (DES convention)."""
    out = bytearray()
    for b in key:
        b &= 0xFE
        out.append(b | (bin(b).count("1") % 2 == 0))
    return bytes(out)


def kdf(seed: bytes, counter: int, suite: CipherSuite) -> bytes:
    if not seed:
        raise CryptoError("empty key seed")
    key = hashlib.sha1(seed + int(counter).to_bytes(4, "big")).digest()[:KEY_LEN]
    if suite is CipherSuite.TDES_RETAIL:
        key = adjust_parity(key)
    return key


@dataclass
class SessionKeys:
    """Live secure-messaging keys plus the send sequence counter."""

    k_enc: bytes
    k_mac: bytes
    suite: CipherSuite
    ssc: int = 0

    def increment(self) -> bytes:
        self.ssc = (self.ssc + 1) % (1 << (8 * self.suite.ssc_len))
        return self.ssc_bytes

    @property
    def ssc_bytes(self) -> bytes:
        return self.ssc.to_bytes(self.suite.ssc_len, "big")

    @classmethod
    def derive(cls, shared: bytes, suite: CipherSuite, ssc: int = 0) -> "SessionKeys":
        return cls(kdf(shared, KdfCounter.ENC, suite), kdf(shared, KdfCounter.MAC, suite), suite, ssc)

    def copy(self) -> "SessionKeys":
        return SessionKeys(self.k_enc, self.k_mac, self.suite, self.ssc)

    def __repr__(self):
        return f"SessionKeys(suite={self.suite.value}, ssc={self.ssc_bytes.hex()})"
