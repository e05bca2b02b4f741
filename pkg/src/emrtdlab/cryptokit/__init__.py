"""Cryptographic primitives shared by every protocol in the lab."""

from .drbg import ConstantDrbg, Drbg, drbg_bytes
from .ec import (
    EcKeyPair,
    InvalidPoint,
    decode_point,
    ecdh,
    encode_point,
    sign,
    sign_digest,
    verify,
    verify_digest,
)
from .symmetric import (
    CipherSuite,
    CryptoError,
    KdfCounter,
    PaddingError,
    SessionKeys,
    aes_cmac,
    cbc_decrypt,
    cbc_encrypt,
    kdf,
    mac,
    pad,
    retail_mac,
    unpad,
)

__all__ = [
    "CipherSuite", "ConstantDrbg", "CryptoError", "Drbg", "EcKeyPair", "InvalidPoint",
    "KdfCounter", "PaddingError", "SessionKeys", "aes_cmac", "cbc_decrypt", "cbc_encrypt",
    "decode_point", "drbg_bytes", "ecdh", "encode_point", "kdf", "mac", "pad", "retail_mac",
    "sign", "sign_digest", "unpad", "verify", "verify_digest",
]
