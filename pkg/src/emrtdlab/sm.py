"""Secure messaging: protecting APDUs with DO'87 / DO'97 / DO'99 / DO'8E.

Both directions pre-increment the send sequence counter held in
:class:`SessionKeys`.  For the TDES suite the IV is zero; for AES it is the
encrypted counter.
"""

from __future__ import annotations

import hmac

from . import codec
from .codec import CommandApdu, ResponseApdu, TlvNode, tlv
from .cryptokit.symmetric import (
    CipherSuite,
    CryptoError,
    SessionKeys,
    cbc_decrypt,
    cbc_encrypt,
    ecb_encrypt_block,
    mac,
    pad,
    unpad,
)

TAG_CRYPTOGRAM = 0x87
TAG_LE = 0x97
TAG_STATUS = 0x99
TAG_MAC = 0x8E
PADDING_INDICATOR = 0x01
CLA_SM = 0x0C


class SmError(Exception):
    """A protected APDU failed verification or was malformed."""


def is_protected(cla: int) -> bool:
    return cla & 0x0C == 0x0C


def indicates_sm(cla: int) -> bool:
    """Class bits b4-b3 announce some form of secure messaging."""
    return cla & 0x0C != 0


def _iv(keys: SessionKeys, ssc: bytes) -> bytes:
    if keys.suite is CipherSuite.TDES_RETAIL:
        return b"\x00" * 8
    return ecb_encrypt_block(keys.suite, keys.k_enc, ssc)


def _encrypt(keys: SessionKeys, ssc: bytes, data: bytes) -> bytes:
    bs = keys.suite.block_size
    return cbc_encrypt(keys.suite, keys.k_enc, _iv(keys, ssc), pad(data, bs))


def _decrypt(keys: SessionKeys, ssc: bytes, body: bytes) -> bytes:
    if not body or body[0] != PADDING_INDICATOR:
        raise SmError("bad padding-content indicator")
    try:
        return unpad(cbc_decrypt(keys.suite, keys.k_enc, _iv(keys, ssc), body[1:]))
    except CryptoError as exc:
        raise SmError(f"cryptogram rejected: {exc}") from exc


def _mac(keys: SessionKeys, ssc: bytes, data: bytes) -> bytes:
    return mac(keys.suite, keys.k_mac, pad(ssc + data, keys.suite.block_size))


def _encode_le(le: int) -> bytes:
    return bytes([le]) if le <= 0xFF else le.to_bytes(2, "big")


def wrap_command(keys: SessionKeys, cmd: CommandApdu) -> CommandApdu:
    ssc = keys.increment()
    bs = keys.suite.block_size
    cla = cmd.cla | CLA_SM
    header = pad(bytes([cla, cmd.ins, cmd.p1, cmd.p2]), bs)
    objects = b""
    if cmd.data:
        objects += tlv(TAG_CRYPTOGRAM, bytes([PADDING_INDICATOR]) + _encrypt(keys, ssc, cmd.data)).encode()
    if cmd.le is not None:
        objects += tlv(TAG_LE, _encode_le(cmd.le)).encode()
    cc = _mac(keys, ssc, header + objects)
    return CommandApdu(cla, cmd.ins, cmd.p1, cmd.p2, objects + tlv(TAG_MAC, cc).encode(), le=0)



def _split_objects(data: bytes, allowed: tuple) -> dict:
    """Parse DOs that must appear in the order given by ``allowed``, MAC last."""
    try:
        nodes = codec.tlv_decode_all(data)
    except codec.CodecError as exc:
        raise SmError(f"malformed secure messaging objects: {exc}") from exc
    found = {}
    order = list(allowed)
    for node in nodes:
        if node.tag not in order:
            raise SmError(f"unexpected or misplaced object {node.tag:#x}")
        order = order[order.index(node.tag) + 1 :]
        found[node.tag] = node
    if TAG_MAC not in found or nodes[-1].tag != TAG_MAC:
        raise SmError("missing MAC object")
    if len(found[TAG_MAC].value) != 8:
        raise SmError("MAC object must hold 8 bytes")
    return found


def _raw(node: TlvNode) -> bytes:
    return node.encode() if node is not None else b""


def unwrap_command(keys: SessionKeys, protected: CommandApdu) -> CommandApdu:
    """Verify and decrypt a protected command (card side)."""
    if not is_protected(protected.cla):
        raise SmError("command is not protected")
    if protected.le != 0:
        raise SmError("protected command must carry Le = 0")
    ssc = keys.increment()
    objs = _split_objects(protected.data, (TAG_CRYPTOGRAM, TAG_LE, TAG_MAC))
    bs = keys.suite.block_size
    header = pad(bytes([protected.cla, protected.ins, protected.p1, protected.p2]), bs)
    signed = header + _raw(objs.get(TAG_CRYPTOGRAM)) + _raw(objs.get(TAG_LE))
    if not hmac.compare_digest(_mac(keys, ssc, signed), objs[TAG_MAC].value):
        raise SmError("command MAC mismatch")
    data = b""
    if TAG_CRYPTOGRAM in objs:
        data = _decrypt(keys, ssc, objs[TAG_CRYPTOGRAM].value)
        if not data:
            raise SmError("empty cryptogram")
    le = None
    if TAG_LE in objs:
        raw = objs[TAG_LE].value
        if len(raw) not in (1, 2):
            raise SmError("bad Le object")
        le = int.from_bytes(raw, "big")
    try:
        return CommandApdu(protected.cla & ~CLA_SM & 0xFF, protected.ins, protected.p1,
                           protected.p2, data, le)
    except codec.CodecError as exc:
        raise SmError(str(exc)) from exc


def wrap_response(keys: SessionKeys, resp: ResponseApdu) -> ResponseApdu:
    ssc = keys.increment()
    objects = b""
    if resp.data:
        objects += tlv(TAG_CRYPTOGRAM, bytes([PADDING_INDICATOR]) + _encrypt(keys, ssc, resp.data)).encode()
    objects += tlv(TAG_STATUS, resp.sw.to_bytes(2, "big")).encode()
    cc = _mac(keys, ssc, objects)
    return ResponseApdu(objects + tlv(TAG_MAC, cc).encode(), resp.sw)


def unwrap_response(keys: SessionKeys, protected: ResponseApdu) -> ResponseApdu:
    """Verify and decrypt a protected response (terminal side)."""
    ssc = keys.increment()
    if not protected.data:
        raise SmError(f"unprotected status {protected.sw:04X}")
    objs = _split_objects(protected.data, (TAG_CRYPTOGRAM, TAG_STATUS, TAG_MAC))
    if TAG_STATUS not in objs or len(objs[TAG_STATUS].value) != 2:
        raise SmError("missing status object")
    signed = _raw(objs.get(TAG_CRYPTOGRAM)) + _raw(objs[TAG_STATUS])
    if not hmac.compare_digest(_mac(keys, ssc, signed), objs[TAG_MAC].value):
        raise SmError("response MAC mismatch")
    sw = int.from_bytes(objs[TAG_STATUS].value, "big")
    if sw != protected.sw:
        raise SmError("status word differs from its protected copy")
    data = _decrypt(keys, ssc, objs[TAG_CRYPTOGRAM].value) if TAG_CRYPTOGRAM in objs else b""
    return ResponseApdu(data, sw)
