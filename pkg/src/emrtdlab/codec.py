"""BER-TLV and ISO 7816-4 APDU encoding.

Everything here is a pure function over immutable bytes.  Decoders are total:
any input yields either a value or a :class:`CodecError` subclass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple, Union

MAX_TLV_LENGTH = (1 << 24) - 1
MAX_APDU_DATA = 65535
MAX_DEPTH = 32


class CodecError(ValueError):
    """Base class for wire-format errors."""


class MalformedTlv(CodecError):
    pass


class UnsupportedEncoding(CodecError):
    pass


class TlvEncodingError(CodecError):
    pass


class MalformedApdu(CodecError):
    pass


# --------------------------------------------------------------------------
# BER-TLV
# --------------------------------------------------------------------------


def _tag_bytes(tag: int) -> bytes:
    if 0 <= tag <= 0xFF:
        if tag & 0x1F == 0x1F:
            raise TlvEncodingError(f"tag {tag:#x} announces a subsequent byte")
        return bytes([tag])
    if 0x100 <= tag <= 0xFFFF:
        hi, lo = tag >> 8, tag & 0xFF
        if hi & 0x1F != 0x1F or lo & 0x80:
            raise TlvEncodingError(f"invalid two-byte tag {tag:#x}")
        return bytes([hi, lo])
    raise TlvEncodingError(f"tag {tag:#x} longer than two bytes")


def tag_is_constructed(tag: int) -> bool:
    first = tag >> 8 if tag > 0xFF else tag
    return bool(first & 0x20)


def encode_length(n: int) -> bytes:
    if n < 0:
        raise TlvEncodingError("negative length")
    if n < 0x80:
        return bytes([n])
    if n <= 0xFF:
        return bytes([0x81, n])
    if n <= 0xFFFF:
        return bytes([0x82]) + n.to_bytes(2, "big")
    if n <= MAX_TLV_LENGTH:
        return bytes([0x83]) + n.to_bytes(3, "big")
    raise TlvEncodingError(f"value of {n} bytes exceeds the 2^24 limit")


@dataclass(frozen=True)
class TlvNode:
    """A BER-TLV object.

    ``value`` is ``bytes`` for primitive tags and a tuple of child nodes for
    constructed tags (bit 0x20 of the first tag byte set).
    """

    tag: int
    value: Union[bytes, Tuple["TlvNode", ...]] = b""

    def __post_init__(self):
        _tag_bytes(self.tag)
        if isinstance(self.value, (list, tuple)):
            if not tag_is_constructed(self.tag):
                raise TlvEncodingError(f"primitive tag {self.tag:#x} given children")
            object.__setattr__(self, "value", tuple(self.value))
        elif isinstance(self.value, (bytes, bytearray, memoryview)):
            if tag_is_constructed(self.tag):
                raise TlvEncodingError(f"constructed tag {self.tag:#x} given raw bytes")
            object.__setattr__(self, "value", bytes(self.value))
        else:
            raise TypeError(f"unsupported TLV value type {type(self.value).__name__}")

    @property
    def constructed(self) -> bool:
        return isinstance(self.value, tuple)

    @property
    def children(self) -> Tuple["TlvNode", ...]:
        return self.value if isinstance(self.value, tuple) else ()

    def find(self, tag: int) -> Optional["TlvNode"]:
        for child in self.children:
            if child.tag == tag:
                return child
        return None

    def require(self, tag: int) -> "TlvNode":
        child = self.find(tag)
        if child is None:
            raise MalformedTlv(f"tag {tag:#x} missing under {self.tag:#x}")
        return child

    def encode(self) -> bytes:
        return tlv_encode(self)


def tlv(tag: int, *items) -> TlvNode:
    """Shorthand constructor: ``tlv(0x5F01, b"AB")`` or ``tlv(0x61, child, ...)``."""
    if tag_is_constructed(tag):
        return TlvNode(tag, tuple(items))
    if len(items) > 1:
        raise TlvEncodingError("primitive tag takes a single value")
    return TlvNode(tag, bytes(items[0]) if items else b"")


def tlv_encode(node: TlvNode) -> bytes:
    if node.constructed:
        body = b"".join(tlv_encode(c) for c in node.children)
    else:
        body = node.value
    return _tag_bytes(node.tag) + encode_length(len(body)) + body


def _read_tag(data: bytes, pos: int) -> Tuple[int, int]:
    if pos >= len(data):
        raise MalformedTlv("missing tag")
    first = data[pos]
    if first & 0x1F != 0x1F:
        return first, pos + 1
    if pos + 1 >= len(data):
        raise MalformedTlv("truncated two-byte tag")
    second = data[pos + 1]
    if second & 0x80:
        raise UnsupportedEncoding("tags longer than two bytes are not supported")
    return (first << 8) | second, pos + 2


def _read_length(data: bytes, pos: int) -> Tuple[int, int]:
    if pos >= len(data):
        raise MalformedTlv("missing length")
    first = data[pos]
    if first < 0x80:
        return first, pos + 1
    if first == 0x80:
        raise UnsupportedEncoding("indefinite length")
    count = first & 0x7F
    if count > 3:
        raise UnsupportedEncoding(f"{count}-byte length field")
    if pos + 1 + count > len(data):
        raise MalformedTlv("truncated length")
    n = int.from_bytes(data[pos + 1 : pos + 1 + count], "big")
    # DER minimality keeps encode(decode(b)) == b
    if len(encode_length(n)) != 1 + count:
        raise MalformedTlv("non-minimal length encoding")
    return n, pos + 1 + count


def tlv_header(data: bytes) -> Tuple[int, int, int]:
    """``(tag, header length, value length)`` from the start of ``data``.

    Only the header needs to be present, which lets a reader learn the total
    size of a file from its first chunk.
    """
    tag, pos = _read_tag(data, 0)
    length, pos = _read_length(data, pos)
    return tag, pos, length


def _decode_at(data: bytes, pos: int, depth: int = 0) -> Tuple[TlvNode, int]:
    if depth > MAX_DEPTH:
        raise MalformedTlv("constructed nesting too deep")
    tag, pos = _read_tag(data, pos)
    length, pos = _read_length(data, pos)
    end = pos + length
    if end > len(data):
        raise MalformedTlv(f"declared length {length} exceeds available {len(data) - pos}")
    if not tag_is_constructed(tag):
        return TlvNode(tag, data[pos:end]), end
    children = []
    while pos < end:
        child, pos = _decode_at(data[:end], pos, depth + 1)
        children.append(child)
    return TlvNode(tag, tuple(children)), end


def tlv_decode(data: bytes) -> Tuple[TlvNode, bytes]:
    """Parse exactly one TLV object; return it with the unconsumed suffix."""
    data = bytes(data)
    node, end = _decode_at(data, 0)
    return node, data[end:]


def tlv_decode_all(data: bytes) -> Tuple[TlvNode, ...]:
    """Parse a concatenation of TLV objects that must consume ``data`` exactly."""
    data = bytes(data)
    nodes, pos = [], 0
    while pos < len(data):
        node, pos = _decode_at(data, pos)
        nodes.append(node)
    return tuple(nodes)


def tlv_decode_exact(data: bytes) -> TlvNode:
    node, rest = tlv_decode(data)
    if rest:
        raise MalformedTlv(f"{len(rest)} trailing bytes after TLV object")
    return node


def iter_nodes(node: TlvNode) -> Iterator[TlvNode]:
    yield node
    for child in node.children:
        yield from iter_nodes(child)


# --------------------------------------------------------------------------
# APDUs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CommandApdu:
    """ISO 7816-4 command.  ``le=None`` means no Le field; ``le=0`` means maximum."""

    cla: int
    ins: int
    p1: int
    p2: int
    data: bytes = b""
    le: Optional[int] = None

    def __post_init__(self):
        for name in ("cla", "ins", "p1", "p2"):
            v = getattr(self, name)
            if not 0 <= v <= 0xFF:
                raise MalformedApdu(f"{name} out of byte range: {v}")
        object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) > MAX_APDU_DATA:
            raise MalformedApdu("command data longer than 65535 bytes")
        if self.le is not None and not 0 <= self.le <= 0xFFFF:
            raise MalformedApdu(f"le out of range: {self.le}")

    @property
    def case(self) -> int:
        if not self.data:
            return 1 if self.le is None else 2
        return 3 if self.le is None else 4

    @property
    def extended(self) -> bool:
        return len(self.data) > 255 or (self.le is not None and self.le > 255)

    @property
    def header(self) -> bytes:
        return bytes([self.cla, self.ins, self.p1, self.p2])

    def encode(self) -> bytes:
        return encode_command(self)

    def __repr__(self):
        le = "-" if self.le is None else str(self.le)
        return (f"CommandApdu({self.cla:02X} {self.ins:02X} {self.p1:02X} {self.p2:02X}"
                f" data={self.data.hex().upper() or '-'} le={le})")


def encode_command(cmd: CommandApdu) -> bytes:
    out = bytearray(cmd.header)
    if not cmd.extended:
        if cmd.data:
            out.append(len(cmd.data))
            out += cmd.data
        if cmd.le is not None:
            out.append(cmd.le)
        return bytes(out)
    if cmd.data:
        out += b"\x00" + len(cmd.data).to_bytes(2, "big") + cmd.data
        if cmd.le is not None:
            out += cmd.le.to_bytes(2, "big")
    elif cmd.le is not None:
        out += b"\x00" + cmd.le.to_bytes(2, "big")
    return bytes(out)


def decode_command(raw: bytes) -> CommandApdu:
    raw = bytes(raw)
    n = len(raw)
    if n < 4:
        raise MalformedApdu(f"command of {n} bytes is shorter than a header")
    cla, ins, p1, p2 = raw[:4]
    if n == 4:
        return CommandApdu(cla, ins, p1, p2)
    b0 = raw[4]
    if n == 5:
        return CommandApdu(cla, ins, p1, p2, le=b0)
    if b0 != 0:
        if n == 5 + b0:
            return CommandApdu(cla, ins, p1, p2, raw[5:])
        if n == 6 + b0:
            return CommandApdu(cla, ins, p1, p2, raw[5:-1], le=raw[-1])
        raise MalformedApdu(f"Lc={b0} inconsistent with {n}-byte command")
    if n == 7:
        return CommandApdu(cla, ins, p1, p2, le=int.from_bytes(raw[5:7], "big"))
    lc = int.from_bytes(raw[5:7], "big")
    if lc == 0:
        raise MalformedApdu("extended Lc of zero")
    if n == 7 + lc:
        cmd = CommandApdu(cla, ins, p1, p2, raw[7:])
    elif n == 9 + lc:
        cmd = CommandApdu(cla, ins, p1, p2, raw[7:-2], le=int.from_bytes(raw[-2:], "big"))
    else:
        raise MalformedApdu(f"extended Lc={lc} inconsistent with {n}-byte command")
    return cmd


@dataclass(frozen=True)
class ResponseApdu:
    data: bytes = b""
    sw: int = 0x9000

    def __post_init__(self):
        object.__setattr__(self, "data", bytes(self.data))
        if not 0 <= self.sw <= 0xFFFF:
            raise MalformedApdu(f"status word out of range: {self.sw}")

    @property
    def sw1(self) -> int:
        return self.sw >> 8

    @property
    def sw2(self) -> int:
        return self.sw & 0xFF

    @property
    def ok(self) -> bool:
        return self.sw == 0x9000

    def encode(self) -> bytes:
        return encode_response(self)

    def __repr__(self):
        return f"ResponseApdu(data={self.data.hex().upper() or '-'} sw={self.sw:04X})"


def encode_response(resp: ResponseApdu) -> bytes:
    return resp.data + resp.sw.to_bytes(2, "big")


def decode_response(raw: bytes) -> ResponseApdu:
    raw = bytes(raw)
    if len(raw) < 2:
        raise MalformedApdu("response shorter than a status word")
    return ResponseApdu(raw[:-2], int.from_bytes(raw[-2:], "big"))


def hexstr(data: bytes, sep: str = " ") -> str:
    return data.hex(sep).upper() if data else ""


def unhex(text: str) -> bytes:
    return bytes.fromhex("".join(text.split()))


def join_nodes(nodes: Sequence[TlvNode]) -> bytes:
    return b"".join(tlv_encode(n) for n in nodes)
