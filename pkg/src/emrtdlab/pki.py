"""Compact certificate hierarchy for Passive and Terminal Authentication.

Two trees are supported::

    CSCA -> DS            (document signing)
    CSCA -> SIGNER        (holder signature certificates)
    CVCA -> DV -> TERMINAL

Certificates use a small TLV layout of their own rather than X.509 or CV
certificates; only the chain semantics matter here.
"""

from __future__ import annotations

import datetime as dt
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

from . import codec
from .codec import TlvNode, tlv
from .cryptokit import ec
from .cryptokit.drbg import Drbg

TAG_CERT = 0x7F21
TAG_BODY = 0x7F4E
TAG_VERSION = 0x5F29
TAG_ISSUER = 0x42
TAG_SUBJECT = 0x5F20
TAG_ROLE = 0x5F4C
TAG_PUBKEY = 0x7F49
TAG_POINT = 0x86
TAG_NOT_BEFORE = 0x5F25
TAG_NOT_AFTER = 0x5F24
TAG_SIGNATURE = 0x5F37
TAG_PRIVATE = 0xE0
TAG_SCALAR = 0x81
TAG_CREDENTIAL = 0xE1

DEFAULT_VALIDITY_DAYS = 3650

Clock = Callable[[], dt.date]


class PkiError(Exception):
    pass


class RoleError(PkiError):
    pass


class Role(enum.IntEnum):
    CSCA = 1
    DS = 2
    CVCA = 3
    DV = 4
    TERMINAL = 5
    SIGNER = 6

    @property
    def is_root(self) -> bool:
        return self in (Role.CSCA, Role.CVCA)


ALLOWED_ISSUANCE = frozenset({
    (Role.CSCA, Role.DS),
    (Role.CSCA, Role.SIGNER),
    (Role.CVCA, Role.DV),
    (Role.DV, Role.TERMINAL),
})


def may_issue(parent: Role, child: Role) -> bool:
    return (parent, child) in ALLOWED_ISSUANCE


def _date_bytes(d: dt.date) -> bytes:
    return d.strftime("%Y%m%d").encode()


def _parse_date(raw: bytes) -> dt.date:
    try:
        return dt.datetime.strptime(raw.decode("ascii"), "%Y%m%d").date()
    except (UnicodeDecodeError, ValueError) as exc:
        raise codec.MalformedTlv(f"bad date field {raw!r}") from exc


@dataclass(frozen=True)
class SimpleCert:
    subject: str
    issuer: str
    role: Role
    public_key: Tuple[int, int]
    not_before: dt.date
    not_after: dt.date
    signature: bytes = b""

    @property
    def self_signed(self) -> bool:
        return self.subject == self.issuer

    def body_node(self) -> TlvNode:
        return tlv(
            TAG_BODY,
            tlv(TAG_VERSION, b"\x01"),
            tlv(TAG_ISSUER, self.issuer.encode()),
            tlv(TAG_SUBJECT, self.subject.encode()),
            tlv(TAG_ROLE, bytes([self.role])),
            tlv(TAG_PUBKEY, tlv(TAG_POINT, ec.encode_point(self.public_key))),
            tlv(TAG_NOT_BEFORE, _date_bytes(self.not_before)),
            tlv(TAG_NOT_AFTER, _date_bytes(self.not_after)),
        )

    def body_bytes(self) -> bytes:
        return self.body_node().encode()

    def to_node(self) -> TlvNode:
        return tlv(TAG_CERT, self.body_node(), tlv(TAG_SIGNATURE, self.signature))

    def encode(self) -> bytes:
        return self.to_node().encode()

    @classmethod
    def from_node(cls, node: TlvNode) -> "SimpleCert":
        if node.tag != TAG_CERT:
            raise codec.MalformedTlv(f"not a certificate (tag {node.tag:#x})")
        body = node.require(TAG_BODY)
        if body.require(TAG_VERSION).value != b"\x01":
            raise codec.MalformedTlv("unsupported certificate version")
        role_raw = body.require(TAG_ROLE).value
        if len(role_raw) != 1 or role_raw[0] not in Role._value2member_map_:
            raise codec.MalformedTlv("unknown certificate role")
        try:
            issuer = body.require(TAG_ISSUER).value.decode("utf-8")
            subject = body.require(TAG_SUBJECT).value.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise codec.MalformedTlv("certificate names are not UTF-8") from exc
        try:
            point = ec.decode_point(body.require(TAG_PUBKEY).require(TAG_POINT).value)
        except ec.InvalidPoint as exc:
            raise codec.MalformedTlv(f"certificate key: {exc}") from exc
        return cls(
            subject=subject,
            issuer=issuer,
            role=Role(role_raw[0]),
            public_key=point,
            not_before=_parse_date(body.require(TAG_NOT_BEFORE).value),
            not_after=_parse_date(body.require(TAG_NOT_AFTER).value),
            signature=node.require(TAG_SIGNATURE).value,
        )

    @classmethod
    def decode(cls, data: bytes) -> "SimpleCert":
        return cls.from_node(codec.tlv_decode_exact(data))

    def signed_by(self, public_key) -> bool:
        return ec.verify(public_key, self.body_bytes(), self.signature)

    def valid_at(self, day: dt.date) -> bool:
        return self.not_before <= day <= self.not_after


@dataclass(frozen=True)
class Credential:
    """A certificate together with its private key."""

    cert: SimpleCert
    key: ec.EcKeyPair

    def encode(self) -> bytes:
        return tlv(
            TAG_CREDENTIAL,
            self.cert.to_node(),
            tlv(TAG_PRIVATE, tlv(TAG_SCALAR, self.key.private.to_bytes(32, "big"))),
        ).encode()

    @classmethod
    def from_node(cls, node: TlvNode) -> "Credential":
        if node.tag != TAG_CREDENTIAL:
            raise codec.MalformedTlv("not a credential")
        cert = SimpleCert.from_node(node.require(TAG_CERT))
        scalar = int.from_bytes(node.require(TAG_PRIVATE).require(TAG_SCALAR).value, "big")
        key = ec.EcKeyPair.from_private(scalar)
        if key.public != cert.public_key:
            raise PkiError("private key does not match certificate")
        return cls(cert, key)

    @classmethod
    def decode(cls, data: bytes) -> "Credential":
        return cls.from_node(codec.tlv_decode_exact(data))


def _validity(issued: Optional[dt.date], days: int) -> Tuple[dt.date, dt.date]:
    start = issued or dt.date.today()
    return start, start + dt.timedelta(days=days)


def generate_root(role: Role, name: str, drbg: Drbg, issued: Optional[dt.date] = None,
                  validity_days: int = DEFAULT_VALIDITY_DAYS) -> Credential:
    role = Role(role)
    if not role.is_root:
        raise RoleError(f"{role.name} cannot be a self-signed root")
    key = ec.EcKeyPair.generate(drbg)
    not_before, not_after = _validity(issued, validity_days)
    unsigned = SimpleCert(name, name, role, key.public, not_before, not_after)
    sig = ec.sign(key.private, unsigned.body_bytes(), drbg)
    return Credential(_replace_sig(unsigned, sig), key)


def issue(parent: Credential, subject: str, role: Role, drbg: Drbg,
          key: Optional[ec.EcKeyPair] = None, issued: Optional[dt.date] = None,
          validity_days: int = DEFAULT_VALIDITY_DAYS) -> Credential:
    role = Role(role)
    if not may_issue(parent.cert.role, role):
        raise RoleError(f"{parent.cert.role.name} may not issue {role.name}")
    if subject == parent.cert.subject:
        raise RoleError("subject must differ from issuer")
    key = key or ec.EcKeyPair.generate(drbg)
    not_before, not_after = _validity(issued, validity_days)
    unsigned = SimpleCert(subject, parent.cert.subject, role, key.public, not_before, not_after)
    sig = ec.sign(parent.key.private, unsigned.body_bytes(), drbg)
    return Credential(_replace_sig(unsigned, sig), key)


def _replace_sig(cert: SimpleCert, sig: bytes) -> SimpleCert:
    return SimpleCert(cert.subject, cert.issuer, cert.role, cert.public_key,
                      cert.not_before, cert.not_after, sig)


@dataclass
class TrustStore:
    """Trusted self-signed roots."""

    roots: List[SimpleCert] = field(default_factory=list)

    def __post_init__(self):
        for cert in self.roots:
            self._check_root(cert)

    @staticmethod
    def _check_root(cert: SimpleCert) -> None:
        if not (cert.role.is_root and cert.self_signed):
            raise RoleError(f"{cert.subject} is not a self-signed root")

    def add(self, cert: SimpleCert) -> None:
        self._check_root(cert)
        if cert not in self.roots:
            self.roots.append(cert)

    def find(self, subject: str) -> List[SimpleCert]:
        return [c for c in self.roots if c.subject == subject]

    def __contains__(self, cert: SimpleCert) -> bool:
        return cert in self.roots

    def __len__(self):
        return len(self.roots)


@dataclass(frozen=True)
class ChainResult:
    ok: bool
    reason: str

    def __bool__(self):
        return self.ok


MAX_CHAIN = 4


def verify_chain(leaf: SimpleCert, intermediates: Sequence[SimpleCert], store: TrustStore,
                 at: Optional[dt.date] = None) -> ChainResult:
    """Check that a path of valid signatures and role transitions leads from a
    store root to ``leaf``, with every certificate valid on day ``at``."""
    day = at or dt.date.today()
    current = leaf
    pool = list(intermediates)
    for _ in range(MAX_CHAIN):
        if not current.valid_at(day):
            return ChainResult(False, "expired" if day > current.not_after else "not-yet-valid")
        if current.self_signed:
            if current not in store:
                return ChainResult(False, "unknown-root")
            if not current.signed_by(current.public_key):
                return ChainResult(False, "bad-signature")
            return ChainResult(True, "ok")
        candidates = [c for c in pool if c.subject == current.issuer]
        candidates += store.find(current.issuer)
        if not candidates:
            return ChainResult(False, "unknown-root")
        parent = candidates[0]
        if not may_issue(parent.role, current.role):
            return ChainResult(False, "role")
        if not current.signed_by(parent.public_key):
            return ChainResult(False, "bad-signature")
        if parent in pool:
            pool.remove(parent)
        current = parent
    return ChainResult(False, "path-too-long")


def save_credential(path: Union[str, Path], cred: Credential) -> None:
    Path(path).write_bytes(cred.encode())


def load_credential(path: Union[str, Path]) -> Credential:
    return Credential.decode(Path(path).read_bytes())


def save_cert(path: Union[str, Path], cert: SimpleCert) -> None:
    Path(path).write_bytes(cert.encode())


def load_cert(path: Union[str, Path]) -> SimpleCert:
    return SimpleCert.decode(Path(path).read_bytes())


def certs_from_bytes(data: bytes) -> List[SimpleCert]:
    return [SimpleCert.from_node(n) for n in codec.tlv_decode_all(data)]


def certs_to_bytes(certs: Iterable[SimpleCert]) -> bytes:
    return b"".join(c.encode() for c in certs)


@dataclass
class LabPki:
    """Every authority a lab deployment needs, plus a terminal credential chain."""

    csca: Credential
    cvca: Credential
    dv: Credential
    terminal: Credential

    @classmethod
    def generate(cls, drbg: Drbg, country: str = "ESP", issued: Optional[dt.date] = None) -> "LabPki":
        csca = generate_root(Role.CSCA, f"CSCA-{country}", drbg, issued)
        cvca = generate_root(Role.CVCA, f"CVCA-{country}", drbg, issued)
        dv = issue(cvca, f"DV-{country}", Role.DV, drbg, issued=issued)
        terminal = issue(dv, f"IS-{country}-01", Role.TERMINAL, drbg, issued=issued)
        return cls(csca, cvca, dv, terminal)

    @property
    def truststore(self) -> TrustStore:
        return TrustStore([self.csca.cert])

    @property
    def terminal_chain(self) -> List[SimpleCert]:
        return [self.dv.cert, self.terminal.cert]

    def encode(self) -> bytes:
        return tlv(0x70, *(codec.tlv_decode_exact(c.encode()) for c in
                           (self.csca, self.cvca, self.dv, self.terminal))).encode()

    @classmethod
    def decode(cls, data: bytes) -> "LabPki":
        node = codec.tlv_decode_exact(data)
        if node.tag != 0x70 or len(node.children) != 4:
            raise codec.MalformedTlv("not a lab PKI bundle")
        return cls(*(Credential.from_node(c) for c in node.children))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.encode())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LabPki":
        return cls.decode(Path(path).read_bytes())
