"""A host-side signing client with interception hooks.

The card signs whatever digest it receives.  The hooks model a compromised
host that can watch the PIN and swap the document between what the user saw
and what is sent to the card; :func:`audit` is the check that exposes it.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple

from . import pki
from . import protocol as proto
from .codec import CommandApdu, tlv
from .cryptokit import ec
from .cryptokit.drbg import Drbg
from .protocol import PasswordType
from .terminal import read_ef, run_pace, select_application
from .transport import Channel


@dataclass(frozen=True)
class SignRequest:
    document: bytes
    display_name: str = "document"

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(self.document).digest()


@dataclass
class InterceptorHooks:
    on_pin_entry: Optional[Callable[[str], None]] = None
    on_document_load: Optional[Callable[[SignRequest], SignRequest]] = None
    pre_sign: Optional[Callable[[bytes], bytes]] = None


@dataclass(frozen=True)
class SignEvidence:
    signature: bytes
    certificate: pki.SimpleCert
    digest_sent: bytes
    digest_displayed: bytes
    pin_captured: Optional[str]

    @property
    def match(self) -> bool:
        return self.digest_sent == self.digest_displayed

    def to_dict(self) -> dict:
        result = audit(self)
        return {
            "signature": self.signature.hex().upper(),
            "certificate_subject": self.certificate.subject,
            "certificate": self.certificate.encode().hex().upper(),
            "digest_sent": self.digest_sent.hex().upper(),
            "digest_displayed": self.digest_displayed.hex().upper(),
            "pin_captured": self.pin_captured,
            "match": self.match,
            "audit": {"clean": result.clean, "reasons": list(result.reasons)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def sign_digest_on_card(channel: Channel, pin: str, digest: bytes,
                        drbg: Drbg) -> Tuple[bytes, pki.SimpleCert]:
    """PACE with the PIN, VERIFY, PSO:HASH and PSO:COMPUTE DIGITAL SIGNATURE."""
    select_application(channel)
    session = run_pace(channel, pin, PasswordType.PIN, drbg)
    session.request(CommandApdu(0x00, proto.INS_VERIFY, 0x00, proto.PIN_REFERENCE, pin.encode("ascii")),
                    "VERIFY")
    session.request(CommandApdu(0x00, proto.INS_PSO, *proto.PSO_HASH,
                                tlv(proto.TAG_HASH_DO, digest).encode()), "PSO:HASH")
    signature = session.request(CommandApdu(0x00, proto.INS_PSO, *proto.PSO_SIGN, le=0),
                                "PSO:COMPUTE DIGITAL SIGNATURE").data
    certificate = pki.SimpleCert.decode(read_ef(session, proto.FID_SIGN_CERT))
    return signature, certificate


def sign_document(channel: Channel, pin_provider: Callable[[], str], request: SignRequest,
                  hooks: Optional[InterceptorHooks] = None, drbg: Optional[Drbg] = None) -> SignEvidence:
    hooks = hooks or InterceptorHooks()
    drbg = drbg if drbg is not None else Drbg()
    displayed = request.digest
    working = request
    if hooks.on_document_load is not None:
        working = hooks.on_document_load(request)
    pin = pin_provider()
    captured = None
    if hooks.on_pin_entry is not None:
        hooks.on_pin_entry(pin)
        captured = pin
    digest = working.digest
    if hooks.pre_sign is not None:
        digest = hooks.pre_sign(digest)
    signature, certificate = sign_digest_on_card(channel, pin, digest, drbg)
    return SignEvidence(signature, certificate, digest, displayed, captured)


def verify_signed(document: bytes, signature: bytes, certificate: pki.SimpleCert,
                  truststore: pki.TrustStore, at: Optional[dt.date] = None) -> bool:
    if certificate.role is not pki.Role.SIGNER:
        return False
    if not pki.verify_chain(certificate, [], truststore, at).ok:
        return False
    return ec.verify_digest(certificate.public_key, hashlib.sha256(document).digest(), signature)


@dataclass(frozen=True)
class AuditResult:
    reasons: Tuple[str, ...] = ()

    @property
    def clean(self) -> bool:
        return not self.reasons


def audit(evidence: SignEvidence) -> AuditResult:
    reasons = []
    if not evidence.match:
        reasons.append("digest-mismatch")
    if evidence.pin_captured is not None:
        reasons.append("pin-exposure")
    return AuditResult(tuple(reasons))


def substitution_hooks(attacker_document: bytes, captured: Optional[list] = None) -> InterceptorHooks:
    """Hooks that swap in ``attacker_document`` and record the PIN."""
    sink = captured if captured is not None else []
    return InterceptorHooks(
        on_pin_entry=sink.append,
        on_document_load=lambda req: replace(req, document=attacker_document),
    )
