"""The inspection system: protocol initiator and document verifier."""

from __future__ import annotations

import datetime as dt
import hmac
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from . import codec, lds, pki, sm
from . import protocol as proto
from . import status as SW
from .codec import CommandApdu, ResponseApdu, tlv
from .cryptokit import ec
from .cryptokit.drbg import Drbg
from .cryptokit.symmetric import CipherSuite, SessionKeys
from .protocol import PasswordType
from .relay import DistanceVerdict, RttStats, distance_bound_check, measure_rtt
from .transport import Channel, TransportError

log = logging.getLogger(__name__)


class TerminalError(Exception):
    def __init__(self, message: str, sw: Optional[int] = None):
        super().__init__(message)
        self.sw = sw


class AuthenticationFailed(TerminalError):
    pass


class AccessDenied(TerminalError):
    pass


class SessionLost(TerminalError):
    pass


class ProtocolError(TerminalError):
    pass


def _expect_ok(resp: ResponseApdu, what: str) -> ResponseApdu:
    if resp.sw == SW.SUCCESS:
        return resp
    if resp.sw == SW.ACCESS_DENIED:
        raise AccessDenied(f"{what}: access denied", resp.sw)
    if resp.sw in (SW.VERIFICATION_FAILED, SW.BLOCKED) or SW.is_retry_warning(resp.sw):
        raise AuthenticationFailed(f"{what}: {SW.describe(resp.sw)}", resp.sw)
    if resp.sw in (SW.SM_MISSING, SW.SM_OBJECT_ERROR):
        raise SessionLost(f"{what}: {SW.describe(resp.sw)}", resp.sw)
    raise ProtocolError(f"{what}: unexpected status {SW.describe(resp.sw)}", resp.sw)


# --------------------------------------------------------------------------
# Secure session
# --------------------------------------------------------------------------


class SecureSession:
    """Terminal half of a secure-messaging channel.

    A session that failed once is dead: it refuses to send anything else.
    The send sequence counter is never resynchronized.
    """

    def __init__(self, channel: Channel, keys: SessionKeys, provenance: str,
                 password: Optional[PasswordType] = None):
        self.channel = channel
        self.keys = keys
        self.provenance = provenance
        self.password = password
        self.alive = True

    @property
    def suite(self) -> CipherSuite:
        return self.keys.suite

    def kill(self) -> None:
        self.alive = False

    def transmit(self, cmd: CommandApdu) -> ResponseApdu:
        if not self.alive:
            raise SessionLost("session is no longer usable")
        protected = sm.wrap_command(self.keys, cmd)
        try:
            raw, _ = self.channel.exchange(protected.encode())
            resp = codec.decode_response(raw)
            return sm.unwrap_response(self.keys, resp)
        except (sm.SmError, codec.CodecError) as exc:
            self.kill()
            raise SessionLost(f"secure messaging failed: {exc}") from exc
        except TransportError:
            self.kill()
            raise

    def request(self, cmd: CommandApdu, what: str) -> ResponseApdu:
        resp = self.transmit(cmd)
        if resp.sw in (SW.VERIFICATION_FAILED, SW.SM_OBJECT_ERROR, SW.SM_MISSING):
            # the card has dropped its side of the channel
            self.kill()
        return _expect_ok(resp, what)


def plain(channel: Channel, cmd: CommandApdu) -> ResponseApdu:
    try:
        return channel.transmit(cmd)
    except codec.CodecError as exc:
        raise ProtocolError(f"malformed response: {exc}") from exc


def select_application(channel: Channel) -> None:
    _expect_ok(plain(channel, CommandApdu(0x00, proto.INS_SELECT, 0x04, 0x0C, proto.EMRTD_AID)),
               "SELECT application")


# --------------------------------------------------------------------------
# Access protocols
# --------------------------------------------------------------------------


def run_bac(channel: Channel, mrz: Union[lds.Mrz, str], drbg: Drbg) -> SecureSession:
    """Basic access control as initiator; ``mrz`` may be an Mrz or key info."""
    k_enc, k_mac = proto.bac_keys(lds.bac_seed(mrz))
    resp = _expect_ok(plain(channel, CommandApdu(0x00, proto.INS_GET_CHALLENGE, 0, 0, le=8)),
                      "GET CHALLENGE")
    if len(resp.data) != 8:
        raise ProtocolError("challenge must be 8 bytes")
    rnd_ic = resp.data
    rnd_ifd = drbg.random_bytes(8)
    k_ifd = drbg.random_bytes(16)
    cryptogram = proto.bac_cryptogram(k_enc, k_mac, rnd_ifd + rnd_ic + k_ifd)
    resp = plain(channel, CommandApdu(0x00, proto.INS_EXTERNAL_AUTH, 0, 0, cryptogram, le=0x28))
    _expect_ok(resp, "BAC EXTERNAL AUTHENTICATE")
    reply = proto.bac_open(k_enc, k_mac, resp.data)
    if reply is None:
        raise AuthenticationFailed("card cryptogram failed its MAC")
    if not hmac.compare_digest(reply[:8], rnd_ic) or not hmac.compare_digest(reply[8:16], rnd_ifd):
        raise AuthenticationFailed("card cryptogram does not echo the challenges")
    keys = proto.bac_session(k_ifd, reply[16:32], rnd_ic, rnd_ifd)
    return SecureSession(channel, keys, "bac")


def pace_secret(password_type: PasswordType, value: Union[str, bytes, lds.Mrz]) -> bytes:
    if password_type is PasswordType.MRZ:
        if isinstance(value, bytes):
            value = value.decode("ascii")
        if isinstance(value, str):
            value = lds.parse_key_info(value)
        return lds.pace_mrz_password(value)
    return value if isinstance(value, bytes) else str(value).encode("ascii")


def _dyn_auth(channel: Channel, cla: int, *children, what: str) -> codec.TlvNode:
    resp = _expect_ok(plain(channel, CommandApdu(cla, proto.INS_GENERAL_AUTH, 0, 0,
                                                 proto.dyn_auth(*children), le=0)), what)
    try:
        return proto.parse_dyn_auth(resp.data)
    except codec.CodecError as exc:
        raise ProtocolError(f"{what}: {exc}") from exc


def run_pace(channel: Channel, password: Union[str, bytes, lds.Mrz], password_type: PasswordType,
             drbg: Drbg, suite: CipherSuite = CipherSuite.AES128_CMAC) -> SecureSession:
    """PACE with generic mapping; the card's token is checked before success."""
    oid = proto.PACE_OIDS[suite]
    k_pi = proto.pace_password_key(pace_secret(password_type, password), suite)
    mse = tlv(proto.TAG_OID, oid).encode() + tlv(proto.TAG_PASSWORD_REF, bytes([password_type])).encode()
    _expect_ok(plain(channel, CommandApdu(0x00, proto.INS_MSE, *proto.MSE_PACE, mse)), "MSE:SET AT")

    try:
        node = _dyn_auth(channel, proto.CLA_CHAIN, what="PACE nonce")
        z = proto.single_object(node, 0x80)
        if len(z) != proto.PACE_NONCE_LEN:
            raise ProtocolError("PACE nonce has the wrong length")
        nonce = proto.decrypt_nonce(k_pi, z, suite)

        map_key = ec.EcKeyPair.generate(drbg)
        node = _dyn_auth(channel, proto.CLA_CHAIN, tlv(0x81, map_key.public_bytes), what="PACE mapping")
        card_map = ec.decode_point(proto.single_object(node, 0x82))
        generator = proto.map_generator(nonce, ec.scalar_mult(map_key.private, card_map))

        eph = ec.EcKeyPair.generate(drbg, generator)
        node = _dyn_auth(channel, proto.CLA_CHAIN, tlv(0x83, eph.public_bytes), what="PACE key agreement")
        card_eph = ec.decode_point(proto.single_object(node, 0x84))
        if card_eph == eph.public:
            raise AuthenticationFailed("card reflected the terminal's ephemeral key")
        keys = SessionKeys.derive(ec.ecdh(eph.private, card_eph), suite)

        token = proto.auth_token(keys, oid, card_eph)
        node = _dyn_auth(channel, proto.CLA_PLAIN, tlv(0x85, token), what="PACE token")
        card_token = proto.single_object(node, 0x86)
    except (codec.CodecError, ec.InvalidPoint) as exc:
        raise ProtocolError(f"PACE: {exc}") from exc
    if not hmac.compare_digest(card_token, proto.auth_token(keys, oid, eph.public)):
        raise AuthenticationFailed("card authentication token mismatch")
    return SecureSession(channel, keys, "pace", password_type)


# --------------------------------------------------------------------------
# File access
# --------------------------------------------------------------------------


def read_ef(session: SecureSession, fid: int) -> bytes:
    """SELECT and read a whole EF in chunks of :data:`protocol.READ_CHUNK` bytes."""
    session.request(CommandApdu(0x00, proto.INS_SELECT, 0x02, 0x0C, fid.to_bytes(2, "big")),
                    f"SELECT {fid:04X}")

    def chunk(offset: int, n: int) -> bytes:
        if offset > 0x7FFF:
            raise ProtocolError("file exceeds the short READ BINARY offset range")
        resp = session.request(CommandApdu(0x00, proto.INS_READ_BINARY, offset >> 8, offset & 0xFF,
                                           le=n), f"READ BINARY {fid:04X}")
        if not resp.data:
            raise ProtocolError("card returned an empty chunk")
        return resp.data

    data = chunk(0, proto.READ_CHUNK)
    try:
        _, header, length = codec.tlv_header(data)
    except codec.CodecError as exc:
        raise ProtocolError(f"EF {fid:04X} does not start with a TLV header: {exc}") from exc
    total = header + length
    while len(data) < total:
        data += chunk(len(data), min(proto.READ_CHUNK, total - len(data)))
    return data[:total]


def read_group(session: SecureSession, number: int) -> bytes:
    return read_ef(session, proto.dg_fid(number))


def passive_auth(source: Union[SecureSession, lds.LdsImage], truststore: pki.TrustStore,
                 at: Optional[dt.date] = None) -> lds.PaReport:
    """Passive authentication over freshly read bytes (or an already read image)."""
    if isinstance(source, lds.LdsImage):
        return lds.verify_sod(source, truststore, at)
    ef_sod = read_ef(source, proto.FID_SOD)
    com = lds.EfCom.decode(read_ef(source, proto.FID_COM))
    groups = {}
    for number in com.data_groups:
        try:
            groups[number] = read_group(source, number)
        except AccessDenied:
            continue
    return lds.verify_security_object(ef_sod, groups, truststore, at)


# --------------------------------------------------------------------------
# Chip and terminal authentication
# --------------------------------------------------------------------------


def active_auth(session: SecureSession, dg15: bytes, drbg: Drbg) -> bool:
    """Challenge the chip and check the answer with the DG15 key."""
    public = lds.parse_public_key_dg(dg15, 15)
    challenge = drbg.random_bytes(8)
    resp = session.request(CommandApdu(0x00, proto.INS_INTERNAL_AUTH, 0, 0, challenge, le=0),
                           "INTERNAL AUTHENTICATE")
    return ec.verify(public, challenge, resp.data)


def chip_auth(session: SecureSession, dg14: bytes, drbg: Drbg,
              suite: CipherSuite = CipherSuite.AES128_CMAC) -> SecureSession:
    """Rekey with the DG14 static key; the new session is confirmed by a read."""
    static = lds.parse_public_key_dg(dg14, 14)
    eph = ec.EcKeyPair.generate(drbg)
    session.request(CommandApdu(0x00, proto.INS_MSE, *proto.MSE_CA,
                                tlv(proto.TAG_OID, proto.CA_OIDS[suite]).encode()), "MSE:SET KAT")
    session.request(CommandApdu(0x00, proto.INS_GENERAL_AUTH, 0, 0,
                                proto.dyn_auth(tlv(0x80, eph.public_bytes)), le=0), "CA key agreement")
    session.kill()
    keys = SessionKeys.derive(ec.ecdh(eph.private, static), suite)
    fresh = SecureSession(session.channel, keys, "chip-auth", session.password)
    try:
        lds.EfCom.decode(read_ef(fresh, proto.FID_COM))
    except (SessionLost, ProtocolError, codec.CodecError, lds.LdsError) as exc:
        fresh.kill()
        raise SessionLost(f"chip authentication not confirmed: {exc}") from exc
    return fresh


@dataclass(frozen=True)
class TaCredentials:
    chain: Tuple[pki.SimpleCert, ...]
    key: ec.EcKeyPair

    @classmethod
    def from_pki(cls, lab: pki.LabPki) -> "TaCredentials":
        return cls(tuple(lab.terminal_chain), lab.terminal.key)


def terminal_auth(session: SecureSession, chain: Sequence[pki.SimpleCert], key: ec.EcKeyPair,
                  drbg: Drbg) -> bool:
    """Present the chain (DV first), then sign the card's challenge."""
    try:
        for cert in chain:
            session.request(CommandApdu(0x00, proto.INS_PSO, *proto.PSO_VERIFY_CERT, cert.encode()),
                            f"PSO:VERIFY CERTIFICATE {cert.subject}")
        session.request(CommandApdu(0x00, proto.INS_MSE, *proto.MSE_TA,
                                    tlv(proto.TAG_PASSWORD_REF, chain[-1].subject.encode()).encode()),
                        "MSE:SET DST")
        challenge = session.request(CommandApdu(0x00, proto.INS_GET_CHALLENGE, 0, 0, le=8),
                                    "GET CHALLENGE").data
        signature = ec.sign(key.private, challenge, drbg)
        session.request(CommandApdu(0x00, proto.INS_EXTERNAL_AUTH, 0, 0, signature),
                        "TA EXTERNAL AUTHENTICATE")
    except TerminalError as exc:
        # refusal at any step, including 6982 when the channel cannot carry TA
        log.info("terminal authentication failed: %s", exc)
        return False
    return True


# --------------------------------------------------------------------------
# Composite inspection
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Credentials:
    mrz: Optional[str] = None
    can: Optional[str] = None
    pin: Optional[str] = None


@dataclass(frozen=True)
class Policy:
    access: str = "auto"  # auto (PACE, then BAC), pace or bac
    active_auth: bool = True
    chip_auth: bool = True
    terminal_auth: bool = False
    rtt_threshold_ms: float = 20.0
    rtt_samples: int = 5
    suite: CipherSuite = CipherSuite.AES128_CMAC
    at: Optional[dt.date] = None

    def to_dict(self) -> dict:
        return {
            "access": self.access,
            "active_auth": self.active_auth,
            "chip_auth": self.chip_auth,
            "terminal_auth": self.terminal_auth,
            "rtt_threshold_ms": self.rtt_threshold_ms,
            "rtt_samples": self.rtt_samples,
            "suite": self.suite.value,
        }


@dataclass
class StepResult:
    ran: bool = False
    ok: Optional[bool] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {"ran": self.ran, "ok": self.ok, "error": self.error}


@dataclass
class InspectionReport:
    connection: str
    policy: Policy
    protocol: Optional[str] = None
    password: Optional[str] = None
    access_attempts: List[Dict[str, object]] = field(default_factory=list)
    access_error: Optional[str] = None
    pa: Optional[lds.PaReport] = None
    aa: StepResult = field(default_factory=StepResult)
    ca: StepResult = field(default_factory=StepResult)
    ta: StepResult = field(default_factory=StepResult)
    groups_read: List[int] = field(default_factory=list)
    groups_denied: List[int] = field(default_factory=list)
    document: Optional[Dict[str, str]] = None
    rtt: Optional[RttStats] = None
    errors: List[str] = field(default_factory=list)

    # verdicts are derived from the evidence above, never stored separately

    @property
    def access_ok(self) -> bool:
        return self.protocol is not None

    @property
    def authentic(self) -> bool:
        return self.pa is not None and self.pa.signature_ok and self.pa.chain_ok and self.pa.error is None

    @property
    def unaltered(self) -> bool:
        return self.pa is not None and self.pa.hashes_ok

    @property
    def not_cloned(self) -> Optional[bool]:
        results = [step.ok for step in (self.aa, self.ca) if step.ran]
        if not results:
            return None
        return all(r is True for r in results)

    @property
    def relay_suspected(self) -> Optional[bool]:
        if self.rtt is None:
            return None
        return distance_bound_check(self.rtt, self.policy.rtt_threshold_ms) is DistanceVerdict.FLAG

    @property
    def passed(self) -> bool:
        return (self.access_ok and self.authentic and self.unaltered
                and self.not_cloned is not False and self.relay_suspected is not True
                and (not self.ta.ran or self.ta.ok is True))

    def verdicts(self) -> Dict[str, Optional[bool]]:
        return {
            "access": self.access_ok,
            "authentic": self.authentic,
            "unaltered": self.unaltered,
            "not_cloned": self.not_cloned,
            "relay_suspected": self.relay_suspected,
            "terminal_authenticated": self.ta.ok if self.ta.ran else None,
            "passed": self.passed,
        }

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "connection": self.connection,
            "policy": self.policy.to_dict(),
            "access": {
                "protocol": self.protocol,
                "password": self.password,
                "attempts": self.access_attempts,
                "error": self.access_error,
            },
            "document": self.document,
            "groups_read": self.groups_read,
            "groups_denied": self.groups_denied,
            "passive_auth": self.pa.to_dict() if self.pa else None,
            "active_auth": self.aa.to_dict(),
            "chip_auth": self.ca.to_dict(),
            "terminal_auth": self.ta.to_dict(),
            "errors": self.errors,
            "verdicts": self.verdicts(),
        }
        if include_timing:
            out["timing"] = self.rtt.to_dict() if self.rtt else None
        return out

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"


def _access_plan(credentials: Credentials, policy: Policy) -> List[Tuple[str, PasswordType, object]]:
    pace = []
    if credentials.pin is not None:
        pace.append(("pace", PasswordType.PIN, credentials.pin))
    if credentials.can is not None:
        pace.append(("pace", PasswordType.CAN, credentials.can))
    if credentials.mrz is not None:
        pace.append(("pace", PasswordType.MRZ, credentials.mrz))
    bac = [("bac", PasswordType.MRZ, credentials.mrz)] if credentials.mrz is not None else []
    if policy.access == "pace":
        return pace[:1]
    if policy.access == "bac":
        return bac
    if policy.access == "auto":
        return pace[:1] + bac
    raise ValueError(f"unknown access policy {policy.access!r}")


def _establish(channel: Channel, credentials: Credentials, policy: Policy, drbg: Drbg,
               report: InspectionReport) -> Optional[SecureSession]:
    plan = _access_plan(credentials, policy)
    if not plan:
        report.access_error = "no usable credential for the selected access policy"
        return None
    for protocol, ptype, secret in plan:
        attempt = {"protocol": protocol, "password": ptype.label, "ok": False, "error": None}
        report.access_attempts.append(attempt)
        try:
            if protocol == "bac":
                session = run_bac(channel, lds.parse_key_info(secret), drbg)
            else:
                session = run_pace(channel, secret, ptype, drbg, policy.suite)
        except (TerminalError, lds.LdsError) as exc:
            attempt["error"] = str(exc)
            report.access_error = str(exc)
            continue
        attempt["ok"] = True
        report.protocol, report.password, report.access_error = protocol, ptype.label, None
        return session
    return None


# a malformed DG14/DG15 key is a failed step, not a crash
_STEP_ERRORS = (TerminalError, TransportError, codec.CodecError, lds.LdsError, ec.InvalidPoint)


def inspect(channel: Channel, credentials: Credentials, policy: Policy, truststore: pki.TrustStore,
            drbg: Drbg, ta: Optional[TaCredentials] = None) -> InspectionReport:
    """Full inspection; every stage failure ends up in the report."""
    report = InspectionReport(connection=channel.description, policy=policy)
    try:
        select_application(channel)
        report.rtt = measure_rtt(channel, policy.rtt_samples)
    except (TerminalError, TransportError) as exc:
        report.errors.append(f"setup: {exc}")
        return report

    session = _establish(channel, credentials, policy, drbg, report)
    if session is None:
        return report

    groups: Dict[int, bytes] = {}
    try:
        com = lds.EfCom.decode(read_ef(session, proto.FID_COM))
        ef_sod = read_ef(session, proto.FID_SOD)
        for number in com.data_groups:
            try:
                groups[number] = read_group(session, number)
            except AccessDenied:
                report.groups_denied.append(number)
    except (TerminalError, TransportError, codec.CodecError, lds.LdsError) as exc:
        report.errors.append(f"reading: {exc}")
        return report

    if policy.active_auth and 15 in groups:
        report.aa.ran = True
        try:
            report.aa.ok = active_auth(session, groups[15], drbg)
        except _STEP_ERRORS as exc:
            report.aa.ok, report.aa.error = False, str(exc)

    if policy.chip_auth and 14 in groups and session.alive:
        report.ca.ran = True
        try:
            session = chip_auth(session, groups[14], drbg, policy.suite)
            report.ca.ok = True
        except _STEP_ERRORS as exc:
            report.ca.ok, report.ca.error = False, str(exc)

    if policy.terminal_auth:
        report.ta.ran = True
        if ta is None:
            report.ta.ok, report.ta.error = False, "no terminal credentials"
        elif not session.alive:
            report.ta.ok, report.ta.error = False, "no live session"
        else:
            try:
                report.ta.ok = terminal_auth(session, ta.chain, ta.key, drbg)
            except TransportError as exc:
                report.ta.ok, report.ta.error = False, str(exc)
            if report.ta.ok:
                for number in list(report.groups_denied):
                    try:
                        groups[number] = read_group(session, number)
                        report.groups_denied.remove(number)
                    except (TerminalError, TransportError) as exc:
                        report.errors.append(f"DG{number}: {exc}")

    report.groups_read = sorted(groups)
    report.pa = lds.verify_security_object(ef_sod, groups, truststore, policy.at)
    if 1 in groups:
        try:
            mrz = lds.parse_dg1(groups[1])
            report.document = {
                "document_number": mrz.document_number,
                "issuing_state": mrz.issuing_state,
                "name": mrz.name,
                "date_of_birth": mrz.date_of_birth,
                "date_of_expiry": mrz.date_of_expiry,
            }
        except (codec.CodecError, lds.LdsError) as exc:
            report.errors.append(f"DG1: {exc}")
    return report
