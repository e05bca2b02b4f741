"""The virtual chip: file system, protocol responders and access control.

A :class:`VirtualCard` is a strictly sequential state machine.  Its only
entry points are :meth:`VirtualCard.process` (raw bytes) and
:meth:`VirtualCard.process_apdu`; every error surfaces as a status word.
Private keys are held in memory and no instruction returns them.
"""

from __future__ import annotations

import datetime as dt
import enum
import hmac
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

from . import codec, lds, pki, sm
from . import protocol as proto
from . import status as SW
from .codec import CommandApdu, ResponseApdu, tlv
from .cryptokit import ec
from .cryptokit.drbg import Drbg
from .cryptokit.symmetric import CipherSuite, SessionKeys
from .protocol import PasswordType

log = logging.getLogger(__name__)

CARD_FORMAT_VERSION = b"\x01"


class ChannelKind(enum.Enum):
    NONE = "none"
    BAC = "bac"
    PACE = "pace"
    CHIP_AUTH = "chip-auth"


# --------------------------------------------------------------------------
# Personalized image
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CardImage:
    """Everything written into the chip at personalization.

    EF contents are stored exactly as they are served by READ BINARY.
    """

    lds_image: lds.LdsImage
    mrz_key_info: str
    pin: str
    can: str
    aa_key: ec.EcKeyPair
    ca_key: ec.EcKeyPair
    sign: pki.Credential
    cvca: pki.SimpleCert
    runtime_seed: bytes
    issued: dt.date

    @property
    def bac_seed(self) -> bytes:
        return lds.bac_seed(self.mrz_key_info)

    def password(self, kind: PasswordType) -> bytes:
        if kind is PasswordType.MRZ:
            return lds.pace_mrz_password(self.mrz_key_info)
        if kind is PasswordType.CAN:
            return self.can.encode("ascii")
        return self.pin.encode("ascii")

    def files(self) -> Dict[int, bytes]:
        out = {proto.FID_COM: self.lds_image.ef_com, proto.FID_SOD: self.lds_image.ef_sod,
               proto.FID_SIGN_CERT: self.sign.cert.encode()}
        for n, content in self.lds_image.groups.items():
            out[proto.dg_fid(n)] = content
        return out

    # -- lab manipulations used to build tamper scenarios -------------------

    def with_lds(self, image: lds.LdsImage) -> "CardImage":
        return replace(self, lds_image=image)

    def cloned(self, drbg: Drbg) -> "CardImage":
        """A copy of the readable LDS on a chip with freshly generated keys."""
        sign_key = ec.EcKeyPair.generate(drbg)
        forged_sign = pki.Credential(self.sign.cert, sign_key)
        return replace(
            self,
            aa_key=ec.EcKeyPair.generate(drbg),
            ca_key=ec.EcKeyPair.generate(drbg),
            sign=forged_sign,
            runtime_seed=drbg.random_bytes(32),
        )

    # -- serialization -----------------------------------------------------

    def encode(self) -> bytes:
        files = tlv(0xE3, *(
            tlv(0xE4, tlv(0xC2, fid.to_bytes(2, "big")), tlv(0xC3, content))
            for fid, content in sorted(self.files().items()) if fid != proto.FID_SIGN_CERT
        ))
        return tlv(
            0xE2,
            tlv(0xC1, CARD_FORMAT_VERSION),
            files,
            tlv(0xC6, self.mrz_key_info.encode("ascii")),
            tlv(0xC4, self.pin.encode("ascii")),
            tlv(0xC5, self.can.encode("ascii")),
            tlv(0xC7, self.aa_key.private.to_bytes(32, "big")),
            tlv(0xC8, self.ca_key.private.to_bytes(32, "big")),
            codec.tlv_decode_exact(self.sign.encode()),
            self.cvca.to_node(),
            tlv(0xC9, self.runtime_seed),
            tlv(0xCA, self.issued.strftime("%Y%m%d").encode()),
        ).encode()

    @classmethod
    def decode(cls, data: bytes) -> "CardImage":
        node = codec.tlv_decode_exact(data)
        if node.tag != 0xE2 or node.require(0xC1).value != CARD_FORMAT_VERSION:
            raise codec.MalformedTlv("not a card image of a supported version")
        files = {}
        for entry in node.require(0xE3).children:
            files[int.from_bytes(entry.require(0xC2).value, "big")] = entry.require(0xC3).value
        groups = {proto.FID_TO_DG[f]: c for f, c in sorted(files.items()) if f in proto.FID_TO_DG}
        image = lds.LdsImage(groups, files[proto.FID_COM], files[proto.FID_SOD])
        return cls(
            lds_image=image,
            mrz_key_info=node.require(0xC6).value.decode("ascii"),
            pin=node.require(0xC4).value.decode("ascii"),
            can=node.require(0xC5).value.decode("ascii"),
            aa_key=ec.EcKeyPair.from_private(int.from_bytes(node.require(0xC7).value, "big")),
            ca_key=ec.EcKeyPair.from_private(int.from_bytes(node.require(0xC8).value, "big")),
            sign=pki.Credential.from_node(node.require(pki.TAG_CREDENTIAL)),
            cvca=pki.SimpleCert.from_node(node.require(pki.TAG_CERT)),
            runtime_seed=node.require(0xC9).value,
            issued=dt.datetime.strptime(node.require(0xCA).value.decode(), "%Y%m%d").date(),
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.encode())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CardImage":
        return cls.decode(Path(path).read_bytes())


def personalize(profile: lds.Profile, csca: pki.Credential, cvca: pki.SimpleCert, drbg: Drbg,
                issued: Optional[dt.date] = None, ds: Optional[pki.Credential] = None) -> CardImage:
    """Issue the chip: keys, DS and signature certificates, LDS, access secrets."""
    issued = issued or dt.date.today()
    if ds is None:
        ds = pki.issue(csca, f"DS-{profile.nationality}-{profile.document_number}",
                       pki.Role.DS, drbg, issued=issued)
    aa_key = ec.EcKeyPair.generate(drbg)
    ca_key = ec.EcKeyPair.generate(drbg)
    sign = pki.issue(csca, f"SIGN-{profile.document_number}", pki.Role.SIGNER, drbg, issued=issued)
    image = lds.build_lds(profile, ds, lds.ChipPublicKeys(ca_key.public, aa_key.public), drbg)
    return CardImage(
        lds_image=image,
        mrz_key_info=profile.mrz.key_info,
        pin=profile.pin,
        can=profile.can,
        aa_key=aa_key,
        ca_key=ca_key,
        sign=sign,
        cvca=cvca,
        runtime_seed=drbg.random_bytes(32),
        issued=issued,
    )


# --------------------------------------------------------------------------
# Runtime state
# --------------------------------------------------------------------------


@dataclass
class PaceState:
    password: PasswordType
    suite: CipherSuite
    step: int = 1
    nonce: bytes = b""
    map_key: Optional[ec.EcKeyPair] = None
    generator: Optional[Tuple[int, int]] = None
    eph_key: Optional[ec.EcKeyPair] = None
    peer_eph: Optional[Tuple[int, int]] = None
    keys: Optional[SessionKeys] = None


@dataclass
class SecurityState:
    channel: ChannelKind = ChannelKind.NONE
    session: Optional[SessionKeys] = None
    pace_password: Optional[PasswordType] = None
    ta_granted: bool = False
    pin_verified: bool = False
    challenge: Optional[bytes] = None
    pace: Optional[PaceState] = None
    ca_suite: Optional[CipherSuite] = None
    ta_anchor: Optional[pki.SimpleCert] = None
    ta_terminal: Optional[pki.SimpleCert] = None
    ta_selected: bool = False
    digest: Optional[bytes] = None


class FileSystem:
    """MF with a single ePassport DF; EFs keyed by file identifier."""

    def __init__(self, files: Dict[int, bytes]):
        self._files = dict(files)
        self.current_df: Optional[bytes] = None  # None means MF
        self.current_ef: Optional[int] = None

    def select_mf(self) -> None:
        self.current_df = None
        self.current_ef = None

    def select_df(self, aid: bytes) -> bool:
        if aid != proto.EMRTD_AID:
            return False
        self.current_df = aid
        self.current_ef = None
        return True

    def select_ef(self, fid: int) -> bool:
        if self.current_df is None or fid not in self._files:
            return False
        self.current_ef = fid
        return True

    def read(self, fid: int) -> bytes:
        return self._files[fid]


class _Reply(Exception):
    """Internal short-circuit carrying a status word."""

    def __init__(self, sw: int, reset: bool = False):
        self.sw = sw
        self.reset = reset


def _want(cond: bool, sw: int, reset: bool = False) -> None:
    if not cond:
        raise _Reply(sw, reset)


class VirtualCard:
    """One powered-up chip.

    Without an explicit ``drbg`` the chip draws fresh OS entropy, like a
    hardware generator, so two instances never repeat each other's nonces.
    Reproducible runs pass a seeded generator (see :func:`card_factory`).
    """

    def __init__(self, image: CardImage, drbg: Optional[Drbg] = None,
                 clock: Optional[Callable[[], dt.date]] = None):
        self.image = image
        self.drbg = drbg if drbg is not None else Drbg(None, b"card-runtime")
        self.clock = clock or (lambda: image.issued)
        self.fs = FileSystem(image.files())
        self.state = SecurityState()
        self.pin_retries = proto.PIN_RETRIES
        self._after: Optional[Callable[[], None]] = None

    # -- entry points ------------------------------------------------------

    def process(self, raw: bytes) -> bytes:
        try:
            cmd = codec.decode_command(raw)
        except codec.CodecError:
            if self.state.channel is not ChannelKind.NONE:
                self.reset_security()
                if raw and sm.indicates_sm(raw[0]):
                    # an unparseable wrapped command is an SM failure
                    return SW.SM_OBJECT_ERROR.to_bytes(2, "big")
            return SW.WRONG_LENGTH.to_bytes(2, "big")
        return self.process_apdu(cmd).encode()

    def process_apdu(self, cmd: CommandApdu) -> ResponseApdu:
        if self.state.channel is not ChannelKind.NONE and sm.indicates_sm(cmd.cla) \
                and cmd.cla != proto.CLA_SM:
            # claims secure messaging in a form this chip does not speak
            self.reset_security()
            return ResponseApdu(sw=SW.SM_OBJECT_ERROR)
        if cmd.cla not in (proto.CLA_PLAIN, proto.CLA_CHAIN, proto.CLA_SM):
            if self.state.channel is not ChannelKind.NONE:
                self.reset_security()
            return ResponseApdu(sw=SW.CLA_NOT_SUPPORTED)
        if self.state.channel is ChannelKind.NONE:
            if sm.is_protected(cmd.cla):
                return ResponseApdu(sw=SW.SM_OBJECT_ERROR)
            return self._dispatch(cmd)

        if not sm.is_protected(cmd.cla):
            self.reset_security()
            return ResponseApdu(sw=SW.SM_MISSING)
        session = self.state.session
        try:
            inner = sm.unwrap_command(session, cmd)
        except sm.SmError as exc:
            log.debug("secure messaging rejected: %s", exc)
            self.reset_security()
            return ResponseApdu(sw=SW.SM_OBJECT_ERROR)
        self._after = None
        resp = self._dispatch(inner)
        wrapped = sm.wrap_response(session, resp)
        if self._after is not None:
            self._after()
            self._after = None
        return wrapped

    def reset_security(self) -> None:
        """Drop every session and pending protocol step."""
        self.state = SecurityState()

    def power_cycle(self) -> None:
        """Model removing and re-presenting the card."""
        self.reset_security()
        self.fs.select_mf()

    # -- dispatch ----------------------------------------------------------

    def _dispatch(self, cmd: CommandApdu) -> ResponseApdu:
        handlers = {
            proto.INS_SELECT: self._select,
            proto.INS_READ_BINARY: self._read_binary,
            proto.INS_GET_CHALLENGE: self._get_challenge,
            proto.INS_EXTERNAL_AUTH: self._external_authenticate,
            proto.INS_MSE: self._mse,
            proto.INS_GENERAL_AUTH: self._general_authenticate,
            proto.INS_INTERNAL_AUTH: self._internal_authenticate,
            proto.INS_VERIFY: self._verify,
            proto.INS_PSO: self._pso,
        }
        handler = handlers.get(cmd.ins)
        if handler is None:
            return ResponseApdu(sw=SW.INS_NOT_SUPPORTED)
        if cmd.cla == proto.CLA_CHAIN and cmd.ins != proto.INS_GENERAL_AUTH:
            return ResponseApdu(sw=SW.CLA_NOT_SUPPORTED)
        try:
            return handler(cmd)
        except _Reply as reply:
            if reply.reset:
                self._schedule_reset()
            return ResponseApdu(sw=reply.sw)

    def _schedule_reset(self) -> None:
        if self.state.channel is ChannelKind.NONE:
            self.reset_security()
        else:
            # the failure reply still travels under the current session
            self._after = self.reset_security

    # -- file access -------------------------------------------------------

    def _select(self, cmd: CommandApdu) -> ResponseApdu:
        _want(cmd.p2 == 0x0C, SW.WRONG_P1P2)
        _want(cmd.le is None, SW.WRONG_LENGTH)
        if cmd.p1 == 0x00:
            _want(cmd.data in (b"", proto.MF_FID), SW.FILE_NOT_FOUND)
            self.fs.select_mf()
        elif cmd.p1 == 0x04:
            _want(self.fs.select_df(cmd.data), SW.FILE_NOT_FOUND)
        elif cmd.p1 == 0x02:
            _want(len(cmd.data) == 2, SW.WRONG_DATA)
            _want(self.fs.select_ef(int.from_bytes(cmd.data, "big")), SW.FILE_NOT_FOUND)
        else:
            raise _Reply(SW.WRONG_P1P2)
        return ResponseApdu()

    def access_control(self, fid: int) -> int:
        """Status word for reading ``fid`` in the current security state."""
        st = self.state
        if st.channel is ChannelKind.NONE:
            return SW.ACCESS_DENIED
        if fid in (proto.dg_fid(3), proto.dg_fid(4)) and not st.ta_granted:
            return SW.ACCESS_DENIED
        return SW.SUCCESS

    def _read_binary(self, cmd: CommandApdu) -> ResponseApdu:
        _want(not cmd.p1 & 0x80, SW.WRONG_P1P2)
        _want(not cmd.data, SW.WRONG_LENGTH)
        _want(cmd.le is not None, SW.WRONG_LENGTH)
        fid = self.fs.current_ef
        _want(fid is not None, SW.CONDITIONS_NOT_SATISFIED)
        verdict = self.access_control(fid)
        _want(verdict == SW.SUCCESS, verdict)
        content = self.fs.read(fid)
        offset = (cmd.p1 << 8) | cmd.p2
        _want(offset < len(content), SW.WRONG_OFFSET)
        length = cmd.le or 256
        return ResponseApdu(content[offset : offset + length])

    # -- challenges and BAC ------------------------------------------------

    def _get_challenge(self, cmd: CommandApdu) -> ResponseApdu:
        _want(cmd.p1 == 0 and cmd.p2 == 0, SW.WRONG_P1P2)
        _want(cmd.le == 8 and not cmd.data, SW.WRONG_LENGTH)
        self.state.challenge = self.drbg.random_bytes(8)
        return ResponseApdu(self.state.challenge)

    def _external_authenticate(self, cmd: CommandApdu) -> ResponseApdu:
        _want(cmd.p1 == 0 and cmd.p2 == 0, SW.WRONG_P1P2)
        channel = self.state.channel
        if channel is ChannelKind.NONE:
            return self._bac_authenticate(cmd)
        if channel in (ChannelKind.PACE, ChannelKind.CHIP_AUTH):
            return self._ta_authenticate(cmd)
        raise _Reply(SW.CONDITIONS_NOT_SATISFIED)

    def _bac_authenticate(self, cmd: CommandApdu) -> ResponseApdu:
        st = self.state
        _want(st.pace is None, SW.CONDITIONS_NOT_SATISFIED)
        _want(st.challenge is not None, SW.CONDITIONS_NOT_SATISFIED)
        _want(cmd.le in (0, 0x28) and len(cmd.data) == 40, SW.WRONG_LENGTH, reset=True)
        rnd_ic, st.challenge = st.challenge, None
        k_enc, k_mac = proto.bac_keys(self.image.bac_seed)
        plain = proto.bac_open(k_enc, k_mac, cmd.data)
        _want(plain is not None, SW.VERIFICATION_FAILED, reset=True)
        rnd_ifd, echoed, k_ifd = plain[:8], plain[8:16], plain[16:]
        _want(hmac.compare_digest(echoed, rnd_ic), SW.VERIFICATION_FAILED, reset=True)
        k_ic = self.drbg.random_bytes(16)
        reply = proto.bac_cryptogram(k_enc, k_mac, rnd_ic + rnd_ifd + k_ic)
        self._open_channel(ChannelKind.BAC, proto.bac_session(k_ifd, k_ic, rnd_ic, rnd_ifd))
        return ResponseApdu(reply)

    def _open_channel(self, kind: ChannelKind, keys: SessionKeys,
                      password: Optional[PasswordType] = None) -> None:
        self.state = SecurityState(channel=kind, session=keys, pace_password=password)

    # -- MSE:SET -------------------------------------------------------------

    def _mse(self, cmd: CommandApdu) -> ResponseApdu:
        _want(cmd.le is None, SW.WRONG_LENGTH)
        try:
            objects = codec.tlv_decode_all(cmd.data)
        except codec.CodecError:
            raise _Reply(SW.WRONG_DATA)
        by_tag = {o.tag: o.value for o in objects if not o.constructed}
        _want(len(by_tag) == len(objects), SW.WRONG_DATA)
        pair = (cmd.p1, cmd.p2)
        st = self.state
        if pair == proto.MSE_PACE:
            _want(st.channel is ChannelKind.NONE, SW.CONDITIONS_NOT_SATISFIED)
            _want(set(by_tag) == {proto.TAG_OID, proto.TAG_PASSWORD_REF}, SW.WRONG_DATA)
            suite = proto.SUITE_BY_PACE_OID.get(by_tag[proto.TAG_OID])
            _want(suite is not None, SW.WRONG_DATA)
            ref = by_tag[proto.TAG_PASSWORD_REF]
            _want(len(ref) == 1 and ref[0] in PasswordType._value2member_map_, SW.WRONG_DATA)
            password = PasswordType(ref[0])
            if password is PasswordType.PIN:
                _want(self.pin_retries > 0, SW.BLOCKED)
            st.challenge = None
            st.pace = PaceState(password, suite)
            return ResponseApdu()
        if pair == proto.MSE_CA:
            _want(st.channel is not ChannelKind.NONE, SW.ACCESS_DENIED)
            _want(set(by_tag) == {proto.TAG_OID}, SW.WRONG_DATA)
            suite = proto.SUITE_BY_CA_OID.get(by_tag[proto.TAG_OID])
            _want(suite is not None, SW.WRONG_DATA)
            st.ca_suite = suite
            return ResponseApdu()
        if pair == proto.MSE_TA:
            _want(st.channel in (ChannelKind.PACE, ChannelKind.CHIP_AUTH), SW.ACCESS_DENIED)
            _want(set(by_tag) == {proto.TAG_PASSWORD_REF}, SW.WRONG_DATA)
            term = st.ta_terminal
            _want(term is not None, SW.CONDITIONS_NOT_SATISFIED)
            _want(by_tag[proto.TAG_PASSWORD_REF] == term.subject.encode(), SW.WRONG_DATA)
            st.ta_selected = True
            return ResponseApdu()
        raise _Reply(SW.WRONG_P1P2)

    # -- GENERAL AUTHENTICATE: PACE and CA ---------------------------------

    def _general_authenticate(self, cmd: CommandApdu) -> ResponseApdu:
        _want(cmd.p1 == 0 and cmd.p2 == 0, SW.WRONG_P1P2)
        _want(cmd.le == 0, SW.WRONG_LENGTH)
        st = self.state
        if st.channel is ChannelKind.NONE and st.pace is not None:
            return self._pace_step(cmd)
        if st.channel is not ChannelKind.NONE and st.ca_suite is not None:
            _want(cmd.cla == proto.CLA_PLAIN, SW.CLA_NOT_SUPPORTED)
            return self._chip_authenticate(cmd)
        raise _Reply(SW.CONDITIONS_NOT_SATISFIED)

    def _pace_fail(self, sw: int = SW.WRONG_DATA) -> _Reply:
        self.state.pace = None
        return _Reply(sw, reset=True)

    def _pace_step(self, cmd: CommandApdu) -> ResponseApdu:
        pace = self.state.pace
        final = pace.step == 4
        if cmd.cla != (proto.CLA_PLAIN if final else proto.CLA_CHAIN):
            raise self._pace_fail(SW.CLA_NOT_SUPPORTED)
        try:
            node = proto.parse_dyn_auth(cmd.data)
            if pace.step == 1:
                _want(not node.children, SW.WRONG_DATA)
                return self._pace_nonce(pace)
            if pace.step == 2:
                return self._pace_map(pace, proto.single_object(node, 0x81))
            if pace.step == 3:
                return self._pace_agree(pace, proto.single_object(node, 0x83))
            return self._pace_confirm(pace, proto.single_object(node, 0x85))
        except (codec.CodecError, ec.InvalidPoint):
            raise self._pace_fail()
        except _Reply as reply:
            if self.state.pace is pace and reply.sw != SW.SUCCESS:
                self.state.pace = None
            raise _Reply(reply.sw, reset=True)

    def _pace_nonce(self, pace: PaceState) -> ResponseApdu:
        pace.nonce = self.drbg.random_bytes(proto.PACE_NONCE_LEN)
        k_pi = proto.pace_password_key(self.image.password(pace.password), pace.suite)
        z = proto.encrypt_nonce(k_pi, pace.nonce, pace.suite)
        pace.step = 2
        return ResponseApdu(proto.dyn_auth(tlv(0x80, z)))

    def _pace_map(self, pace: PaceState, peer_raw: bytes) -> ResponseApdu:
        peer = ec.decode_point(peer_raw)
        pace.map_key = ec.EcKeyPair.generate(self.drbg)
        shared = ec.scalar_mult(pace.map_key.private, peer)
        pace.generator = proto.map_generator(pace.nonce, shared)
        pace.step = 3
        return ResponseApdu(proto.dyn_auth(tlv(0x82, pace.map_key.public_bytes)))

    def _pace_agree(self, pace: PaceState, peer_raw: bytes) -> ResponseApdu:
        peer = ec.decode_point(peer_raw)
        pace.eph_key = ec.EcKeyPair.generate(self.drbg, pace.generator)
        _want(peer != pace.eph_key.public, SW.WRONG_DATA)
        pace.peer_eph = peer
        shared = ec.ecdh(pace.eph_key.private, peer)
        pace.keys = SessionKeys.derive(shared, pace.suite)
        pace.step = 4
        return ResponseApdu(proto.dyn_auth(tlv(0x84, pace.eph_key.public_bytes)))

    def _pace_confirm(self, pace: PaceState, token: bytes) -> ResponseApdu:
        oid = proto.PACE_OIDS[pace.suite]
        expected = proto.auth_token(pace.keys, oid, pace.eph_key.public)
        if not hmac.compare_digest(expected, token):
            self.state.pace = None
            if pace.password is PasswordType.PIN:
                raise _Reply(self._pin_failure())
            raise _Reply(SW.VERIFICATION_FAILED)
        if pace.password is PasswordType.PIN:
            self.pin_retries = proto.PIN_RETRIES
        reply = proto.auth_token(pace.keys, oid, pace.peer_eph)
        self._open_channel(ChannelKind.PACE, pace.keys, pace.password)
        return ResponseApdu(proto.dyn_auth(tlv(0x86, reply)))

    def _pin_failure(self) -> int:
        self.pin_retries = max(0, self.pin_retries - 1)
        return SW.BLOCKED if self.pin_retries == 0 else SW.retries_left(self.pin_retries)

    def _chip_authenticate(self, cmd: CommandApdu) -> ResponseApdu:
        st = self.state
        suite, st.ca_suite = st.ca_suite, None
        try:
            node = proto.parse_dyn_auth(cmd.data)
            peer = ec.decode_point(proto.single_object(node, 0x80))
        except (codec.CodecError, ec.InvalidPoint):
            raise _Reply(SW.WRONG_DATA)
        keys = SessionKeys.derive(ec.ecdh(self.image.ca_key.private, peer), suite)
        password = st.pace_password

        def rekey():
            self._open_channel(ChannelKind.CHIP_AUTH, keys, password)

        self._after = rekey
        return ResponseApdu(proto.dyn_auth())

    # -- AA, TA, eSign -------------------------------------------------------

    def _internal_authenticate(self, cmd: CommandApdu) -> ResponseApdu:
        _want(self.state.channel is not ChannelKind.NONE, SW.ACCESS_DENIED)
        _want(cmd.p1 == 0 and cmd.p2 == 0, SW.WRONG_P1P2)
        _want(cmd.le == 0, SW.WRONG_LENGTH)
        _want(len(cmd.data) == 8, SW.WRONG_DATA)
        return ResponseApdu(ec.sign(self.image.aa_key.private, cmd.data, self.drbg))

    def _ta_authenticate(self, cmd: CommandApdu) -> ResponseApdu:
        st = self.state
        _want(cmd.le is None, SW.WRONG_LENGTH, reset=True)
        challenge, st.challenge = st.challenge, None
        ready = st.ta_terminal is not None and st.ta_selected and challenge is not None
        _want(ready, SW.CONDITIONS_NOT_SATISFIED, reset=True)
        ok = ec.verify(st.ta_terminal.public_key, challenge, cmd.data)
        _want(ok, SW.VERIFICATION_FAILED, reset=True)
        st.ta_granted = True
        return ResponseApdu()

    def _verify_certificate(self, cmd: CommandApdu) -> ResponseApdu:
        st = self.state
        _want(st.channel in (ChannelKind.PACE, ChannelKind.CHIP_AUTH), SW.ACCESS_DENIED)
        _want(cmd.le is None, SW.WRONG_LENGTH)
        try:
            cert = pki.SimpleCert.decode(cmd.data)
        except (codec.CodecError, ValueError):
            raise _Reply(SW.VERIFICATION_FAILED, reset=True)
        anchor = st.ta_anchor or self.image.cvca
        valid = (
            cert.issuer == anchor.subject
            and pki.may_issue(anchor.role, cert.role)
            and cert.valid_at(self.clock())
            and cert.signed_by(anchor.public_key)
        )
        _want(valid, SW.VERIFICATION_FAILED, reset=True)
        if cert.role is pki.Role.TERMINAL:
            st.ta_terminal = cert
            st.ta_anchor = None
        else:
            st.ta_anchor = cert
        st.ta_selected = False
        return ResponseApdu()

    def _esign_allowed(self) -> bool:
        st = self.state
        return (st.channel in (ChannelKind.PACE, ChannelKind.CHIP_AUTH)
                and st.pace_password is PasswordType.PIN)

    def _verify(self, cmd: CommandApdu) -> ResponseApdu:
        _want(cmd.p1 == 0 and cmd.p2 == proto.PIN_REFERENCE, SW.WRONG_P1P2)
        _want(cmd.le is None, SW.WRONG_LENGTH)
        _want(self._esign_allowed(), SW.ACCESS_DENIED)
        if self.pin_retries == 0:
            raise _Reply(SW.BLOCKED)
        if not cmd.data:
            if self.state.pin_verified:
                return ResponseApdu()
            return ResponseApdu(sw=SW.retries_left(self.pin_retries))
        if not hmac.compare_digest(cmd.data, self.image.pin.encode("ascii")):
            self.state.pin_verified = False
            return ResponseApdu(sw=self._pin_failure())
        self.pin_retries = proto.PIN_RETRIES
        self.state.pin_verified = True
        return ResponseApdu()

    def _pso(self, cmd: CommandApdu) -> ResponseApdu:
        pair = (cmd.p1, cmd.p2)
        if pair == proto.PSO_VERIFY_CERT:
            return self._verify_certificate(cmd)
        if pair not in (proto.PSO_HASH, proto.PSO_SIGN):
            raise _Reply(SW.WRONG_P1P2)
        _want(self._esign_allowed() and self.state.pin_verified, SW.ACCESS_DENIED)
        if pair == proto.PSO_HASH:
            _want(cmd.le is None, SW.WRONG_LENGTH)
            try:
                node = codec.tlv_decode_exact(cmd.data)
            except codec.CodecError:
                raise _Reply(SW.WRONG_DATA)
            _want(node.tag == proto.TAG_HASH_DO and len(node.value) == 32, SW.WRONG_DATA)
            self.state.digest = node.value
            return ResponseApdu()
        _want(cmd.le == 0, SW.WRONG_LENGTH)
        _want(not cmd.data, SW.WRONG_DATA)
        digest, self.state.digest = self.state.digest, None
        _want(digest is not None, SW.CONDITIONS_NOT_SATISFIED)
        return ResponseApdu(ec.sign_digest(self.image.sign.key.private, digest, self.drbg))


def clone_card(card: Union[VirtualCard, CardImage], drbg: Drbg) -> VirtualCard:
    image = card.image if isinstance(card, VirtualCard) else card
    return VirtualCard(image.cloned(drbg))


CardFactory = Callable[[], VirtualCard]


def card_factory(image: CardImage, seed: Optional[bytes] = None) -> CardFactory:
    """Fresh card instances sharing one personalization.

    Each instance gets its own runtime generator so nonces differ across
    instances while the sequence stays reproducible.
    """
    base = Drbg(seed if seed is not None else image.runtime_seed, b"card-factory")

    def make() -> VirtualCard:
        return VirtualCard(image, drbg=base.fork("card"))

    return make
