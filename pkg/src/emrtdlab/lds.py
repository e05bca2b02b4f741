"""Logical Data Structure: TD1 MRZ, data groups, EF.COM and EF.SOD."""

from __future__ import annotations

import base64
import datetime as dt
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple, Union

from . import codec
from .codec import tlv
from .cryptokit import ec
from .cryptokit.drbg import Drbg
from .pki import Credential, Role, SimpleCert, TrustStore, verify_chain

MRZ_CHARSET = re.compile(r"^[A-Z0-9<]*$")
TD1_WIDTH = 30

DG_TAGS = {1: 0x61, 2: 0x75, 3: 0x63, 4: 0x76, 5: 0x65, 6: 0x66, 7: 0x67, 8: 0x68,
           9: 0x69, 10: 0x6A, 11: 0x6B, 12: 0x6C, 13: 0x6D, 14: 0x6E, 15: 0x6F, 16: 0x70}
TAG_TO_DG = {v: k for k, v in DG_TAGS.items()}

TAG_COM = 0x60
TAG_SOD = 0x77
TAG_MRZ = 0x5F1F
TAG_BIOMETRIC = 0x5F2E
TAG_OPAQUE = 0x53
TAG_PUBLIC_KEY = 0x7F49
TAG_POINT = 0x86
TAG_LDS_VERSION = 0x5F01
TAG_UNICODE_VERSION = 0x5F36
TAG_TAG_LIST = 0x5C
TAG_SEQUENCE = 0x30
TAG_OID = 0x06
TAG_INTEGER = 0x02
TAG_OCTETS = 0x04
TAG_SIGNATURE = 0x5F37

SHA256_OID = bytes.fromhex("608648016503040201")
LDS_VERSION = "0108"
UNICODE_VERSION = "040000"


class LdsError(Exception):
    pass


class MrzCharsetError(LdsError, ValueError):
    pass


class MrzFieldError(LdsError, ValueError):
    pass


class MrzIntegrityError(LdsError, ValueError):
    def __init__(self, field_name: str):
        super().__init__(f"check digit mismatch in {field_name}")
        self.field = field_name


class ProfileError(LdsError, ValueError):
    pass


# --------------------------------------------------------------------------
# MRZ
# --------------------------------------------------------------------------

_WEIGHTS = (7, 3, 1)


def _char_value(ch: str) -> int:
    if ch == "<":
        return 0
    if ch.isdigit():
        return int(ch)
    if "A" <= ch <= "Z":
        return ord(ch) - ord("A") + 10
    raise MrzCharsetError(f"invalid MRZ character {ch!r}")


def compute_check_digit(value: str) -> int:
    """7-3-1 weighted check digit."""
    return sum(_char_value(c) * _WEIGHTS[i % 3] for i, c in enumerate(value)) % 10


def _fit(value: str, width: int, name: str) -> str:
    if not MRZ_CHARSET.match(value):
        raise MrzCharsetError(f"{name} contains characters outside [A-Z0-9<]: {value!r}")
    if len(value) > width:
        raise MrzFieldError(f"{name} longer than {width} characters")
    return value.ljust(width, "<")


def mrz_name(surname: str, given_names: str = "") -> str:
    def clean(part):
        return re.sub(r"[^A-Z<]", "<", part.strip().upper().replace(" ", "<"))
    name = clean(surname)
    if given_names:
        name += "<<" + clean(given_names)
    return name


def _check_date(value: str, name: str) -> None:
    if not re.fullmatch(r"\d{6}", value):
        raise MrzFieldError(f"{name} must be YYMMDD")
    month, day = int(value[2:4]), int(value[4:6])
    if not (1 <= month <= 12 and 1 <= day <= 31):
        raise MrzFieldError(f"{name} is not a calendar date")


@dataclass(frozen=True)
class Mrz:
    """TD1 machine readable zone.  Text fields are stored without filler."""

    document_code: str
    issuing_state: str
    document_number: str
    date_of_birth: str
    sex: str
    date_of_expiry: str
    nationality: str
    name: str
    optional_data1: str = ""
    optional_data2: str = ""

    @property
    def lines(self) -> Tuple[str, str, str]:
        l1 = (_fit(self.document_code, 2, "document_code")
              + _fit(self.issuing_state, 3, "issuing_state")
              + _fit(self.document_number, 9, "document_number")
              + str(compute_check_digit(_fit(self.document_number, 9, "document_number")))
              + _fit(self.optional_data1, 15, "optional_data1"))
        l2 = (self.date_of_birth + str(compute_check_digit(self.date_of_birth))
              + _fit(self.sex, 1, "sex")
              + self.date_of_expiry + str(compute_check_digit(self.date_of_expiry))
              + _fit(self.nationality, 3, "nationality")
              + _fit(self.optional_data2, 11, "optional_data2"))
        composite = l1[5:30] + l2[0:7] + l2[8:15] + l2[18:29]
        l2 += str(compute_check_digit(composite))
        l3 = _fit(self.name, TD1_WIDTH, "name")
        return l1, l2, l3

    @property
    def text(self) -> str:
        return "".join(self.lines)

    @property
    def key_info(self) -> str:
        """Document number, birth date and expiry date, each with its check digit."""
        l1, l2, _ = self.lines
        return l1[5:15] + l2[0:7] + l2[8:15]

    def replace(self, **changes) -> "Mrz":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return mrz_build(**values)


def mrz_build(document_number: str, date_of_birth: str, date_of_expiry: str, name: str,
              nationality: str, sex: str = "<", issuing_state: Optional[str] = None,
              document_code: str = "ID", optional_data1: str = "",
              optional_data2: str = "") -> Mrz:
    sex = sex or "<"
    if sex not in ("M", "F", "<", "X"):
        raise MrzFieldError(f"sex must be M, F or <, got {sex!r}")
    sex = "<" if sex == "X" else sex
    _check_date(date_of_birth, "date_of_birth")
    _check_date(date_of_expiry, "date_of_expiry")
    mrz = Mrz(
        document_code=document_code,
        issuing_state=issuing_state or nationality,
        document_number=document_number.rstrip("<"),
        date_of_birth=date_of_birth,
        sex=sex,
        date_of_expiry=date_of_expiry,
        nationality=nationality,
        name=name.rstrip("<"),
        optional_data1=optional_data1.rstrip("<"),
        optional_data2=optional_data2.rstrip("<"),
    )
    mrz.lines  # validates widths and charset
    return mrz


def mrz_parse(lines: Union[str, Iterable[str]]) -> Mrz:
    if isinstance(lines, str):
        text = "".join(lines.split())
        lines = [text[i : i + TD1_WIDTH] for i in range(0, len(text), TD1_WIDTH)]
    lines = list(lines)
    if len(lines) != 3 or any(len(l) != TD1_WIDTH for l in lines):
        raise MrzFieldError("TD1 MRZ needs three lines of 30 characters")
    for line in lines:
        if not MRZ_CHARSET.match(line):
            raise MrzCharsetError(f"invalid characters in MRZ line {line!r}")
    l1, l2, l3 = lines

    def check(value, digit, name):
        if not digit.isdigit() or compute_check_digit(value) != int(digit):
            raise MrzIntegrityError(name)

    check(l1[5:14], l1[14], "document_number")
    check(l2[0:6], l2[6], "date_of_birth")
    check(l2[8:14], l2[14], "date_of_expiry")
    check(l1[5:30] + l2[0:7] + l2[8:15] + l2[18:29], l2[29], "composite")
    return Mrz(
        document_code=l1[0:2].rstrip("<"),
        issuing_state=l1[2:5].rstrip("<"),
        document_number=l1[5:14].rstrip("<"),
        date_of_birth=l2[0:6],
        sex=l2[7],
        date_of_expiry=l2[8:14],
        nationality=l2[15:18].rstrip("<"),
        name=l3.rstrip("<"),
        optional_data1=l1[15:30].rstrip("<"),
        optional_data2=l2[18:29].rstrip("<"),
    )


def key_info_from_fields(document_number: str, date_of_birth: str, date_of_expiry: str) -> str:
    """Key fields with check digits, as printed on the MRZ."""
    doc = _fit(document_number.upper(), 9, "document_number")
    _check_date(date_of_birth, "date_of_birth")
    _check_date(date_of_expiry, "date_of_expiry")
    return "".join(v + str(compute_check_digit(v)) for v in (doc, date_of_birth, date_of_expiry))


def parse_key_info(text: str) -> str:
    """Accept a full TD1 MRZ, ``DOC,YYMMDD,YYMMDD`` or the 24-character key info."""
    text = text.strip()
    if text.count(",") == 2:
        return key_info_from_fields(*(part.strip() for part in text.split(",")))
    compact = "".join(text.split())
    if len(compact) == 3 * TD1_WIDTH:
        return mrz_parse(compact).key_info
    if len(compact) == 24 and MRZ_CHARSET.match(compact):
        return compact
    raise MrzFieldError("MRZ credential must be a TD1 MRZ, DOC,DOB,EXPIRY or 24-character key info")


def _key_info(mrz: Union[Mrz, str]) -> bytes:
    return (mrz.key_info if isinstance(mrz, Mrz) else mrz).encode("ascii")


def bac_seed(mrz: Union[Mrz, str]) -> bytes:
    """BAC key seed from an MRZ or its already extracted key fields."""
    return hashlib.sha1(_key_info(mrz)).digest()[:16]


def pace_mrz_password(mrz: Union[Mrz, str]) -> bytes:
    """PACE password derived from the MRZ: the full SHA-1 of the key fields."""
    return hashlib.sha1(_key_info(mrz)).digest()


# --------------------------------------------------------------------------
# Data groups, EF.COM, EF.SOD
# --------------------------------------------------------------------------


def encode_dg1(mrz: Mrz) -> bytes:
    return tlv(DG_TAGS[1], tlv(TAG_MRZ, mrz.text.encode("ascii"))).encode()


def parse_dg1(data: bytes) -> Mrz:
    node = codec.tlv_decode_exact(data)
    if node.tag != DG_TAGS[1]:
        raise LdsError("not DG1")
    return mrz_parse(node.require(TAG_MRZ).value.decode("ascii"))


def encode_biometric(number: int, placeholder: bytes) -> bytes:
    return tlv(DG_TAGS[number], tlv(TAG_BIOMETRIC, placeholder)).encode()


def encode_opaque(number: int, content: bytes) -> bytes:
    return tlv(DG_TAGS[number], tlv(TAG_OPAQUE, content)).encode()


def encode_public_key_dg(number: int, public_key) -> bytes:
    return tlv(DG_TAGS[number], tlv(TAG_PUBLIC_KEY, tlv(TAG_POINT, ec.encode_point(public_key)))).encode()


def parse_public_key_dg(data: bytes, number: int):
    node = codec.tlv_decode_exact(data)
    if node.tag != DG_TAGS[number]:
        raise LdsError(f"not DG{number}")
    return ec.decode_point(node.require(TAG_PUBLIC_KEY).require(TAG_POINT).value)


@dataclass(frozen=True)
class DataGroup:
    number: int
    content: bytes

    def __post_init__(self):
        if self.number not in DG_TAGS:
            raise LdsError(f"data group number {self.number} outside 1-16")

    @property
    def tag(self) -> int:
        return DG_TAGS[self.number]


@dataclass(frozen=True)
class EfCom:
    lds_version: str
    unicode_version: str
    tags: Tuple[int, ...]

    def encode(self) -> bytes:
        return tlv(
            TAG_COM,
            tlv(TAG_LDS_VERSION, self.lds_version.encode()),
            tlv(TAG_UNICODE_VERSION, self.unicode_version.encode()),
            tlv(TAG_TAG_LIST, bytes(self.tags)),
        ).encode()

    @classmethod
    def decode(cls, data: bytes) -> "EfCom":
        node = codec.tlv_decode_exact(data)
        if node.tag != TAG_COM:
            raise LdsError("not EF.COM")
        return cls(
            node.require(TAG_LDS_VERSION).value.decode("ascii"),
            node.require(TAG_UNICODE_VERSION).value.decode("ascii"),
            tuple(node.require(TAG_TAG_LIST).value),
        )

    @property
    def data_groups(self) -> Tuple[int, ...]:
        return tuple(TAG_TO_DG[t] for t in self.tags if t in TAG_TO_DG)


def encode_hash_map(hashes: Mapping[int, bytes], algorithm: bytes = SHA256_OID) -> bytes:
    return tlv(
        TAG_SEQUENCE,
        tlv(TAG_OID, algorithm),
        tlv(TAG_SEQUENCE, *(
            tlv(TAG_SEQUENCE, tlv(TAG_INTEGER, bytes([n])), tlv(TAG_OCTETS, h))
            for n, h in sorted(hashes.items())
        )),
    ).encode()


@dataclass(frozen=True)
class EfSod:
    """Document security object: SHA-256 hash per data group, signed by a DS."""

    hash_algorithm: bytes
    hashes: Dict[int, bytes]
    ds_cert: SimpleCert
    signature: bytes

    @property
    def signed_content(self) -> bytes:
        return encode_hash_map(self.hashes, self.hash_algorithm)

    def encode(self) -> bytes:
        return tlv(
            TAG_SOD,
            codec.tlv_decode_exact(self.signed_content),
            self.ds_cert.to_node(),
            tlv(TAG_SIGNATURE, self.signature),
        ).encode()

    @classmethod
    def decode(cls, data: bytes) -> "EfSod":
        node = codec.tlv_decode_exact(data)
        if node.tag != TAG_SOD:
            raise LdsError("not EF.SOD")
        content = node.require(TAG_SEQUENCE)
        alg = content.require(TAG_OID).value
        hashes = {}
        for entry in content.require(TAG_SEQUENCE).children:
            num = entry.require(TAG_INTEGER).value
            if len(num) != 1 or num[0] in hashes:
                raise LdsError("bad data group number in hash map")
            hashes[num[0]] = entry.require(TAG_OCTETS).value
        return cls(alg, hashes, SimpleCert.from_node(node.require(0x7F21)),
                   node.require(TAG_SIGNATURE).value)


def sign_sod(groups: Mapping[int, bytes], ds: Credential, drbg: Drbg) -> EfSod:
    hashes = {n: hashlib.sha256(content).digest() for n, content in groups.items()}
    signature = ec.sign(ds.key.private, encode_hash_map(hashes), drbg)
    return EfSod(SHA256_OID, hashes, ds.cert, signature)


# --------------------------------------------------------------------------
# Personalization profile and LDS image
# --------------------------------------------------------------------------

_REQUIRED = ("name", "document_number", "date_of_birth", "date_of_expiry",
             "nationality", "sex", "pin", "can", "face_placeholder")


@dataclass(frozen=True)
class Profile:
    """Holder data used to personalize a card.

    On disk this is a JSON object with the field names below; the two
    placeholders and ``extra_groups`` values are base64 strings.
    """

    name: str
    document_number: str
    date_of_birth: str
    date_of_expiry: str
    nationality: str
    sex: str
    pin: str
    can: str
    face_placeholder: bytes
    fingerprint_placeholder: Optional[bytes] = None
    issuing_state: Optional[str] = None
    extra_groups: Dict[int, bytes] = field(default_factory=dict)

    def __post_init__(self):
        for secret in ("pin", "can"):
            if not re.fullmatch(r"\d{6}", getattr(self, secret)):
                raise ProfileError(f"{secret} must be exactly 6 digits")
        for n in self.extra_groups:
            if not 5 <= n <= 13 and n != 16:
                raise ProfileError(f"extra data group {n} must be DG5-DG13 or DG16")
        try:
            self.mrz
        except LdsError as exc:
            raise ProfileError(str(exc)) from exc

    @property
    def mrz(self) -> Mrz:
        name = self.name if "<" in self.name else mrz_name(*self.name.split(",", 1))
        return mrz_build(
            document_number=self.document_number,
            date_of_birth=self.date_of_birth,
            date_of_expiry=self.date_of_expiry,
            name=name,
            nationality=self.nationality,
            sex=self.sex,
            issuing_state=self.issuing_state,
        )

    @classmethod
    def from_dict(cls, data: Mapping) -> "Profile":
        missing = [k for k in _REQUIRED if k not in data or data[k] in (None, "")]
        if missing:
            raise ProfileError(f"missing profile fields: {', '.join(missing)}")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ProfileError(f"unknown profile fields: {', '.join(sorted(unknown))}")

        def b64(value, name):
            try:
                return base64.b64decode(value, validate=True)
            except (ValueError, TypeError) as exc:
                raise ProfileError(f"{name} is not valid base64") from exc

        fp = data.get("fingerprint_placeholder")
        extra = {int(k): b64(v, f"extra_groups[{k}]") for k, v in (data.get("extra_groups") or {}).items()}
        return cls(
            name=str(data["name"]),
            document_number=str(data["document_number"]),
            date_of_birth=str(data["date_of_birth"]),
            date_of_expiry=str(data["date_of_expiry"]),
            nationality=str(data["nationality"]),
            sex=str(data["sex"]),
            pin=str(data["pin"]),
            can=str(data["can"]),
            face_placeholder=b64(data["face_placeholder"], "face_placeholder"),
            fingerprint_placeholder=b64(fp, "fingerprint_placeholder") if fp else None,
            issuing_state=data.get("issuing_state"),
            extra_groups=extra,
        )

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "document_number": self.document_number,
            "date_of_birth": self.date_of_birth,
            "date_of_expiry": self.date_of_expiry,
            "nationality": self.nationality,
            "sex": self.sex,
            "pin": self.pin,
            "can": self.can,
            "face_placeholder": base64.b64encode(self.face_placeholder).decode(),
        }
        if self.fingerprint_placeholder is not None:
            out["fingerprint_placeholder"] = base64.b64encode(self.fingerprint_placeholder).decode()
        if self.issuing_state:
            out["issuing_state"] = self.issuing_state
        if self.extra_groups:
            out["extra_groups"] = {str(k): base64.b64encode(v).decode()
                                   for k, v in sorted(self.extra_groups.items())}
        return out


def load_profile(path: Union[str, Path]) -> Profile:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ProfileError(f"{path}: profile must be a JSON object")
    return Profile.from_dict(data)


def save_profile(path: Union[str, Path], profile: Profile) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class ChipPublicKeys:
    chip_auth: Optional[Tuple[int, int]] = None
    active_auth: Optional[Tuple[int, int]] = None


@dataclass(frozen=True)
class LdsImage:
    """Encoded files of the LDS exactly as served over the wire."""

    groups: Dict[int, bytes]
    ef_com: bytes
    ef_sod: bytes

    @property
    def mrz(self) -> Mrz:
        return parse_dg1(self.groups[1])

    @property
    def com(self) -> EfCom:
        return EfCom.decode(self.ef_com)

    @property
    def sod(self) -> EfSod:
        return EfSod.decode(self.ef_sod)

    def with_group(self, number: int, content: bytes) -> "LdsImage":
        groups = dict(self.groups)
        groups[number] = content
        return LdsImage(groups, self.ef_com, self.ef_sod)

    def with_sod(self, ef_sod: bytes) -> "LdsImage":
        return LdsImage(dict(self.groups), self.ef_com, ef_sod)


def build_lds(profile: Profile, ds: Credential, chip_keys: Optional[ChipPublicKeys],
              drbg: Drbg) -> LdsImage:
    """Encode every data group, list them in EF.COM and sign their hashes."""
    if ds.cert.role is not Role.DS:
        raise ProfileError("document security object must be signed by a DS certificate")
    groups = {
        1: encode_dg1(profile.mrz),
        2: encode_biometric(2, profile.face_placeholder),
    }
    if profile.fingerprint_placeholder is not None:
        groups[3] = encode_biometric(3, profile.fingerprint_placeholder)
    for n, content in profile.extra_groups.items():
        groups[n] = encode_opaque(n, content)
    if chip_keys is not None:
        if chip_keys.chip_auth is not None:
            groups[14] = encode_public_key_dg(14, chip_keys.chip_auth)
        if chip_keys.active_auth is not None:
            groups[15] = encode_public_key_dg(15, chip_keys.active_auth)
    groups = dict(sorted(groups.items()))
    com = EfCom(LDS_VERSION, UNICODE_VERSION, tuple(DG_TAGS[n] for n in groups))
    sod = sign_sod(groups, ds, drbg)
    return LdsImage(groups, com.encode(), sod.encode())


@dataclass
class PaReport:
    """Outcome of passive authentication; failures are entries, never exceptions."""

    dg_hashes: Dict[int, bool] = field(default_factory=dict)
    unlisted_groups: Tuple[int, ...] = ()
    signature_ok: bool = False
    chain_ok: bool = False
    chain_reason: str = "not-checked"
    error: Optional[str] = None

    @property
    def hashes_ok(self) -> bool:
        return bool(self.dg_hashes) and all(self.dg_hashes.values()) and not self.unlisted_groups

    @property
    def all_pass(self) -> bool:
        return self.hashes_ok and self.signature_ok and self.chain_ok and self.error is None

    @property
    def failed_groups(self) -> Tuple[int, ...]:
        return tuple(n for n, ok in sorted(self.dg_hashes.items()) if not ok)

    def to_dict(self) -> dict:
        return {
            "dg_hashes": {f"DG{n}": ok for n, ok in sorted(self.dg_hashes.items())},
            "unlisted_groups": list(self.unlisted_groups),
            "signature_ok": self.signature_ok,
            "chain_ok": self.chain_ok,
            "chain_reason": self.chain_reason,
            "error": self.error,
            "all_pass": self.all_pass,
        }


def verify_security_object(ef_sod: bytes, groups: Mapping[int, bytes], truststore: TrustStore,
                           at: Optional[dt.date] = None) -> PaReport:
    """Recompute group hashes, check the DS signature and the CSCA chain.

    Only the groups supplied in ``groups`` are hash-checked; groups that were
    not read (access denied) are simply absent from the report.
    """
    report = PaReport()
    try:
        sod = EfSod.decode(ef_sod)
    except (codec.CodecError, LdsError, UnicodeDecodeError) as exc:
        report.error = f"EF.SOD unparseable: {exc}"
        report.dg_hashes = {n: False for n in groups}
        return report
    report.dg_hashes = {
        n: n in sod.hashes and hashlib.sha256(content).digest() == sod.hashes[n]
        for n, content in sorted(groups.items())
    }
    report.unlisted_groups = tuple(sorted(n for n in groups if n not in sod.hashes))
    report.signature_ok = (
        sod.hash_algorithm == SHA256_OID
        and ec.verify(sod.ds_cert.public_key, sod.signed_content, sod.signature)
    )
    if sod.ds_cert.role is not Role.DS:
        report.chain_ok, report.chain_reason = False, "role"
    else:
        result = verify_chain(sod.ds_cert, [], truststore, at)
        report.chain_ok, report.chain_reason = result.ok, result.reason
    return report


def verify_sod(lds: LdsImage, truststore: TrustStore, at: Optional[dt.date] = None) -> PaReport:
    return verify_security_object(lds.ef_sod, lds.groups, truststore, at)
