"""Ready-made lab fixtures: random holders, issued cards and tampered variants."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Optional

from . import lds, pki
from .card import CardImage, VirtualCard, card_factory, personalize
from .cryptokit.drbg import Drbg

LAB_DATE = dt.date(2024, 1, 15)

_SURNAMES = ("GARCIA", "FERNANDEZ", "LOPEZ", "MARTIN", "SANCHEZ", "PEREZ", "GOMEZ", "RUIZ")
_GIVEN = ("ANA", "LUIS", "MARIA", "JAVIER", "LUCIA", "PABLO", "ELENA", "DIEGO")


def random_digits(drbg: Drbg, n: int) -> str:
    return "".join(str(drbg.randbelow(10)) for _ in range(n))


def random_profile(drbg: Drbg, fingerprints: bool = True, face_size: int = 600) -> lds.Profile:
    """A plausible holder with random identifiers and placeholder biometrics."""
    letters = "ABCDEFGHJKLMNPQRSTUVWXYZ"
    doc = "".join(drbg.choice(letters) for _ in range(3)) + random_digits(drbg, 6)
    dob = f"{50 + drbg.randbelow(50):02d}{1 + drbg.randbelow(12):02d}{1 + drbg.randbelow(28):02d}"
    exp = f"{30 + drbg.randbelow(10):02d}{1 + drbg.randbelow(12):02d}{1 + drbg.randbelow(28):02d}"
    return lds.Profile(
        name=f"{drbg.choice(_SURNAMES)},{drbg.choice(_GIVEN)}",
        document_number=doc,
        date_of_birth=dob,
        date_of_expiry=exp,
        nationality="ESP",
        sex=drbg.choice("MF"),
        pin=random_digits(drbg, 6),
        can=random_digits(drbg, 6),
        face_placeholder=drbg.random_bytes(face_size),
        fingerprint_placeholder=drbg.random_bytes(300) if fingerprints else None,
    )


def sample_profile() -> lds.Profile:
    """Fixed holder used in the documentation examples."""
    return lds.Profile(
        name="ESPANOLA,CARMEN",
        document_number="BAA000589",
        date_of_birth="800101",
        date_of_expiry="310101",
        nationality="ESP",
        sex="F",
        pin="123456",
        can="654321",
        face_placeholder=bytes(range(256)) * 3,
        fingerprint_placeholder=b"\xF1" * 200,
    )


@dataclass
class Lab:
    """A PKI and one card issued under it."""

    pki: pki.LabPki
    profile: lds.Profile
    image: CardImage
    drbg: Drbg

    @classmethod
    def create(cls, seed=0, profile: Optional[lds.Profile] = None,
               issued: dt.date = LAB_DATE) -> "Lab":
        drbg = Drbg(seed, b"lab")
        authorities = pki.LabPki.generate(drbg.fork("pki"), issued=issued)
        profile = profile or random_profile(drbg.fork("profile"))
        image = personalize(profile, authorities.csca, authorities.cvca.cert, drbg.fork("card"),
                            issued=issued)
        return cls(authorities, profile, image, drbg)

    @property
    def truststore(self) -> pki.TrustStore:
        return self.pki.truststore

    @property
    def at(self) -> dt.date:
        return self.image.issued

    def card(self, image: Optional[CardImage] = None) -> VirtualCard:
        return VirtualCard(image or self.image)

    def factory(self, image: Optional[CardImage] = None, seed: Optional[bytes] = None):
        return card_factory(image or self.image, seed)

    # -- tamper classes ----------------------------------------------------

    def tampered_group(self, number: int = 2, position: Optional[int] = None) -> CardImage:
        """Flip one bit inside the value of a data group, keeping its header."""
        content = bytearray(self.image.lds_image.groups[number])
        if position is None:
            position = len(content) - 1
        content[position] ^= 0x01
        return self.image.with_lds(self.image.lds_image.with_group(number, bytes(content)))

    def resigned_by_rogue(self, drbg: Optional[Drbg] = None) -> CardImage:
        """Same hashes, but signed by a DS under a CSCA nobody trusts."""
        drbg = drbg or self.drbg.fork("rogue")
        rogue = pki.generate_root(pki.Role.CSCA, self.pki.csca.cert.subject, drbg, self.image.issued)
        ds = pki.issue(rogue, "DS-ROGUE", pki.Role.DS, drbg, issued=self.image.issued)
        sod = lds.sign_sod(self.image.lds_image.groups, ds, drbg)
        return self.image.with_lds(self.image.lds_image.with_sod(sod.encode()))

    def clone(self, drbg: Optional[Drbg] = None) -> CardImage:
        return self.image.cloned(drbg or self.drbg.fork("clone"))
