import hashlib
import json
import random

import pytest

from emrtdlab import lds, pki
from emrtdlab.cryptokit import Drbg, EcKeyPair, sign
from emrtdlab.lab import LAB_DATE, random_profile, sample_profile
from emrtdlab.lds import (
    ChipPublicKeys,
    EfCom,
    MrzCharsetError,
    MrzIntegrityError,
    ProfileError,
    Profile,
    bac_seed,
    build_lds,
    compute_check_digit,
    mrz_build,
    mrz_parse,
    parse_dg1,
    verify_sod,
)


@pytest.fixture(scope="module")
def authorities():
    drbg = Drbg(b"lds-tests")
    csca = pki.generate_root(pki.Role.CSCA, "CSCA-TST", drbg, LAB_DATE)
    ds = pki.issue(csca, "DS-TST", pki.Role.DS, drbg, issued=LAB_DATE)
    return csca, ds, pki.TrustStore([csca.cert])


def _chip_keys(drbg):
    return ChipPublicKeys(EcKeyPair.generate(drbg).public, EcKeyPair.generate(drbg).public)


# -- check digits -----------------------------------------------------------


@pytest.mark.parametrize("field,digit", [("520727", 3), ("<<<<<<", 0), ("ABC123456", 0)])
def test_check_digit_examples(field, digit):
    assert compute_check_digit(field) == digit


def _hand_check_digit(field):
    # independent reference: explicit value table, weights cycled by hand
    values = {str(d): d for d in range(10)}
    values.update({chr(ord("A") + i): 10 + i for i in range(26)})
    values["<"] = 0
    weights = [7, 3, 1] * (len(field) // 3 + 1)
    return sum(values[c] * w for c, w in zip(field, weights)) % 10


def test_check_digit_matches_reference():
    rng = random.Random(1)
    charset = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ<"
    for _ in range(1000):
        field = "".join(rng.choice(charset) for _ in range(rng.randrange(1, 30)))
        assert compute_check_digit(field) == _hand_check_digit(field)


def test_check_digit_rejects_charset():
    with pytest.raises(MrzCharsetError):
        compute_check_digit("abc")


def test_check_digit_catches_every_substitution_in_date_field():
    field = "740812"
    base = compute_check_digit(field)
    for i in range(len(field)):
        for d in "0123456789":
            if d == field[i]:
                continue
            mutated = field[:i] + d + field[i + 1:]
            assert compute_check_digit(mutated) != base


def test_check_digit_alphanumeric_blind_spot_is_mod10_class():
    # weights are coprime to 10, so a substitution escapes exactly when the
    # two characters have the same value modulo 10 (e.g. '0', 'A', 'K', 'U', '<')
    field = "L898902C<"
    base = compute_check_digit(field)
    charset = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ<"
    value = lambda c: 0 if c == "<" else (int(c) if c.isdigit() else ord(c) - 55)
    for i in range(len(field)):
        for c in charset:
            if c == field[i]:
                continue
            detected = compute_check_digit(field[:i] + c + field[i + 1:]) != base
            assert detected == ((value(c) - value(field[i])) % 10 != 0)


# -- MRZ --------------------------------------------------------------------


def test_build_parse_round_trip():
    drbg = Drbg(2)
    for _ in range(200):
        mrz = random_profile(drbg, face_size=4).mrz
        again = mrz_parse(mrz.lines)
        assert again == mrz
        assert all(len(line) == 30 for line in mrz.lines)


def test_corrupt_document_number_detected():
    mrz = sample_profile().mrz
    l1, l2, l3 = mrz.lines
    corrupt = l1[:6] + ("B" if l1[6] != "B" else "C") + l1[7:]
    with pytest.raises(MrzIntegrityError) as info:
        mrz_parse([corrupt, l2, l3])
    assert "document_number" in str(info.value)


def test_short_name_padded():
    mrz = mrz_build("X12345678", "800101", "300101", "LI<<AN", "ESP")
    assert mrz.lines[2] == "LI<<AN" + "<" * 24


def test_td1_specimen():
    specimen = ["I<UTOD231458907<<<<<<<<<<<<<<<",
                "7408122F1204159UTO<<<<<<<<<<<6",
                "ERIKSSON<<ANNA<MARIA<<<<<<<<<<"]
    mrz = mrz_parse(specimen)
    assert (mrz.document_number, mrz.date_of_birth, mrz.date_of_expiry) == ("D23145890", "740812", "120415")
    rebuilt = mrz_build("D23145890", "740812", "120415", "ERIKSSON<<ANNA<MARIA", "UTO",
                        sex="F", document_code="I")
    assert list(rebuilt.lines) == specimen


def test_bac_seed_matches_independent_hash():
    mrz = sample_profile().mrz
    l1, l2, _ = mrz.lines
    key_info = l1[5:15] + l2[0:7] + l2[8:15]
    assert bac_seed(mrz) == hashlib.sha1(key_info.encode()).digest()[:16]


def test_bac_seed_input_separation_and_representation():
    mrz = sample_profile().mrz
    assert bac_seed(mrz) != bac_seed(mrz.replace(date_of_expiry="320101"))
    assert bac_seed(mrz_parse(mrz.text)) == bac_seed(mrz)
    assert bac_seed(mrz.key_info) == bac_seed(mrz)


def test_parse_key_info_forms():
    mrz = sample_profile().mrz
    assert lds.parse_key_info(mrz.text) == mrz.key_info
    assert lds.parse_key_info("BAA000589,800101,310101") == mrz.key_info
    assert lds.parse_key_info(mrz.key_info) == mrz.key_info


# -- LDS build and passive authentication -----------------------------------


def test_minimal_profile_two_groups(authorities):
    _, ds, _ = authorities
    profile = Profile(**{**sample_profile().__dict__, "fingerprint_placeholder": None})
    image = build_lds(profile, ds, None, Drbg(3))
    assert set(image.groups) == {1, 2}
    assert len(image.com.tags) == 2
    assert set(image.com.data_groups) == set(image.groups)


def test_full_image_consistency(authorities):
    _, ds, store = authorities
    image = build_lds(sample_profile(), ds, _chip_keys(Drbg(4)), Drbg(4))
    assert set(image.com.data_groups) == set(image.groups) == {1, 2, 3, 14, 15}
    assert set(image.sod.hashes) == set(image.groups)
    assert parse_dg1(image.groups[1]) == sample_profile().mrz
    assert EfCom.decode(image.ef_com) == image.com
    assert verify_sod(image, store, LAB_DATE).all_pass


def test_deterministic_build(authorities):
    _, ds, _ = authorities
    keys = _chip_keys(Drbg(5))
    a = build_lds(sample_profile(), ds, keys, Drbg(b"nonce"))
    b = build_lds(sample_profile(), ds, keys, Drbg(b"nonce"))
    assert a.ef_sod == b.ef_sod and a.groups == b.groups


def test_missing_profile_field():
    data = sample_profile().to_dict()
    del data["date_of_birth"]
    with pytest.raises(ProfileError):
        Profile.from_dict(data)


def test_profile_json_round_trip(tmp_path):
    profile = sample_profile()
    path = tmp_path / "p.json"
    lds.save_profile(path, profile)
    assert lds.load_profile(path) == profile
    assert json.loads(path.read_text())["pin"] == "123456"


def test_profile_rejects_bad_pin():
    with pytest.raises(ProfileError):
        Profile(**{**sample_profile().__dict__, "pin": "12345"})


def test_dg2_flip_only_fails_dg2(authorities):
    _, ds, store = authorities
    image = build_lds(sample_profile(), ds, _chip_keys(Drbg(6)), Drbg(6))
    dg2 = bytearray(image.groups[2])
    dg2[-10] ^= 0x01
    report = verify_sod(image.with_group(2, bytes(dg2)), store, LAB_DATE)
    assert report.failed_groups == (2,)
    assert report.signature_ok and report.chain_ok
    assert not report.all_pass


def test_self_signed_ds_fails_chain(authorities):
    _, _, store = authorities
    drbg = Drbg(7)
    key = EcKeyPair.generate(drbg)
    body = pki.SimpleCert("DS-SELF", "DS-SELF", pki.Role.DS, key.public, LAB_DATE,
                          LAB_DATE.replace(year=2030))
    cert = pki.SimpleCert(**{**body.__dict__, "signature": sign(key.private, body.body_bytes(), drbg)})
    image = build_lds(sample_profile(), pki.Credential(cert, key), None, drbg)
    report = verify_sod(image, store, LAB_DATE)
    assert report.signature_ok and report.hashes_ok
    assert not report.chain_ok and report.chain_reason == "unknown-root"


def test_unparseable_sod_is_a_report_entry(authorities):
    _, ds, store = authorities
    image = build_lds(sample_profile(), ds, None, Drbg(8))
    report = verify_sod(image.with_sod(b"\x77\x01\x00"), store, LAB_DATE)
    assert report.error and not report.all_pass


def test_untampered_random_profiles_all_pass(authorities):
    _, ds, store = authorities
    drbg = Drbg(9)
    for _ in range(100):
        image = build_lds(random_profile(drbg, face_size=64), ds, _chip_keys(drbg), drbg)
        assert verify_sod(image, store, LAB_DATE).all_pass


def test_sampled_bit_mutations_detected(authorities):
    _, ds, store = authorities
    drbg = Drbg(10)
    image = build_lds(random_profile(drbg), ds, _chip_keys(drbg), drbg)
    rng = random.Random(10)
    numbers = sorted(image.groups)
    for _ in range(1000):
        n = rng.choice(numbers)
        content = bytearray(image.groups[n])
        bit = rng.randrange(len(content) * 8)
        content[bit // 8] ^= 1 << (bit % 8)
        report = verify_sod(image.with_group(n, bytes(content)), store, LAB_DATE)
        assert report.failed_groups == (n,)
