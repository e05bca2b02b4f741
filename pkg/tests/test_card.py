import hashlib
import random

import pytest

from emrtdlab import lds, pki, terminal
from emrtdlab import protocol as proto
from emrtdlab.card import CardImage, ChannelKind, VirtualCard, personalize
from emrtdlab.codec import CommandApdu, decode_response, tlv, tlv_decode_all
from emrtdlab.cryptokit import CipherSuite, Drbg, EcKeyPair, ec, verify, verify_digest
from emrtdlab.lab import LAB_DATE, Lab, sample_profile
from emrtdlab.protocol import PasswordType
from emrtdlab.terminal import AccessDenied, AuthenticationFailed, TaCredentials
from emrtdlab.transport import Channel, RecordingChannel, loopback


def _select(card, fid=None):
    card.process_apdu(CommandApdu(0x00, 0xA4, 0x04, 0x0C, proto.EMRTD_AID))
    if fid is not None:
        return card.process_apdu(CommandApdu(0x00, 0xA4, 0x02, 0x0C, fid.to_bytes(2, "big")))


def _bac(card, lab, drbg=None):
    ch = loopback(card)
    terminal.select_application(ch)
    return terminal.run_bac(ch, lab.image.mrz_key_info, drbg or Drbg(1))


def _pace(card, secret, kind, drbg=None):
    ch = loopback(card)
    terminal.select_application(ch)
    return terminal.run_pace(ch, secret, kind, drbg or Drbg(2))


# -- personalization --------------------------------------------------------


def test_personalized_com_lists_groups(lab):
    card = lab.card()
    session = _bac(card, lab)
    com = lds.EfCom.decode(terminal.read_ef(session, proto.FID_COM))
    assert set(com.data_groups) == set(lab.image.lds_image.groups) == {1, 2, 3, 14, 15}


def test_personalization_is_deterministic():
    a = Lab.create(seed=42, profile=sample_profile())
    b = Lab.create(seed=42, profile=sample_profile())
    assert a.image.files() == b.image.files()
    assert a.image.encode() == b.image.encode()


def test_no_write_instruction(lab):
    card = lab.card()
    _select(card, proto.dg_fid(1))
    for ins in (0xD6, 0xD0, 0xDA, 0xE0, 0xE4):
        assert card.process_apdu(CommandApdu(0x00, ins, 0, 0, b"\x00")).sw == 0x6D00
    session = _bac(card, lab)
    resp = session.transmit(CommandApdu(0x00, 0xD6, 0, 0, b"\x00"))
    assert resp.sw == 0x6D00


def test_card_image_round_trip(tmp_path, lab):
    path = tmp_path / "card.bin"
    lab.image.save(path)
    again = CardImage.load(path)
    assert again == lab.image
    assert again.files() == lab.image.files()


# -- dispatch basics --------------------------------------------------------


def test_select_unknown_aid(lab):
    card = lab.card()
    assert card.process_apdu(CommandApdu(0x00, 0xA4, 0x04, 0x0C, bytes.fromhex("A0000000000000"))).sw == 0x6A82


def test_read_before_auth_denied(lab):
    card = lab.card()
    assert _select(card, proto.dg_fid(1)).ok
    assert card.process_apdu(CommandApdu(0x00, 0xB0, 0, 0, le=0)).sw == 0x6982


def test_get_challenge_is_drbg_stream(lab):
    card = VirtualCard(lab.image, drbg=Drbg(b"oracle"))
    resp = card.process_apdu(CommandApdu(0x00, 0x84, 0, 0, le=8))
    assert resp.ok and resp.data == Drbg(b"oracle").random_bytes(8)


def test_unknown_ins_and_cla(lab):
    card = lab.card()
    assert card.process_apdu(CommandApdu(0x00, 0x42, 0, 0)).sw == 0x6D00
    assert card.process_apdu(CommandApdu(0x80, 0xA4, 0, 0)).sw == 0x6E00


def test_process_never_raises_on_short_input(lab):
    card = lab.card()
    assert decode_response(card.process(b"\x00")).sw == 0x6700


# -- BAC --------------------------------------------------------------------


def test_bac_success(lab):
    card = lab.card()
    session = _bac(card, lab)
    assert card.state.channel is ChannelKind.BAC
    assert lds.parse_dg1(terminal.read_group(session, 1)) == lab.image.lds_image.mrz


def test_bac_wrong_expiry(lab):
    card = lab.card()
    mrz = lab.image.lds_image.mrz
    wrong = mrz.replace(date_of_expiry="991231" if mrz.date_of_expiry != "991231" else "981231")
    ch = loopback(card)
    terminal.select_application(ch)
    with pytest.raises(AuthenticationFailed) as info:
        terminal.run_bac(ch, wrong, Drbg(3))
    assert info.value.sw == 0x6300
    assert card.state.channel is ChannelKind.NONE


def test_bac_replay_against_fresh_session(lab):
    card = lab.card()
    rec = RecordingChannel(loopback(card))
    terminal.select_application(rec)
    terminal.run_bac(rec, lab.image.mrz_key_info, Drbg(4))
    captured = next(e.command for e in rec.transcript if e.command[1] == 0x82)
    fresh = lab.card()
    _select(fresh)
    fresh.process(CommandApdu(0x00, 0x84, 0, 0, le=8).encode())
    assert decode_response(fresh.process(captured)).sw == 0x6300
    assert fresh.state.channel is ChannelKind.NONE


# -- PACE -------------------------------------------------------------------


@pytest.mark.parametrize("kind", [PasswordType.CAN, PasswordType.PIN, PasswordType.MRZ])
def test_pace_success(lab, kind):
    card = lab.card()
    secret = {PasswordType.CAN: lab.image.can, PasswordType.PIN: lab.image.pin,
              PasswordType.MRZ: lab.image.mrz_key_info}[kind]
    session = _pace(card, secret, kind)
    assert card.state.channel is ChannelKind.PACE
    assert card.state.pace_password is kind
    assert lds.parse_dg1(terminal.read_group(session, 1)) == lab.image.lds_image.mrz


def test_pace_tdes_suite(lab):
    card = lab.card()
    ch = loopback(card)
    terminal.select_application(ch)
    session = terminal.run_pace(ch, lab.image.can, PasswordType.CAN, Drbg(5), CipherSuite.TDES_RETAIL)
    assert terminal.read_ef(session, proto.FID_COM) == lab.image.lds_image.ef_com


def test_pin_counter_walk(lab):
    card = lab.card()
    wrong = "000000" if lab.image.pin != "000000" else "111111"
    seen = []
    for _ in range(3):
        with pytest.raises(AuthenticationFailed) as info:
            _pace(card, wrong, PasswordType.PIN)
        seen.append(info.value.sw)
    assert seen == [0x63C2, 0x63C1, 0x6983]
    # blocked: even the right PIN is refused at MSE:SET
    with pytest.raises(terminal.TerminalError) as info:
        _pace(card, lab.image.pin, PasswordType.PIN)
    assert info.value.sw == 0x6983


def test_pin_success_resets_counter(lab):
    card = lab.card()
    with pytest.raises(AuthenticationFailed):
        _pace(card, "000000" if lab.image.pin != "000000" else "111111", PasswordType.PIN)
    assert card.pin_retries == 2
    _pace(card, lab.image.pin, PasswordType.PIN)
    assert card.pin_retries == 3


class _SwapRound3(Channel):
    """Replaces the terminal's round-3 ephemeral key with an unrelated point."""

    def __init__(self, inner):
        self.inner = inner
        self.after_abort = []
        self.aborted = False

    def exchange(self, raw):
        if self.aborted:
            self.after_abort.append(raw)
        if raw[:2] == b"\x10\x86" and b"\x83\x41\x04" in raw:
            pos = raw.index(b"\x83\x41\x04") + 2
            other = EcKeyPair.generate(Drbg(b"mitm")).public_bytes
            raw = raw[:pos] + other + raw[pos + 65:]
        resp, rtt = self.inner.exchange(raw)
        if raw[:2] == b"\x00\x86" and resp[-2:] != b"\x90\x00":
            self.aborted = True
        return resp, rtt


def test_swapped_ephemeral_key_fails_at_token(lab):
    card = lab.card()
    ch = _SwapRound3(loopback(card))
    terminal.select_application(ch)
    with pytest.raises(AuthenticationFailed) as info:
        terminal.run_pace(ch, lab.image.can, PasswordType.CAN, Drbg(6))
    assert info.value.sw == 0x6300
    assert ch.after_abort == []
    assert card.state.channel is ChannelKind.NONE


def test_wrong_password_only_fails_at_round_four(lab):
    card = lab.card()
    rec = RecordingChannel(loopback(card))
    terminal.select_application(rec)
    with pytest.raises(AuthenticationFailed):
        terminal.run_pace(rec, "999999" if lab.image.can != "999999" else "888888", PasswordType.CAN, Drbg(7))
    ga = [e for e in rec.transcript if e.command[1] == 0x86]
    assert len(ga) == 4
    assert [e.response[-2:] for e in ga[:3]] == [b"\x90\x00"] * 3
    assert ga[3].response == b"\x63\x00"


# -- secure messaging at the card -------------------------------------------


def test_plaintext_under_channel_resets(lab):
    card = lab.card()
    _bac(card, lab)
    assert card.process_apdu(CommandApdu(0x00, 0xA4, 0x02, 0x0C, b"\x01\x01")).sw == 0x6987
    assert card.state.channel is ChannelKind.NONE


def test_replayed_wrapped_command(lab):
    card = lab.card()
    rec = RecordingChannel(loopback(card))
    terminal.select_application(rec)
    session = terminal.run_bac(rec, lab.image.mrz_key_info, Drbg(8))
    terminal.read_ef(session, proto.FID_COM)
    replay = rec.transcript[-1].command
    assert decode_response(card.process(replay)).sw == 0x6988
    assert card.state.channel is ChannelKind.NONE
    _select(card, proto.FID_COM)
    assert card.process_apdu(CommandApdu(0x00, 0xB0, 0, 0, le=4)).sw == 0x6982


def test_wrapped_bit_flips_rejected(lab):
    rng = random.Random(9)
    for _ in range(100):
        card = lab.card()
        session = _bac(card, lab)
        cmd = terminal.sm.wrap_command(session.keys, CommandApdu(0x00, 0xA4, 0x02, 0x0C, b"\x01\x1E"))
        raw = bytearray(cmd.encode())
        # flip inside the protected data field (after the 5-byte header)
        bit = rng.randrange(5 * 8, (len(raw) - 1) * 8)
        raw[bit // 8] ^= 1 << (bit % 8)
        assert decode_response(card.process(bytes(raw))).sw == 0x6988
        assert card.state.channel is ChannelKind.NONE


@pytest.mark.parametrize("byte", [0, 4])
def test_header_flips_are_sm_errors(lab, byte):
    # every single-bit change of CLA 0C still announces SM, and a broken Lc
    # leaves an unverifiable wrapped command: both are SM errors, not 6E00/6700
    for bit in range(8):
        card = lab.card()
        session = _bac(card, lab)
        raw = bytearray(terminal.sm.wrap_command(session.keys, CommandApdu(0x00, 0xB0, 0, 0, le=4)).encode())
        raw[byte] ^= 1 << bit
        assert decode_response(card.process(bytes(raw))).sw == 0x6988, bit
        assert card.state.channel is ChannelKind.NONE


# -- access control ---------------------------------------------------------


def test_dg3_denied_under_bac(lab):
    session = _bac(lab.card(), lab)
    with pytest.raises(AccessDenied) as info:
        terminal.read_group(session, 3)
    assert info.value.sw == 0x6982


def test_dg3_denied_under_pace_without_ta(lab):
    session = _pace(lab.card(), lab.image.can, PasswordType.CAN)
    with pytest.raises(AccessDenied):
        terminal.read_group(session, 3)


def test_dg3_after_ta(lab):
    session = _pace(lab.card(), lab.image.can, PasswordType.CAN)
    ta = TaCredentials.from_pki(lab.pki)
    assert terminal.terminal_auth(session, ta.chain, ta.key, Drbg(10))
    assert terminal.read_group(session, 3) == lab.image.lds_image.groups[3]


def test_ta_not_reachable_from_bac(lab):
    card = lab.card()
    session = _bac(card, lab)
    ta = TaCredentials.from_pki(lab.pki)
    assert not terminal.terminal_auth(session, ta.chain, ta.key, Drbg(11))
    assert not card.state.ta_granted


def test_pso_over_can_denied(lab):
    card = lab.card()
    session = _pace(card, lab.image.can, PasswordType.CAN)
    resp = session.transmit(CommandApdu(0x00, 0x20, 0x00, 0x80, lab.image.pin.encode()))
    assert resp.sw == 0x6982
    resp = session.transmit(CommandApdu(0x00, 0x2A, 0x90, 0xA0, tlv(0x90, bytes(32)).encode()))
    assert resp.sw == 0x6982


# -- active authentication --------------------------------------------------


def _aa_response(card, lab, challenge):
    session = _bac(card, lab)
    return session.transmit(CommandApdu(0x00, 0x88, 0, 0, challenge, le=0))


def test_aa_verifies_under_dg15(lab):
    resp = _aa_response(lab.card(), lab, b"12345678")
    public = lds.parse_public_key_dg(lab.image.lds_image.groups[15], 15)
    assert resp.ok and verify(public, b"12345678", resp.data)


def test_aa_clone_fails(lab):
    resp = _aa_response(VirtualCard(lab.clone()), lab, b"12345678")
    public = lds.parse_public_key_dg(lab.image.lds_image.groups[15], 15)
    assert resp.ok and not verify(public, b"12345678", resp.data)


def test_aa_distinct_challenges(lab):
    card = lab.card()
    session = _bac(card, lab)
    a = session.transmit(CommandApdu(0x00, 0x88, 0, 0, b"AAAAAAAA", le=0)).data
    b = session.transmit(CommandApdu(0x00, 0x88, 0, 0, b"BBBBBBBB", le=0)).data
    assert a != b


def test_aa_wrong_challenge_length(lab):
    assert _aa_response(lab.card(), lab, b"1234567").sw == 0x6A80


# -- chip authentication ----------------------------------------------------


def test_ca_genuine(lab):
    card = lab.card()
    session = _bac(card, lab)
    fresh = terminal.chip_auth(session, lab.image.lds_image.groups[14], Drbg(12))
    assert card.state.channel is ChannelKind.CHIP_AUTH
    assert fresh.keys.k_mac == card.state.session.k_mac
    assert terminal.read_ef(fresh, proto.FID_COM) == lab.image.lds_image.ef_com


def test_ca_clone_fails(lab):
    card = VirtualCard(lab.clone())
    session = _bac(card, lab)
    with pytest.raises(terminal.SessionLost):
        terminal.chip_auth(session, lab.image.lds_image.groups[14], Drbg(13))
    assert card.state.channel is ChannelKind.NONE


def test_ca_off_curve_key(lab):
    card = lab.card()
    session = _bac(card, lab)
    session.request(CommandApdu(0x00, 0x22, 0x41, 0xA6, tlv(0x80, proto.CA_OIDS[CipherSuite.AES128_CMAC]).encode()), "MSE")
    good = EcKeyPair.generate(Drbg(14)).public_bytes
    bad = good[:-1] + bytes([good[-1] ^ 1])
    resp = session.transmit(CommandApdu(0x00, 0x86, 0, 0, proto.dyn_auth(tlv(0x80, bad)), le=0))
    assert resp.sw == 0x6A80


# -- terminal authentication ------------------------------------------------


def test_ta_unknown_cvca(lab):
    other = pki.LabPki.generate(Drbg(b"other"), issued=LAB_DATE)
    card = lab.card()
    session = _pace(card, lab.image.can, PasswordType.CAN)
    ta = TaCredentials.from_pki(other)
    with pytest.raises(AuthenticationFailed) as info:
        session.request(CommandApdu(0x00, 0x2A, 0x00, 0xBE, ta.chain[0].encode()), "PSO")
    assert info.value.sw == 0x6300
    assert not card.state.ta_granted and card.state.channel is ChannelKind.NONE


def test_ta_signature_over_wrong_challenge(lab):
    card = lab.card()
    session = _pace(card, lab.image.can, PasswordType.CAN)
    ta = TaCredentials.from_pki(lab.pki)
    for cert in ta.chain:
        session.request(CommandApdu(0x00, 0x2A, 0x00, 0xBE, cert.encode()), "PSO")
    session.request(CommandApdu(0x00, 0x22, 0x81, 0xA4, tlv(0x83, ta.chain[-1].subject.encode()).encode()), "MSE")
    challenge = session.request(CommandApdu(0x00, 0x84, 0, 0, le=8), "GC").data
    wrong = bytes(b ^ 0xFF for b in challenge)
    resp = session.transmit(CommandApdu(0x00, 0x82, 0, 0, ec.sign(ta.key.private, wrong, Drbg(15))))
    assert resp.sw == 0x6300
    assert card.state.channel is ChannelKind.NONE and not card.state.ta_granted


def test_ta_truncated_chain(lab):
    session = _pace(lab.card(), lab.image.can, PasswordType.CAN)
    ta = TaCredentials.from_pki(lab.pki)
    assert not terminal.terminal_auth(session, ta.chain[1:], ta.key, Drbg(16))


# -- eSign ------------------------------------------------------------------


def _esign_session(card, lab):
    return _pace(card, lab.image.pin, PasswordType.PIN)


def test_esign_signature_verifies(lab):
    card = lab.card()
    session = _esign_session(card, lab)
    assert session.transmit(CommandApdu(0x00, 0x20, 0x00, 0x80, lab.image.pin.encode())).ok
    sigs = []
    for doc in (b"first", b"second"):
        digest = hashlib.sha256(doc).digest()
        assert session.transmit(CommandApdu(0x00, 0x2A, 0x90, 0xA0, tlv(0x90, digest).encode())).ok
        resp = session.transmit(CommandApdu(0x00, 0x2A, 0x9E, 0x9A, le=0))
        assert resp.ok
        assert verify_digest(lab.image.sign.cert.public_key, digest, resp.data)
        sigs.append(resp.data)
    assert sigs[0] != sigs[1]


def test_pso_before_verify(lab):
    session = _esign_session(lab.card(), lab)
    resp = session.transmit(CommandApdu(0x00, 0x2A, 0x90, 0xA0, tlv(0x90, bytes(32)).encode()))
    assert resp.sw == 0x6982


def test_verify_wrong_pin(lab):
    card = lab.card()
    session = _esign_session(card, lab)
    wrong = b"000000" if lab.image.pin != "000000" else b"111111"
    assert session.transmit(CommandApdu(0x00, 0x20, 0x00, 0x80, wrong)).sw == 0x63C2


# -- invariants -------------------------------------------------------------


def _private_scalars(image):
    return [k.to_bytes(32, "big") for k in
            (image.aa_key.private, image.ca_key.private, image.sign.key.private)]


def test_totality_and_no_key_export(lab):
    rng = random.Random(17)
    secrets = _private_scalars(lab.image)
    card = lab.card()
    ins_pool = [0xA4, 0xB0, 0x84, 0x82, 0x22, 0x86, 0x88, 0x20, 0x2A]
    for i in range(10_000):
        if i % 2500 == 0:
            _bac(card, lab, Drbg(i))
        if rng.random() < 0.5:
            raw = rng.randbytes(rng.randrange(0, 40))
        else:
            header = bytes([rng.choice([0x00, 0x0C, 0x10]), rng.choice(ins_pool),
                             rng.randrange(256), rng.randrange(256)])
            body = rng.randbytes(rng.randrange(0, 30))
            raw = header + (bytes([len(body)]) + body if body else b"") + (b"\x00" if rng.random() < 0.5 else b"")
        out = card.process(raw)
        assert isinstance(out, bytes) and len(out) >= 2
        assert not any(s in out for s in secrets)


def test_state_reset_after_6300(lab):
    card = lab.card()
    session = _pace(card, lab.image.can, PasswordType.CAN)
    resp = session.transmit(CommandApdu(0x00, 0x82, 0, 0, bytes(64)))
    assert resp.sw in (0x6300, 0x6985)
    assert card.state.channel is ChannelKind.NONE
    _select(card, proto.FID_COM)
    assert card.process_apdu(CommandApdu(0x00, 0xB0, 0, 0, le=4)).sw == 0x6982


def test_retry_counter_monotone_between_successes(lab):
    card = lab.card()
    session = _esign_session(card, lab)
    wrong = b"000000" if lab.image.pin != "000000" else b"111111"
    counts = [card.pin_retries]
    for _ in range(2):
        session.transmit(CommandApdu(0x00, 0x20, 0x00, 0x80, wrong))
        counts.append(card.pin_retries)
    assert counts == sorted(counts, reverse=True) == [3, 2, 1]
    assert session.transmit(CommandApdu(0x00, 0x20, 0x00, 0x80, lab.image.pin.encode())).ok
    assert card.pin_retries == 3


def _dg_windows(image, size=16):
    out = set()
    for content in image.lds_image.groups.values():
        for i in range(0, max(1, len(content) - size + 1), 7):
            out.add(content[i:i + size])
    return out


@pytest.mark.parametrize("access", ["bac", "pace"])
def test_no_dg_plaintext_outside_cryptograms(lab, access):
    card = lab.card()
    rec = RecordingChannel(loopback(card))
    terminal.select_application(rec)
    if access == "bac":
        session = terminal.run_bac(rec, lab.image.mrz_key_info, Drbg(18))
    else:
        session = terminal.run_pace(rec, lab.image.can, PasswordType.CAN, Drbg(18))
    start = len(rec.transcript)
    for n in (1, 2, 14, 15):
        terminal.read_group(session, n)
    windows = _dg_windows(lab.image)
    for ex in rec.transcript:
        assert not any(w in ex.response for w in windows)
    for ex in rec.transcript[start:]:
        tags = [n.tag for n in tlv_decode_all(ex.response[:-2])]
        assert tags[-1] == 0x8E and set(tags) <= {0x87, 0x99, 0x8E}


def test_ef_bytes_match_stored_image(lab):
    # DG2 is larger than one READ BINARY chunk
    assert len(lab.image.lds_image.groups[2]) > proto.READ_CHUNK
    session = _bac(lab.card(), lab)
    for n, content in lab.image.lds_image.groups.items():
        if n == 3:
            continue
        assert terminal.read_group(session, n) == content


def test_power_cycle_drops_session(lab):
    card = lab.card()
    _bac(card, lab)
    card.power_cycle()
    assert card.state.channel is ChannelKind.NONE


def test_personalize_issues_signer_cert(lab):
    cert = lab.image.sign.cert
    assert cert.role is pki.Role.SIGNER
    assert pki.verify_chain(cert, [], lab.truststore, LAB_DATE).ok


def test_personalize_with_explicit_ds():
    drbg = Drbg(19)
    authorities = pki.LabPki.generate(drbg, issued=LAB_DATE)
    ds = pki.issue(authorities.csca, "DS-SHARED", pki.Role.DS, drbg, issued=LAB_DATE)
    image = personalize(sample_profile(), authorities.csca, authorities.cvca.cert, drbg, LAB_DATE, ds)
    assert image.lds_image.sod.ds_cert == ds.cert
