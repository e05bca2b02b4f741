"""Secure messaging and BAC key schedule against the published BAC worked example."""

import os
import random

import pytest

from emrtdlab import lds, protocol
from emrtdlab.codec import CommandApdu, ResponseApdu, decode_command, unhex
from emrtdlab.cryptokit import CipherSuite, SessionKeys
from emrtdlab.sm import SmError, unwrap_command, unwrap_response, wrap_command, wrap_response

KEY_INFO = "L898902C<369080619406236"
RND_IC = unhex("4608F91988702212")
RND_IFD = unhex("781723860C06C226")
K_IFD = unhex("0B795240CB7049B01C19B33E32804F0B")
K_IC = unhex("0B4F80323EB3191CB04970CB4052790B")


def _worked_session() -> SessionKeys:
    return protocol.bac_session(K_IFD, K_IC, RND_IC, RND_IFD)


def test_key_seed_from_key_info():
    assert lds.bac_seed(KEY_INFO) == unhex("239AB9CB282DAF66231DC5A4DF6BFBAE")


def test_external_authenticate_cryptogram():
    k_enc, k_mac = protocol.bac_keys(lds.bac_seed(KEY_INFO))
    s = RND_IFD + RND_IC + K_IFD
    expected = unhex(
        "72C29C2371CC9BDB65B779B8E8D37B29ECC154AA56A8799FAE2F498F76ED92F2"
        "5F1448EEA8AD90A7")
    assert protocol.bac_cryptogram(k_enc, k_mac, s) == expected
    assert protocol.bac_open(k_enc, k_mac, expected) == s
    assert protocol.bac_open(k_enc, k_mac, expected[:-1] + b"\x00") is None


def test_session_keys_and_ssc():
    keys = _worked_session()
    assert keys.k_enc == unhex("979EC13B1CBFE9DCD01AB0FED307EAE5")
    assert keys.k_mac == unhex("F1CB1F1FB5ADF208806B89DC579DC1F8")
    assert keys.ssc_bytes == unhex("887022120C06C226")


def test_protected_select_vector():
    keys = _worked_session()
    cmd = CommandApdu(0x00, 0xA4, 0x02, 0x0C, unhex("011E"))
    wrapped = wrap_command(keys, cmd)
    assert wrapped.encode() == unhex(
        "0CA4020C158709016375432908C044F68E08BF8B92D635FF24F800")
    assert keys.ssc_bytes == unhex("887022120C06C227")


def test_protected_select_response_vector():
    keys = _worked_session()
    keys.ssc += 1
    card = keys.copy()
    resp = wrap_response(card, ResponseApdu(b"", 0x9000))
    assert resp.encode() == unhex("990290008E08FA855A5D4C50A8ED9000")
    assert unwrap_response(keys, resp) == ResponseApdu(b"", 0x9000)


def test_protected_read_binary_vectors():
    keys = _worked_session()
    keys.ssc += 2
    wrapped = wrap_command(keys, CommandApdu(0x00, 0xB0, 0x00, 0x00, le=4))
    assert wrapped.encode() == unhex("0CB000000D9701048E08ED6705417E96BA5500")
    card = keys.copy()
    resp = wrap_response(card, ResponseApdu(unhex("60145F01"), 0x9000))
    assert resp.encode() == unhex("8709019FF0EC34F9922651990290008E08AD55CC17140B2DED9000")
    assert unwrap_response(keys, resp).data == unhex("60145F01")


# -- properties over both suites ---------------------------------------------


def _pair(suite):
    keys = SessionKeys(os.urandom(16), os.urandom(16), suite, 0)
    return keys, keys.copy()


@pytest.mark.parametrize("suite", list(CipherSuite))
def test_round_trip(suite):
    term, card = _pair(suite)
    rng = random.Random(1)
    for _ in range(1000):
        data = rng.randbytes(rng.randrange(0, 300))
        le = rng.choice([None, 0, 8, 223, 300])
        cmd = CommandApdu(0x00, rng.randrange(256), rng.randrange(256), rng.randrange(256), data, le)
        got = unwrap_command(card, decode_command(wrap_command(term, cmd).encode()))
        assert got == cmd
        resp = ResponseApdu(rng.randbytes(rng.randrange(0, 250)), 0x9000)
        assert unwrap_response(term, wrap_response(card, resp)) == resp
    assert term.ssc == card.ssc == 2000


@pytest.mark.parametrize("suite", list(CipherSuite))
def test_replayed_command_rejected(suite):
    term, card = _pair(suite)
    wrapped = wrap_command(term, CommandApdu(0x00, 0xB0, 0, 0, le=16))
    unwrap_command(card, wrapped)
    with pytest.raises(SmError):
        unwrap_command(card, wrapped)


@pytest.mark.parametrize("suite", list(CipherSuite))
def test_bit_flips_rejected(suite):
    term, card = _pair(suite)
    rng = random.Random(2)
    for _ in range(100):
        t, c = term.copy(), card.copy()
        raw = bytearray(wrap_command(t, CommandApdu(0x00, 0xD0, 1, 2, os.urandom(20), le=0)).encode())
        pos = rng.randrange(len(raw) * 8)
        raw[pos // 8] ^= 1 << (pos % 8)
        with pytest.raises((SmError, ValueError)):
            unwrap_command(c, decode_command(bytes(raw)))


def test_response_sw_tamper_rejected():
    term, card = _pair(CipherSuite.AES128_CMAC)
    resp = wrap_response(card, ResponseApdu(b"x", 0x9000))
    with pytest.raises(SmError):
        unwrap_response(term, ResponseApdu(resp.data, 0x6282))


def test_unprotected_response_rejected():
    term, _ = _pair(CipherSuite.AES128_CMAC)
    with pytest.raises(SmError):
        unwrap_response(term, ResponseApdu(b"", 0x6982))


def test_aes_iv_is_encrypted_counter():
    # identical commands under consecutive counters give distinct cryptograms
    term, _ = _pair(CipherSuite.AES128_CMAC)
    cmd = CommandApdu(0x00, 0xD0, 0, 0, bytes(16))
    first = wrap_command(term, cmd).data
    second = wrap_command(term, cmd).data
    assert first[:20] != second[:20]
