import json
from pathlib import Path

import pytest

from emrtdlab import lds
from emrtdlab.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from emrtdlab.lab import sample_profile
from helpers import background, free_port

DATE = "2024-06-01"
ISSUED = "2024-01-15"
PIN, CAN = "123456", "654321"


@pytest.fixture(scope="module")
def issued(tmp_path_factory):
    """A personalized card file plus its PKI bundle, made through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    profile = root / "holder.json"
    lds.save_profile(profile, sample_profile())
    card = root / "card.bin"
    assert main(["--seed", "7", "personalize", "--profile", str(profile), "--out", str(card),
                 "--issued", ISSUED]) == EXIT_OK
    return card


def _mrz():
    return sample_profile().mrz.key_info


def _timeless(path: Path) -> dict:
    data = json.loads(path.read_text())
    data.pop("timing", None)
    return data


# -- personalize ------------------------------------------------------------


def test_personalize_is_deterministic(issued, tmp_path):
    profile = tmp_path / "p.json"
    lds.save_profile(profile, sample_profile())
    again = tmp_path / "again.bin"
    assert main(["personalize", "--seed", "7", "--profile", str(profile), "--out", str(again),
                 "--issued", ISSUED]) == EXIT_OK
    assert again.read_bytes() == issued.read_bytes()
    assert Path(str(again) + ".pki").read_bytes() == Path(str(issued) + ".pki").read_bytes()


def test_personalize_reuses_explicit_pki(issued, tmp_path):
    profile = tmp_path / "p.json"
    other = sample_profile().to_dict()
    other["document_number"] = "ZZ1234567"
    profile.write_text(json.dumps(other))
    out = tmp_path / "second.bin"
    assert main(["personalize", "--profile", str(profile), "--out", str(out),
                 "--pki", str(issued) + ".pki", "--issued", ISSUED]) == EXIT_OK
    assert main(["inspect", "--card", str(out), "--pki", str(issued) + ".pki", "--can", CAN,
                 "--date", DATE]) == EXIT_OK


def test_personalize_bad_profile(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["personalize", "--profile", str(bad), "--out", str(tmp_path / "x")]) == EXIT_USAGE


# -- inspect ----------------------------------------------------------------


@pytest.mark.parametrize("cred", [["--mrz", "MRZ"], ["--can", CAN], ["--pin", PIN]])
def test_inspect_happy_path(issued, tmp_path, cred, capsys):
    report = tmp_path / "r.json"
    cred = [_mrz() if c == "MRZ" else c for c in cred]
    code = main(["inspect", "--card", str(issued), *cred, "--aa", "--ca", "--ta",
                 "--date", DATE, "--report", str(report)])
    assert code == EXIT_OK, capsys.readouterr().out
    data = _timeless(report)
    assert data["verdicts"]["authentic"] and data["verdicts"]["passed"]
    assert data["verdicts"]["not_cloned"] is True
    assert data["terminal_auth"]["ok"] is True and 3 in data["groups_read"]


def test_inspect_wrong_pin(issued, capsys):
    assert main(["inspect", "--card", str(issued), "--pin", "000000", "--date", DATE]) == EXIT_FAIL
    assert "access error" in capsys.readouterr().out


def test_inspect_bac_tdes_verbose(issued, tmp_path):
    report = tmp_path / "r.json"
    mrz = sample_profile().mrz
    short = f"{mrz.document_number},{mrz.date_of_birth},{mrz.date_of_expiry}"
    assert main(["-v", "--suite", "tdes", "inspect", "--card", str(issued), "--mrz", short,
                 "--access", "bac", "--date", DATE, "--report", str(report)]) == EXIT_OK
    data = _timeless(report)
    assert data["access"]["protocol"] == "bac" and data["policy"]["suite"] == "tdes"


def test_inspect_pace_tdes(issued, tmp_path):
    report = tmp_path / "r.json"
    assert main(["inspect", "--suite", "tdes", "--card", str(issued), "--can", CAN, "--ca",
                 "--date", DATE, "--report", str(report)]) == EXIT_OK
    assert _timeless(report)["chip_auth"]["ok"] is True


def test_inspect_expired_date_fails(issued):
    assert main(["inspect", "--card", str(issued), "--can", CAN, "--date", "2099-01-01"]) == EXIT_FAIL


def test_inspect_usage_errors(issued, tmp_path):
    assert main(["inspect", "--card", str(tmp_path / "missing.bin"), "--can", CAN]) == EXIT_USAGE
    assert main(["inspect", "--card", str(issued), "--mrz", "nonsense"]) == EXIT_USAGE
    assert main(["inspect", "--connect", "nowhere", "--can", CAN, "--pki", "x"]) == EXIT_USAGE
    assert main(["inspect", "--connect", f"127.0.0.1:{free_port()}", "--can", CAN,
                 "--pki", str(issued) + ".pki"]) == EXIT_USAGE
    assert main(["inspect", "--connect", "127.0.0.1:1", "--can", CAN]) == EXIT_USAGE
    assert main(["inspect", "--card", str(issued)]) == EXIT_USAGE
    assert main(["nonsense"]) == EXIT_USAGE
    assert main(["inspect", "--card", str(issued), "--can", CAN, "--rtt-threshold", "-1"]) == EXIT_USAGE


def test_inspect_report_deterministic(issued, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert main(["--seed", "s1", "inspect", "--card", str(issued), "--pin", PIN, "--aa", "--ca",
                     "--date", DATE, "--report", str(out)]) == EXIT_OK
    assert _timeless(a) == _timeless(b)
    assert a.read_text() != "" and "timing" in json.loads(a.read_text())


# -- serve / relay ----------------------------------------------------------


def test_serve_and_inspect_over_socket(issued, tmp_path):
    port = free_port()
    reports = []
    for run in range(2):
        with background("serve", "--card", str(issued), "--listen", f"127.0.0.1:{port}",
                         "--seed", "3", "--max-payload", "4096") as endpoint:
            report = tmp_path / f"s{run}.json"
            assert main(["inspect", "--seed", "3", "--connect", endpoint, "--pki", str(issued) + ".pki",
                         "--can", CAN, "--aa", "--date", DATE, "--report", str(report)]) == EXIT_OK
            reports.append(_timeless(report))
    assert reports[0] == reports[1]


def test_relay_scenario(issued, tmp_path):
    log = tmp_path / "relay.jsonl"
    with background("serve", "--card", str(issued), "--listen", "127.0.0.1:0") as card_end:
        with background("relay", "--card-connect", card_end, "--listen", "127.0.0.1:0") as relay_end:
            fast = tmp_path / "fast.json"
            assert main(["inspect", "--connect", relay_end, "--pki", str(issued) + ".pki",
                         "--mrz", _mrz(), "--date", DATE, "--report", str(fast)]) == EXIT_OK
            assert _timeless(fast)["verdicts"]["relay_suspected"] is False
        with background("relay", "--card-connect", card_end, "--listen", "127.0.0.1:0",
                         "--latency-ms", "50", "--jitter-ms", "5", "--seed", "9",
                         "--log", str(log)) as relay_end:
            slow = tmp_path / "slow.json"
            assert main(["inspect", "--connect", relay_end, "--pki", str(issued) + ".pki",
                         "--can", CAN, "--rtt-threshold", "20", "--date", DATE,
                         "--report", str(slow)]) == EXIT_FAIL
            data = json.loads(slow.read_text())
            assert data["verdicts"]["relay_suspected"] is True
            assert data["verdicts"]["authentic"] and data["verdicts"]["unaltered"]
            assert data["timing"]["median_ms"] >= 50
    entries = [json.loads(line) for line in log.read_text().splitlines()]
    assert entries and len(entries) % 2 == 0
    assert entries[0]["direction"] == "terminal->card"


def test_serve_bad_card(tmp_path):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x01\x02")
    assert main(["serve", "--card", str(junk), "--listen", "127.0.0.1:0"]) == EXIT_USAGE
    assert main(["serve", "--card", str(junk), "--listen", "bad"]) == EXIT_USAGE


# -- fuzz -------------------------------------------------------------------


def test_fuzz_clean_and_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert main(["fuzz", "--protocol", "pace", "--iterations", "20", "--seed", "4",
                     "--report", str(out)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert "PASS" in capsys.readouterr().out


def test_fuzz_on_card_file(issued):
    assert main(["fuzz", "--protocol", "bac", "--iterations", "10", "--card", str(issued),
                 "--mutations", "bit_flip,mac_corrupt,ssc_replay"]) == EXIT_OK


def test_fuzz_degenerate_card_fails(capsys):
    assert main(["fuzz", "--protocol", "bac", "--iterations", "2",
                 "--mutations", "nonce_constant@card"]) == EXIT_FAIL
    assert "replay-accepted" in capsys.readouterr().out


def test_fuzz_usage():
    assert main(["fuzz", "--protocol", "bac", "--mutations", "nope"]) == EXIT_USAGE
    assert main(["fuzz", "--protocol", "bac", "--iterations", "0"]) == EXIT_USAGE
    assert main(["fuzz", "--protocol", "eid"]) == EXIT_USAGE


# -- signing ----------------------------------------------------------------


def test_sign_honest(issued, tmp_path, capsys):
    doc = tmp_path / "doc.txt"
    doc.write_bytes(b"pay 10 EUR")
    evidence = tmp_path / "e.json"
    assert main(["sign", "--card", str(issued), "--pin", PIN, "--doc", str(doc), "--date", DATE,
                 "--evidence", str(evidence)]) == EXIT_OK
    data = json.loads(evidence.read_text())
    assert data["match"] and data["checks"]["verifies_over_document"] and data["audit"]["clean"]
    assert "audit: clean" in capsys.readouterr().out


def test_sign_wrong_pin(issued, tmp_path):
    doc = tmp_path / "doc.txt"
    doc.write_bytes(b"x")
    assert main(["sign", "--card", str(issued), "--pin", "000000", "--doc", str(doc)]) == EXIT_FAIL


def test_demo_substitution(issued, tmp_path, capsys):
    doc, evil = tmp_path / "doc.txt", tmp_path / "evil.txt"
    doc.write_bytes(b"pay 10 EUR")
    evil.write_bytes(b"pay 10000 EUR")
    outs = [tmp_path / "e1.json", tmp_path / "e2.json"]
    for out in outs:
        code = main(["demo-substitution", "--card", str(issued), "--pin", PIN, "--doc", str(doc),
                     "--attacker-doc", str(evil), "--pki", str(issued) + ".pki", "--date", DATE,
                     "--seed", "5", "--evidence", str(out)])
        assert code == EXIT_FAIL
    data = json.loads(outs[0].read_text())
    assert data["checks"] == {"verifies_over_document": False, "verifies_over_attacker_document": True}
    assert "digest-mismatch" in data["audit"]["reasons"] and data["pin_captured"] == PIN
    assert outs[0].read_bytes() == outs[1].read_bytes()
    assert "alarm" in capsys.readouterr().out


def test_sign_missing_document(issued, tmp_path):
    assert main(["sign", "--card", str(issued), "--pin", PIN, "--doc", str(tmp_path / "none")]) == EXIT_USAGE


def test_help_exits_zero():
    assert main(["--help"]) == EXIT_OK
