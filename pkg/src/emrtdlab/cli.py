"""Command line entry point.

Exit status: 0 success or clean, 1 verification failure or fuzz violation,
2 usage error (bad flags, unreadable files, bad endpoints).
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import fuzz, lds, pki, signclient, terminal, transport
from .card import CardImage, card_factory, personalize
from .codec import CodecError
from .cryptokit.drbg import Drbg
from .cryptokit.symmetric import CipherSuite
from .lab import Lab
from .relay import RelayBridge

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM-DD, got {text!r}")


def _endpoint(text: str) -> str:
    try:
        transport.parse_endpoint(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    return text


def _nonneg(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the flags without defaults so a value given before
    # the subcommand is not overwritten
    def default(value):
        return argparse.SUPPRESS if suppress else value

    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--seed", default=default("0"), help="seed for every random choice (default 0)")
    flags.add_argument("--suite", choices=("aes", "tdes"), default=default("aes"),
                       help="cipher suite for PACE and chip authentication")
    flags.add_argument("--verbose", "-v", action="store_true", default=default(False))
    return flags


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="emrtdlab", parents=[_global_flags(suppress=False)],
                                     description="Virtual eMRTD chip, inspection system and attack lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("personalize", parents=[common], help="issue a card image from a profile")
    p.add_argument("--profile", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--pki", type=Path, help="PKI bundle to use or create (default OUT.pki)")
    p.add_argument("--issued", type=_date, help="issue date YYYY-MM-DD (default today)")

    p = sub.add_parser("serve", parents=[common], help="serve a card image over TCP")
    p.add_argument("--card", required=True, type=Path)
    p.add_argument("--listen", required=True, type=_endpoint)
    p.add_argument("--max-payload", type=_positive_int, default=transport.MAX_FRAME)

    p = sub.add_parser("inspect", parents=[common], help="inspect a card")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--connect", type=_endpoint)
    src.add_argument("--card", type=Path)
    cred = p.add_mutually_exclusive_group(required=True)
    cred.add_argument("--mrz", help="TD1 MRZ, DOC,YYMMDD,YYMMDD or 24-character key info")
    cred.add_argument("--can")
    cred.add_argument("--pin")
    p.add_argument("--pki", type=Path, help="PKI bundle (default CARD.pki when --card is used)")
    p.add_argument("--access", choices=("auto", "pace", "bac"), default="auto")
    p.add_argument("--aa", action="store_true", help="run active authentication")
    p.add_argument("--ca", action="store_true", help="run chip authentication")
    p.add_argument("--ta", action="store_true", help="run terminal authentication")
    p.add_argument("--rtt-threshold", type=_nonneg, default=20.0, metavar="MS")
    p.add_argument("--date", type=_date, help="validation date (default today)")
    p.add_argument("--report", type=Path)

    p = sub.add_parser("relay", parents=[common], help="relay a remote card to local terminals")
    p.add_argument("--card-connect", required=True, type=_endpoint)
    p.add_argument("--listen", required=True, type=_endpoint)
    p.add_argument("--latency-ms", type=_nonneg, default=0.0)
    p.add_argument("--jitter-ms", type=_nonneg, default=0.0)
    p.add_argument("--log", type=Path, help="write the forwarding log here on exit")

    p = sub.add_parser("fuzz", parents=[common], help="run a malformation campaign")
    p.add_argument("--protocol", choices=fuzz.PROTOCOLS, required=True)
    p.add_argument("--iterations", type=_positive_int, default=1000)
    p.add_argument("--mutations", default=",".join(fuzz.FULL_SET),
                   help="comma list; nonce_constant@card selects the degenerate card")
    p.add_argument("--card", type=Path, help="card image (default: a lab card from --seed)")
    p.add_argument("--report", type=Path)

    for name, help_text in (("sign", "sign a document with the card"),
                            ("demo-substitution", "show document substitution by a hooked client")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--card", required=True, type=Path)
        p.add_argument("--pin", required=True)
        p.add_argument("--doc", required=True, type=Path)
        if name == "demo-substitution":
            p.add_argument("--attacker-doc", required=True, type=Path)
        p.add_argument("--pki", type=Path, help="PKI bundle (default CARD.pki)")
        p.add_argument("--date", type=_date)
        p.add_argument("--evidence", type=Path)
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}")


def _load_card(path: Path) -> CardImage:
    try:
        return CardImage.decode(_read(path))
    except (CodecError, KeyError, ValueError) as exc:
        raise UsageError(f"{path} is not a card image: {exc}")


def _pki_path(explicit: Optional[Path], card: Optional[Path]) -> Path:
    if explicit is not None:
        return explicit
    if card is not None:
        return card.with_name(card.name + ".pki")
    raise UsageError("--pki is required when the card is remote")


def _load_pki(path: Path) -> pki.LabPki:
    try:
        return pki.LabPki.decode(_read(path))
    except (CodecError, ValueError) as exc:
        raise UsageError(f"{path} is not a PKI bundle: {exc}")


def _suite(args) -> CipherSuite:
    return CipherSuite.AES128_CMAC if args.suite == "aes" else CipherSuite.TDES_RETAIL


def _write(path: Optional[Path], text: str) -> None:
    if path is None:
        return
    try:
        path.write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_personalize(args) -> int:
    try:
        profile = lds.load_profile(args.profile)
    except (OSError, ValueError) as exc:
        raise UsageError(f"bad profile {args.profile}: {exc}")
    drbg = Drbg(args.seed, b"cli-personalize")
    issued = args.issued or dt.date.today()
    pki_path = args.pki or args.out.with_name(args.out.name + ".pki")
    if pki_path.exists():
        authorities = _load_pki(pki_path)
    else:
        authorities = pki.LabPki.generate(drbg.fork("pki"), issued=issued)
        authorities.save(pki_path)
    image = personalize(profile, authorities.csca, authorities.cvca.cert, drbg.fork("card"), issued)
    try:
        image.save(args.out)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}")
    groups = ", ".join(f"DG{n}" for n in sorted(image.lds_image.groups))
    print(f"card {args.out} issued for {profile.document_number} ({groups}); PKI {pki_path}")
    return EXIT_OK


def cmd_serve(args) -> int:
    image = _load_card(args.card)
    seed = Drbg(args.seed, b"cli-serve").random_bytes(32)
    try:
        server = transport.card_server(card_factory(image, seed), args.listen, args.max_payload)
    except OSError as exc:
        raise UsageError(f"cannot listen on {args.listen}: {exc}")
    print(f"listening on {server.endpoint}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_inspect(args) -> int:
    lab_pki = _load_pki(_pki_path(args.pki, args.card))
    drbg = Drbg(args.seed, b"cli-inspect")
    if args.card is not None:
        image = _load_card(args.card)
        channel = transport.loopback(card_factory(image, drbg.random_bytes(32))())
    else:
        try:
            channel = transport.connect(args.connect)
        except transport.TransportError as exc:
            raise UsageError(str(exc))
    if args.mrz is not None:
        try:
            lds.parse_key_info(args.mrz)
        except ValueError as exc:
            raise UsageError(f"bad --mrz: {exc}")
    credentials = terminal.Credentials(mrz=args.mrz, can=args.can, pin=args.pin)
    policy = terminal.Policy(
        access=args.access, active_auth=args.aa, chip_auth=args.ca, terminal_auth=args.ta,
        rtt_threshold_ms=args.rtt_threshold, suite=_suite(args), at=args.date or dt.date.today(),
    )
    with channel:
        report = terminal.inspect(channel, credentials, policy, lab_pki.truststore, drbg.fork("terminal"),
                                  terminal.TaCredentials.from_pki(lab_pki))
    _write(args.report, report.to_json())
    verdicts = " ".join(f"{k}={v}" for k, v in report.verdicts().items())
    print(f"{report.protocol or 'no-access'}: {verdicts}")
    if report.access_error:
        print(f"access error: {report.access_error}")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_relay(args) -> int:
    drbg = Drbg(args.seed, b"cli-relay")

    def card_leg():
        leg = transport.connect(args.card_connect)
        if args.latency_ms or args.jitter_ms:
            return transport.with_latency(leg, args.latency_ms, args.jitter_ms, drbg.fork("latency"))
        return leg

    bridge = RelayBridge(card_leg)
    try:
        server = bridge.listen(args.listen)
    except OSError as exc:
        raise UsageError(f"cannot listen on {args.listen}: {exc}")
    print(f"relaying {server.endpoint} -> {args.card_connect}", flush=True)
    try:
        server.wait()
    except KeyboardInterrupt:
        pass
    finally:
        bridge.stop()
        _write(args.log, bridge.export_log())
    return EXIT_OK


def cmd_fuzz(args) -> int:
    try:
        names = fuzz.parse_mutation_names(args.mutations)
    except ValueError as exc:
        raise UsageError(str(exc))
    image = _load_card(args.card) if args.card else Lab.create(args.seed).image
    report = fuzz.run_campaign(fuzz.standard_cards(image), args.protocol, names, args.iterations, args.seed)
    _write(args.report, report.to_json())
    print(report.summary())
    for v in report.violations[:20]:
        print(f"  iteration {v.iteration}: {v.kind} ({v.mutation}): {v.detail}")
    return EXIT_OK if report.passed else EXIT_FAIL


def _sign(args, attacker: Optional[bytes]) -> int:
    image = _load_card(args.card)
    lab_pki = _load_pki(_pki_path(args.pki, args.card))
    document = _read(args.doc)
    drbg = Drbg(args.seed, b"cli-sign")
    card = card_factory(image, drbg.random_bytes(32))()
    hooks = signclient.substitution_hooks(attacker) if attacker is not None else None
    request = signclient.SignRequest(document, args.doc.name)
    try:
        evidence = signclient.sign_document(transport.loopback(card), lambda: args.pin, request, hooks,
                                            drbg.fork("client"))
    except terminal.TerminalError as exc:
        print(f"signing failed: {exc}")
        return EXIT_FAIL
    at = args.date or dt.date.today()
    store = lab_pki.truststore
    checks = {"verifies_over_document": signclient.verify_signed(
        document, evidence.signature, evidence.certificate, store, at)}
    if attacker is not None:
        checks["verifies_over_attacker_document"] = signclient.verify_signed(
            attacker, evidence.signature, evidence.certificate, store, at)
    result = signclient.audit(evidence)
    out = evidence.to_dict()
    out["checks"] = checks
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    _write(args.evidence, text)
    for key, value in checks.items():
        print(f"{key}: {value}")
    print("audit: clean" if result.clean else f"audit: alarm ({', '.join(result.reasons)})")
    return EXIT_OK if result.clean and checks["verifies_over_document"] else EXIT_FAIL


def cmd_sign(args) -> int:
    return _sign(args, None)


def cmd_demo_substitution(args) -> int:
    return _sign(args, _read(args.attacker_doc))


COMMANDS = {
    "personalize": cmd_personalize,
    "serve": cmd_serve,
    "inspect": cmd_inspect,
    "relay": cmd_relay,
    "fuzz": cmd_fuzz,
    "sign": cmd_sign,
    "demo-substitution": cmd_demo_substitution,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
