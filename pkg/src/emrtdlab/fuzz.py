"""Malformation campaigns against the card and the inspection system.

An :class:`InterceptingChannel` sits between terminal and card and rewrites
selected messages in flight.  :func:`run_campaign` drives many independent
protocol runs, each against a fresh card, and classifies how every mutated
run ended.  A run that survives a mutation, leaks data-group bytes in clear
or crashes a component is a violation.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import codec
from . import protocol as proto
from . import status as SW
from .card import CardImage, VirtualCard
from .cryptokit import ec
from .cryptokit.drbg import ConstantDrbg, Drbg
from .protocol import PasswordType
from .terminal import (
    SessionLost,
    TerminalError,
    read_ef,
    run_bac,
    run_pace,
    select_application,
)
from .transport import Channel

log = logging.getLogger(__name__)

COMMAND = "command"
RESPONSE = "response"


class Kind(enum.Enum):
    BIT_FLIP = "bit_flip"
    TRUNCATE = "truncate"
    LENGTH_FIELD_CORRUPT = "length_field_corrupt"
    MAC_CORRUPT = "mac_corrupt"
    SSC_REPLAY = "ssc_replay"
    SWAP_EPHEMERAL_KEY = "swap_ephemeral_key"
    NONCE_CONSTANT = "nonce_constant"


FULL_SET = tuple(k.value for k in Kind)
CARD_SIDE = "card"
TERMINAL_SIDE = "terminal"


@dataclass(frozen=True)
class Target:
    """A message selected by protocol step, direction and occurrence (1-based)."""

    step: str
    direction: str = COMMAND
    occurrence: int = 1

    def __str__(self):
        return f"{self.step}/{self.direction}#{self.occurrence}"


@dataclass(frozen=True)
class Mutation:
    kind: Kind
    target: Optional[Target] = None
    position: Optional[int] = None  # bit index for bit_flip, byte count for truncate
    side: str = TERMINAL_SIDE  # only meaningful for nonce_constant

    @property
    def label(self) -> str:
        if self.kind is Kind.NONCE_CONSTANT:
            return f"{self.kind.value}@{self.side}"
        return self.kind.value

    def __str__(self):
        extra = f"({self.position})" if self.position is not None else ""
        where = f" at {self.target}" if self.target else ""
        return f"{self.label}{extra}{where}"


def parse_mutation_names(text: str) -> Tuple[str, ...]:
    """Comma list of mutation names; ``nonce_constant@card`` selects the card side."""
    names = tuple(n.strip() for n in text.split(",") if n.strip())
    for name in names:
        base, _, side = name.partition("@")
        if base not in FULL_SET or (side and (base != Kind.NONCE_CONSTANT.value
                                              or side not in (CARD_SIDE, TERMINAL_SIDE))):
            raise ValueError(f"unknown mutation {name!r}; choose from {', '.join(FULL_SET)}")
    return names


# --------------------------------------------------------------------------
# Step naming and message surgery
# --------------------------------------------------------------------------

_PLAIN_STEPS = {
    proto.INS_SELECT: "select",
    proto.INS_GET_CHALLENGE: "get-challenge",
    proto.INS_EXTERNAL_AUTH: "external-authenticate",
    proto.INS_MSE: "mse-set",
    proto.INS_READ_BINARY: "read-binary",
    proto.INS_INTERNAL_AUTH: "internal-authenticate",
    proto.INS_VERIFY: "verify",
    proto.INS_PSO: "pso",
}

MAC_STEPS = ("secure-messaging", "external-authenticate", "pace-4")


class StepNamer:
    """Names commands by protocol step, counting PACE rounds as they pass."""

    def __init__(self):
        self._ga_rounds = 0
        self._seen: Counter = Counter()

    def name(self, raw: bytes) -> Tuple[str, int]:
        if len(raw) < 4:
            step = "malformed"
        elif raw[0] & 0x0C == 0x0C:
            step = "secure-messaging"
        elif raw[1] == proto.INS_GENERAL_AUTH:
            self._ga_rounds += 1
            step = f"pace-{self._ga_rounds}"
        else:
            step = _PLAIN_STEPS.get(raw[1], f"ins-{raw[1]:02x}")
        self._seen[step] += 1
        return step, self._seen[step]


def _flip_bit(data: bytes, bit: int) -> bytes:
    out = bytearray(data)
    out[bit // 8] ^= 0x80 >> (bit % 8)
    return bytes(out)


def _mac_span(raw: bytes, step: str, direction: str) -> Optional[Tuple[int, int]]:
    """Byte range of the MAC carried by a message, if any."""
    body = raw[5:] if direction == COMMAND else raw[:-2]
    offset = 5 if direction == COMMAND else 0
    if direction == COMMAND and len(raw) > 5 and raw[4] == 0:
        body, offset = raw[7:], 7  # extended Lc
    if step == "secure-messaging":
        idx = body.rfind(b"\x8E\x08")
        if idx < 0 or len(body) < idx + 10:
            return None
        return offset + idx + 2, offset + idx + 10
    if step == "external-authenticate" and len(body) >= 40:
        return offset + 32, offset + 40
    if step == "pace-4":
        marker = b"\x85\x08" if direction == COMMAND else b"\x86\x08"
        idx = body.find(marker)
        if idx < 0 or len(body) < idx + 10:
            return None
        return offset + idx + 2, offset + idx + 10
    return None


# responses whose data field is a TLV object
TLV_RESPONSES = ("secure-messaging", "pace-1", "pace-2", "pace-3", "pace-4")


def _length_index(raw: bytes, direction: str, step: str) -> Optional[int]:
    if direction == COMMAND:
        return 4 if len(raw) > 4 else None
    if step not in TLV_RESPONSES:
        return None
    data = raw[:-2]
    if len(data) < 2:
        return None
    try:
        _, header, _ = codec.tlv_header(data)
    except codec.CodecError:
        return None
    return header - 1


def _point_span(raw: bytes, direction: str) -> Optional[Tuple[int, int]]:
    tag = b"\x83\x41" if direction == COMMAND else b"\x84\x41"
    idx = raw.find(tag)
    if idx < 0 or len(raw) < idx + 2 + 65:
        return None
    return idx + 2, idx + 2 + 65


def applicable(kind: Kind, step: str, direction: str, raw: bytes) -> bool:
    if kind in (Kind.BIT_FLIP, Kind.TRUNCATE):
        return len(raw) >= 2
    if kind is Kind.LENGTH_FIELD_CORRUPT:
        return _length_index(raw, direction, step) is not None
    if kind is Kind.MAC_CORRUPT:
        return step in MAC_STEPS and _mac_span(raw, step, direction) is not None
    if kind is Kind.SSC_REPLAY:
        return step == "secure-messaging" and direction == COMMAND
    if kind is Kind.SWAP_EPHEMERAL_KEY:
        return step == "pace-3" and _point_span(raw, direction) is not None
    return False


def apply_mutation(mutation: Mutation, step: str, direction: str, raw: bytes,
                   drbg: Drbg) -> bytes:
    """Rewrite one message.  ``ssc_replay`` is handled by the channel."""
    kind = mutation.kind
    if kind is Kind.BIT_FLIP:
        bit = mutation.position if mutation.position is not None else drbg.randbelow(len(raw) * 8)
        return _flip_bit(raw, bit % (len(raw) * 8))
    if kind is Kind.TRUNCATE:
        n = mutation.position if mutation.position is not None else 1 + drbg.randbelow(len(raw) - 1)
        return raw[: len(raw) - max(1, min(n, len(raw) - 1))]
    if kind is Kind.LENGTH_FIELD_CORRUPT:
        idx = _length_index(raw, direction, step)
        out = bytearray(raw)
        out[idx] = (out[idx] + 1 + drbg.randbelow(255)) & 0xFF
        return bytes(out)
    if kind is Kind.MAC_CORRUPT:
        start, end = _mac_span(raw, step, direction)
        out = bytearray(raw)
        out[start + drbg.randbelow(end - start)] ^= 1 + drbg.randbelow(255)
        return bytes(out)
    if kind is Kind.SWAP_EPHEMERAL_KEY:
        start, end = _point_span(raw, direction)
        attacker = ec.EcKeyPair.generate(drbg)
        return raw[:start] + attacker.public_bytes + raw[end:]
    raise ValueError(f"{kind.value} does not rewrite message bytes")


# --------------------------------------------------------------------------
# Channels
# --------------------------------------------------------------------------


@dataclass
class Intercept:
    direction: str
    step: str
    occurrence: int
    original: bytes
    mutant: Optional[bytes]


class GuardedCard(Channel):
    """Loopback that converts a card exception into a recorded crash."""

    description = "guarded-loopback"

    def __init__(self, card: VirtualCard):
        self.card = card
        self.crashes: List[str] = []

    def exchange(self, raw: bytes) -> Tuple[bytes, float]:
        try:
            return self.card.process(raw), 1.0
        except Exception as exc:  # the card must be total; anything here is a finding
            self.crashes.append(f"{type(exc).__name__}: {exc}")
            return b"\x6F\x00", 1.0


class InterceptingChannel(Channel):
    """Applies scripted mutations; everything else passes untouched."""

    def __init__(self, inner: Channel, script: Sequence[Mutation] = (), drbg: Optional[Drbg] = None):
        self.inner = inner
        self.script = list(script)
        self.drbg = drbg if drbg is not None else Drbg(b"intercept")
        self.log: List[Intercept] = []
        self.sent: List[bytes] = []
        self.received: List[bytes] = []
        self.applied: List[Mutation] = []
        self._namer = StepNamer()
        self.description = f"intercept({inner.description})"

    def _match(self, step: str, direction: str, occurrence: int) -> Optional[Mutation]:
        for m in self.script:
            t = m.target
            if t and t.step == step and t.direction == direction and t.occurrence == occurrence:
                return m
        return None

    def _forward(self, raw: bytes) -> bytes:
        self.sent.append(raw)
        resp, _ = self.inner.exchange(raw)
        self.received.append(resp)
        return resp

    def exchange(self, raw: bytes) -> Tuple[bytes, float]:
        step, occurrence = self._namer.name(raw)
        m = self._match(step, COMMAND, occurrence)
        if m is not None and m.kind is Kind.SSC_REPLAY:
            self._forward(raw)
            self.log.append(Intercept(COMMAND, step, occurrence, raw, raw))
            self.applied.append(m)
            resp = self._forward(raw)
        elif m is not None:
            mutant = apply_mutation(m, step, COMMAND, raw, self.drbg)
            self.log.append(Intercept(COMMAND, step, occurrence, raw, mutant))
            self.applied.append(m)
            resp = self._forward(mutant)
        else:
            self.log.append(Intercept(COMMAND, step, occurrence, raw, None))
            resp = self._forward(raw)

        m = self._match(step, RESPONSE, occurrence)
        if m is not None and applicable(m.kind, step, RESPONSE, resp):
            mutant = apply_mutation(m, step, RESPONSE, resp, self.drbg)
            self.log.append(Intercept(RESPONSE, step, occurrence, resp, mutant))
            self.applied.append(m)
            resp = mutant
        else:
            self.log.append(Intercept(RESPONSE, step, occurrence, resp, None))
        return resp, 1.0


def intercepting_channel(inner: Channel, script: Sequence[Mutation] = (),
                         drbg: Optional[Drbg] = None) -> InterceptingChannel:
    return InterceptingChannel(inner, script, drbg)


# --------------------------------------------------------------------------
# Protocol drivers
# --------------------------------------------------------------------------

PROTOCOLS = ("bac", "pace")
READ_FILES = (proto.FID_COM, proto.dg_fid(1), proto.dg_fid(2))


def run_protocol(channel: Channel, protocol: str, image: CardImage, drbg: Drbg) -> Dict[int, bytes]:
    """Open a channel with the holder's credentials and read a few files."""
    select_application(channel)
    if protocol == "bac":
        session = run_bac(channel, image.mrz_key_info, drbg)
    elif protocol == "pace":
        session = run_pace(channel, image.can, PasswordType.CAN, drbg)
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return {fid: read_ef(session, fid) for fid in READ_FILES}


def _secrets(image: CardImage) -> List[bytes]:
    """Byte strings that must never appear unprotected on the wire."""
    found = [image.lds_image.mrz.text.encode(), image.lds_image.mrz.document_number.encode()]
    for content in image.lds_image.groups.values():
        found.extend(content[i : i + 16] for i in range(0, len(content) - 15, 16))
    return found


# --------------------------------------------------------------------------
# Campaign
# --------------------------------------------------------------------------

CLEAN = "clean"
REJECTED = "rejected-with-sw"
RESET = "session-reset"
ABORT = "protocol-abort"
OUTCOMES = (CLEAN, REJECTED, RESET, ABORT)


@dataclass(frozen=True)
class Violation:
    iteration: int
    mutation: str
    kind: str
    detail: str

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "mutation": self.mutation,
                "kind": self.kind, "detail": self.detail}


@dataclass
class CampaignReport:
    protocol: str
    iterations: int
    seed: str
    mutations: Tuple[str, ...]
    skipped: Tuple[str, ...] = ()
    outcomes: Dict[str, Dict[str, int]] = field(default_factory=dict)
    violations: List[Violation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def totals(self) -> Dict[str, int]:
        total = {o: 0 for o in OUTCOMES}
        for counts in self.outcomes.values():
            for outcome, n in counts.items():
                total[outcome] += n
        return total

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "iterations": self.iterations,
            "seed": self.seed,
            "mutations": list(self.mutations),
            "skipped": list(self.skipped),
            "outcomes": {m: dict(sorted(c.items())) for m, c in sorted(self.outcomes.items())},
            "totals": self.totals(),
            "violations": [v.to_dict() for v in self.violations],
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        totals = ", ".join(f"{k}={v}" for k, v in self.totals().items())
        status = "PASS" if self.passed else f"FAIL ({len(self.violations)} violations)"
        return f"{self.protocol}: {self.iterations} iterations, {totals}: {status}"


CardFactory = Callable[[Drbg], VirtualCard]


def standard_cards(image: CardImage) -> CardFactory:
    return lambda drbg: VirtualCard(image, drbg=drbg)


def _baseline(factory: CardFactory, protocol: str, seed: str) -> List[Tuple[str, str, int, bytes]]:
    """Every (step, direction, occurrence, bytes) seen in an unmutated run."""
    card = factory(Drbg(seed, b"baseline-card"))
    chan = InterceptingChannel(GuardedCard(card))
    run_protocol(chan, protocol, card.image, Drbg(seed, b"baseline-terminal"))
    return [(e.step, e.direction, e.occurrence, e.original) for e in chan.log]


def _pick_mutation(name: str, baseline, drbg: Drbg) -> Optional[Mutation]:
    base, _, side = name.partition("@")
    kind = Kind(base)
    if kind is Kind.NONCE_CONSTANT:
        return Mutation(kind, side=side or TERMINAL_SIDE)
    candidates = [b for b in baseline if applicable(kind, b[0], b[1], b[3])]
    if not candidates:
        return None
    step, direction, occurrence, raw = drbg.choice(candidates)
    position = None
    if kind is Kind.BIT_FLIP:
        position = drbg.randbelow(len(raw) * 8)
    elif kind is Kind.TRUNCATE:
        position = 1 + drbg.randbelow(len(raw) - 1)
    return Mutation(kind, Target(step, direction, occurrence), position)


def _auth_accepted(protocol: str, commands: Sequence[bytes], responses: Sequence[bytes]) -> bool:
    namer = StepNamer()
    auth_step = "external-authenticate" if protocol == "bac" else "pace-4"
    for cmd, resp in zip(commands, responses):
        step, _ = namer.name(cmd)
        if step == auth_step:
            return resp[-2:] == SW.SUCCESS.to_bytes(2, "big")
    return False


def replay_probe(factory: CardFactory, card_drbg: Drbg, protocol: str,
                 commands: Sequence[bytes]) -> bool:
    """Replay captured terminal traffic to a fresh card; True if it is accepted."""
    card = factory(card_drbg)
    responses = [card.process(cmd) for cmd in commands]
    return _auth_accepted(protocol, commands, responses)


def run_iteration(factory: CardFactory, protocol: str, mutation: Optional[Mutation],
                  drbg: Drbg) -> Tuple[str, List[Tuple[str, str]]]:
    """One protocol run; returns the outcome and any (violation kind, detail)."""
    constant_card = mutation is not None and mutation.kind is Kind.NONCE_CONSTANT \
        and mutation.side == CARD_SIDE
    constant_terminal = mutation is not None and mutation.kind is Kind.NONCE_CONSTANT \
        and mutation.side == TERMINAL_SIDE

    def card_drbg(label: bytes) -> Drbg:
        return ConstantDrbg() if constant_card else Drbg(drbg.random_bytes(32), label)

    card = factory(card_drbg(b"card"))
    guard = GuardedCard(card)
    script = [mutation] if mutation is not None and mutation.target is not None else []
    chan = InterceptingChannel(guard, script, drbg.fork("mutate"))
    term_drbg = ConstantDrbg() if constant_terminal else drbg.fork("terminal")

    findings: List[Tuple[str, str]] = []
    outcome = CLEAN
    read: Optional[Dict[int, bytes]] = None
    try:
        read = run_protocol(chan, protocol, card.image, term_drbg)
    except SessionLost:
        outcome = RESET
    except TerminalError:
        # rejected when the card itself refused the last (unmutated) answer
        card_refused = bool(chan.received) and chan.received[-1][-2:] != b"\x90\x00"
        outcome = REJECTED if card_refused else ABORT
    except Exception as exc:  # the terminal must fail with its own error types
        outcome = ABORT
        findings.append(("terminal-crash", f"{type(exc).__name__}: {exc}"))

    for crash in guard.crashes:
        findings.append(("crash", crash))

    secrets = _secrets(card.image)
    established = False
    for cmd, resp in zip(chan.sent, chan.received):
        if cmd[0] & 0x0C == 0x0C:
            established = True
        if not established or chan.applied:
            if any(s in resp for s in secrets):
                findings.append(("plaintext-leak", f"response {resp[:12].hex()}... carries holder data"))
                break

    if read is not None:
        if chan.applied:
            findings.append(("silent-acceptance", f"run completed despite {chan.applied[0]}"))
        if mutation is not None and mutation.kind is Kind.NONCE_CONSTANT:
            if replay_probe(factory, card_drbg(b"replay"), protocol, chan.sent):
                findings.append(("replay-accepted",
                                 "captured authentication replayed to a fresh session was accepted"))
            else:
                outcome = REJECTED
        expected = {fid: card.fs.read(fid) for fid in READ_FILES}
        if read != expected:
            findings.append(("silent-acceptance", "terminal accepted file contents that differ"))
    return outcome, findings


def run_campaign(factory: CardFactory, protocol: str, mutations: Sequence[str] = FULL_SET,
                 iterations: int = 1000, seed="0") -> CampaignReport:
    """Seeded campaign; every iteration uses its own generator and a fresh card."""
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    seed = str(seed)
    requested = tuple(mutations)
    baseline = _baseline(factory, protocol, seed) if requested else []
    probe = Drbg(seed, b"applicability")
    names = tuple(n for n in requested if _pick_mutation(n, baseline, probe) is not None)
    skipped = tuple(n for n in requested if n not in names)
    report = CampaignReport(protocol, iterations, seed, names, skipped)
    for i in range(iterations):
        drbg = Drbg(f"{seed}/{protocol}/{i}", b"fuzz-iteration")
        mutation, label = None, "none"
        if names:
            name = drbg.choice(names)
            mutation = _pick_mutation(name, baseline, drbg)
            label = mutation.label if mutation else name
        outcome, findings = run_iteration(factory, protocol, mutation, drbg)
        counts = report.outcomes.setdefault(label, {o: 0 for o in OUTCOMES})
        counts[outcome] += 1
        for kind, detail in findings:
            where = str(mutation) if mutation else "none"
            report.violations.append(Violation(i, where, kind, detail))
    return report
