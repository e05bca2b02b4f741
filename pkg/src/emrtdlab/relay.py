"""Relay bridge and round-trip-time distance bounding.

The bridge forwards frames between a terminal and a distant card without
looking inside them.  It works in-process (:meth:`RelayBridge.channel`) or as
a TCP listener that impersonates a card (:meth:`RelayBridge.listen`).
"""

from __future__ import annotations

import enum
import json
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

from . import protocol as proto
from .codec import CommandApdu
from .transport import Channel, FrameServer, TransportError

GET_CHALLENGE = CommandApdu(proto.CLA_PLAIN, proto.INS_GET_CHALLENGE, 0, 0, le=8)

TO_CARD = "terminal->card"
TO_TERMINAL = "card->terminal"


@dataclass(frozen=True)
class LogEntry:
    direction: str
    data: bytes
    timestamp: float
    connection: int = 0

    def to_dict(self) -> dict:
        return {"connection": self.connection, "direction": self.direction,
                "data": self.data.hex().upper(), "timestamp": round(self.timestamp, 6)}


class _BridgeLeg(Channel):
    """Terminal-facing end of the bridge for one connection."""

    def __init__(self, bridge: "RelayBridge", card_side: Channel, connection: int):
        self.bridge = bridge
        self.card_side = card_side
        self.connection = connection
        self.description = f"relay({card_side.description})"

    def exchange(self, raw: bytes) -> Tuple[bytes, float]:
        start = time.perf_counter_ns()
        self.bridge._record(TO_CARD, raw, self.connection)
        resp, _ = self.card_side.exchange(raw)
        self.bridge._record(TO_TERMINAL, resp, self.connection)
        return resp, max((time.perf_counter_ns() - start) / 1000.0, 0.001)

    def close(self) -> None:
        self.card_side.close()

    def __call__(self, raw: bytes) -> bytes:
        try:
            return self.exchange(raw)[0]
        except TransportError:
            self.bridge.stopped = True
            raise


CardSide = Union[Channel, Callable[[], Channel]]


class RelayBridge:
    """Man-in-the-middle forwarder between a terminal and a remote card.

    ``card_side`` is either one channel shared by all terminal connections or
    a factory opening a new card-side leg per terminal connection.
    """

    def __init__(self, card_side: CardSide):
        self._card_side = card_side
        self.log: List[LogEntry] = []
        self.stopped = False
        self._lock = threading.Lock()
        self._connections = 0
        self._server: Optional[FrameServer] = None

    def _open_leg(self) -> _BridgeLeg:
        with self._lock:
            self._connections += 1
            number = self._connections
        side = self._card_side() if callable(self._card_side) and not isinstance(
            self._card_side, Channel) else self._card_side
        return _BridgeLeg(self, side, number)

    def _record(self, direction: str, data: bytes, connection: int) -> None:
        with self._lock:
            self.log.append(LogEntry(direction, bytes(data), time.time(), connection))

    def channel(self) -> Channel:
        """A terminal-facing channel forwarding through this bridge."""
        return self._open_leg()

    def listen(self, endpoint: str = "127.0.0.1:0") -> FrameServer:
        """Accept terminal connections as if this process were the card."""
        self._server = FrameServer(self._open_leg, endpoint).start()
        return self._server

    @property
    def endpoint(self) -> Optional[str]:
        return self._server.endpoint if self._server else None

    def stop(self) -> None:
        if self._server is not None:
            self._server.stop()
            self._server = None
        self.stopped = True

    def transcript(self, direction: str, connection: Optional[int] = None) -> List[bytes]:
        return [e.data for e in self.log
                if e.direction == direction and (connection is None or e.connection == connection)]

    def export_log(self) -> str:
        """Forwarding log as JSON lines."""
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.log)


def run_bridge(card_side: CardSide, listen: str = "127.0.0.1:0") -> RelayBridge:
    bridge = RelayBridge(card_side)
    bridge.listen(listen)
    return bridge


# --------------------------------------------------------------------------
# Distance bounding
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RttStats:
    samples_us: Tuple[float, ...]
    median_us: float = field(init=False)
    min_us: float = field(init=False)
    max_us: float = field(init=False)

    def __post_init__(self):
        if not self.samples_us:
            raise ValueError("at least one sample is required")
        object.__setattr__(self, "median_us", statistics.median(self.samples_us))
        object.__setattr__(self, "min_us", min(self.samples_us))
        object.__setattr__(self, "max_us", max(self.samples_us))

    @property
    def median_ms(self) -> float:
        return self.median_us / 1000.0

    def to_dict(self) -> dict:
        return {
            "samples_us": [round(s, 1) for s in self.samples_us],
            "median_ms": round(self.median_ms, 3),
            "min_ms": round(self.min_us / 1000.0, 3),
            "max_ms": round(self.max_us / 1000.0, 3),
        }


def measure_rtt(channel: Channel, n: int = 5) -> RttStats:
    """Time ``n`` plaintext GET CHALLENGE exchanges."""
    if n < 1:
        raise ValueError("n must be at least 1")
    raw = GET_CHALLENGE.encode()
    return RttStats(tuple(channel.exchange(raw)[1] for _ in range(n)))


class DistanceVerdict(enum.Enum):
    PASS = "pass"
    FLAG = "flag"


def distance_bound_check(stats: Union[RttStats, Sequence[float]], threshold_ms: float) -> DistanceVerdict:
    """Flag when the median round trip is strictly above the threshold."""
    if not isinstance(stats, RttStats):
        stats = RttStats(tuple(stats))
    return DistanceVerdict.FLAG if stats.median_ms > threshold_ms else DistanceVerdict.PASS
