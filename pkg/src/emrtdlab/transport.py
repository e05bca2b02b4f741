"""Channels between an inspection system and a card.

Every channel offers ``exchange(raw) -> (response, rtt_us)``.  The socket
transport frames each APDU with a 2-byte big-endian length prefix::

    +--------+--------+----------------------+
    | len_hi | len_lo | payload (len bytes)  |
    +--------+--------+----------------------+

A server binds one fresh card to every accepted connection.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

from .codec import CommandApdu, ResponseApdu, decode_response
from .cryptokit.drbg import Drbg

log = logging.getLogger(__name__)

MAX_FRAME = 0xFFFF


class TransportError(Exception):
    """The peer went away or the byte stream broke."""


class FrameError(TransportError):
    """A frame violated the length-prefix contract."""


# --------------------------------------------------------------------------
# Framing
# --------------------------------------------------------------------------


def encode_frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME:
        raise FrameError(f"payload of {len(payload)} bytes exceeds {MAX_FRAME}")
    return len(payload).to_bytes(2, "big") + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket, max_payload: int = MAX_FRAME) -> Optional[bytes]:
    """Next frame payload, or ``None`` on a clean close between frames."""
    first = sock.recv(1)
    if not first:
        return None
    size = int.from_bytes(first + _recv_exact(sock, 1), "big")
    if size > max_payload:
        raise FrameError(f"frame of {size} bytes exceeds limit {max_payload}")
    return _recv_exact(sock, size)


def write_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(encode_frame(payload))


def parse_endpoint(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit() or int(port) > 65535:
        raise ValueError(f"endpoint must look like HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


# --------------------------------------------------------------------------
# Channels
# --------------------------------------------------------------------------


class Channel:
    """Request/response byte pipe to a card."""

    description = "channel"

    def exchange(self, raw: bytes) -> Tuple[bytes, float]:
        raise NotImplementedError

    def transmit(self, cmd: CommandApdu) -> ResponseApdu:
        raw, _ = self.exchange(cmd.encode())
        return decode_response(raw)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _elapsed_us(start: int) -> float:
    # never report zero: an exchange always takes some time
    return max((time.perf_counter_ns() - start) / 1000.0, 0.001)


class LoopbackChannel(Channel):
    """Calls the card directly in-process."""

    description = "loopback"

    def __init__(self, card):
        self.card = card

    def exchange(self, raw: bytes) -> Tuple[bytes, float]:
        start = time.perf_counter_ns()
        resp = self.card.process(raw)
        return resp, _elapsed_us(start)


def loopback(card) -> LoopbackChannel:
    return LoopbackChannel(card)


class SocketChannel(Channel):
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.description = f"tcp:{host}:{port}"
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def exchange(self, raw: bytes) -> Tuple[bytes, float]:
        start = time.perf_counter_ns()
        try:
            write_frame(self._sock, raw)
            resp = read_frame(self._sock)
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        if resp is None:
            raise TransportError("server closed the connection")
        return resp, _elapsed_us(start)

    def close(self) -> None:
        self._sock.close()


def connect(endpoint: str, timeout: float = 10.0) -> SocketChannel:
    host, port = parse_endpoint(endpoint)
    return SocketChannel(host, port, timeout)


class LatencyChannel(Channel):
    """Adds ``delay + U(0, jitter)`` milliseconds to every exchange."""

    def __init__(self, inner: Channel, delay_ms: float, jitter_ms: float = 0.0,
                 drbg: Optional[Drbg] = None):
        if delay_ms < 0 or jitter_ms < 0:
            raise ValueError("delay and jitter must be non-negative")
        self.inner = inner
        self.delay_ms = delay_ms
        self.jitter_ms = jitter_ms
        self.drbg = drbg if drbg is not None else Drbg(b"latency")
        self.delays_ms: List[float] = []
        self.description = f"{inner.description}+latency({delay_ms}ms)"

    def exchange(self, raw: bytes) -> Tuple[bytes, float]:
        extra = self.delay_ms
        if self.jitter_ms:
            extra += self.drbg.uniform(0.0, self.jitter_ms)
        self.delays_ms.append(extra)
        start = time.perf_counter_ns()
        resp, _ = self.inner.exchange(raw)
        remaining = extra / 1000.0 - (time.perf_counter_ns() - start) / 1e9
        if remaining > 0:
            time.sleep(remaining)
        # sleep only tops up to the injected delay, so the bound holds exactly
        return resp, max(_elapsed_us(start), extra * 1000.0)

    def close(self) -> None:
        self.inner.close()


def with_latency(inner: Channel, delay_ms: float, jitter_ms: float = 0.0,
                 drbg: Optional[Drbg] = None) -> LatencyChannel:
    return LatencyChannel(inner, delay_ms, jitter_ms, drbg)


@dataclass
class Exchange:
    command: bytes
    response: bytes
    rtt_us: float


@dataclass
class RecordingChannel(Channel):
    """Keeps a transcript of everything passing through ``inner``."""

    inner: Channel
    transcript: List[Exchange] = field(default_factory=list)

    @property
    def description(self) -> str:
        return self.inner.description

    def exchange(self, raw: bytes) -> Tuple[bytes, float]:
        resp, rtt = self.inner.exchange(raw)
        self.transcript.append(Exchange(bytes(raw), resp, rtt))
        return resp, rtt

    def close(self) -> None:
        self.inner.close()


# --------------------------------------------------------------------------
# Server
# --------------------------------------------------------------------------

Handler = Callable[[bytes], bytes]


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server: FrameServer = self.server.owner
        session = server.session_factory()
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            while True:
                try:
                    payload = read_frame(sock, server.max_payload)
                except FrameError as exc:
                    log.warning("closing %s: %s", self.client_address, exc)
                    return
                except (TransportError, OSError) as exc:
                    log.debug("client %s dropped: %s", self.client_address, exc)
                    return
                if payload is None:
                    return
                try:
                    reply = session(payload)
                    write_frame(sock, reply)
                except (TransportError, OSError) as exc:
                    log.debug("session for %s ended: %s", self.client_address, exc)
                    return
        finally:
            closer = getattr(session, "close", None)
            if closer is not None:
                closer()


class _TcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class FrameServer:
    """Framed request/response server; one session object per connection.

    ``session_factory`` returns a callable mapping a request payload to a
    reply payload.  Errors on one connection never affect the others.
    """

    def __init__(self, session_factory: Callable[[], Handler], endpoint: str = "127.0.0.1:0",
                 max_payload: int = MAX_FRAME):
        self.session_factory = session_factory
        self.max_payload = max_payload
        host, port = parse_endpoint(endpoint)
        self._server = _TcpServer((host, port), _FrameHandler)
        self._server.owner = self
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> Tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def start(self) -> "FrameServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def wait(self) -> None:
        """Block until the background server stops."""
        while self._thread is not None and self._thread.is_alive():
            self._thread.join(0.5)

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def card_server(card_factory: Callable[[], object], endpoint: str = "127.0.0.1:0",
                max_payload: int = MAX_FRAME) -> FrameServer:
    """Serve cards over TCP; each connection presents a fresh card."""
    return FrameServer(lambda: card_factory().process, endpoint, max_payload)
