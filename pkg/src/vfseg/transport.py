"""Byte transports that carry protocol frames between the parties.

Both transports expose the same two calls: send_frame(bytes) and
recv_frame() -> Frame. Framing is handled here with the streaming
decoder, so a reader never sees a partial frame.
"""

from __future__ import annotations

import queue
import socket
from dataclasses import dataclass, field

from .errors import TransportError
from .protocol import Frame, MsgType, decode_frame

_RECV_CHUNK = 1 << 16


@dataclass
class TransportStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    frames_sent: int = 0
    frames_received: int = 0


@dataclass(frozen=True)
class AuditRecord:
    """What the wire saw: envelope metadata only, never plaintext."""

    direction: str
    msg_type: MsgType
    flags: int
    payload_len: int


class FrameTransport:
    """Shared buffering/decode logic over an abstract byte stream."""

    def __init__(self) -> None:
        self._buffer = bytearray()
        self.stats = TransportStats()

    def _write(self, data: bytes) -> None:
        raise NotImplementedError

    def _read_more(self) -> bytes:
        """Block for the next chunk; empty bytes means the peer is gone."""
        raise NotImplementedError

    def _record_send(self, data: bytes) -> None:
        pass

    def send_frame(self, data: bytes) -> None:
        self._record_send(data)
        self._write(data)
        self.stats.bytes_sent += len(data)
        self.stats.frames_sent += 1

    def recv_frame(self) -> Frame:
        while True:
            decoded = decode_frame(self._buffer)
            if decoded is not None:
                frame, end = decoded
                del self._buffer[:end]
                self.stats.bytes_received += end
                self.stats.frames_received += 1
                return frame
            chunk = self._read_more()
            if not chunk:
                raise TransportError(
                    f"connection closed with {len(self._buffer)} buffered bytes")
            self._buffer.extend(chunk)

    def close(self) -> None:
        pass


class LoopbackEndpoint(FrameTransport):
    def __init__(self, inbox: "queue.Queue[bytes | None]",
                 outbox: "queue.Queue[bytes | None]",
                 direction: str, audit: list[AuditRecord],
                 timeout: float | None) -> None:
        super().__init__()
        self._inbox = inbox
        self._outbox = outbox
        self._direction = direction
        self._audit = audit
        self._timeout = timeout
        self._closed = False

    def _write(self, data: bytes) -> None:
        if self._closed:
            raise TransportError("endpoint is closed")
        self._outbox.put(data)

    def _read_more(self) -> bytes:
        try:
            chunk = self._inbox.get(timeout=self._timeout)
        except queue.Empty:
            raise TransportError(
                f"loopback receive timed out after {self._timeout}s") from None
        return b"" if chunk is None else chunk

    def _record_send(self, data: bytes) -> None:
        decoded = decode_frame(data)
        if decoded is None or decoded[1] != len(data):
            raise TransportError("loopback send is not exactly one frame")
        frame = decoded[0]
        self._audit.append(AuditRecord(
            self._direction, frame.msg_type, frame.flags, frame.plaintext_len))

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


@dataclass
class LoopbackPair:
    """In-process transport for the "both" role and for tests.

    Records an envelope-level audit trail of everything that crossed,
    which the information-confinement checks read back.
    """

    bottom: LoopbackEndpoint = field(init=False)
    top: LoopbackEndpoint = field(init=False)
    audit: list[AuditRecord] = field(init=False, default_factory=list)

    def __init__(self, timeout: float | None = 60.0) -> None:
        self.audit = []
        up: queue.Queue = queue.Queue()
        down: queue.Queue = queue.Queue()
        self.bottom = LoopbackEndpoint(down, up, "bottom->top", self.audit, timeout)
        self.top = LoopbackEndpoint(up, down, "top->bottom", self.audit, timeout)

    def close(self) -> None:
        self.bottom.close()
        self.top.close()


class TcpTransport(FrameTransport):
    def __init__(self, sock: socket.socket, timeout: float | None = 120.0) -> None:
        super().__init__()
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(timeout)

    def _write(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def _read_more(self) -> bytes:
        try:
            return self._sock.recv(_RECV_CHUNK)
        except socket.timeout as exc:
            raise TransportError("receive timed out") from exc
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from exc

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def tcp_connect(host: str, port: int, timeout: float | None = 120.0,
                attempts: int = 40, retry_delay: float = 0.25) -> TcpTransport:
    """Dial the listening party, waiting briefly for it to come up."""
    import time

    last: OSError | None = None
    for _ in range(attempts):
        try:
            sock = socket.create_connection((host, port), timeout=10.0)
            return TcpTransport(sock, timeout)
        except OSError as exc:
            last = exc
            time.sleep(retry_delay)
    raise TransportError(f"could not connect to {host}:{port}: {last}")


class TcpListener:
    def __init__(self, host: str, port: int) -> None:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError as exc:
            raise TransportError(f"cannot listen on {host}:{port}: {exc}") from exc
        self._sock.listen(1)

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    def accept(self, timeout: float | None = 120.0) -> TcpTransport:
        self._sock.settimeout(timeout)
        try:
            conn, _addr = self._sock.accept()
        except socket.timeout as exc:
            raise TransportError("no peer connected before timeout") from exc
        return TcpTransport(conn, timeout)

    def close(self) -> None:
        self._sock.close()
