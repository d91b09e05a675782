"""Frame transports for tool servers.

One JSON object per line, over a subprocess's stdio or a TCP socket. Requests
and responses are correlated by id, so multiple calls may be in flight on one
connection and responses may arrive out of order. A response whose id matches
no outstanding request is an orphan: logged and dropped, never delivered.
"""

from __future__ import annotations

import json
import logging
import socket
import subprocess
import threading
from typing import Any

logger = logging.getLogger(__name__)

MAX_FRAME_BYTES = 1 << 20


class TransportError(Exception):
    pass


class TransportClosed(TransportError):
    pass


class FrameTimeout(TransportError):
    pass


class MalformedFrame(TransportError):
    pass


def encode_frame(obj: dict[str, Any]) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def decode_frame(line: bytes) -> dict[str, Any]:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrame(f"undecodable frame: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedFrame(f"frame must be a JSON object, got {type(obj).__name__}")
    return obj


class _Pending:
    __slots__ = ("event", "response")

    def __init__(self) -> None:
        self.event = threading.Event()
        self.response: dict[str, Any] | None = None


class FrameClient:
    """Shared correlation machinery for a line-framed connection."""

    def __init__(self, name: str):
        self.name = name
        self._lock = threading.Lock()
        self._pending: dict[str, _Pending] = {}
        self._counter = 0
        self._closed_reason: str | None = None

    # subclasses provide these three
    def _ensure_open(self) -> None:
        raise NotImplementedError

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _close_io(self) -> None:
        raise NotImplementedError

    def request(self, tool: str, args: dict[str, Any], deadline_ms: int) -> dict[str, Any]:
        """Send one request frame and wait for its correlated response.

        Raises FrameTimeout when the deadline expires (a late response then
        becomes an orphan) and TransportClosed when the peer goes away. A
        transport that lost its peer stays closed until ``reset()`` — the
        dispatcher resets only when a health probe is due, so a dead tool
        fails fast to its fallbacks instead of being respawned every call.
        """
        with self._lock:
            self._counter += 1
            frame_id = f"{self.name}-{self._counter}"
            pending = _Pending()
            if self._closed_reason is not None:
                raise TransportClosed(f"{self.name}: {self._closed_reason}")
        try:
            self._ensure_open()
        except OSError as exc:
            self._on_disconnect(str(exc))
            raise TransportClosed(f"{self.name}: {exc}") from exc
        with self._lock:
            if self._closed_reason is not None:
                raise TransportClosed(f"{self.name}: {self._closed_reason}")
            self._pending[frame_id] = pending
        frame = {"args": args, "deadline_ms": deadline_ms, "id": frame_id, "tool": tool}
        try:
            self._send_bytes(encode_frame(frame))
        except (OSError, ValueError) as exc:
            with self._lock:
                self._pending.pop(frame_id, None)
            self._on_disconnect(str(exc))
            raise TransportClosed(f"{self.name}: {exc}") from exc
        if not pending.event.wait(timeout=deadline_ms / 1000.0):
            with self._lock:
                self._pending.pop(frame_id, None)
            raise FrameTimeout(f"{self.name}: no response to {frame_id} within {deadline_ms} ms")
        if pending.response is None:
            raise TransportClosed(f"{self.name}: connection closed awaiting {frame_id}")
        return pending.response

    def _deliver_line(self, line: bytes) -> None:
        try:
            obj = decode_frame(line)
        except MalformedFrame as exc:
            logger.warning("%s: dropping undecodable frame: %s", self.name, exc)
            return
        frame_id = obj.get("id")
        with self._lock:
            pending = self._pending.pop(frame_id, None) if isinstance(frame_id, str) else None
        if pending is None:
            logger.warning("%s: dropping orphan response id=%r", self.name, frame_id)
            return
        pending.response = obj
        pending.event.set()

    def _on_disconnect(self, reason: str) -> None:
        with self._lock:
            self._closed_reason = reason
            stranded = list(self._pending.values())
            self._pending.clear()
        for pending in stranded:
            pending.event.set()  # response stays None -> TransportClosed

    def reset(self) -> None:
        """Clear the crashed state so the next request may reconnect/respawn."""
        with self._lock:
            self._closed_reason = None

    def close(self) -> None:
        self._on_disconnect("closed by client")
        self._close_io()


class SubprocessTransport(FrameClient):
    """Tool server as a child process speaking frames on stdin/stdout.

    The child is spawned lazily and respawned on the next request after a
    crash; health gating above this layer decides when that is allowed.
    """

    def __init__(self, name: str, command: list[str], env: dict[str, str] | None = None):
        super().__init__(name)
        self.command = command
        self.env = env
        self._proc: subprocess.Popen | None = None
        self._io_lock = threading.Lock()

    def _ensure_open(self) -> None:
        with self._io_lock:
            if self._proc is not None:
                if self._proc.poll() is None:
                    return
                raise OSError("tool process exited")
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=None,
                env=self.env,
            )
            reader = threading.Thread(
                target=self._read_loop, args=(self._proc,), daemon=True,
                name=f"frames-{self.name}",
            )
            reader.start()

    def reset(self) -> None:
        super().reset()
        with self._io_lock:
            if self._proc is not None and self._proc.poll() is not None:
                self._proc = None

    def _read_loop(self, proc: subprocess.Popen) -> None:
        assert proc.stdout is not None
        for line in iter(proc.stdout.readline, b""):
            self._deliver_line(line.rstrip(b"\n"))
        self._on_disconnect("process exited")

    def _send_bytes(self, data: bytes) -> None:
        with self._io_lock:
            proc = self._proc
        if proc is None or proc.stdin is None or proc.poll() is not None:
            raise OSError("process not running")
        with self._io_lock:
            proc.stdin.write(data)
            proc.stdin.flush()

    def _close_io(self) -> None:
        with self._io_lock:
            proc, self._proc = self._proc, None
        if proc is not None:
            try:
                if proc.stdin:
                    proc.stdin.close()
                proc.terminate()
                proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                proc.kill()


class TcpTransport(FrameClient):
    """Tool server behind host:port; reconnects lazily after a drop."""

    def __init__(self, name: str, host: str, port: int):
        super().__init__(name)
        self.host = host
        self.port = port
        self._sock: socket.socket | None = None
        self._io_lock = threading.Lock()

    def _ensure_open(self) -> None:
        with self._io_lock:
            if self._sock is not None:
                return
            sock = socket.create_connection((self.host, self.port), timeout=10)
            sock.settimeout(None)
            self._sock = sock
            reader = threading.Thread(
                target=self._read_loop, args=(sock,), daemon=True,
                name=f"frames-{self.name}",
            )
            reader.start()

    def _read_loop(self, sock: socket.socket) -> None:
        buf = b""
        try:
            while True:
                chunk = sock.recv(65536)
                if not chunk:
                    break
                buf += chunk
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    self._deliver_line(line)
                if len(buf) > MAX_FRAME_BYTES:
                    logger.warning("%s: oversized frame, dropping connection", self.name)
                    break
        except OSError:
            pass
        with self._io_lock:
            if self._sock is sock:
                self._sock = None
        self._on_disconnect("connection closed")

    def _send_bytes(self, data: bytes) -> None:
        with self._io_lock:
            sock = self._sock
        if sock is None:
            raise OSError("not connected")
        sock.sendall(data)

    def _close_io(self) -> None:
        with self._io_lock:
            sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass
