"""Stand-alone stub tool server.

Speaks the frame protocol on stdio by default; ``--tcp <port>`` switches to a
threaded TCP listener. One process serves exactly one tool (plus the
builtins ``__health__`` and ``__stats__``). Frames are handled concurrently,
one thread per request/connection, and responses are written whole-line under
a lock, so out-of-order completion is fine — the client correlates by id.

Test knobs (environment; a tool-suffixed variable beats the generic one,
e.g. CFAGENT_STUB_DIE_AFTER_EDIT_A):
    CFAGENT_STUB_DELAY_MS   artificial latency per tool call
    CFAGENT_STUB_DIE_AFTER  exit(1) when tool call N+1 arrives (fault injection)
"""

from __future__ import annotations

import argparse
import os
import socketserver
import sys
import threading
from typing import Any, BinaryIO

from .core import ArtifactStore
from .stubs import StubError, Toolbox
from .transport import decode_frame, encode_frame


class _Counters:
    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0

    def enter(self) -> int:
        with self.lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            return self.calls

    def leave(self) -> None:
        with self.lock:
            self.in_flight -= 1

    def snapshot(self) -> dict[str, int]:
        with self.lock:
            return {
                "calls": self.calls,
                "in_flight": self.in_flight,
                "max_in_flight": self.max_in_flight,
            }


def _knob(name: str, tool: str) -> int:
    suffixed = os.environ.get(f"{name}_{tool.upper()}")
    return int(suffixed if suffixed is not None else os.environ.get(name, "0"))


class StubServer:
    def __init__(self, tool: str, store_root: str):
        self.tool = tool
        self.toolbox = Toolbox(ArtifactStore(store_root))
        self.counters = _Counters()
        self.delay_s = _knob("CFAGENT_STUB_DELAY_MS", tool) / 1000.0
        self.die_after = _knob("CFAGENT_STUB_DIE_AFTER", tool)

    def handle(self, frame: dict[str, Any]) -> dict[str, Any]:
        frame_id = frame.get("id", "")
        tool = frame.get("tool", "")
        if tool == "__health__":
            return {"id": frame_id, "ok": True, "result": {"tool": self.tool}}
        if tool == "__stats__":
            return {"id": frame_id, "ok": True, "result": self.counters.snapshot()}
        call_no = self.counters.enter()
        try:
            if self.die_after and call_no > self.die_after:
                os._exit(1)  # simulate a crash mid-call; no response goes out
            if self.delay_s > 0.0:
                threading.Event().wait(self.delay_s)
            if tool != self.tool:
                return self._error(frame_id, "unknown_tool", f"this server hosts {self.tool!r}")
            args = frame.get("args")
            if not isinstance(args, dict):
                return self._error(frame_id, "bad_args", "args must be an object")
            try:
                result = self.toolbox.dispatch(tool, args)
            except StubError as exc:
                return self._error(frame_id, exc.code, str(exc))
            return {"id": frame_id, "ok": True, "result": result}
        finally:
            self.counters.leave()

    @staticmethod
    def _error(frame_id: str, code: str, message: str) -> dict[str, Any]:
        return {"id": frame_id, "ok": False, "error": {"code": code, "message": message}}


def _serve_stream(server: StubServer, rx: BinaryIO, tx: BinaryIO, tx_lock: threading.Lock) -> None:
    def run_one(raw: bytes) -> None:
        try:
            frame = decode_frame(raw)
        except Exception:
            return  # undecodable request: nothing to correlate, drop it
        response = server.handle(frame)
        data = encode_frame(response)
        with tx_lock:
            tx.write(data)
            tx.flush()

    for line in iter(rx.readline, b""):
        line = line.rstrip(b"\n")
        if not line:
            continue
        threading.Thread(target=run_one, args=(line,), daemon=True).start()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cfagent-stub", description=__doc__)
    parser.add_argument("--tool", required=True, help="tool name this server hosts")
    parser.add_argument("--store", required=True, help="artifact store root directory")
    parser.add_argument("--tcp", type=int, default=None, metavar="PORT",
                        help="listen on TCP instead of stdio")
    args = parser.parse_args(argv)

    server = StubServer(args.tool, args.store)

    if args.tcp is None:
        tx_lock = threading.Lock()
        _serve_stream(server, sys.stdin.buffer, sys.stdout.buffer, tx_lock)
        return 0

    class Handler(socketserver.StreamRequestHandler):
        def handle(self) -> None:
            lock = threading.Lock()
            _serve_stream(server, self.rfile, self.wfile, lock)

    class Listener(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    with Listener(("127.0.0.1", args.tcp), Handler) as listener:
        listener.serve_forever()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
