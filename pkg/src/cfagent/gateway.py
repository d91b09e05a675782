"""Service shell: session lifecycle API, event streaming, artifact rendering,
tool listing, and health.

Endpoints (all bodies UTF-8 JSON):
    POST /sessions                {query, image?, scenario?, seed?, t_max?, approval_mode?}
    GET  /sessions/{id}
    GET  /sessions/{id}/events?from=SEQ   (JSONL stream: replay then live tail)
    POST /sessions/{id}/control   {command: pause|resume|approve|abort}
    GET  /sessions/{id}/report
    GET  /artifacts/{id}.png?map=gray|heat
    GET  /tools
    GET  /healthz

The event stream serves the stored log lines verbatim, so the stream and the
JSONL file are byte-equivalent per event.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any
from urllib.parse import parse_qs, urlparse

from .config import ServerConfig
from .core import (
    ArtifactStore,
    EventLog,
    Query,
    SystemClock,
    UnknownArtifact,
    UnknownSession,
)
from .engine import CFEngine
from .head import RemoteHead, ScenarioRepository, ScriptedHead
from .loop import LoopConfig, NotPaused, SessionDriver, SessionOutcome
from .render import render_png
from .toolwire import Dispatcher, ToolRegistry, WorkerPool

SHUTDOWN_DRAIN_S = 30.0


class GatewayError(Exception):
    pass


class ToolSpawnFailure(GatewayError):
    pass


@dataclass
class SessionRecord:
    driver: SessionDriver
    thread: threading.Thread
    status: str = "running"  # running | final_answer | timeout | failed
    outcome: SessionOutcome | None = None
    error: str | None = None


class Runtime:
    """Everything behind the HTTP surface; also used headless by run/bench."""

    def __init__(self, cfg: ServerConfig, clock: Any = None):
        self.cfg = cfg
        self.clock = clock or SystemClock()
        data = Path(cfg.data_dir)
        self.store = ArtifactStore(data / "artifacts")
        self.events = EventLog(data / "sessions", clock=self.clock)
        self.registry = ToolRegistry()
        for descriptor in cfg.tools:
            self.registry.register(descriptor)
        self.registry.finalize()
        self.pool = WorkerPool(dict(cfg.pool))
        self.dispatcher = Dispatcher(
            self.registry, self.pool, store_root=str(data / "artifacts"), clock=self.clock,
        )
        self.engine = CFEngine(self.dispatcher, self.store, policy=cfg.policy)
        self.scenarios = ScenarioRepository(cfg.scenario_dir)
        self._sessions: dict[str, SessionRecord] = {}
        self._lock = threading.Lock()
        self._counter = 0

    # -- lifecycle -------------------------------------------------------------

    def spawn_tools(self) -> None:
        """Start every external tool server and require a health reply."""
        for descriptor in self.registry.descriptors():
            if descriptor.endpoint.startswith("internal:"):
                continue
            try:
                self.dispatcher.probe_server(descriptor.name, "__health__")
            except Exception as exc:
                raise ToolSpawnFailure(f"{descriptor.name}: {exc}") from exc

    def close(self) -> None:
        self.drain()
        self.dispatcher.close()

    def drain(self, timeout_s: float = SHUTDOWN_DRAIN_S) -> None:
        with self._lock:
            records = list(self._sessions.values())
        for record in records:
            record.thread.join(timeout=timeout_s)

    # -- sessions ----------------------------------------------------------------

    def _head_for(self, scenario_name: str | None, seed: int) -> tuple[Any, str | None]:
        if self.cfg.head_endpoint and scenario_name is None:
            tools = [d.to_dict() for d in self.registry.descriptors()]
            return RemoteHead(self.cfg.head_endpoint, tools), None
        name = scenario_name or self.cfg.default_scenario
        return ScriptedHead(self.scenarios.get(name), seed=seed), name

    def create_session(
        self,
        text: str,
        image: str | None = None,
        scenario: str | None = None,
        seed: int = 0,
        t_max: int | None = None,
        approval_mode: str | None = None,
        session_id: str | None = None,
    ) -> str:
        image = image.lstrip("@") if image else None
        if image is not None and not self.store.exists(image):
            raise UnknownArtifact(image)
        with self._lock:
            self._counter += 1
            session_id = session_id or f"s-{self._counter:04d}"
        head, scenario_name = self._head_for(scenario, seed)
        cfg = LoopConfig(
            t_max=t_max or self.cfg.t_max,
            approval_mode=approval_mode or self.cfg.approval_mode,
            policy=self.cfg.policy,
            seed=seed,
            editors=self.cfg.editors,
            strengths=self.cfg.strengths,
        )
        driver = SessionDriver(
            session_id=session_id,
            query=Query(text=text, image=image, session=session_id),
            cfg=cfg,
            head=head,
            dispatcher=self.dispatcher,
            engine=self.engine,
            log=self.events.create(session_id),
            registry=self.registry,
            clock=self.clock,
            scenario_name=scenario_name,
        )
        record = SessionRecord(driver=driver, thread=threading.Thread(
            target=self._run_session, args=(session_id,), daemon=True,
            name=f"session-{session_id}",
        ))
        with self._lock:
            self._sessions[session_id] = record
        record.thread.start()
        return session_id

    def _run_session(self, session_id: str) -> None:
        record = self.session(session_id)
        try:
            outcome = record.driver.run()
            record.outcome = outcome
            record.status = outcome.kind
        except Exception as exc:  # head/store failures surface via status
            record.error = str(exc)
            record.status = "failed"
            record.driver.log.close()

    def session(self, session_id: str) -> SessionRecord:
        with self._lock:
            record = self._sessions.get(session_id)
        if record is None:
            raise UnknownSession(session_id)
        return record

    def run_session_blocking(self, **kwargs: Any) -> tuple[str, SessionOutcome]:
        session_id = self.create_session(**kwargs)
        record = self.session(session_id)
        record.thread.join()
        if record.outcome is None:
            raise GatewayError(f"session {session_id} failed: {record.error}")
        return session_id, record.outcome

    def session_view(self, session_id: str) -> dict[str, Any]:
        record = self.session(session_id)
        view: dict[str, Any] = {"id": session_id, "status": record.status}
        if record.outcome is not None:
            view["outcome"] = record.outcome.to_dict()
        if record.error is not None:
            view["error"] = record.error
        return view


# ---------------------------------------------------------------------------
# HTTP layer

_ARTIFACT_PNG = re.compile(r"^/artifacts/([0-9a-f]+)\.png$")
_SESSION = re.compile(r"^/sessions/([A-Za-z0-9_-]+)$")
_SESSION_SUB = re.compile(r"^/sessions/([A-Za-z0-9_-]+)/(events|control|report)$")


class GatewayHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    runtime: Runtime  # set by serve()

    # -- plumbing ----------------------------------------------------------------

    def log_message(self, fmt: str, *args: Any) -> None:
        pass  # quiet; the event log is the audit trail

    def _json(self, status: int, body: Any) -> None:
        data = json.dumps(body, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(data)

    def _error(self, status: int, message: str) -> None:
        self._json(status, {"error": message})

    def _read_body(self) -> dict[str, Any]:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        raw = self.rfile.read(length)
        body = json.loads(raw.decode("utf-8"))
        if not isinstance(body, dict):
            raise ValueError("body must be a JSON object")
        return body

    # -- routes ------------------------------------------------------------------

    def do_OPTIONS(self) -> None:  # CORS preflight for the console
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self) -> None:
        url = urlparse(self.path)
        try:
            if url.path == "/healthz":
                return self._healthz()
            if url.path == "/tools":
                return self._tools()
            m = _ARTIFACT_PNG.match(url.path)
            if m:
                return self._artifact_png(m.group(1), url)
            m = _SESSION.match(url.path)
            if m:
                return self._json(200, self.runtime.session_view(m.group(1)))
            m = _SESSION_SUB.match(url.path)
            if m and m.group(2) == "events":
                return self._stream_events(m.group(1), url)
            if m and m.group(2) == "report":
                return self._report(m.group(1))
            return self._error(404, f"no route {url.path}")
        except UnknownSession as exc:
            return self._error(404, f"unknown session {exc}")
        except UnknownArtifact as exc:
            return self._error(404, f"unknown artifact {exc}")
        except BrokenPipeError:
            return
        except Exception as exc:
            return self._error(500, str(exc))

    def do_POST(self) -> None:
        url = urlparse(self.path)
        try:
            body = self._read_body()
            if url.path == "/sessions":
                return self._create_session(body)
            m = _SESSION_SUB.match(url.path)
            if m and m.group(2) == "control":
                return self._control(m.group(1), body)
            return self._error(404, f"no route {url.path}")
        except UnknownSession as exc:
            return self._error(404, f"unknown session {exc}")
        except UnknownArtifact as exc:
            return self._error(404, f"unknown artifact {exc}")
        except NotPaused as exc:
            return self._error(409, str(exc))
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            return self._error(400, f"bad request: {exc}")
        except BrokenPipeError:
            return
        except Exception as exc:
            return self._error(500, str(exc))

    # -- handlers ----------------------------------------------------------------

    def _healthz(self) -> None:
        health = {name: self.runtime.dispatcher.health(name)
                  for name in self.runtime.registry.names()
                  if not self.runtime.registry.get(name).endpoint.startswith("internal:")}
        self._json(200, {"ok": True, "tools": health})

    def _tools(self) -> None:
        out = []
        for descriptor in self.runtime.registry.descriptors():
            entry = descriptor.to_dict()
            if not descriptor.endpoint.startswith("internal:"):
                entry["health"] = self.runtime.dispatcher.health(descriptor.name)
            out.append(entry)
        self._json(200, out)

    def _artifact_png(self, artifact_id: str, url: Any) -> None:
        colormap = (parse_qs(url.query).get("map") or ["gray"])[0]
        if colormap not in ("gray", "heat"):
            return self._error(400, f"unknown colormap {colormap!r}")
        art = self.runtime.store.get(artifact_id)
        data = render_png(art.pixels, colormap)
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(data)

    def _create_session(self, body: dict[str, Any]) -> None:
        text = body.get("query")
        if not isinstance(text, str) or not text:
            return self._error(400, "query must be a non-empty string")
        session_id = self.runtime.create_session(
            text=text,
            image=body.get("image"),
            scenario=body.get("scenario"),
            seed=int(body.get("seed", 0)),
            t_max=body.get("t_max"),
            approval_mode=body.get("approval_mode"),
        )
        self._json(201, {"id": session_id})

    def _control(self, session_id: str, body: dict[str, Any]) -> None:
        command = body.get("command")
        if command not in ("pause", "resume", "approve", "abort"):
            return self._error(400, f"unknown command {command!r}")
        self.runtime.session(session_id).driver.control(command)
        self._json(200, {"ok": True})

    def _report(self, session_id: str) -> None:
        record = self.runtime.session(session_id)
        if record.driver.last_report is None:
            return self._error(404, "no counterfactual report for this session yet")
        self._json(200, record.driver.last_report)

    def _stream_events(self, session_id: str, url: Any) -> None:
        from_seq = int((parse_qs(url.query).get("from") or ["0"])[0])
        log = self.runtime.events.get(session_id)
        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Transfer-Encoding", "chunked")
        self.end_headers()
        try:
            for line in log.follow(from_seq):
                payload = line.encode("utf-8") + b"\n"
                self.wfile.write(f"{len(payload):x}\r\n".encode() + payload + b"\r\n")
                self.wfile.flush()
            self.wfile.write(b"0\r\n\r\n")
        except (BrokenPipeError, ConnectionResetError):
            pass


class GatewayServer:
    """ThreadingHTTPServer wrapper with graceful drain on stop()."""

    def __init__(self, runtime: Runtime):
        self.runtime = runtime
        host, _, port = runtime.cfg.listen.rpartition(":")
        handler = type("BoundHandler", (GatewayHandler,), {"runtime": runtime})
        try:
            self.httpd = ThreadingHTTPServer((host or "127.0.0.1", int(port)), handler)
        except OSError as exc:
            raise GatewayError(f"cannot bind {runtime.cfg.listen}: {exc}") from exc
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> None:
        self.runtime.spawn_tools()
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True,
                                        name="gateway-http")
        self._thread.start()

    def stop(self) -> None:
        """Stop accepting, let in-flight sessions finish, then tear down."""
        self.httpd.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=10)
        self.runtime.close()

    def serve_forever(self) -> None:
        self.runtime.spawn_tools()
        self.httpd.serve_forever()
