"""Tool registry, worker pool, health tracking, and dispatch with fallback.

Each tool is an independent server process behind a frame transport. The
dispatcher enforces per-capacity-class concurrency (FIFO admission), marks a
tool unhealthy after consecutive transport failures, lets one probe through
per cooldown interval, and walks fallback chains when the primary is down.

Request frame:  {"id": str, "tool": str, "args": object, "deadline_ms": int}
Response frame: {"id": str, "ok": true, "result": object}
             or {"id": str, "ok": false, "error": {"code": str, "message": str}}
Artifact references are strings "@<hex>".
"""

from __future__ import annotations

import sys
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any

from .core import SystemClock, ToolResult
from .transport import (
    FrameClient,
    FrameTimeout,
    SubprocessTransport,
    TcpTransport,
    TransportClosed,
)

DEFAULT_FAILURE_THRESHOLD = 3
DEFAULT_COOLDOWN_MS = 5000
TRANSPORT_FAULTS = ("timeout", "crashed", "unhealthy")

CF_WORKFLOW_TOOL = "cf_workflow"


class ToolwireError(Exception):
    pass


class DuplicateName(ToolwireError):
    pass


class CyclicFallback(ToolwireError):
    pass


class IncompatibleFallback(ToolwireError):
    pass


class UnknownTool(ToolwireError):
    pass


@dataclass(frozen=True)
class ArgSpec:
    type: str
    required: bool = True


@dataclass(frozen=True)
class ToolSchema:
    args: dict[str, ArgSpec]
    returns: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "args": {k: {"required": v.required, "type": v.type} for k, v in sorted(self.args.items())},
            "returns": self.returns,
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "ToolSchema":
        return ToolSchema(
            args={k: ArgSpec(type=v["type"], required=bool(v.get("required", True)))
                  for k, v in d.get("args", {}).items()},
            returns=d.get("returns", ""),
        )


@dataclass(frozen=True)
class ToolDescriptor:
    """One registered tool: schema plus transport address and dispatch knobs.

    endpoint forms: "stub:<tool>" (subprocess stub server), "tcp:<host>:<port>",
    or "internal:<name>" for pseudo-tools executed by the agent loop itself.
    """

    name: str
    schema: ToolSchema
    endpoint: str
    capacity_class: str = "cpu"
    timeout_ms: int = 10000
    fallbacks: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "capacity_class": self.capacity_class,
            "endpoint": self.endpoint,
            "fallbacks": list(self.fallbacks),
            "name": self.name,
            "schema": self.schema.to_dict(),
            "timeout_ms": self.timeout_ms,
        }

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "ToolDescriptor":
        return ToolDescriptor(
            name=d["name"],
            schema=ToolSchema.from_dict(d["schema"]),
            endpoint=d["endpoint"],
            capacity_class=d.get("capacity_class", "cpu"),
            timeout_ms=int(d.get("timeout_ms", 10000)),
            fallbacks=tuple(d.get("fallbacks", ())),
        )


class FairSemaphore:
    """Counting semaphore with strict FIFO hand-off to waiters."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._free = capacity
        self._lock = threading.Lock()
        self._waiters: deque[threading.Event] = deque()

    def acquire(self) -> None:
        with self._lock:
            if self._free > 0 and not self._waiters:
                self._free -= 1
                return
            gate = threading.Event()
            self._waiters.append(gate)
        gate.wait()

    def release(self) -> None:
        with self._lock:
            if self._waiters:
                self._waiters.popleft().set()  # slot handed to the next waiter
            else:
                self._free = min(self.capacity, self._free + 1)

    def __enter__(self) -> "FairSemaphore":
        self.acquire()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.release()


class WorkerPool:
    """Per-capacity-class slot pools (e.g. gpu:2, cpu:8), FIFO per class."""

    def __init__(self, capacities: dict[str, int]):
        for cls, n in capacities.items():
            if n < 1:
                raise ToolwireError(f"capacity for class {cls!r} must be >= 1")
        self._slots = {cls: FairSemaphore(n) for cls, n in capacities.items()}

    def slot(self, capacity_class: str) -> FairSemaphore:
        try:
            return self._slots[capacity_class]
        except KeyError:
            raise ToolwireError(f"unknown capacity class {capacity_class!r}") from None

    @property
    def classes(self) -> dict[str, int]:
        return {cls: sem.capacity for cls, sem in self._slots.items()}


@dataclass
class _Health:
    healthy: bool = True
    consecutive_failures: int = 0
    since_ms: int | None = None
    last_probe_ms: int | None = None

    def to_dict(self) -> dict[str, Any]:
        if self.healthy:
            return {"healthy": True}
        return {
            "consecutive_failures": self.consecutive_failures,
            "healthy": False,
            "since": self.since_ms,
        }


class ToolRegistry:
    """Name -> descriptor map; read-mostly after finalize()."""

    def __init__(self) -> None:
        self._tools: dict[str, ToolDescriptor] = {}
        self._finalized = False

    def register(self, descriptor: ToolDescriptor) -> None:
        if descriptor.name in self._tools:
            raise DuplicateName(descriptor.name)
        self._tools[descriptor.name] = descriptor

    def get(self, name: str) -> ToolDescriptor:
        try:
            return self._tools[name]
        except KeyError:
            raise UnknownTool(name) from None

    def has(self, name: str) -> bool:
        return name in self._tools

    def names(self) -> list[str]:
        return sorted(self._tools)

    def descriptors(self) -> list[ToolDescriptor]:
        return [self._tools[name] for name in self.names()]

    def finalize(self) -> None:
        """Validate fallback chains: registered, acyclic, schema-compatible."""
        for desc in self._tools.values():
            for fb in desc.fallbacks:
                if fb not in self._tools:
                    raise ToolwireError(f"{desc.name}: fallback {fb!r} is not registered")
                self._check_compatible(desc, self._tools[fb])
        for name in self._tools:
            self._walk_cycle(name, [])
        self._finalized = True

    def _walk_cycle(self, name: str, trail: list[str]) -> None:
        if name in trail:
            raise CyclicFallback(" -> ".join(trail + [name]))
        for fb in self._tools[name].fallbacks:
            self._walk_cycle(fb, trail + [name])

    @staticmethod
    def _check_compatible(primary: ToolDescriptor, fallback: ToolDescriptor) -> None:
        # any schema-valid call to the primary must be valid for the fallback
        for name, spec in fallback.schema.args.items():
            if spec.required and name not in primary.schema.args:
                raise IncompatibleFallback(
                    f"{fallback.name} requires arg {name!r} that {primary.name} never sends"
                )
        for name, spec in primary.schema.args.items():
            other = fallback.schema.args.get(name)
            if other is None:
                raise IncompatibleFallback(
                    f"{fallback.name} does not accept arg {name!r} of {primary.name}"
                )
            if other.type != spec.type:
                raise IncompatibleFallback(
                    f"arg {name!r}: {primary.name} sends {spec.type}, {fallback.name} wants {other.type}"
                )


def _err(tool: str, code: str, message: str, latency_ms: int = 0) -> ToolResult:
    return ToolResult(tool=tool, ok=False, latency_ms=latency_ms,
                      error={"code": code, "message": message})


class Dispatcher:
    """Executes tool calls: capacity slots, deadlines, health, fallback."""

    def __init__(
        self,
        registry: ToolRegistry,
        pool: WorkerPool,
        store_root: str,
        clock: Any = None,
        failure_threshold: int = DEFAULT_FAILURE_THRESHOLD,
        cooldown_ms: int = DEFAULT_COOLDOWN_MS,
        stub_env: dict[str, str] | None = None,
    ):
        self.registry = registry
        self.pool = pool
        self.store_root = store_root
        self.clock = clock or SystemClock()
        self.failure_threshold = failure_threshold
        self.cooldown_ms = cooldown_ms
        self.stub_env = stub_env
        self._transports: dict[str, FrameClient] = {}
        self._health: dict[str, _Health] = {}
        self._lock = threading.Lock()

    # -- wiring ---------------------------------------------------------------

    def _transport(self, desc: ToolDescriptor) -> FrameClient:
        with self._lock:
            client = self._transports.get(desc.name)
            if client is not None:
                return client
            client = self._build_transport(desc)
            self._transports[desc.name] = client
            return client

    def _build_transport(self, desc: ToolDescriptor) -> FrameClient:
        kind, _, rest = desc.endpoint.partition(":")
        if kind == "stub":
            command = [
                sys.executable, "-m", "cfagent.stub_server",
                "--tool", rest, "--store", str(self.store_root),
            ]
            return SubprocessTransport(desc.name, command, env=self.stub_env)
        if kind == "tcp":
            host, _, port = rest.rpartition(":")
            return TcpTransport(desc.name, host, int(port))
        raise ToolwireError(f"{desc.name}: cannot dispatch endpoint {desc.endpoint!r}")

    def _state(self, name: str) -> _Health:
        with self._lock:
            return self._health.setdefault(name, _Health())

    # -- health ----------------------------------------------------------------

    def health(self, name: str) -> dict[str, Any]:
        self.registry.get(name)  # UnknownTool for strangers
        return self._state(name).to_dict()

    def _gate_unhealthy(self, name: str) -> str:
        """'ok' to call normally, 'probe' when this call is the one allowed
        probe of an unhealthy tool, 'reject' inside the cooldown window."""
        state = self._state(name)
        now = self.clock.now_ms()
        with self._lock:
            if state.healthy:
                return "ok"
            if state.last_probe_ms is not None and now - state.last_probe_ms < self.cooldown_ms:
                return "reject"
            state.last_probe_ms = now  # this call is the probe
            return "probe"

    def _record(self, name: str, transport_fault: bool) -> None:
        state = self._state(name)
        now = self.clock.now_ms()
        with self._lock:
            if transport_fault:
                state.consecutive_failures += 1
                if state.consecutive_failures >= self.failure_threshold and state.healthy:
                    state.healthy = False
                    state.since_ms = now
                    state.last_probe_ms = now
            else:
                state.healthy = True
                state.consecutive_failures = 0
                state.since_ms = None
                state.last_probe_ms = None

    # -- dispatch ---------------------------------------------------------------

    def invoke(self, tool: str, args: dict[str, Any], timeout_ms: int | None = None) -> ToolResult:
        """One request/response cycle against a single tool.

        Transport faults come back as error results with codes "timeout",
        "crashed", "malformed", or "unhealthy"; tool-domain errors pass
        through with the server's code. Never raises for runtime failures.
        """
        desc = self.registry.get(tool)
        deadline = timeout_ms or desc.timeout_ms
        gate = self._gate_unhealthy(tool)
        if gate == "reject":
            return _err(tool, "unhealthy", f"{tool} is unhealthy; cooling down")
        transport = self._transport(desc)
        if gate == "probe":
            transport.reset()  # the probe may respawn/reconnect a dead peer
        start = self.clock.now_ms()
        fault: str | None = None
        try:
            with self.pool.slot(desc.capacity_class):
                response = transport.request(tool, args, deadline)
        except FrameTimeout as exc:
            fault, result = "timeout", _err(tool, "timeout", str(exc))
        except TransportClosed as exc:
            fault, result = "crashed", _err(tool, "crashed", str(exc))
        else:
            latency = self.clock.now_ms() - start
            result = self._from_response(tool, response, latency)
            if not result.ok and result.error and result.error.get("code") == "malformed":
                fault = "malformed"
        if fault in ("timeout", "crashed", "malformed"):
            latency = self.clock.now_ms() - start
            result = ToolResult(tool=tool, ok=False, latency_ms=latency, error=result.error)
            self._record(tool, transport_fault=True)
        else:
            self._record(tool, transport_fault=False)
        return result

    @staticmethod
    def _from_response(tool: str, response: dict[str, Any], latency_ms: int) -> ToolResult:
        ok = response.get("ok")
        if ok is True and isinstance(response.get("result"), dict):
            return ToolResult(tool=tool, ok=True, payload=response["result"], latency_ms=latency_ms)
        if ok is False and isinstance(response.get("error"), dict):
            err = response["error"]
            return _err(tool, str(err.get("code", "error")), str(err.get("message", "")), latency_ms)
        return _err(tool, "malformed", f"bad response frame: {response!r}", latency_ms)

    def invoke_with_fallback(self, tool: str, args: dict[str, Any]) -> tuple[ToolResult, str | None]:
        """Walk the fallback chain on timeout/crashed/unhealthy.

        One same-tool retry is allowed when a hop times out. Returns the first
        conclusive result plus the name of the tool that served it; when the
        whole chain fails, an aggregated "all_fallbacks_failed" error with
        served_by None.
        """
        desc = self.registry.get(tool)
        causes: list[str] = []
        for hop in (tool, *desc.fallbacks):
            result = self.invoke(hop, args)
            if result.ok or result.error["code"] not in TRANSPORT_FAULTS:
                return result, hop
            causes.append(f"{hop}: {result.error['code']}")
            if result.error["code"] == "timeout":
                retry = self.invoke(hop, args)
                if retry.ok or retry.error["code"] not in TRANSPORT_FAULTS:
                    return retry, hop
                causes.append(f"{hop} (retry): {retry.error['code']}")
        return _err(tool, "all_fallbacks_failed", "; ".join(causes)), None

    # -- maintenance -------------------------------------------------------------

    def probe_server(self, tool: str, method: str = "__health__", timeout_ms: int = 5000) -> dict[str, Any]:
        """Raw builtin request (``__health__``/``__stats__``) bypassing health gates."""
        desc = self.registry.get(tool)
        transport = self._transport(desc)
        return transport.request(method, {}, timeout_ms)

    def close(self) -> None:
        with self._lock:
            transports = list(self._transports.values())
            self._transports.clear()
        for t in transports:
            t.close()
