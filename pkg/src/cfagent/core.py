"""Shared domain types, the content-addressed artifact store, and the
append-only session event log.

Everything else in the runtime moves through this module: tool servers
exchange artifact ids, the session driver appends event records, and the
replay/bench paths re-read the JSONL logs verbatim.

Artifact wire format (AIMG1, bit-exact):
    magic  b"AIMG1"                 5 bytes
    width  u32 little-endian        4 bytes
    height u32 little-endian        4 bytes
    channels u8                     1 byte
    dtype  u8 (0 = float32)         1 byte
    pixels width*height*channels float32 LE, row-major

Event log: one UTF-8 JSON object per line, fields {seq, kind, body, at}.
"""

from __future__ import annotations

import json
import os
import re
import struct
import threading
import time
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path
from typing import Any, Iterator

import numpy as np

MAGIC = b"AIMG1"
DTYPE_FLOAT32 = 0
_HEADER = struct.Struct("<IIBB")
HEADER_SIZE = len(MAGIC) + _HEADER.size

EVENT_KINDS = frozenset(
    {
        "session_created",
        "query_received",
        "thought",
        "tool_call",
        "tool_result",
        "candidate_scored",
        "final_answer",
        "timeout",
        "control",
    }
)

_HEX_ID = re.compile(r"^[0-9a-f]{6,64}$")


class CoreError(Exception):
    """Base class for core-model failures."""


class InvalidPixel(CoreError):
    pass


class DimensionMismatch(CoreError):
    pass


class BadMagic(CoreError):
    pass


class TruncatedPayload(CoreError):
    pass


class UnknownArtifact(CoreError):
    pass


class UnknownSession(CoreError):
    pass


class StorageFailure(CoreError):
    pass


# ---------------------------------------------------------------------------
# Clocks


class SystemClock:
    """Wall clock in integer milliseconds."""

    def now_ms(self) -> int:
        return int(time.time() * 1000)


class FixedClock:
    """Constant clock; makes logs byte-identical across runs (bench, replay)."""

    def __init__(self, value_ms: int = 0):
        self.value_ms = value_ms

    def now_ms(self) -> int:
        return self.value_ms


# ---------------------------------------------------------------------------
# Image artifacts


def _validate_pixels(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise InvalidPixel("non-finite pixel value")
    lo = float(arr.min(initial=0.0))
    hi = float(arr.max(initial=0.0))
    if lo < 0.0 or hi > 1.0:
        raise InvalidPixel(f"pixel out of [0,1]: min={lo} max={hi}")


@dataclass(frozen=True, eq=False)
class ImageArtifact:
    """Single-channel float image in [0,1], addressed by a content hash.

    The id is a pure function of (width, height, channels, pixels); provenance
    and meta are sidecar information and never enter the hash. Equality is
    content equality.
    """

    id: str
    width: int
    height: int
    channels: int
    pixels: np.ndarray  # float32, shape (height, width), C-order, read-only
    provenance: str = ""
    meta: dict[str, str] = field(default_factory=dict)

    @staticmethod
    def create(
        pixels: np.ndarray,
        provenance: str = "",
        meta: dict[str, str] | None = None,
    ) -> "ImageArtifact":
        arr = np.ascontiguousarray(np.asarray(pixels, dtype=np.float32))
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionMismatch(f"expected 2-D image, got shape {arr.shape}")
        _validate_pixels(arr)
        arr.setflags(write=False)
        h, w = arr.shape
        art = ImageArtifact(
            id="",
            width=w,
            height=h,
            channels=1,
            pixels=arr,
            provenance=provenance,
            meta=dict(meta or {}),
        )
        object.__setattr__(art, "id", sha256(encode_artifact(art)).hexdigest())
        return art

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ImageArtifact) and self.id == other.id

    def __hash__(self) -> int:
        return hash(self.id)


def encode_artifact(image: ImageArtifact) -> bytes:
    """Canonical byte encoding; the content id is the sha256 of this stream."""
    arr = np.ascontiguousarray(image.pixels, dtype="<f4")
    if arr.size != image.width * image.height * image.channels:
        raise DimensionMismatch("pixel count does not match dimensions")
    header = MAGIC + _HEADER.pack(image.width, image.height, image.channels, DTYPE_FLOAT32)
    return header + arr.tobytes(order="C")


def decode_artifact(data: bytes) -> ImageArtifact:
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagic("not an AIMG1 stream")
    if len(data) < HEADER_SIZE:
        raise TruncatedPayload(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    width, height, channels, dtype = _HEADER.unpack_from(data, len(MAGIC))
    if dtype != DTYPE_FLOAT32:
        raise BadMagic(f"unsupported dtype tag {dtype}")
    if channels != 1:
        raise DimensionMismatch(f"v1 supports exactly 1 channel, got {channels}")
    if width < 1 or height < 1:
        raise DimensionMismatch(f"bad dimensions {width}x{height}")
    expected = width * height * channels * 4
    payload = data[HEADER_SIZE:]
    if len(payload) != expected:
        raise TruncatedPayload(f"payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return ImageArtifact.create(arr)


class ArtifactStore:
    """Content-addressed image store under ``root``.

    Objects live at ``root/<id[:2]>/<id>`` with a JSON sidecar carrying
    provenance and meta. Writes are atomic (temp file + rename), so the store
    is safe for concurrent writers across threads and processes; identical
    content always lands on the same path and the first writer's sidecar wins.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._cache: dict[str, ImageArtifact] = {}

    def _path(self, artifact_id: str) -> Path:
        return self.root / artifact_id[:2] / artifact_id

    def put(self, image: ImageArtifact) -> str:
        data = encode_artifact(image)
        artifact_id = sha256(data).hexdigest()
        if artifact_id != image.id:
            # create() computed the id; reject hand-rolled inconsistent values
            raise StorageFailure("artifact id does not match content")
        path = self._path(artifact_id)
        try:
            if not path.exists():
                path.parent.mkdir(parents=True, exist_ok=True)
                self._write_atomic(path, data)
            side = path.with_suffix(".meta.json")
            if not side.exists() and (image.provenance or image.meta):
                blob = json.dumps(
                    {"meta": image.meta, "provenance": image.provenance},
                    sort_keys=True,
                    separators=(",", ":"),
                ).encode()
                self._write_atomic(side, blob)
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc
        with self._lock:
            self._cache.setdefault(artifact_id, image)
        return artifact_id

    def get(self, artifact_id: str) -> ImageArtifact:
        artifact_id = artifact_id.lstrip("@")
        with self._lock:
            cached = self._cache.get(artifact_id)
        if cached is not None:
            return cached
        path = self._path(artifact_id)
        if not path.exists():
            raise UnknownArtifact(artifact_id)
        art = decode_artifact(path.read_bytes())
        side = path.with_suffix(".meta.json")
        if side.exists():
            extra = json.loads(side.read_text())
            art = ImageArtifact(
                id=art.id,
                width=art.width,
                height=art.height,
                channels=art.channels,
                pixels=art.pixels,
                provenance=extra.get("provenance", ""),
                meta=dict(extra.get("meta", {})),
            )
        if art.id != artifact_id:
            raise StorageFailure(f"store corruption: {artifact_id} hashes to {art.id}")
        with self._lock:
            self._cache.setdefault(artifact_id, art)
        return art

    def exists(self, artifact_id: str) -> bool:
        artifact_id = artifact_id.lstrip("@")
        with self._lock:
            if artifact_id in self._cache:
                return True
        return self._path(artifact_id).exists()

    def read_bytes(self, artifact_id: str) -> bytes:
        path = self._path(artifact_id.lstrip("@"))
        if not path.exists():
            raise UnknownArtifact(artifact_id)
        return path.read_bytes()

    @staticmethod
    def _write_atomic(path: Path, data: bytes) -> None:
        tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)


def is_artifact_ref(value: Any) -> bool:
    return isinstance(value, str) and value.startswith("@") and bool(_HEX_ID.match(value[1:]))


# ---------------------------------------------------------------------------
# Session-facing value types


@dataclass(frozen=True)
class Query:
    """One user request: free text plus an optional input artifact."""

    text: str
    image: str | None = None  # bare hex artifact id
    session: str = ""

    def __post_init__(self) -> None:
        if not self.text:
            raise CoreError("query text must be non-empty")


@dataclass(frozen=True)
class ToolResult:
    """Outcome of one tool execution; ok is true iff error is absent."""

    tool: str
    ok: bool
    payload: dict[str, Any] | None = None
    latency_ms: int = 0
    error: dict[str, str] | None = None

    def __post_init__(self) -> None:
        if self.ok != (self.error is None):
            raise CoreError("ToolResult: ok must be true iff error is absent")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"latency_ms": self.latency_ms, "ok": self.ok, "tool": self.tool}
        if self.ok:
            out["payload"] = self.payload or {}
        else:
            out["error"] = self.error
        return out

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "ToolResult":
        return ToolResult(
            tool=d["tool"],
            ok=bool(d["ok"]),
            payload=d.get("payload"),
            latency_ms=int(d.get("latency_ms", 0)),
            error=d.get("error"),
        )


@dataclass(frozen=True)
class MemoryEntry:
    """One (thought, action, result) record of the loop's history."""

    step: int
    thought: str
    action: Any  # actions.Action; kept loose to avoid an import cycle
    result: ToolResult


@dataclass(frozen=True)
class AgentState:
    """Snapshot the head reasons over: rendered context plus loop counters."""

    query: Query
    context: str
    memory_len: int
    budget: int


@dataclass(frozen=True)
class EventRecord:
    seq: int
    kind: str
    body: Any
    at: int

    def to_line(self) -> str:
        return json.dumps(
            {"at": self.at, "body": self.body, "kind": self.kind, "seq": self.seq},
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        )

    @staticmethod
    def from_line(line: str) -> "EventRecord":
        d = json.loads(line)
        return EventRecord(seq=int(d["seq"]), kind=d["kind"], body=d["body"], at=int(d["at"]))


# ---------------------------------------------------------------------------
# Event log


class SessionLog:
    """Append-only JSONL log for one session.

    A single writer (the session driver) appends; any number of readers may
    replay or tail. ``append`` is still locked so stray concurrent writers
    cannot corrupt the sequence. Events are flushed line-by-line, so a killed
    process never leaves a truncated line behind the last flush.
    """

    def __init__(self, path: str | Path, clock: Any = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._clock = clock or SystemClock()
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._closed = False
        self._seq = 0
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as f:
                self._seq = sum(1 for _ in f)
        self._fh = self.path.open("a", encoding="utf-8")

    def append(self, kind: str, body: Any) -> int:
        if kind not in EVENT_KINDS:
            raise StorageFailure(f"unknown event kind {kind!r}")
        with self._cond:
            if self._closed:
                raise StorageFailure("session log is closed")
            rec = EventRecord(seq=self._seq, kind=kind, body=body, at=self._clock.now_ms())
            try:
                self._fh.write(rec.to_line() + "\n")
                self._fh.flush()
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
            self._seq += 1
            self._cond.notify_all()
            return rec.seq

    @property
    def next_seq(self) -> int:
        with self._lock:
            return self._seq

    @property
    def closed(self) -> bool:
        with self._lock:
            return self._closed

    def close(self) -> None:
        with self._cond:
            if not self._closed:
                self._closed = True
                self._fh.close()
                self._cond.notify_all()

    def read_lines(self, from_seq: int = 0) -> list[str]:
        """Raw stored lines (no trailing newline) from ``from_seq`` onward."""
        if not self.path.exists():
            return []
        with self.path.open("r", encoding="utf-8") as f:
            return [line.rstrip("\n") for i, line in enumerate(f) if i >= from_seq]

    def read_events(self, from_seq: int = 0) -> list[EventRecord]:
        return [EventRecord.from_line(line) for line in self.read_lines(from_seq)]

    def follow(self, from_seq: int = 0, poll_s: float = 0.05) -> Iterator[str]:
        """Yield stored lines from ``from_seq``, blocking for new ones until
        the log is closed. Lines are emitted exactly as stored."""
        cursor = from_seq
        while True:
            batch = self.read_lines(cursor)
            for line in batch:
                yield line
            cursor += len(batch)
            with self._cond:
                if self._seq > cursor:
                    continue
                if self._closed:
                    return
                self._cond.wait(timeout=poll_s)


def read_log_file(path: str | Path) -> list[EventRecord]:
    """Parse a session JSONL file into event records (replay helper)."""
    records = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(EventRecord.from_line(line))
    return records


class EventLog:
    """Per-session log registry rooted at ``root`` (one JSONL file each)."""

    def __init__(self, root: str | Path, clock: Any = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._clock = clock or SystemClock()
        self._lock = threading.Lock()
        self._sessions: dict[str, SessionLog] = {}

    def create(self, session_id: str) -> SessionLog:
        with self._lock:
            if session_id in self._sessions:
                raise StorageFailure(f"session {session_id} already exists")
            log = SessionLog(self.root / f"{session_id}.jsonl", clock=self._clock)
            self._sessions[session_id] = log
            return log

    def get(self, session_id: str) -> SessionLog:
        with self._lock:
            log = self._sessions.get(session_id)
        if log is None:
            raise UnknownSession(session_id)
        return log

    def ids(self) -> list[str]:
        with self._lock:
            return sorted(self._sessions)
