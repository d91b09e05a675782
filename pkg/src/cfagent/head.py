"""Head abstraction: given the current state and memory, produce a thought
plus the next action.

Two implementations ship: a deterministic scripted head (ordered steps with
state predicates; each step fires at most once, then a final-answer fallback)
and a remote head that POSTs the rendered context to an HTTP endpoint and
parses its reply, re-prompting a bounded number of times on syntax errors.
"""

from __future__ import annotations

import json
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .actions import (
    Action,
    ActionSyntaxError,
    Final,
    parse_action,
    render_action,
)
from .core import AgentState, MemoryEntry, Query, is_artifact_ref

K_VERBATIM = 8
RESULT_LINE_LIMIT = 400
REMOTE_RETRIES = 2

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")
_KNOWN_PLACEHOLDERS = ("seed", "image", "last_image", "best_image", "difference_map")


class HeadError(Exception):
    pass


class ScenarioError(HeadError):
    pass


class ScenarioExhausted(HeadError):
    pass


class RemoteUnavailable(HeadError):
    pass


class UnparseableAfterRetries(HeadError):
    pass


@dataclass(frozen=True)
class HeadDecision:
    thought: str
    action: Action


# ---------------------------------------------------------------------------
# Context rendering


def transcribe_context(query: Query, memory: list[MemoryEntry], budget: int,
                       k: int = K_VERBATIM) -> str:
    """Deterministic prompt rendering: query and image, then the last ``k``
    memory entries verbatim and anything older as one summary line each."""
    lines = [
        f"query: {query.text}",
        f"image: @{query.image}" if query.image else "image: none",
        f"budget: {budget}",
        f"steps: {len(memory)}",
    ]
    cut = max(0, len(memory) - k)
    for entry in memory[:cut]:
        status = "ok" if entry.result.ok else "error"
        lines.append(f"step {entry.step}: tool({entry.result.tool}) -> {status}")
    for entry in memory[cut:]:
        lines.append(f"step {entry.step} thought: {entry.thought}")
        lines.append(f"step {entry.step} action: {render_action(entry.action)}")
        if entry.result.ok:
            body = json.dumps(entry.result.payload or {}, sort_keys=True, separators=(",", ":"))
        else:
            err = entry.result.error or {}
            body = f"error {err.get('code', '?')}: {err.get('message', '')}"
        if len(body) > RESULT_LINE_LIMIT:
            body = body[:RESULT_LINE_LIMIT] + "..."
        lines.append(f"step {entry.step} result: {body}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Scripted scenarios


@dataclass(frozen=True)
class ScriptedStep:
    match: dict[str, Any]
    thought: str
    action_text: str


@dataclass(frozen=True)
class ScriptedScenario:
    """A deterministic test double for the head.

    Steps fire in order, each at most once per session, when their predicate
    matches the current state; once no step applies, the fallback (always a
    final answer) fires. Action texts may use {seed}, {image}, {last_image},
    {best_image} and {difference_map} placeholders, resolved per decision.
    """

    name: str
    steps: tuple[ScriptedStep, ...]
    fallback: ScriptedStep

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "ScriptedScenario":
        def step(sd: dict[str, Any]) -> ScriptedStep:
            return ScriptedStep(
                match=dict(sd.get("match", {})),
                thought=sd.get("thought", ""),
                action_text=sd["action"],
            )

        try:
            scenario = ScriptedScenario(
                name=d["name"],
                steps=tuple(step(sd) for sd in d["steps"]),
                fallback=step(d["fallback"]),
            )
        except KeyError as exc:
            raise ScenarioError(f"scenario missing key {exc}") from None
        if not scenario.steps:
            raise ScenarioError(f"scenario {scenario.name!r} needs at least one step")
        scenario._validate_texts()
        return scenario

    def _validate_texts(self) -> None:
        dummy = {name: "0" for name in _KNOWN_PLACEHOLDERS}
        for where, step in (("fallback", self.fallback), *((f"step {i}", s) for i, s in enumerate(self.steps))):
            for key in _PLACEHOLDER.findall(step.action_text):
                if key not in _KNOWN_PLACEHOLDERS:
                    raise ScenarioError(f"{self.name}: unknown placeholder {{{key}}} in {where}")
            try:
                action = parse_action(_substitute(step.action_text, dummy))
            except ActionSyntaxError as exc:
                raise ScenarioError(f"{self.name}: bad action in {where}: {exc}") from None
            if where == "fallback" and not isinstance(action, Final):
                raise ScenarioError(f"{self.name}: fallback must be a final answer")

    @staticmethod
    def load(path: str | Path) -> "ScriptedScenario":
        return ScriptedScenario.from_dict(json.loads(Path(path).read_text()))


def _substitute(text: str, values: dict[str, str]) -> str:
    def repl(m: re.Match) -> str:
        key = m.group(1)
        if key not in values:
            raise ScenarioError(f"placeholder {{{key}}} has no value in this session state")
        return values[key]

    return _PLACEHOLDER.sub(repl, text)


def _scan_payload_refs(payload: dict[str, Any]) -> list[str]:
    refs = []
    for key in sorted(payload):
        value = payload[key]
        if is_artifact_ref(value):
            refs.append(value[1:])
    return refs


def _session_values(state: AgentState, memory: list[MemoryEntry], seed: int) -> dict[str, str]:
    values = {"seed": str(seed)}
    if state.query.image:
        values["image"] = state.query.image
    for entry in reversed(memory):
        if not entry.result.ok or not entry.result.payload:
            continue
        payload = entry.result.payload
        if "last_image" not in values:
            refs = _scan_payload_refs(payload)
            if refs:
                values["last_image"] = refs[0]
        if "best_image" not in values and isinstance(payload.get("best"), dict):
            best_ref = payload["best"].get("image")
            if is_artifact_ref(best_ref):
                values["best_image"] = best_ref[1:]
            dm_ref = payload.get("difference_map")
            if is_artifact_ref(dm_ref):
                values["difference_map"] = dm_ref[1:]
    return values


class ScriptedHead:
    """Per-session instance replaying one scenario; never shared."""

    def __init__(self, scenario: ScriptedScenario, seed: int = 0):
        self.scenario = scenario
        self.seed = seed
        self._fired: set[int] = set()

    def next_decision(self, state: AgentState, memory: list[MemoryEntry]) -> HeadDecision:
        step = self._pick(state)
        values = _session_values(state, memory, self.seed)
        text = _substitute(step.action_text, values)
        try:
            action = parse_action(text)
        except ActionSyntaxError as exc:
            raise ScenarioError(f"{self.scenario.name}: action failed to parse after substitution: {exc}") from exc
        return HeadDecision(thought=step.thought, action=action)

    def _pick(self, state: AgentState) -> ScriptedStep:
        for idx, step in enumerate(self.scenario.steps):
            if idx in self._fired:
                continue
            if self._matches(step.match, state):
                self._fired.add(idx)
                return step
        if self.scenario.fallback is None:  # unreachable post-validation
            raise ScenarioExhausted(self.scenario.name)
        return self.scenario.fallback

    @staticmethod
    def _matches(match: dict[str, Any], state: AgentState) -> bool:
        if "memory_len" in match and state.memory_len != int(match["memory_len"]):
            return False
        if "contains" in match and match["contains"] not in state.context:
            return False
        if "regex" in match and re.search(match["regex"], state.context) is None:
            return False
        return True


class ScenarioRepository:
    """Scenario files by name: built-ins from package data plus an optional
    user directory (user files shadow built-ins)."""

    def __init__(self, extra_dir: str | Path | None = None):
        self._by_name: dict[str, Path] = {}
        builtin = Path(__file__).parent / "scenarios"
        for path in sorted(builtin.glob("*.json")):
            self._by_name[path.stem] = path
        if extra_dir is not None:
            for path in sorted(Path(extra_dir).glob("*.json")):
                self._by_name[path.stem] = path

    def names(self) -> list[str]:
        return sorted(self._by_name)

    def get(self, name: str) -> ScriptedScenario:
        path = self._by_name.get(name)
        if path is None:
            raise ScenarioError(f"unknown scenario {name!r}; have {', '.join(self.names())}")
        return ScriptedScenario.load(path)


# ---------------------------------------------------------------------------
# Remote head


class RemoteHead:
    """Bridges to a real model: request {context, tools} -> reply
    {thought, action}. One in-flight request at a time per session."""

    def __init__(self, endpoint: str, tools: list[dict[str, Any]],
                 timeout_s: float = 30.0, retries: int = REMOTE_RETRIES):
        self.endpoint = endpoint
        self.tools = tools
        self.timeout_s = timeout_s
        self.retries = retries

    def next_decision(self, state: AgentState, memory: list[MemoryEntry]) -> HeadDecision:
        context = state.context
        last_error: ActionSyntaxError | None = None
        for _ in range(1 + self.retries):
            reply = self._post({"context": context, "tools": self.tools})
            thought = str(reply.get("thought", ""))
            try:
                return HeadDecision(thought=thought, action=parse_action(str(reply.get("action", ""))))
            except ActionSyntaxError as exc:
                last_error = exc
                context = (
                    f"{state.context}\n\nYour previous reply was not a valid action "
                    f"({exc}). Reply with exactly one action."
                )
        raise UnparseableAfterRetries(str(last_error))

    def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        body = json.dumps(payload).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise RemoteUnavailable(f"{self.endpoint}: {exc}") from exc
