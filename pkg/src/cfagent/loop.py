"""Session driver: alternate head decisions and tool executions, maintain
memory, enforce the step budget, and honor operator controls.

Loop semantics per step: observe -> head decides -> final answer returns,
otherwise validate the action, execute it through the tool wire (or run the
internal cf_workflow pseudo-tool), append the observation to memory, and
re-observe. A failing tool becomes an error observation, never a session
failure. After t_max steps without a final answer the session times out with
a summary of what ran.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import Any

from .actions import Action, Call, Final, args_to_wire, render_action, validate_against_schema
from .core import (
    AgentState,
    EventRecord,
    MemoryEntry,
    Query,
    SessionLog,
    SystemClock,
    ToolResult,
)
from .engine import CFEngine, EngineError, Region, SelectionPolicy, strength_grids
from .head import HeadDecision, HeadError, UnparseableAfterRetries, transcribe_context
from .prompting import GENERIC_EDIT_PROMPT, refine_prompt
from .stubs import EDITOR_TOOLS
from .toolwire import CF_WORKFLOW_TOOL, Dispatcher, ToolRegistry, UnknownTool

DEFAULT_T_MAX = 12


class LoopError(Exception):
    pass


class HeadFailed(LoopError):
    pass


class NotPaused(LoopError):
    pass


class SessionAborted(Exception):
    """Internal signal: operator aborted while the loop was parked."""


@dataclass(frozen=True)
class LoopConfig:
    t_max: int = DEFAULT_T_MAX
    approval_mode: str = "auto"  # auto | manual
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    seed: int = 0
    editors: tuple[str, ...] = EDITOR_TOOLS
    strengths: tuple[float, ...] = (0.4, 0.7, 1.0)
    k_verbatim: int = 8

    def __post_init__(self) -> None:
        if self.t_max < 1:
            raise LoopError("t_max must be >= 1")
        if self.approval_mode not in ("auto", "manual"):
            raise LoopError(f"bad approval_mode {self.approval_mode!r}")


@dataclass(frozen=True)
class SessionOutcome:
    kind: str  # "final_answer" | "timeout"
    steps_used: int
    memory: tuple[MemoryEntry, ...]
    text: str | None = None
    artifacts: tuple[str, ...] = ()
    summary: dict[str, Any] | None = None
    aborted: bool = False

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "steps_used": self.steps_used}
        if self.kind == "final_answer":
            out["text"] = self.text
            out["artifacts"] = ["@" + a for a in self.artifacts]
        else:
            out["summary"] = self.summary or {}
            out["aborted"] = self.aborted
        out["memory"] = [
            {
                "action": render_action(m.action),
                "result": m.result.to_dict(),
                "step": m.step,
                "thought": m.thought,
            }
            for m in self.memory
        ]
        return out


def observe(query: Query, memory: list[MemoryEntry], budget: int, k: int = 8) -> AgentState:
    """Deterministic state snapshot; budget is remaining editor invocations."""
    return AgentState(
        query=query,
        context=transcribe_context(query, memory, budget, k),
        memory_len=len(memory),
        budget=budget,
    )


class SessionControls:
    """Thread-safe operator controls: pause/resume gates the next head query,
    approve releases one gated execution, abort ends the session."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._paused = False
        self._approvals = 0
        self._aborted = False
        self.awaiting_approval = False

    def pause(self) -> None:
        with self._cond:
            self._paused = True
            self._cond.notify_all()

    def resume(self) -> None:
        with self._cond:
            if not self._paused:
                raise NotPaused("session is not paused")
            self._paused = False
            self._cond.notify_all()

    def approve(self) -> None:
        with self._cond:
            self._approvals += 1
            self._cond.notify_all()

    def abort(self) -> None:
        with self._cond:
            self._aborted = True
            self._cond.notify_all()

    @property
    def aborted(self) -> bool:
        with self._cond:
            return self._aborted

    def wait_resumed(self) -> None:
        with self._cond:
            while self._paused and not self._aborted:
                self._cond.wait()
            if self._aborted:
                raise SessionAborted()

    def wait_approval(self) -> None:
        with self._cond:
            self.awaiting_approval = True
            try:
                while self._approvals == 0 and not self._aborted:
                    self._cond.wait()
                if self._aborted:
                    raise SessionAborted()
                self._approvals -= 1
            finally:
                self.awaiting_approval = False


class SessionDriver:
    """Owns one session: the only writer to its event log."""

    def __init__(
        self,
        session_id: str,
        query: Query,
        cfg: LoopConfig,
        head: Any,
        dispatcher: Dispatcher,
        engine: CFEngine,
        log: SessionLog,
        registry: ToolRegistry,
        clock: Any = None,
        scenario_name: str | None = None,
    ):
        self.session_id = session_id
        self.query = replace(query, session=session_id)
        self.cfg = cfg
        self.head = head
        self.dispatcher = dispatcher
        self.engine = engine
        self.log = log
        self.registry = registry
        self.clock = clock or SystemClock()
        self.scenario_name = scenario_name
        self.controls = SessionControls()
        self.last_report: dict[str, Any] | None = None
        self._editor_calls = 0

    # -- operator surface ---------------------------------------------------

    def control(self, command: str) -> None:
        if command not in ("pause", "resume", "approve", "abort"):
            raise LoopError(f"unknown control command {command!r}")
        if command == "resume" and not self.controls._paused:  # raise before logging
            raise NotPaused("session is not paused")
        self.log.append("control", {"command": command})
        getattr(self.controls, command)()

    # -- main ----------------------------------------------------------------

    def run(self) -> SessionOutcome:
        self.log.append("session_created", {
            "approval_mode": self.cfg.approval_mode,
            "scenario": self.scenario_name,
            "session": self.session_id,
            "t_max": self.cfg.t_max,
        })
        self.log.append("query_received", {
            "image": "@" + self.query.image if self.query.image else None,
            "text": self.query.text,
        })
        memory: list[MemoryEntry] = []
        outcome: SessionOutcome
        try:
            outcome = self._loop(memory)
        except SessionAborted:
            outcome = self._timeout_outcome(memory, aborted=True)
        finally:
            self.log.close()
        return outcome

    def _loop(self, memory: list[MemoryEntry]) -> SessionOutcome:
        for step in range(self.cfg.t_max):
            self.controls.wait_resumed()
            state = observe(self.query, memory, self._budget_left(), self.cfg.k_verbatim)
            decision = self._decide(state, memory)
            self.log.append("thought", {"step": step, "text": decision.thought})

            if isinstance(decision.action, Final):
                artifacts = tuple(ref.id for ref in decision.action.artifacts)
                self.log.append("final_answer", {
                    "artifacts": ["@" + a for a in artifacts],
                    "steps_used": len(memory),
                    "text": decision.action.answer,
                })
                return SessionOutcome(
                    kind="final_answer", steps_used=len(memory), memory=tuple(memory),
                    text=decision.action.answer, artifacts=artifacts,
                )

            call = decision.action
            violations = self._validate(call)
            gated = self.cfg.approval_mode == "manual" and not violations
            self.log.append("tool_call", {
                "action": render_action(call),
                "awaiting_approval": gated,
                "step": step,
                "tool": call.tool,
            })
            if violations:
                result = ToolResult(
                    tool=call.tool, ok=False,
                    error={"code": "invalid_action", "message": "; ".join(violations)},
                )
                served_by = None
            else:
                if gated:
                    self.controls.wait_approval()
                result, served_by = self._execute(call, memory, step)

            self.log.append("tool_result", {"served_by": served_by, "step": step, **result.to_dict()})
            memory.append(MemoryEntry(step=step, thought=decision.thought, action=call, result=result))
        return self._timeout_outcome(memory, aborted=False)

    # -- pieces ----------------------------------------------------------------

    def _decide(self, state: AgentState, memory: list[MemoryEntry]) -> HeadDecision:
        try:
            return self.head.next_decision(state, memory)
        except UnparseableAfterRetries as exc:
            # bounded re-prompting already happened inside the head; surface
            # the failure as an observation so the next step can recover
            return HeadDecision(
                thought=f"head reply unparseable after retries: {exc}",
                action=Call(tool="head_error", args={}),
            )
        except HeadError as exc:
            raise HeadFailed(str(exc)) from exc

    def _validate(self, call: Call) -> list[str]:
        try:
            descriptor = self.registry.get(call.tool)
        except UnknownTool:
            return [f"unknown tool {call.tool}"]
        return validate_against_schema(call, descriptor.schema)

    def _budget_left(self) -> int:
        return max(0, self.cfg.policy.budget - self._editor_calls)

    def _execute(self, call: Call, memory: list[MemoryEntry], step: int) -> tuple[ToolResult, str | None]:
        if call.tool == CF_WORKFLOW_TOOL:
            return self._run_workflow(call, memory, step), None
        result, served_by = self.dispatcher.invoke_with_fallback(call.tool, args_to_wire(call.args))
        if call.tool in self.cfg.editors and result.ok:
            self._editor_calls += 1
        return result, served_by

    def _run_workflow(self, call: Call, memory: list[MemoryEntry], step: int) -> ToolResult:
        budget_left = self._budget_left()
        if budget_left < 1:
            return ToolResult(tool=call.tool, ok=False, error={
                "code": "budget_exhausted",
                "message": f"editor budget {self.cfg.policy.budget} already spent",
            })
        factual = call.args["image"].id
        region = self._resolve_region(call, memory)
        prompt = self._resolve_prompt(call, memory)
        policy = replace(self.cfg.policy, budget=min(self.cfg.policy.budget, budget_left))
        start = self.clock.now_ms()

        def emit(kind: str, body: dict[str, Any]) -> None:
            self.log.append(kind, {"step": step, **body})

        try:
            report = self.engine.run_cf_workflow(
                factual, prompt, region=region, policy=policy,
                editors=self.cfg.editors,
                grids=strength_grids(self.cfg.editors, self.cfg.strengths),
                emit=emit,
            )
        except EngineError as exc:
            return ToolResult(tool=call.tool, ok=False,
                              latency_ms=self.clock.now_ms() - start,
                              error={"code": exc.code, "message": str(exc)})
        self._editor_calls += len(report.all)
        self.last_report = report.to_dict()
        return ToolResult(tool=call.tool, ok=True,
                          latency_ms=self.clock.now_ms() - start,
                          payload=self.last_report)

    @staticmethod
    def _resolve_region(call: Call, memory: list[MemoryEntry]) -> Region | None:
        """Explicit region args win; else the latest report's region; else None
        (the engine falls back to its generic probe region)."""
        given = [call.args.get(k) for k in ("cx", "cy", "r")]
        if all(v is not None for v in given):
            return Region(cx=int(given[0]), cy=int(given[1]), r=int(given[2]))
        findings = _latest_findings(memory)
        if findings and isinstance(findings.get("region"), dict):
            return Region.from_dict(findings["region"])
        return None

    def _resolve_prompt(self, call: Call, memory: list[MemoryEntry]) -> str:
        prompt = call.args.get("prompt")
        if isinstance(prompt, str) and prompt:
            return prompt
        findings = _latest_findings(memory)
        if findings is not None:
            return refine_prompt(self.query.text, findings)
        return GENERIC_EDIT_PROMPT

    def _timeout_outcome(self, memory: list[MemoryEntry], aborted: bool) -> SessionOutcome:
        state = observe(self.query, memory, self._budget_left(), self.cfg.k_verbatim)
        tools: dict[str, dict[str, int]] = {}
        for entry in memory:
            row = tools.setdefault(entry.result.tool, {"calls": 0, "errors": 0, "ok": 0})
            row["calls"] += 1
            row["ok" if entry.result.ok else "errors"] += 1
        summary = {"last_context": state.context, "tools": tools}
        self.log.append("timeout", {
            "aborted": aborted, "steps_used": len(memory), "summary": summary,
        })
        return SessionOutcome(kind="timeout", steps_used=len(memory), memory=tuple(memory),
                              summary=summary, aborted=aborted)


def _latest_findings(memory: list[MemoryEntry]) -> dict[str, Any] | None:
    for entry in reversed(memory):
        if entry.result.ok and entry.result.tool == "report" and entry.result.payload:
            return entry.result.payload
    return None


# ---------------------------------------------------------------------------
# Replay


def replay_memory(events: list[EventRecord]) -> list[MemoryEntry]:
    """Reconstruct the MemoryEntry sequence from a session's event log."""
    from .actions import parse_action  # local import keeps module load light

    thoughts: dict[int, str] = {}
    actions: dict[int, Action] = {}
    entries: list[MemoryEntry] = []
    for ev in events:
        if ev.kind == "thought":
            thoughts[ev.body["step"]] = ev.body["text"]
        elif ev.kind == "tool_call":
            actions[ev.body["step"]] = parse_action(ev.body["action"])
        elif ev.kind == "tool_result":
            step = ev.body["step"]
            result = ToolResult.from_dict(ev.body)
            entries.append(MemoryEntry(
                step=step, thought=thoughts.get(step, ""),
                action=actions[step], result=result,
            ))
    return entries


def replay_outcome(events: list[EventRecord]) -> dict[str, Any]:
    """Outcome-shaped dict reconstructed from a log (for the replay CLI)."""
    memory = replay_memory(events)
    for ev in events:
        if ev.kind == "final_answer":
            return {
                "artifacts": ev.body["artifacts"],
                "kind": "final_answer",
                "memory_len": len(memory),
                "steps_used": ev.body["steps_used"],
                "text": ev.body["text"],
            }
        if ev.kind == "timeout":
            return {
                "aborted": ev.body["aborted"],
                "kind": "timeout",
                "memory_len": len(memory),
                "steps_used": ev.body["steps_used"],
            }
    return {"kind": "running", "memory_len": len(memory), "steps_used": len(memory)}
