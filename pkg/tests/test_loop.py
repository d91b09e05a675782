import threading
import time

import pytest

from cfagent.core import Query, read_log_file
from cfagent.head import ScriptedHead
from cfagent.loop import (
    LoopConfig,
    NotPaused,
    observe,
    replay_memory,
    replay_outcome,
)
from cfagent.prompting import GENERIC_EDIT_PROMPT, refine_prompt
from cfagent.stubs import random_scene


def _run(runtime, scenario: str, text="analyze", image=None, seed=3, t_max=12,
         approval_mode="auto", session_id=None):
    return runtime.run_session_blocking(
        text=text, image=image, scenario=scenario, seed=seed, t_max=t_max,
        approval_mode=approval_mode, session_id=session_id,
    )


def _gen_fixture(runtime, seed=11, cx=14, cy=12, r=8, a=0.6):
    result = runtime.dispatcher.invoke("gen_image", {
        "seed": seed, "width": 64, "height": 64,
        "lesion_cx": cx, "lesion_cy": cy, "lesion_r": r, "lesion_a": a,
    })
    assert result.ok
    return result.payload["image"][1:]


class TestRefinePrompt:
    def test_template_fill(self):
        findings = {"findings": "lesion in upper-left quadrant",
                    "region": {"cx": 1, "cy": 2, "r": 3}}
        assert refine_prompt("make it normal", findings) == "remove lesion in upper-left region"

    def test_no_finding_falls_back_to_generic(self):
        assert refine_prompt("q", {"findings": "no finding"}) == GENERIC_EDIT_PROMPT
        assert refine_prompt("q", None) == GENERIC_EDIT_PROMPT
        assert GENERIC_EDIT_PROMPT == "Normal chest X-ray with no finding"


class TestObserve:
    def test_initialization(self):
        state = observe(Query(text="q"), [], budget=5)
        assert state.memory_len == 0
        assert state.budget == 5


class TestRunSession:
    def test_immediate_final(self, runtime):
        _, outcome = _run(runtime, "immediate-final")
        assert outcome.kind == "final_answer"
        assert outcome.steps_used == 0
        assert outcome.memory == ()

    def test_three_calls_then_final(self, runtime):
        _, outcome = _run(runtime, "three-call")
        assert outcome.kind == "final_answer"
        assert outcome.steps_used == 3
        assert [m.result.tool for m in outcome.memory] == ["gen_image", "classify", "segment"]
        assert [m.step for m in outcome.memory] == [0, 1, 2]
        assert all(m.result.ok for m in outcome.memory)

    def test_timeout_at_exactly_t_max(self, runtime):
        session_id, outcome = _run(runtime, "never-final", t_max=4)
        assert outcome.kind == "timeout"
        assert outcome.steps_used == 4
        assert len(outcome.memory) == 4
        summary_tools = outcome.summary["tools"]
        assert sum(row["calls"] for row in summary_tools.values()) == 4
        events = runtime.events.get(session_id).read_events()
        assert events[-1].kind == "timeout"

    def test_failing_tool_is_observation_not_abort(self, runtime):
        _, outcome = _run(runtime, "failing-tool")
        assert outcome.kind == "final_answer"
        assert [m.result.ok for m in outcome.memory] == [False, True, True]
        assert outcome.memory[0].result.error["code"] == "unknown_artifact"

    def test_unknown_tool_becomes_invalid_action_observation(self, runtime, tmp_path):
        import json

        scenario_dir = tmp_path / "scen"
        scenario_dir.mkdir()
        (scenario_dir / "bad-tool.json").write_text(json.dumps({
            "name": "bad-tool",
            "steps": [{"match": {}, "thought": "t", "action": "warp(image=@ab)"}],
            "fallback": {"thought": "f", "action": 'final_answer(text="done")'},
        }))
        runtime.scenarios = type(runtime.scenarios)(scenario_dir)
        _, outcome = _run(runtime, "bad-tool")
        assert outcome.kind == "final_answer"
        assert outcome.memory[0].result.error["code"] == "invalid_action"
        assert "unknown tool warp" in outcome.memory[0].result.error["message"]

    def test_event_log_structure(self, runtime):
        session_id, outcome = _run(runtime, "three-call")
        events = runtime.events.get(session_id).read_events()
        assert [e.seq for e in events] == list(range(len(events)))
        assert events[0].kind == "session_created"
        assert events[1].kind == "query_received"
        kinds = [e.kind for e in events[2:]]
        assert kinds == ["thought", "tool_call", "tool_result"] * 3 + ["thought", "final_answer"]

    def test_memory_replay_equivalence(self, runtime):
        session_id, outcome = _run(runtime, "three-call")
        events = runtime.events.get(session_id).read_events()
        replayed = replay_memory(events)
        assert len(replayed) == len(outcome.memory)
        for mine, live in zip(replayed, outcome.memory):
            assert mine.step == live.step
            assert mine.thought == live.thought
            assert mine.action == live.action
            assert mine.result == live.result
        # state recomputed from replayed memory equals the live observation
        budget = runtime.cfg.policy.budget
        assert observe(Query(text="analyze"), list(replayed), budget) == \
               observe(Query(text="analyze"), list(outcome.memory), budget)

    def test_log_file_replay_outcome(self, runtime):
        session_id, outcome = _run(runtime, "three-call")
        path = runtime.events.get(session_id).path
        events = read_log_file(path)
        out = replay_outcome(events)
        assert out["kind"] == "final_answer"
        assert out["steps_used"] == 3


class TestBudget:
    def test_workflow_consumes_budget(self, runtime):
        image = _gen_fixture(runtime)
        _, outcome = _run(runtime, "ambiguous-query", text="make it normal", image=image)
        assert outcome.kind == "final_answer"
        workflow = [m for m in outcome.memory if m.result.tool == "cf_workflow"]
        assert len(workflow) == 1
        assert len(workflow[0].result.payload["candidates"]) == 5

    def test_second_workflow_rejected_when_exhausted(self, runtime, tmp_path):
        import json

        scenario_dir = tmp_path / "scen"
        scenario_dir.mkdir()
        (scenario_dir / "double-workflow.json").write_text(json.dumps({
            "name": "double-workflow",
            "steps": [
                {"match": {"memory_len": 0}, "thought": "one", "action": "cf_workflow(image=@{image})"},
                {"match": {"memory_len": 1}, "thought": "two", "action": "cf_workflow(image=@{image})"},
            ],
            "fallback": {"thought": "f", "action": 'final_answer(text="done")'},
        }))
        runtime.scenarios = type(runtime.scenarios)(scenario_dir)
        image = _gen_fixture(runtime)
        _, outcome = _run(runtime, "double-workflow", image=image)
        assert outcome.memory[0].result.ok
        assert not outcome.memory[1].result.ok
        assert outcome.memory[1].result.error["code"] == "budget_exhausted"


class TestAdaptivePrompting:
    def test_report_region_flows_downstream(self, runtime):
        image = _gen_fixture(runtime)
        session_id, outcome = _run(runtime, "ambiguous-query",
                                   text="something looks off, fix it", image=image)
        assert outcome.kind == "final_answer"
        report_entry = outcome.memory[0]
        workflow_entry = outcome.memory[1]
        assert report_entry.result.tool == "report"
        assert workflow_entry.result.tool == "cf_workflow"
        assert workflow_entry.result.payload["region"] == report_entry.result.payload["region"]
        assert workflow_entry.result.payload["prompt"] == "remove lesion in upper-left region"

    def test_report_precedes_editors_in_log(self, runtime):
        image = _gen_fixture(runtime)
        session_id, _ = _run(runtime, "ambiguous-query", text="fix it", image=image)
        events = runtime.events.get(session_id).read_events()
        order = []
        for ev in events:
            if ev.kind == "tool_call":
                order.append(ev.body["tool"])
            if ev.kind == "candidate_scored":
                order.append("editor")
        assert order.index("report") < order.index("editor")

    def test_generic_prompt_when_no_report(self, runtime):
        image = _gen_fixture(runtime)
        _, outcome = _run(runtime, "generic-edit", text="fix it", image=image)
        workflow = outcome.memory[0]
        assert workflow.result.payload["prompt"] == GENERIC_EDIT_PROMPT
        # default probe region, not the lesion
        assert workflow.result.payload["region"] == {"cx": 32, "cy": 32, "r": 16}


class TestControls:
    def test_manual_mode_parks_before_execute(self, runtime):
        image = _gen_fixture(runtime)
        session_id = runtime.create_session(
            text="fix", image=image, scenario="ambiguous-query", approval_mode="manual")
        record = runtime.session(session_id)
        deadline = time.time() + 5
        while time.time() < deadline:
            events = runtime.events.get(session_id).read_events()
            if any(e.kind == "tool_call" and e.body["awaiting_approval"] for e in events):
                break
            time.sleep(0.02)
        else:
            pytest.fail("no awaiting_approval tool_call appeared")
        # parked: no tool_result yet, thread alive
        events = runtime.events.get(session_id).read_events()
        assert not any(e.kind == "tool_result" for e in events)
        assert record.thread.is_alive()
        record.driver.control("abort")
        record.thread.join(timeout=5)
        assert record.outcome.aborted is True

    def test_approvals_make_manual_equal_auto(self, runtime):
        image = _gen_fixture(runtime)

        auto_id, auto = _run(runtime, "ambiguous-query", text="fix", image=image)

        manual_id = runtime.create_session(
            text="fix", image=image, scenario="ambiguous-query", approval_mode="manual")
        record = runtime.session(manual_id)
        for _ in range(3):
            record.driver.control("approve")
        record.thread.join(timeout=30)
        manual = record.outcome
        assert manual is not None and manual.kind == "final_answer"
        assert manual.text == auto.text
        assert [m.result.tool for m in manual.memory] == [m.result.tool for m in auto.memory]
        assert [m.result.payload for m in manual.memory] == [m.result.payload for m in auto.memory]

    def test_abort_blocks_further_tool_frames(self, runtime):
        image = _gen_fixture(runtime)
        session_id = runtime.create_session(
            text="fix", image=image, scenario="ambiguous-query", approval_mode="manual")
        record = runtime.session(session_id)
        time.sleep(0.3)  # reach the first approval gate
        calls_before = runtime.dispatcher.probe_server("report", "__stats__")["result"]["calls"]
        record.driver.control("abort")
        record.thread.join(timeout=5)
        calls_after = runtime.dispatcher.probe_server("report", "__stats__")["result"]["calls"]
        assert calls_after == calls_before  # nothing sent after the abort event
        assert record.outcome.kind == "timeout" and record.outcome.aborted

    def test_pause_resume(self, runtime):
        session_id = runtime.create_session(text="x", scenario="three-call",
                                            approval_mode="auto")
        record = runtime.session(session_id)
        record.driver.control("pause")
        record.driver.control("resume")
        with pytest.raises(NotPaused):
            record.driver.control("resume")
        record.thread.join(timeout=30)
        assert record.outcome is not None

    def test_resume_unpaused_raises(self, runtime):
        session_id = runtime.create_session(text="x", scenario="immediate-final")
        record = runtime.session(session_id)
        record.thread.join(timeout=10)
        with pytest.raises(NotPaused):
            record.driver.control("resume")
