"""Regenerate the console test fixtures.

Runs the happy-edit scenario twice (auto and manual approval) against a
deterministic runtime and copies the session logs here, then derives the
expected view model for the auto log straight from the raw events — an
independent Python mapping, deliberately not the TypeScript reducer, so the
reducer test has a genuine second route.

Usage: python3 frontend/scripts/make_fixtures.py
"""

from __future__ import annotations

import json
import shutil
import sys
import tempfile
import time
from pathlib import Path

from cfagent.config import default_config
from cfagent.core import FixedClock
from cfagent.gateway import Runtime

FIXTURES = Path(__file__).parent.parent / "fixtures"
SEED = 3


def run_sessions(data_dir: str) -> tuple[Path, Path]:
    runtime = Runtime(default_config(data_dir), clock=FixedClock(0))
    try:
        auto_id, outcome = runtime.run_session_blocking(
            text="Generate a study and remove the finding.",
            scenario="happy-edit", seed=SEED, session_id="fixture-auto")
        assert outcome.kind == "final_answer", outcome

        manual_id = runtime.create_session(
            text="Generate a study and remove the finding.",
            scenario="happy-edit", seed=SEED, approval_mode="manual",
            session_id="fixture-manual")
        record = runtime.session(manual_id)
        approved = 0
        deadline = time.time() + 60
        while approved < 4 and time.time() < deadline:
            events = runtime.events.get(manual_id).read_events()
            gated = sum(1 for e in events
                        if e.kind == "tool_call" and e.body["awaiting_approval"])
            if gated > approved:
                record.driver.control("approve")
                approved += 1
            else:
                time.sleep(0.02)
        record.thread.join(timeout=60)
        assert record.outcome is not None and record.outcome.kind == "final_answer"
        sessions = Path(data_dir) / "sessions"
        return sessions / f"{auto_id}.jsonl", sessions / f"{manual_id}.jsonl"
    finally:
        runtime.close()


def expected_view_model(log_path: Path) -> dict:
    """Map raw events to the view model the reducer must produce."""
    events = [json.loads(line) for line in log_path.read_text().splitlines()]
    thoughts: dict[int, str] = {}
    steps: list[dict] = []
    by_step: dict[int, dict] = {}
    trace: dict = {"steps": steps, "outcome": "running", "finalThought": None,
                   "finalText": None, "finalArtifacts": [], "aborted": False}
    gallery: dict = {"factual": None, "candidates": [], "differenceMap": None}
    best_image = None
    last_thought = None

    for ev in events:
        kind, body = ev["kind"], ev["body"]
        if kind == "query_received" and body.get("image"):
            gallery["factual"] = body["image"].lstrip("@")
        elif kind == "thought":
            thoughts[body["step"]] = body["text"]
            last_thought = body["text"]
        elif kind == "tool_call":
            step = {
                "step": body["step"],
                "thought": thoughts.get(body["step"], ""),
                "tool": body["tool"],
                "actionText": body["action"],
                "status": "awaiting_approval" if body["awaiting_approval"] else "pending",
                "resultSummary": "",
            }
            steps.append(step)
            by_step[body["step"]] = step
        elif kind == "control" and body.get("command") == "approve":
            for step in steps:
                if step["status"] == "awaiting_approval":
                    step["status"] = "pending"
                    break
        elif kind == "tool_result":
            step = by_step[body["step"]]
            if body["ok"]:
                step["status"] = "ok"
                step["resultSummary"] = "ok"
                payload = body.get("payload") or {}
                if body["tool"] == "cf_workflow":
                    best_image = payload["best"]["image"].lstrip("@")
                    gallery["differenceMap"] = payload["difference_map"].lstrip("@")
            else:
                step["status"] = "error"
                step["resultSummary"] = f"error {body['error']['code']}"
        elif kind == "candidate_scored":
            gallery["factual"] = body["factual"].lstrip("@")
            metrics = body["metrics"]
            gallery["candidates"].append({
                "index": body["index"],
                "editor": body["config"]["editor"],
                "image": body["image"].lstrip("@"),
                "cpg": metrics["cpg"], "flipped": metrics["flipped"],
                "ssim": metrics["ssim"], "sip": metrics["sip"],
                "score": body["score"], "selected": False,
            })
        elif kind == "final_answer":
            trace["outcome"] = "final"
            trace["finalText"] = body["text"]
            trace["finalThought"] = last_thought
            trace["finalArtifacts"] = [a.lstrip("@") for a in body["artifacts"]]
        elif kind == "timeout":
            trace["outcome"] = "timeout"
            trace["aborted"] = bool(body.get("aborted"))

    if best_image is not None:
        for cand in gallery["candidates"]:
            cand["selected"] = cand["image"] == best_image
    return {"trace": trace, "gallery": gallery}


def main() -> int:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(prefix="cfagent-fixtures-") as tmp:
        auto_log, manual_log = run_sessions(tmp + "/data")
        shutil.copy(auto_log, FIXTURES / "happy-edit.jsonl")
        shutil.copy(manual_log, FIXTURES / "happy-edit-manual.jsonl")
    expected = expected_view_model(FIXTURES / "happy-edit.jsonl")
    (FIXTURES / "expected-viewmodel.json").write_text(
        json.dumps(expected, indent=2, sort_keys=True) + "\n")
    print("fixtures written to", FIXTURES)
    return 0


if __name__ == "__main__":
    sys.exit(main())
