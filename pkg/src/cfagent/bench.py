"""Bench harness: the single vs ensemble vs agent comparison protocol on a
seeded synthetic corpus.

Per instance, "single" runs only candidate 0 of the configuration grid,
"ensemble" generates the full budget of candidates and selects the best by an
external metric pass, and "agent" drives a full scripted session whose
cf_workflow pseudo-tool does the same generation plus internal self-
evaluation. All three receive the ground-truth lesion region (the agent via
the report tool) so the comparison isolates the candidate strategy.

Outputs: report.json (full report), report.csv / instances.csv (delimited),
report.txt (table layout), per-session JSONL logs under sessions/, and
matplotlib figures under figures/. Fixed seeds give byte-identical logs and
reports across runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .config import ServerConfig, default_config
from .core import FixedClock, read_log_file
from .engine import Region, enumerate_candidates, select_best, strength_grids
from .gateway import Runtime
from .stubs import SyntheticScene, random_scene

METHODS = ("single", "ensemble", "agent")
AGENT_SCENARIO = "ambiguous-query"
_SEED_MIX = 1_000_003


class BenchError(Exception):
    pass


@dataclass
class BenchReport:
    corpus_seed: int
    instances: int
    methods: tuple[str, ...]
    rows: list[dict[str, Any]]
    per_instance: dict[str, list[dict[str, Any]]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "corpus_seed": self.corpus_seed,
            "instances": self.instances,
            "methods": list(self.methods),
            "per_instance": self.per_instance,
            "rows": self.rows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def instance_seed(corpus_seed: int, index: int) -> int:
    return (corpus_seed * _SEED_MIX + index) & 0x7FFFFFFFFFFF


def _record(instance: int, scene_seed: int, factual: str, cand: Any) -> dict[str, Any]:
    return {
        "cpg": cand.metrics.cpg,
        "editor": cand.config.editor,
        "factual": "@" + factual,
        "flipped": cand.metrics.flipped,
        "image": "@" + cand.image,
        "index": cand.config.index,
        "instance": instance,
        "scene_seed": scene_seed,
        "score": cand.score,
        "sip": cand.metrics.sip,
        "ssim": cand.metrics.ssim,
    }


def aggregate_rows(methods: tuple[str, ...], n_cfs: dict[str, int],
                   per_instance: dict[str, list[dict[str, Any]]]) -> list[dict[str, Any]]:
    rows = []
    for method in methods:
        records = per_instance[method]
        if not records:
            raise BenchError(f"no records for method {method}")
        n = len(records)
        rows.append({
            "cfr": sum(1 for r in records if r["flipped"]) / n,
            "cpg": sum(r["cpg"] for r in records) / n,
            "method": method,
            "n_cfs": n_cfs[method],
            "sip": sum(r["sip"] for r in records) / n,
            "ssim": sum(r["ssim"] for r in records) / n,
        })
    return rows


def format_table(rows: list[dict[str, Any]]) -> str:
    """Bench table in the standard comparison layout:
    Method | #CFs | CPG | CFR | SSIM | SIP."""
    header = f"{'Method':<18}{'#CFs':>6}{'CPG':>8}{'CFR':>7}{'SSIM':>8}{'SIP':>8}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['method']:<18}{row['n_cfs']:>6}"
            f"{row['cpg']:>8.3f}{row['cfr']:>7.2f}{row['ssim']:>8.3f}{row['sip']:>8.3f}"
        )
    return "\n".join(lines)


def _gen_factual(runtime: Runtime, scene: SyntheticScene) -> str:
    les = scene.lesion
    assert les is not None
    result = runtime.dispatcher.invoke("gen_image", {
        "seed": scene.seed, "width": scene.width, "height": scene.height,
        "lesion_cx": les.cx, "lesion_cy": les.cy, "lesion_r": les.r, "lesion_a": les.a,
        "g0": scene.g0, "g1": scene.g1, "noise": scene.noise_amp,
    })
    if not result.ok:
        raise BenchError(f"gen_image failed: {result.error}")
    return result.payload["image"][1:]


def _agent_best(runtime: Runtime, instance: int, factual: str) -> Any:
    session_id = f"bench-{instance:04d}"
    _, outcome = runtime.run_session_blocking(
        text="Something looks off in this scan, please make it normal.",
        image=factual,
        scenario=AGENT_SCENARIO,
        seed=instance,
        t_max=6,
        session_id=session_id,
    )
    if outcome.kind != "final_answer":
        raise BenchError(f"agent session {session_id} did not finish: {outcome.kind}")
    for entry in outcome.memory:
        if entry.result.tool == "cf_workflow" and entry.result.ok:
            return entry.result.payload
    raise BenchError(f"agent session {session_id} ran no cf_workflow")


def run_bench(
    corpus_size: int,
    seed: int,
    methods: tuple[str, ...] = METHODS,
    out_dir: str | Path | None = None,
    cfg: ServerConfig | None = None,
) -> BenchReport:
    """Run the comparison; when out_dir is set, write the report bundle there."""
    for method in methods:
        if method not in METHODS:
            raise BenchError(f"unknown method {method!r}")
    out = Path(out_dir) if out_dir is not None else None
    if cfg is None:
        if out is None:
            raise BenchError("need an output directory or an explicit config")
        cfg = default_config(str(out / "data"))
    runtime = Runtime(cfg, clock=FixedClock(0))
    try:
        report = _run(runtime, corpus_size, seed, tuple(methods))
    finally:
        runtime.close()
    if out is not None:
        write_outputs(report, out)
    return report


def _run(runtime: Runtime, corpus_size: int, seed: int, methods: tuple[str, ...]) -> BenchReport:
    cfg = runtime.cfg
    grids = strength_grids(cfg.editors, cfg.strengths)
    per_instance: dict[str, list[dict[str, Any]]] = {m: [] for m in methods}
    n_cfs = {"single": 1, "ensemble": cfg.policy.budget, "agent": cfg.policy.budget}

    for i in range(corpus_size):
        scene_seed = instance_seed(seed, i)
        scene = random_scene(scene_seed)
        factual = _gen_factual(runtime, scene)
        les = scene.lesion
        region = Region(cx=les.cx, cy=les.cy, r=les.r)
        configs = enumerate_candidates(list(cfg.editors), grids, cfg.policy.budget)

        if "single" in methods:
            cand = runtime.engine.run_candidate(factual, configs[0], region, cfg.policy)
            per_instance["single"].append(_record(i, scene_seed, factual, cand))

        if "ensemble" in methods:
            candidates = [runtime.engine.run_candidate(factual, c, region, cfg.policy)
                          for c in configs]
            best = select_best(candidates, cfg.policy)
            per_instance["ensemble"].append(_record(i, scene_seed, factual, best))

        if "agent" in methods:
            payload = _agent_best(runtime, i, factual)
            best_d = payload["best"]
            rec = {
                "cpg": best_d["metrics"]["cpg"],
                "editor": best_d["config"]["editor"],
                "factual": "@" + factual,
                "flipped": best_d["metrics"]["flipped"],
                "image": best_d["image"],
                "index": best_d["config"]["index"],
                "instance": i,
                "scene_seed": scene_seed,
                "score": best_d["score"],
                "sip": best_d["metrics"]["sip"],
                "ssim": best_d["metrics"]["ssim"],
            }
            per_instance["agent"].append(rec)

    rows = aggregate_rows(methods, n_cfs, per_instance)
    return BenchReport(
        corpus_seed=seed, instances=corpus_size, methods=methods,
        rows=rows, per_instance=per_instance,
    )


# ---------------------------------------------------------------------------
# Output bundle


def write_outputs(report: BenchReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(format_table(report.rows) + "\n")
    with (out / "report.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["method", "n_cfs", "cpg", "cfr", "ssim", "sip"])
        writer.writeheader()
        for row in report.rows:
            writer.writerow({k: row[k] for k in writer.fieldnames})
    fieldnames = ["instance", "method", "scene_seed", "factual", "index", "editor",
                  "image", "cpg", "flipped", "ssim", "sip", "score"]
    with (out / "instances.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for method in report.methods:
            for rec in report.per_instance[method]:
                writer.writerow({**{k: rec[k] for k in fieldnames if k != "method"},
                                 "method": method})
    render_figures(report, out / "figures")


def render_figures(report: BenchReport, fig_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig_dir.mkdir(parents=True, exist_ok=True)
    methods = [row["method"] for row in report.rows]

    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    for ax, (metric, better) in zip(
        axes.flat, [("cpg", "higher"), ("cfr", "higher"), ("ssim", "higher"), ("sip", "lower")]
    ):
        values = [row[metric] for row in report.rows]
        ax.bar(methods, values, color="#4878a8")
        ax.set_title(f"{metric.upper()} ({better} is better)")
        ax.set_ylim(0, max(values) * 1.15 if max(values) > 0 else 1)
        for x, v in enumerate(values):
            ax.annotate(f"{v:.3f}", (x, v), ha="center", va="bottom", fontsize=8)
    fig.suptitle(f"Candidate strategies on {report.instances} seeded instances")
    fig.tight_layout()
    fig.savefig(fig_dir / "metrics_by_method.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 5))
    markers = {"single": "o", "ensemble": "s", "agent": "^"}
    for method in report.methods:
        records = report.per_instance.get(method, [])
        ax.scatter([r["sip"] for r in records], [r["cpg"] for r in records],
                   label=method, marker=markers.get(method, "o"), alpha=0.6, s=18)
    ax.set_xlabel("SIP (lower is better)")
    ax.set_ylabel("CPG (higher is better)")
    ax.legend()
    ax.set_title("Identity preservation vs prediction gain, per instance")
    fig.tight_layout()
    fig.savefig(fig_dir / "cpg_vs_sip.png", dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Replay


def replay_bench(bench_dir: str | Path) -> BenchReport:
    """Rebuild the BenchReport from what a bench run stored, without rerunning
    any tool: agent records come back from the session logs, aggregates are
    recomputed, and the result must match report.json exactly."""
    bench_dir = Path(bench_dir)
    stored = json.loads((bench_dir / "report.json").read_text())
    methods = tuple(stored["methods"])
    per_instance = {m: list(stored["per_instance"][m]) for m in methods}

    if "agent" in methods:
        rebuilt = []
        for i in range(stored["instances"]):
            log_path = bench_dir / "data" / "sessions" / f"bench-{i:04d}.jsonl"
            events = read_log_file(log_path)
            payload = None
            factual = None
            for ev in events:
                if ev.kind == "query_received":
                    factual = ev.body["image"]
                if ev.kind == "tool_result" and ev.body.get("tool") == "cf_workflow" and ev.body["ok"]:
                    payload = ev.body["payload"]
            if payload is None or factual is None:
                raise BenchError(f"log {log_path} has no cf_workflow result")
            best_d = payload["best"]
            rebuilt.append({
                "cpg": best_d["metrics"]["cpg"],
                "editor": best_d["config"]["editor"],
                "factual": factual,
                "flipped": best_d["metrics"]["flipped"],
                "image": best_d["image"],
                "index": best_d["config"]["index"],
                "instance": i,
                "scene_seed": instance_seed(stored["corpus_seed"], i),
                "score": best_d["score"],
                "sip": best_d["metrics"]["sip"],
                "ssim": best_d["metrics"]["ssim"],
            })
        per_instance["agent"] = rebuilt

    n_cfs = {row["method"]: row["n_cfs"] for row in stored["rows"]}
    rows = aggregate_rows(methods, n_cfs, per_instance)
    return BenchReport(
        corpus_seed=stored["corpus_seed"], instances=stored["instances"],
        methods=methods, rows=rows, per_instance=per_instance,
    )
