"""Command-line interface.

Subcommands:
    serve    run the HTTP gateway and stub tool servers
    run      drive one headless session and print its outcome as JSON
    metrics  score a factual/counterfactual AIMG1 pair
    bench    run the single/ensemble/agent comparison on a seeded corpus
    replay   re-render a session log, or verify a stored bench report

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import tempfile
from pathlib import Path
from typing import Any

from . import __version__
from .bench import format_table, replay_bench, run_bench
from .config import ConfigError, default_config, load_config, save_config
from .core import FixedClock, decode_artifact, read_log_file
from .loop import replay_memory, replay_outcome
from .metrics import bundle
from .stubs import classify_score


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfagent", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"cfagent {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the gateway service")
    p.add_argument("--config", help="JSON config file (defaults built in)")
    p.add_argument("--listen", help="host:port override")
    p.add_argument("--data-dir", help="data directory override")
    p.add_argument("--print-config", action="store_true",
                   help="write the effective config to stdout and exit")

    p = sub.add_parser("run", help="run one headless session")
    p.add_argument("--scenario", required=True, help="scripted scenario name")
    p.add_argument("--query", default="Analyze this study.", help="query text")
    p.add_argument("--image", help="artifact id for the query image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-max", type=int, default=None)
    p.add_argument("--approval-mode", choices=("auto", "manual"), default="auto")
    p.add_argument("--data-dir", help="data directory (default: temporary)")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed clock: byte-identical logs across runs")

    p = sub.add_parser("metrics", help="score a factual/CF pair of AIMG1 files")
    p.add_argument("--factual", required=True)
    p.add_argument("--cf", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("bench", help="single vs ensemble vs agent comparison")
    p.add_argument("--n", type=int, default=100, help="corpus size")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--methods", default="single,ensemble,agent")

    p = sub.add_parser("replay", help="re-render a session log or bench report")
    p.add_argument("--log", help="session JSONL file")
    p.add_argument("--bench-dir", help="bench output directory to verify")
    return parser


def _cmd_serve(args: argparse.Namespace) -> int:
    from .gateway import GatewayServer, Runtime

    cfg = load_config(args.config, data_dir=args.data_dir, listen=args.listen)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    runtime = Runtime(cfg)
    server = GatewayServer(runtime)

    def _term(signum: int, frame: Any) -> None:
        # shutdown() deadlocks if called on the thread running serve_forever
        import threading

        threading.Thread(target=server.httpd.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, _term)
    signal.signal(signal.SIGINT, _term)
    print(f"cfagent gateway on http://{server.address} (data: {cfg.data_dir})", file=sys.stderr)
    try:
        server.serve_forever()
    finally:
        runtime.close()
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    from .gateway import Runtime

    with tempfile.TemporaryDirectory(prefix="cfagent-run-") as tmp:
        cfg = load_config(args.config, data_dir=args.data_dir or tmp)
        clock = FixedClock(0) if args.deterministic else None
        runtime = Runtime(cfg, clock=clock)
        try:
            session_id, outcome = runtime.run_session_blocking(
                text=args.query,
                image=args.image,
                scenario=args.scenario,
                seed=args.seed,
                t_max=args.t_max,
                approval_mode=args.approval_mode,
            )
        finally:
            runtime.close()
        out = {"session": session_id, **outcome.to_dict()}
        print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def _cmd_metrics(args: argparse.Namespace) -> int:
    factual = decode_artifact(Path(args.factual).read_bytes())
    cf = decode_artifact(Path(args.cf).read_bytes())
    scores = (classify_score(factual.pixels), classify_score(cf.pixels))
    result = bundle(factual, cf, scores[0], scores[1], args.threshold)
    print(json.dumps(result.to_dict(), sort_keys=True))
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    report = run_bench(args.n, args.seed, methods=methods, out_dir=args.out)
    print(format_table(report.rows))
    print(f"\nwrote report bundle to {args.out}", file=sys.stderr)
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    if bool(args.log) == bool(args.bench_dir):
        print("replay: give exactly one of --log or --bench-dir", file=sys.stderr)
        return 2
    if args.log:
        events = read_log_file(args.log)
        memory = replay_memory(events)
        out = {
            "events": len(events),
            "memory": [
                {"step": m.step, "thought": m.thought, "tool": m.result.tool, "ok": m.result.ok}
                for m in memory
            ],
            "outcome": replay_outcome(events),
        }
        print(json.dumps(out, indent=2, sort_keys=True))
        return 0
    rebuilt = replay_bench(args.bench_dir)
    stored = (Path(args.bench_dir) / "report.json").read_text()
    if rebuilt.to_json() != stored:
        print("replay: rebuilt report DIFFERS from stored report.json", file=sys.stderr)
        return 1
    print(format_table(rebuilt.rows))
    print("\nreplay: rebuilt report matches stored report.json", file=sys.stderr)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    handlers = {
        "serve": _cmd_serve,
        "run": _cmd_run,
        "metrics": _cmd_metrics,
        "bench": _cmd_bench,
        "replay": _cmd_replay,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"cfagent: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # domain errors -> exit 1 with a message
        print(f"cfagent: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
