"""Command-line entry points: evaluate an artifact, score a benchmark run,
and inspect execution graphs."""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import sys
from pathlib import Path

import yaml

from . import bench
from .acquisition import RepoHandle
from .config import RunConfig, load_config
from .errors import AevalError, CardinalityMismatch, ConfigError, ParseError, ValidationFailure
from .graph import deserialize
from .graph_builder import build_initial_graph, collect_docs
from .pipeline import (
    EXIT_CONFIG,
    EXIT_OK,
    PLANNING_PRELUDE,
    EvaluationOutcome,
    make_backend,
    run_evaluation,
)
from .agent import AgentSession

log = logging.getLogger(__name__)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aeval", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("evaluate", help="run a full artifact evaluation")
    ev.add_argument("--paper", help="paper text file (PDF already converted to text)")
    ev.add_argument("--repo", help="pre-downloaded repository path")
    ev.add_argument("--backend", help="mock:<script> or remote")
    ev.add_argument("--runtime", help="fake:<scenario> or daemon")
    ev.add_argument("--workdir", help="output directory")
    ev.add_argument("--config", help="YAML config file")
    ev.add_argument("--policy", choices=["no-sudo", "prompt-sudo"])
    ev.add_argument("--jobs", type=int, help="parallel evaluations in batch mode")
    ev.add_argument("--batch", help="YAML file listing artifacts for batch mode")
    ev.set_defaults(func=cmd_evaluate)

    be = sub.add_parser("bench", help="score evaluation runs against ground truth")
    be.add_argument("--manifest", required=True)
    be.add_argument("--results", required=True, help="directory with <artifact_id>/report.json")
    be.add_argument("--out", help="directory for scorecard.json (default: results dir)")
    be.set_defaults(func=cmd_bench)

    gr = sub.add_parser("graph", help="build, validate, or show execution graphs")
    gsub = gr.add_subparsers(dest="graph_command", required=True)
    gb = gsub.add_parser("build", help="construct the initial graph from documentation")
    gb.add_argument("--repo", required=True)
    gb.add_argument("--backend", required=True)
    gb.add_argument("--out", default="ae_graph.initial.json")
    gb.add_argument("--config", help="YAML config file")
    gb.set_defaults(func=cmd_graph_build)
    gv = gsub.add_parser("validate", help="check a graph document")
    gv.add_argument("file")
    gv.set_defaults(func=cmd_graph_validate)
    gs = gsub.add_parser("show", help="render a topological listing")
    gs.add_argument("file")
    gs.set_defaults(func=cmd_graph_show)
    return parser


# --- evaluate -----------------------------------------------------------------


def _config_from_args(args) -> RunConfig:
    flags = {
        "paper": getattr(args, "paper", None),
        "repo": getattr(args, "repo", None),
        "backend": getattr(args, "backend", None),
        "runtime": getattr(args, "runtime", None),
        "workdir": getattr(args, "workdir", None),
        "policy": getattr(args, "policy", None),
        "jobs": getattr(args, "jobs", None),
    }
    return load_config(getattr(args, "config", None), flags)


def cmd_evaluate(args) -> int:
    if args.batch:
        return _run_batch(args)
    try:
        config = _config_from_args(args)
        config.validate()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outcome = run_evaluation(config)
    _print_outcome(outcome)
    return outcome.exit_code


def _print_outcome(outcome: EvaluationOutcome) -> None:
    if outcome.exit_code == EXIT_OK and outcome.report_path:
        print(f"evaluation complete: {outcome.report_path}")
    else:
        print(f"evaluation aborted (exit {outcome.exit_code}): {outcome.detail}", file=sys.stderr)


def _run_batch(args) -> int:
    doc = yaml.safe_load(Path(args.batch).read_text(encoding="utf-8"))
    entries = doc.get("artifacts") if isinstance(doc, dict) else doc
    if not isinstance(entries, list) or not entries:
        print("error: batch file must list artifacts", file=sys.stderr)
        return EXIT_CONFIG
    jobs = args.jobs or 1
    worst = EXIT_OK
    if jobs == 1:
        results = [_run_batch_entry(entry) for entry in entries]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_batch_entry, entries))
    for entry, code in zip(entries, results):
        print(f"{entry.get('id', '?')}: exit {code}")
        worst = max(worst, code)
    return worst


def _run_batch_entry(entry: dict) -> int:
    flags = {k: entry.get(k) for k in ("paper", "repo", "backend", "runtime", "workdir", "policy")}
    try:
        config = load_config(entry.get("config"), flags)
        config.validate()
    except ConfigError:
        return EXIT_CONFIG
    return run_evaluation(config).exit_code


# --- bench --------------------------------------------------------------------


def cmd_bench(args) -> int:
    try:
        manifests = bench.load_manifest(args.manifest)
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not manifests:
        print("error: manifest lists no artifacts", file=sys.stderr)
        return EXIT_CONFIG
    results_dir = Path(args.results)
    missing = [m.artifact_id for m in manifests if not (results_dir / m.artifact_id / "report.json").exists()]
    if missing:
        print(f"error: missing run results for: {', '.join(missing)}", file=sys.stderr)
        return EXIT_CONFIG
    run_results = [
        bench.run_result_from_report(results_dir / m.artifact_id / "report.json", m.artifact_id)
        for m in manifests
    ]
    try:
        cards = bench.score_by_split(manifests, run_results)
    except CardinalityMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out) if args.out else results_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {name: card.to_json() for name, card in cards.items()}
    (out_dir / "scorecard.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for name, card in cards.items():
        print(f"== {name} ==")
        print(bench.render_table(card))
    return EXIT_OK


# --- graph --------------------------------------------------------------------


def cmd_graph_build(args) -> int:
    root = Path(args.repo)
    if not root.is_dir():
        print(f"error: {root} is not a directory", file=sys.stderr)
        return EXIT_CONFIG
    try:
        config = load_config(getattr(args, "config", None), {"backend": args.backend})
        backend = make_backend(args.backend, config)
        repo = RepoHandle(str(root), str(root), root, "pre-downloaded")
        bundle = collect_docs(repo, config.settings)
        session = AgentSession(PLANNING_PRELUDE, backend, config.limits)
        graph = build_initial_graph(bundle, session)
    except AevalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    Path(args.out).write_text(graph.serialize(), encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def _load_graph_file(path: str):
    text = Path(path).read_text(encoding="utf-8")
    return deserialize(text)


def cmd_graph_validate(args) -> int:
    try:
        _load_graph_file(args.file)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationFailure as exc:
        print("invalid graph:")
        for violation in exc.violations or ():
            print(f"  - {violation.message}")
        if not exc.violations:
            print(f"  - {exc}")
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print("graph is valid")
    return EXIT_OK


def cmd_graph_show(args) -> int:
    try:
        graph = _load_graph_file(args.file)
    except (OSError, ValidationFailure, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    node_map = graph.node_map()
    for node_id in graph.topological_order():
        node = node_map[node_id]
        detail = {"Start": lambda n: f"use_docker={n.use_docker}",
                  "Command": lambda n: n.text,
                  "Artifact": lambda n: f"{n.path} ({n.type})"}[node.kind](node)
        print(f"{node_id}  {node.kind}:  {detail}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
