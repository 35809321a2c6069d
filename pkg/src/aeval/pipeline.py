"""End-to-end orchestration: wire acquisition, graph construction, planning,
and execution into one evaluation run with stable on-disk outputs."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .acquisition import PaperSummary, RepoHandle, acquire
from .agent import AgentSession, MockBackend, RemoteBackend
from .config import RunConfig
from .errors import (
    AcquisitionHalt,
    AevalError,
    BackendError,
    BuildFailedFinal,
    ConfigError,
    InvalidDockerfile,
    NoDocumentation,
    RuntimeUnreachable,
    UnparseableReply,
)
from .execution import (
    BadgeDecision,
    ExecutionTranscript,
    PrivilegePolicy,
    determine_badge,
    generate_report,
    run_graph,
    verify_claims,
)
from .graph import AEGraph, Node
from .graph_builder import build_initial_graph, collect_docs
from .planning import plan
from .runtime import ContainerRuntime, DockerEngineRuntime, FakeRuntime

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ACQUISITION = 3
EXIT_PLANNING = 4
EXIT_RUNTIME = 5

PLANNING_PRELUDE = """\
You are the planning stage of an automated artifact evaluation system.
You translate repository documentation into an execution graph, prepare a
normalized container substrate, and produce machine-readable plans. Follow
the requested reply format exactly; reply with fenced blocks only.
"""

EVALUATION_PRELUDE = """\
You are the evaluation stage of an automated artifact evaluation system.
You diagnose command failures, propose bounded repair actions, resolve
placeholders, and judge claims against execution evidence. Follow the
requested reply format exactly; reply with fenced blocks only.
"""


@dataclass
class EvaluationOutcome:
    exit_code: int
    workdir: Path
    report_path: Path | None = None
    detail: str = ""


def make_backend(spec: str, config: RunConfig):
    if spec.startswith("mock:"):
        return MockBackend.from_file(spec.split(":", 1)[1])
    if spec == "remote":
        return RemoteBackend(
            endpoint=config.settings.llm_endpoint,
            api_key=config.settings.llm_key,
            model=config.settings.model,
        )
    raise ConfigError(f"unknown backend spec {spec!r} (use mock:<script> or remote)")


def make_runtime(spec: str, config: RunConfig) -> ContainerRuntime:
    if spec.startswith("fake:"):
        return FakeRuntime.from_file(spec.split(":", 1)[1])
    if spec == "daemon":
        return DockerEngineRuntime(host=config.settings.docker_host or None)
    raise ConfigError(f"unknown runtime spec {spec!r} (use fake:<scenario> or daemon)")


def run_evaluation(config: RunConfig, backend=None, runtime=None) -> EvaluationOutcome:
    """Run stages one to three; exit 0 on any completed evaluation regardless
    of the badge verdict, nonzero only on a pipeline abort."""
    try:
        config.validate()
    except ConfigError as exc:
        return EvaluationOutcome(EXIT_CONFIG, Path(config.workdir), detail=str(exc))
    workdir = Path(config.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    try:
        backend = backend or make_backend(config.backend, config)
        runtime = runtime or make_runtime(config.runtime, config)
    except ConfigError as exc:
        return EvaluationOutcome(EXIT_CONFIG, workdir, detail=str(exc))

    planning_session = AgentSession(PLANNING_PRELUDE, backend, config.limits)
    evaluation_session = AgentSession(EVALUATION_PRELUDE, backend, config.limits)
    policy = PrivilegePolicy(name=config.policy, ask_human=_tty_ask if config.policy == "prompt-sudo" else None)

    # Stage 1: acquisition (or the pre-downloaded bypass).
    if config.paper:
        try:
            record = acquire(
                Path(config.paper),
                workdir,
                planning_session,
                threshold=config.settings.correspondence_threshold,
            )
        except AcquisitionHalt as exc:
            return EvaluationOutcome(EXIT_ACQUISITION, workdir, detail=str(exc))
        repo, summary = record.repo, record.summary
        link_ok = acquired = True
    else:
        root = Path(config.repo)
        if not root.is_dir():
            return EvaluationOutcome(EXIT_CONFIG, workdir, detail=f"repo path {root} is not a directory")
        repo = RepoHandle(
            origin_url=str(root),
            resolved_url=str(root),
            local_root=root,
            retrieval_method="pre-downloaded",
        )
        summary = PaperSummary(source_path=str(root), evaluation_summary="", candidate_urls=[])
        link_ok = acquired = True

    # Stage 1 continued: task modeling.
    try:
        bundle = collect_docs(repo, config.settings)
    except NoDocumentation as exc:
        report = _degenerate_report(
            workdir, link_ok, acquired,
            rationale="no documentation found; the artifact cannot be exercised",
        )
        return EvaluationOutcome(EXIT_OK, workdir, report_path=report, detail=str(exc))
    try:
        graph = build_initial_graph(bundle, planning_session)
    except (UnparseableReply, BackendError) as exc:
        _write_abort(workdir, "graph-construction", str(exc))
        return EvaluationOutcome(EXIT_PLANNING, workdir, detail=str(exc))
    (workdir / "ae_graph.initial.json").write_text(graph.serialize(), encoding="utf-8")

    if not graph.command_nodes():
        report = _degenerate_report(
            workdir, link_ok, acquired,
            rationale="no executable commands were extracted from the documentation",
            graph=graph,
        )
        return EvaluationOutcome(EXIT_OK, workdir, report_path=report)

    # Stage 2: planning.
    try:
        planned = plan(graph, repo, summary, planning_session, runtime, config.settings, workdir)
    except RuntimeUnreachable as exc:
        _write_abort(workdir, "planning-runtime", str(exc))
        return EvaluationOutcome(EXIT_RUNTIME, workdir, detail=str(exc))
    except (BuildFailedFinal, InvalidDockerfile, UnparseableReply, BackendError) as exc:
        _write_abort(workdir, "planning", str(exc))
        return EvaluationOutcome(EXIT_PLANNING, workdir, detail=str(exc))

    # Stage 3: execution and badge determination.
    try:
        transcript, final_graph = run_graph(
            planned.graph,
            planned.meta,
            planned.env,
            evaluation_session,
            runtime,
            settings=config.settings,
            policy=policy,
            workspace_root=str(repo.local_root),
        )
    except RuntimeUnreachable as exc:
        transcript = getattr(exc, "transcript", ExecutionTranscript())
        final_graph = getattr(exc, "graph", planned.graph)
        badge = BadgeDecision(
            functional=False, reusable_evidence=[], rationale=f"aborted: {exc}"
        )
        _, report = generate_report(
            workdir,
            graph=final_graph,
            transcript=transcript,
            verdicts=[],
            badge=badge,
            env=planned.env,
            link_ok=link_ok,
            acquired=acquired,
            partial=True,
            abort_cause=str(exc),
        )
        return EvaluationOutcome(EXIT_RUNTIME, workdir, report_path=report, detail=str(exc))

    verdicts = verify_claims(transcript, planned.meta, evaluation_session, repo.local_root)
    badge = determine_badge(final_graph, verdicts)
    _, report = generate_report(
        workdir,
        graph=final_graph,
        transcript=transcript,
        verdicts=verdicts,
        badge=badge,
        env=planned.env,
        link_ok=link_ok,
        acquired=acquired,
        cost_usd=getattr(backend, "cost_usd", None),
    )
    return EvaluationOutcome(EXIT_OK, workdir, report_path=report)


def _tty_ask(prompt: str) -> str:
    try:
        return input(f"[intervention required] {prompt}\nresponse (empty aborts): ")
    except EOFError:
        return ""


def _write_abort(workdir: Path, stage: str, message: str) -> None:
    (workdir / "abort.json").write_text(
        json.dumps({"stage": stage, "error": message}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def _degenerate_report(
    workdir: Path,
    link_ok: bool,
    acquired: bool,
    *,
    rationale: str,
    graph: AEGraph | None = None,
) -> Path:
    if graph is None:
        graph = AEGraph().add_node(Node.start("start-000", use_docker=False))
    badge = BadgeDecision(functional=False, reusable_evidence=[], rationale=rationale)
    _, report = generate_report(
        workdir,
        graph=graph,
        transcript=ExecutionTranscript(),
        verdicts=[],
        badge=badge,
        link_ok=link_ok,
        acquired=acquired,
    )
    return report
