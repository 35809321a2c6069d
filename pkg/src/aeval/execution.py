"""Evaluation stage: execute the planned graph in topological order, recover
from failures with bounded retries, detect stalls, resolve dynamic input,
verify claims, decide the badge, and write the report pair."""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

from .agent import AgentSession, parse_json_reply, truncate_output
from .config import Settings
from .errors import BackendError, RuntimeUnreachable, UnparseableReply, UnresolvablePlaceholder
from .graph import (
    COMMAND,
    FAILED,
    PENDING,
    RUNNING,
    SKIPPED,
    SUCCEEDED,
    AEGraph,
    Node,
)
from .planning import DETACHED_SHELL_REPLAY, ContainerEnv, MetaTaskSpec
from .runtime import ContainerRuntime, ExecRequest, ExecResult

log = logging.getLogger(__name__)

OUTCOME_OK = "ok"
OUTCOME_FAILED = "failed"
OUTCOME_REPAIRED_RETRY = "repaired-retry"
OUTCOME_SKIPPED = "skipped"
OUTCOME_STALLED_RECOVERED = "stalled-recovered"
OUTCOME_STALLED_FAILED = "stalled-failed"

REPAIR_ACTIONS = ("retry-unchanged", "modified-command", "prerequisite-command", "give-up")

# Prompts the system may answer on its own; anything else is a stall for the
# diagnostic path. Auto-answers are recorded as automated decisions, never
# as interventions.
AUTO_PROMPT_REPLIES: tuple[tuple[str, str], ...] = (
    (r"\[y/n\]", "Y"),
    (r"\(y(?:es)?/no?\)", "y"),
    (r"\[yes/no\]", "yes"),
    (r"license", "yes"),
    (r"overwrite", "y"),
    (r"continue\?", "y"),
)

_PLACEHOLDER_RES = (
    re.compile(r"<([^<>\n]{1,60})>"),
    re.compile(r"(?<!\$)\{([A-Za-z_][A-Za-z0-9_ -]{0,40})\}"),
    re.compile(r"\$(YOUR_[A-Z0-9_]+)"),
)
_PATHLIKE_TOKENS = ("path", "dir", "folder", "root", "workspace", "location")
_SUDO_RE = re.compile(r"(?:^|[;&|]\s*)sudo\b")


# --- transcript types ---------------------------------------------------------------


@dataclass
class CommandAttempt:
    node: str
    attempt_no: int
    command_text: str
    env: str
    exit_code: int | None
    stdout_digest: str
    stderr_digest: str
    wall_time_ms: int
    outcome: str
    tag: str | None = None  # "repair" for side commands issued between attempts
    auto_responses: tuple[str, ...] = ()

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["auto_responses"] = list(self.auto_responses)
        return doc


@dataclass
class InterventionRecord:
    reason: str
    prompt: str
    response: str  # "aborted" when no human answer was available

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExecutionTranscript:
    entries: list[CommandAttempt] = field(default_factory=list)
    interventions: list[InterventionRecord] = field(default_factory=list)

    def ok_commands(self) -> list[str]:
        return [e.command_text for e in self.entries if e.outcome == OUTCOME_OK]


@dataclass(frozen=True)
class StallSignal:
    node: str
    window_samples: tuple[float, ...]
    threshold_pct: float
    interval_s: int


@dataclass
class ClaimVerdict:
    claim: str
    verdict: str  # supported | unsupported | indeterminate
    evidence: str

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class BadgeDecision:
    functional: bool
    reusable_evidence: list[str]
    rationale: str

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RepairAction:
    kind: str
    text: str | None = None
    stdin: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class PrivilegePolicy:
    name: str = "no-sudo"  # or "prompt-sudo"
    ask_human: Callable[[str], str] | None = None

    def prompt_script(self) -> tuple[tuple[str, str], ...]:
        return AUTO_PROMPT_REPLIES


# --- stall detection ---------------------------------------------------------------


def detect_stall(
    samples: Iterable[float],
    *,
    node: str = "",
    threshold_pct: float = 5.0,
    window: int = 18,
    interval_s: int = 10,
) -> StallSignal | None:
    """Signal iff a complete window of consecutive samples sits below the
    threshold; any spike restarts the window."""
    run: list[float] = []
    for sample in samples:
        if sample < threshold_pct:
            run.append(sample)
            if len(run) == window:
                return StallSignal(
                    node=node,
                    window_samples=tuple(run),
                    threshold_pct=threshold_pct,
                    interval_s=interval_s,
                )
        else:
            run = []
    return None


class StallMonitor:
    """Polls container stats alongside a running command (real runtime only)."""

    def __init__(self, runtime: ContainerRuntime, container: str, settings: Settings):
        self.runtime = runtime
        self.container = container
        self.settings = settings
        self.samples: list[float] = []

    def poll(self) -> StallSignal | None:
        try:
            sample = self.runtime.sample_stats(self.container)
        except Exception:
            return None  # stats unavailable: stall detection disabled for this node
        self.samples.append(sample.cpu_pct)
        return detect_stall(
            self.samples,
            node=self.container,
            threshold_pct=self.settings.stall_cpu_threshold_pct,
            window=self.settings.stall_window_samples,
            interval_s=self.settings.stall_sample_interval_s,
        )


# --- dynamic input -------------------------------------------------------------------


def find_placeholders(text: str) -> list[str]:
    found = []
    for pattern in _PLACEHOLDER_RES:
        for match in pattern.finditer(text):
            inner = match.group(1)
            if pattern.pattern.startswith("(?<!"):  # brace form: skip shell-ish content
                if any(ch in inner for ch in ",*$"):
                    continue
            found.append(match.group(0))
    return found


def resolve_dynamic_input(
    node: Node,
    env: ContainerEnv,
    llm: AgentSession | None,
    policy: PrivilegePolicy,
    command_text: str | None = None,
) -> str:
    """Substitute placeholders mechanically where derivable (paths), else via
    the backend; raises UnresolvablePlaceholder when neither works."""
    text = command_text if command_text is not None else node.text
    for placeholder in find_placeholders(text):
        inner = placeholder.strip("<>{}$").strip().lower()
        if any(tok in inner for tok in _PATHLIKE_TOKENS):
            value = env.path_map[0][1] if env.path_map else "/workspace"
        else:
            value = _ask_placeholder_value(llm, placeholder, text)
        text = text.replace(placeholder, value)
        log.info("resolved placeholder %s -> %s", placeholder, value)
    return text


def _ask_placeholder_value(llm: AgentSession | None, placeholder: str, command: str) -> str:
    if llm is None:
        raise UnresolvablePlaceholder(placeholder)
    request = (
        f"The command below contains the placeholder {placeholder}. Reply with "
        'one fenced JSON block {"value": <concrete replacement string>}.\n\n' + command
    )

    def parser(reply: str) -> str:
        value = parse_json_reply(reply).get("value")
        if not isinstance(value, str) or not value:
            raise ValueError("missing value")
        return value

    try:
        return llm.ask(request, parser)
    except (BackendError, UnparseableReply) as exc:
        raise UnresolvablePlaceholder(f"{placeholder}: {exc}") from exc


# --- diagnosis ------------------------------------------------------------------------


def diagnose_and_repair(trace: str, node: Node, llm: AgentSession | None) -> RepairAction:
    """Map a failure trace to one action from the closed repair schema.

    Backend trouble degrades to retry-unchanged so execution never wedges on
    the diagnostic path.
    """
    if not trace.strip():
        raise ValueError("failure trace must be nonempty")
    if llm is None:
        return RepairAction("retry-unchanged")
    request = (
        "A command failed. Choose one repair action. Reply with one fenced JSON "
        'block: {"action": "retry-unchanged"|"modified-command"|"prerequisite-command"|"give-up", '
        '"text": <command, for modified/prerequisite>, '
        '"stdin": [{"expect": <pattern>, "reply": <text>}] (optional)}.\n\n'
        f"Command: {node.text}\nFailure trace:\n{trace[-4000:]}"
    )

    def parser(reply: str) -> RepairAction:
        obj = parse_json_reply(reply)
        kind = obj.get("action")
        if kind not in REPAIR_ACTIONS:
            raise ValueError(f"unknown repair action {kind!r}")
        text = obj.get("text")
        if kind in ("modified-command", "prerequisite-command"):
            if not isinstance(text, str) or not text.strip():
                raise ValueError(f"{kind} requires text")
        stdin = tuple(
            (str(d["expect"]), str(d["reply"])) for d in obj.get("stdin", ()) if isinstance(d, dict)
        )
        return RepairAction(kind=kind, text=text if isinstance(text, str) else None, stdin=stdin)

    try:
        return llm.ask(request, parser)
    except (BackendError, UnparseableReply) as exc:
        log.warning("diagnosis unavailable (%s); retrying unchanged", exc)
        return RepairAction("retry-unchanged")


# --- per-command execution --------------------------------------------------------------


def deep_diagnose(
    trace: str,
    node: Node,
    llm: AgentSession,
    runtime: ContainerRuntime,
    env: ContainerEnv,
    workspace_root: str,
    settings: Settings,
) -> RepairAction | None:
    """Escalated diagnosis: a bounded tool-driven investigation.

    The agent may read files and run commands in the evaluation workspace;
    its task_finish payload may carry a repair action in the closed schema.
    Only active when settings.deep_diagnosis is set.
    """
    from .agent import AgentContext, HistoryEntry, Workspace, run_agent_loop

    ctx = AgentContext(
        static_prelude=llm.ctx.static_prelude,
        limits=dataclasses.replace(llm.ctx.limits, max_turns=min(10, llm.ctx.limits.max_turns)),
    )
    ctx.history.append(
        HistoryEntry(
            None,
            "[request] Investigate this command failure with the available tools, "
            "then call task_finish with arguments {\"action\": ..., \"text\": ...} "
            f"in the repair schema.\nCommand: {node.text}\nTrace:\n{trace[-2000:]}",
        )
    )
    sandbox = Workspace(
        root=Path(workspace_root),
        exec_target=_exec_target(node, env),
        truncation_chars=llm.ctx.limits.output_truncation_chars,
        timeout_s=settings.command_timeout_s,
        container_name=env.container_name,
    )
    payload = run_agent_loop(ctx, llm.backend, sandbox, runtime)
    kind = payload.get("action")
    if kind in REPAIR_ACTIONS:
        text = payload.get("text")
        if kind in ("modified-command", "prerequisite-command") and not text:
            return None
        return RepairAction(kind=kind, text=text)
    return None


def _digest(text: str, limit: int) -> str:
    return truncate_output(text, max(64, limit))


def _exec_target(node: Node, env: ContainerEnv) -> str:
    if node.env == "host":
        return "host"
    if env.exec_mode == DETACHED_SHELL_REPLAY and env.session_name:
        return f"session:{env.session_name}"
    return node.env  # container:<name>


def execute_with_retry(
    node: Node,
    env: ContainerEnv,
    llm: AgentSession | None,
    runtime: ContainerRuntime,
    *,
    settings: Settings,
    policy: PrivilegePolicy,
    transcript: ExecutionTranscript,
    workspace_root: str,
) -> tuple[str, int, str | None]:
    """Run one Command node with bounded attempts and diagnosis between them.

    Returns (final state, attempts used, last error digest). Repair commands
    execute transcript-tagged and are never added to the graph.
    """
    command = node.text
    stdin: tuple[tuple[str, str], ...] = policy.prompt_script()
    attempts: list[CommandAttempt] = []
    state = FAILED
    last_error: str | None = None
    stalled_indices: list[int] = []
    sudo_consulted = False  # one human decision covers all retries of the node

    for attempt_no in range(1, settings.command_attempts + 1):
        try:
            resolved = resolve_dynamic_input(node, env, llm, policy, command)
        except UnresolvablePlaceholder as exc:
            last_error = f"unresolvable placeholder: {exc}"
            attempts.append(
                _attempt(node, attempt_no, command, None, "", str(exc), 0, OUTCOME_FAILED)
            )
            break
        if _SUDO_RE.search(resolved) and not sudo_consulted:
            sudo_consulted = True
            proceed, response = _handle_sudo(resolved, policy, transcript)
            if not proceed:
                last_error = "privilege escalation refused by policy"
                attempts.append(
                    _attempt(node, attempt_no, resolved, None, "", last_error, 0, OUTCOME_FAILED)
                )
                break
        target = _exec_target(node, env)
        req = ExecRequest(
            target=target,
            command=resolved,
            workdir=workspace_root if target == "host" else settings.container_workdir,
            stdin_script=stdin,
            timeout_s=settings.command_timeout_s,
        )
        result = runtime.execute(req)
        stalled = result.killed_reason == "stall"
        if result.exit_code == 0:
            attempts.append(_result_attempt(node, attempt_no, resolved, result, OUTCOME_OK, settings))
            state = SUCCEEDED
            last_error = None
            break
        last_error = _digest(result.stderr or result.stdout or f"killed: {result.killed_reason}", settings.digest_chars)
        if stalled:
            stalled_indices.append(len(attempts))
        if attempt_no == settings.command_attempts:
            attempts.append(_result_attempt(node, attempt_no, resolved, result, OUTCOME_FAILED, settings))
            break
        trace = _trace_text(result)
        action = diagnose_and_repair(trace, node, llm) if trace.strip() else RepairAction("retry-unchanged")
        if (
            settings.deep_diagnosis
            and llm is not None
            and trace.strip()
            and action.kind == "retry-unchanged"
        ):
            action = deep_diagnose(trace, node, llm, runtime, env, workspace_root, settings) or action
        if action.kind == "give-up":
            attempts.append(_result_attempt(node, attempt_no, resolved, result, OUTCOME_FAILED, settings))
            break
        outcome = OUTCOME_REPAIRED_RETRY if action.kind in ("modified-command", "prerequisite-command") else OUTCOME_FAILED
        attempts.append(_result_attempt(node, attempt_no, resolved, result, outcome, settings))
        if action.kind == "modified-command":
            command = action.text
        elif action.kind == "prerequisite-command":
            side_req = dataclasses.replace(req, command=action.text)
            side = runtime.execute(side_req)
            attempts.append(
                _result_attempt(node, 0, action.text, side,
                                OUTCOME_OK if side.exit_code == 0 else OUTCOME_FAILED,
                                settings, tag="repair")
            )
        if action.stdin:
            stdin = stdin + action.stdin

    for index in stalled_indices:
        attempts[index].outcome = (
            OUTCOME_STALLED_RECOVERED if state == SUCCEEDED else OUTCOME_STALLED_FAILED
        )
    transcript.entries.extend(attempts)
    used = sum(1 for a in attempts if a.tag is None)
    return state, used, last_error


def _handle_sudo(
    command: str, policy: PrivilegePolicy, transcript: ExecutionTranscript
) -> tuple[bool, str]:
    if policy.name == "prompt-sudo" and policy.ask_human is not None:
        response = policy.ask_human(command)
        transcript.interventions.append(
            InterventionRecord(reason="sudo permission request", prompt=command, response=response or "aborted")
        )
        return bool(response), response or "aborted"
    transcript.interventions.append(
        InterventionRecord(reason="sudo permission request", prompt=command, response="aborted")
    )
    return False, "aborted"


def _attempt(node, attempt_no, text, exit_code, stdout, stderr, wall, outcome, tag=None) -> CommandAttempt:
    return CommandAttempt(
        node=node.id,
        attempt_no=attempt_no,
        command_text=text,
        env=node.env,
        exit_code=exit_code,
        stdout_digest=stdout,
        stderr_digest=stderr,
        wall_time_ms=wall,
        outcome=outcome,
        tag=tag,
    )


def _result_attempt(
    node: Node,
    attempt_no: int,
    text: str,
    result: ExecResult,
    outcome: str,
    settings: Settings,
    tag: str | None = None,
) -> CommandAttempt:
    return CommandAttempt(
        node=node.id,
        attempt_no=attempt_no,
        command_text=text,
        env=node.env,
        exit_code=result.exit_code,
        stdout_digest=_digest(result.stdout, settings.digest_chars),
        stderr_digest=_digest(result.stderr, settings.digest_chars),
        wall_time_ms=result.duration_ms,
        outcome=outcome,
        tag=tag,
        auto_responses=result.auto_responses,
    )


def _trace_text(result: ExecResult) -> str:
    parts = []
    if result.killed_reason:
        parts.append(f"[killed: {result.killed_reason}]")
    if result.stderr:
        parts.append(result.stderr)
    if result.stdout:
        parts.append(result.stdout)
    return "\n".join(parts)


# --- graph-guided execution -----------------------------------------------------------


def run_graph(
    graph: AEGraph,
    spec: MetaTaskSpec,
    env: ContainerEnv,
    agent: AgentSession | None,
    runtime: ContainerRuntime,
    *,
    settings: Settings | None = None,
    policy: PrivilegePolicy | None = None,
    workspace_root: str = ".",
) -> tuple[ExecutionTranscript, AEGraph]:
    """Execute Command nodes in topological order with failure isolation.

    A node is skipped iff any ancestor command failed terminally (any-path
    rule); independent branches continue. All command statuses are terminal
    on return. RuntimeUnreachable aborts with the partial transcript kept on
    the exception.
    """
    settings = settings or Settings()
    policy = policy or PrivilegePolicy()
    transcript = ExecutionTranscript()
    to_skip: set[str] = set()
    node_map = graph.node_map()
    try:
        for node_id in graph.topological_order():
            node = node_map[node_id]
            if node.kind != COMMAND:
                continue
            node = graph.node(node_id)  # fresh status
            if node_id in to_skip:
                graph = graph.with_command_state(node_id, SKIPPED)
                transcript.entries.append(
                    _attempt(node, 0, node.text, None, "", "skipped: failed ancestor", 0, OUTCOME_SKIPPED)
                )
                continue
            graph = graph.with_command_state(node_id, RUNNING)
            state, used, error = execute_with_retry(
                node,
                env,
                agent,
                runtime,
                settings=settings,
                policy=policy,
                transcript=transcript,
                workspace_root=workspace_root,
            )
            graph = graph.with_command_state(node_id, state, attempts=used, last_error_digest=error)
            if state == FAILED:
                downstream = graph.downstream_of(node_id)
                to_skip |= {nid for nid in downstream if node_map[nid].kind == COMMAND}
    except RuntimeUnreachable as exc:
        exc.transcript = transcript  # preserve partial work for the report
        exc.graph = graph
        raise
    return transcript, graph


# --- verification and badge ---------------------------------------------------------


def verify_claims(
    transcript: ExecutionTranscript,
    spec: MetaTaskSpec,
    llm: AgentSession | None,
    repo_root: str | Path = ".",
) -> list[ClaimVerdict]:
    """Map each Verify-stage task to supported/unsupported/indeterminate."""
    verdicts: list[ClaimVerdict] = []
    backend_down = False
    evidence_blob = "\n".join(
        f"[{e.node} attempt {e.attempt_no} {e.outcome}] {e.stdout_digest}" for e in transcript.entries
    )
    for task in spec.stage("Verify").tasks:
        if task["kind"] == "artifact-exists":
            path = Path(repo_root) / task["path"]
            if path.exists():
                verdicts.append(ClaimVerdict(f"produces {task['path']}", "supported", f"file exists: {task['path']}"))
            else:
                verdicts.append(
                    ClaimVerdict(f"produces {task['path']}", "unsupported", "artifact node missing")
                )
            continue
        claim = task.get("text", "")
        if llm is None or backend_down:
            verdicts.append(ClaimVerdict(claim, "indeterminate", "no verification backend"))
            continue
        request = (
            "Judge whether the execution evidence supports the claim. Reply with "
            'one fenced JSON block {"verdict": "supported"|"unsupported"|"indeterminate", '
            '"evidence": <cited transcript line or reason>}.\n\n'
            f"Claim: {claim}\n\nEvidence:\n{truncate_output(evidence_blob, 6000)}"
        )

        def parser(reply: str) -> tuple[str, str]:
            obj = parse_json_reply(reply)
            verdict = obj.get("verdict")
            if verdict not in ("supported", "unsupported", "indeterminate"):
                raise ValueError(f"bad verdict {verdict!r}")
            return verdict, str(obj.get("evidence", ""))

        try:
            verdict, evidence = llm.ask(request, parser)
        except (BackendError, UnparseableReply) as exc:
            backend_down = True
            verdicts.append(ClaimVerdict(claim, "indeterminate", f"backend error: {exc}"))
            continue
        verdicts.append(ClaimVerdict(claim, verdict, evidence))
    return verdicts


def determine_badge(graph: AEGraph, verdicts: list[ClaimVerdict]) -> BadgeDecision:
    """Functional iff every command succeeded and no claim is unsupported.

    Reusable-level material is compiled as evidence only, never a verdict.
    """
    commands = graph.command_nodes()
    statuses = {n.id: n.status.state for n in commands}
    all_ok = bool(commands) and all(s == SUCCEEDED for s in statuses.values())
    unsupported = [v for v in verdicts if v.verdict == "unsupported"]
    functional = all_ok and not unsupported
    if not commands:
        rationale = "no executable commands were extracted from the documentation"
    elif not all_ok:
        bad = sorted(nid for nid, s in statuses.items() if s != SUCCEEDED)
        rationale = f"commands not succeeded: {', '.join(bad)}"
    elif unsupported:
        rationale = f"unsupported claims: {len(unsupported)}"
    else:
        rationale = "all command nodes succeeded and no claim was unsupported"
    evidence = [
        f"commands succeeded: {sum(1 for s in statuses.values() if s == SUCCEEDED)}/{len(commands)}",
        f"claims supported: {sum(1 for v in verdicts if v.verdict == 'supported')}/{len(verdicts)}",
        "re-run determinism: not assessed in this run",
    ]
    return BadgeDecision(functional=functional, reusable_evidence=evidence, rationale=rationale)


# --- reporting -----------------------------------------------------------------------


def generate_report(
    workdir: Path,
    *,
    graph: AEGraph,
    transcript: ExecutionTranscript,
    verdicts: list[ClaimVerdict],
    badge: BadgeDecision,
    env: ContainerEnv | None = None,
    link_ok: bool = True,
    acquired: bool = True,
    partial: bool = False,
    abort_cause: str | None = None,
    cost_usd: float | None = None,
) -> tuple[Path, Path]:
    """Write execution.log.jsonl plus report.md/report.json."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    log_path = workdir / "execution.log.jsonl"
    with log_path.open("w", encoding="utf-8") as fh:
        for entry in transcript.entries:
            fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")

    statuses = {n.id: n.status.state for n in graph.command_nodes()}
    report = {
        "badge": badge.to_json(),
        "stages": {
            "check": {"interventions": [i.to_json() for i in transcript.interventions]},
            "run": {"command_statuses": dict(sorted(statuses.items()))},
            "verify": [v.to_json() for v in verdicts],
            "evaluate": {"functional": badge.functional, "rationale": badge.rationale},
        },
        "environment": env.to_json() if env else None,
        "intervention_count": len(transcript.interventions),
        "partial": partial,
        "abort_cause": abort_cause,
        "metrics_input": {
            "link_ok": link_ok,
            "acquired": acquired,
            "interventions": len(transcript.interventions),
            "functional": badge.functional,
            "executed_ok_commands": transcript.ok_commands(),
            "cost_usd": cost_usd,
        },
        "generated_at": datetime.now(timezone.utc).isoformat(),
    }
    report_json = workdir / "report.json"
    report_json.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    lines = [
        "# Evaluation report",
        "",
        f"Badge recommendation: **{'Artifacts Functional' if badge.functional else 'not functional'}**",
        "",
        f"Rationale: {badge.rationale}",
        "",
        "## Command outcomes",
        "",
    ]
    for node_id, state in sorted(statuses.items()):
        lines.append(f"- `{node_id}`: {state}")
    lines += ["", "## Claim verdicts", ""]
    if verdicts:
        for v in verdicts:
            lines.append(f"- {v.verdict}: {v.claim} ({v.evidence})")
    else:
        lines.append("- none")
    lines += ["", "## Interventions", ""]
    if transcript.interventions:
        for i in transcript.interventions:
            lines.append(f"- {i.reason}: {i.prompt} -> {i.response}")
    else:
        lines.append("- none (fully autonomous run)")
    lines += ["", "## Reusable-level evidence", ""]
    for item in badge.reusable_evidence:
        lines.append(f"- {item}")
    if partial:
        lines += ["", f"**Partial run**: {abort_cause}"]
    report_md = workdir / "report.md"
    report_md.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return log_path, report_json
