"""Shared agent infrastructure.

Covers the step loop (thought / tool call / arguments), the five tool
primitives, context management (head-tail truncation, session compression),
static-first prompt assembly for cache-friendly layouts, turn bounds, and
the backend abstraction with a deterministic scripted mock.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, TypeVar

import requests
import yaml

from .config import Limits
from .errors import BackendError, ConfigError, PathEscape, TurnLimitExceeded, UnparseableReply

log = logging.getLogger(__name__)

TOOLS = ("read_file", "write_file", "command_execute", "docker_check", "task_finish")

HISTORY_SEPARATOR = "\n\n===== EXECUTION HISTORY =====\n"

T = TypeVar("T")


# --- context -----------------------------------------------------------------


@dataclass(frozen=True)
class AgentAction:
    thought: str
    tool: str
    arguments: dict


@dataclass
class HistoryEntry:
    """One exchange; action is None for requests, replies, and summaries."""

    action: AgentAction | None
    observation: str


@dataclass
class AgentContext:
    """Mutable per-session state, confined to one orchestration flow."""

    static_prelude: str
    history: list[HistoryEntry] = field(default_factory=list)
    turn_count: int = 0
    limits: Limits = field(default_factory=Limits)
    compressions: int = 0

    @property
    def token_estimate(self) -> int:
        chars = len(self.static_prelude) + len(render_history(self.history))
        return chars // self.limits.token_chars


def render_history(entries: list[HistoryEntry]) -> str:
    parts = []
    for i, entry in enumerate(entries):
        if entry.action is not None:
            parts.append(
                f"[{i}] action: "
                + json.dumps(
                    {"thought": entry.action.thought, "tool": entry.action.tool, "arguments": entry.action.arguments},
                    sort_keys=True,
                )
            )
            parts.append(f"[{i}] observation: {entry.observation}")
        else:
            parts.append(f"[{i}] {entry.observation}")
    return "\n".join(parts)


def assemble_prompt(ctx: AgentContext) -> str:
    """Static prelude strictly first, then the serialized history."""
    return ctx.static_prelude + HISTORY_SEPARATOR + render_history(ctx.history)


# --- truncation ----------------------------------------------------------------


def truncate_output(text: str, limit_chars: int) -> str:
    """Keep the head and tail of long output; 40% head, 60% tail.

    Identity when len(text) <= limit_chars. Output length is bounded by
    limit_chars plus the elision marker.
    """
    if limit_chars < 64:
        raise ValueError("truncation limit must be >= 64")
    if len(text) <= limit_chars:
        return text
    head = math.ceil(0.4 * limit_chars)
    tail = limit_chars - head
    elided = len(text) - head - tail
    marker = f"…[{elided} chars elided]…"
    return text[:head] + marker + text[-tail:]


def truncate_to_budget(text: str, budget: int) -> str:
    """Head-tail truncation whose result length equals the budget exactly.

    Used where a hard character cap must hold including the marker (for
    example documentation bundles). Iterates because the marker length
    depends on the elided count's digit width.
    """
    if len(text) <= budget:
        return text
    elided = 0
    head = tail = 0
    for _ in range(4):
        marker = f"…[{elided} chars elided]…"
        content = budget - len(marker)
        if content < 2:
            return text[:budget]
        head = math.ceil(0.4 * content)
        tail = content - head
        new_elided = len(text) - head - tail
        if new_elided == elided:
            break
        elided = new_elided
    marker = f"…[{elided} chars elided]…"
    return text[:head] + marker + text[-tail:]


# --- backends ----------------------------------------------------------------


class AgentBackend(Protocol):
    kind: str

    def complete(self, prompt: str) -> str: ...


EXHAUSTED_REPLY = (
    "```json\n"
    '{"thought": "scripted replies exhausted", "tool": "task_finish",'
    ' "arguments": {"status": "failure", "reason": "mock script exhausted"}}\n'
    "```"
)


class MockBackend:
    """Deterministic backend replaying a fixed script of replies.

    Replies are returned in order; once exhausted every call yields a
    canned task_finish(failure) action. Every consumed prompt is recorded
    for assertions.
    """

    kind = "scripted-mock"

    def __init__(self, script: list[str]):
        if not script:
            raise ValueError("mock script must be nonempty")
        self.script = list(script)
        self.prompts: list[str] = []
        self._next = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if isinstance(doc, dict):
            doc = doc.get("replies")
        if not isinstance(doc, list) or not all(isinstance(r, str) for r in doc):
            raise ConfigError(f"mock script {path} must be a list of reply strings")
        return cls(doc)

    def complete(self, prompt: str) -> str:
        self.prompts.append(prompt)
        if self._next >= len(self.script):
            return EXHAUSTED_REPLY
        reply = self.script[self._next]
        self._next += 1
        return reply


class RemoteBackend:
    """Chat-completion HTTP backend; temperature pinned to zero."""

    kind = "remote-llm"

    def __init__(self, endpoint: str = "", api_key: str = "", model: str = "", retries: int = 3):
        self.endpoint = endpoint or os.environ.get("AE_LLM_ENDPOINT", "")
        self.api_key = api_key or os.environ.get("AE_LLM_KEY", "")
        self.model = model
        self.retries = retries
        self.temperature = 0.0
        if not self.endpoint:
            raise ConfigError("remote backend requires AE_LLM_ENDPOINT or settings.llm_endpoint")
        if not self.model:
            raise ConfigError("remote backend requires a model name in settings.model")

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = None
        for _ in range(self.retries):
            try:
                resp = requests.post(self.endpoint, json=payload, headers=headers, timeout=120)
                if resp.status_code >= 500:
                    last = f"server error {resp.status_code}"
                    continue
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (requests.RequestException, KeyError, ValueError) as exc:
                last = str(exc)
        raise BackendError(f"backend unreachable or malformed reply: {last}")


def mock_backend(script: list[str]) -> MockBackend:
    return MockBackend(script)


# --- structured replies ---------------------------------------------------------


_FENCE_RE = re.compile(r"```[a-zA-Z]*\n(.*?)```", re.DOTALL)


def fenced_blocks(reply: str) -> list[str]:
    return [m.group(1) for m in _FENCE_RE.finditer(reply)]


def parse_json_reply(reply: str) -> dict:
    """Extract the first fenced JSON object from a backend reply."""
    candidates = fenced_blocks(reply)
    candidates.append(reply.strip())
    for block in candidates:
        try:
            obj = json.loads(block)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise UnparseableReply("no JSON object found in backend reply")


def parse_action(reply: str) -> AgentAction:
    obj = parse_json_reply(reply)
    tool = obj.get("tool")
    arguments = obj.get("arguments")
    if tool not in TOOLS:
        raise UnparseableReply(f"unknown tool {tool!r}")
    if not isinstance(arguments, dict):
        raise UnparseableReply("arguments must be an object")
    return AgentAction(thought=str(obj.get("thought", "")), tool=tool, arguments=arguments)


# --- compression ----------------------------------------------------------------


def compress_session(ctx: AgentContext, backend: AgentBackend) -> AgentContext:
    """Replace the history with a single compact summary entry.

    Precondition: the token estimate has reached the compression threshold
    and there is history to compress. On backend failure the oldest half of
    the history is dropped instead.
    """
    if ctx.token_estimate < ctx.limits.compression_threshold_tokens:
        raise ValueError("compress_session called below the compression threshold")
    if not ctx.history:
        raise ValueError("compress_session called with empty history")
    history_chars = len(render_history(ctx.history))
    budget = max(256, history_chars // 2)
    try:
        reply = backend.complete(
            "Summarize the following execution history into a compact state "
            "description. Keep command outcomes, open problems, and key paths.\n\n"
            + render_history(ctx.history)
        )
        summary = truncate_to_budget(reply.strip(), budget)
        ctx.history = [HistoryEntry(None, f"[session summary] {summary}")]
    except BackendError:
        drop = max(1, len(ctx.history) // 2)
        del ctx.history[:drop]
        log.warning("session compression backend failure; dropped oldest %d entries", drop)
    ctx.compressions += 1
    log.info("session compressed (event %d); token estimate now %d", ctx.compressions, ctx.token_estimate)
    return ctx


def _maybe_compress(ctx: AgentContext, backend: AgentBackend) -> None:
    if ctx.history and ctx.token_estimate >= ctx.limits.compression_threshold_tokens:
        compress_session(ctx, backend)


# --- the step loop ----------------------------------------------------------------


_REPROMPT_NOTE = (
    "\n\nYour previous reply could not be parsed. Respond with a single fenced "
    "JSON block: {\"thought\": ..., \"tool\": one of "
    + json.dumps(list(TOOLS))
    + ", \"arguments\": {...}}."
)


def react_step(ctx: AgentContext, backend: AgentBackend) -> AgentAction:
    """One reasoning step: prompt the backend, parse a structured action.

    Invalid replies are re-prompted up to the limit (3 total calls), after
    which the step degrades to task_finish(failure). Each step consumes one
    turn against the strict turn bound.
    """
    if ctx.turn_count >= ctx.limits.max_turns:
        raise TurnLimitExceeded(f"turn limit {ctx.limits.max_turns} reached")
    _maybe_compress(ctx, backend)
    prompt = assemble_prompt(ctx)
    action = None
    for attempt in range(ctx.limits.reprompt_limit):
        reply = backend.complete(prompt if attempt == 0 else prompt + _REPROMPT_NOTE)
        try:
            action = parse_action(reply)
            break
        except UnparseableReply:
            continue
    if action is None:
        action = AgentAction(
            thought="backend replies failed schema validation",
            tool="task_finish",
            arguments={"status": "failure", "reason": "invalid backend replies"},
        )
    ctx.turn_count += 1
    return action


# --- tools --------------------------------------------------------------------


@dataclass
class Workspace:
    """Filesystem confinement and execution routing for tool dispatch."""

    root: Path
    exec_target: str = "host"
    truncation_chars: int = 8000
    timeout_s: int = 1800
    container_name: str | None = None

    def resolve(self, path: str) -> Path:
        candidate = (self.root / path).resolve()
        root = self.root.resolve()
        if candidate != root and root not in candidate.parents:
            raise PathEscape(f"path {path!r} escapes the evaluation workspace")
        return candidate


def dispatch_tool(action: AgentAction, sandbox: Workspace, runtime) -> str:
    """Execute one tool call; failures come back as observation text."""
    try:
        return _dispatch(action, sandbox, runtime)
    except PathEscape as exc:
        return f"PathEscape: {exc}"
    except Exception as exc:  # the loop must continue on in-band failures
        return f"ToolFailure: {exc}"


def _dispatch(action: AgentAction, sandbox: Workspace, runtime) -> str:
    args = action.arguments
    if action.tool == "read_file":
        target = sandbox.resolve(str(args.get("path", "")))
        content = target.read_text(encoding="utf-8", errors="replace")
        return truncate_output(content, sandbox.truncation_chars)
    if action.tool == "write_file":
        target = sandbox.resolve(str(args.get("path", "")))
        content = str(args.get("content", ""))
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")
        return f"wrote {len(content.encode('utf-8'))} bytes to {args.get('path')}"
    if action.tool == "command_execute":
        from .runtime import ExecRequest  # local import to avoid a cycle

        req = ExecRequest(
            target=sandbox.exec_target,
            command=str(args.get("command", "")),
            workdir=str(args.get("workdir") or sandbox.root),
            timeout_s=int(args.get("timeout_s", sandbox.timeout_s)),
        )
        result = runtime.execute(req)
        stdout = truncate_output(result.stdout, sandbox.truncation_chars)
        stderr = truncate_output(result.stderr, sandbox.truncation_chars)
        return f"exit={result.exit_code} killed={result.killed_reason}\nstdout:\n{stdout}\nstderr:\n{stderr}"
    if action.tool == "docker_check":
        name = str(args.get("container") or sandbox.container_name or "")
        info = runtime.container_info(name)
        return json.dumps(info, sort_keys=True)
    if action.tool == "task_finish":
        return "TASK_FINISHED: " + json.dumps(args, sort_keys=True)
    raise ValueError(f"unknown tool {action.tool!r}")


def run_agent_loop(ctx: AgentContext, backend: AgentBackend, sandbox: Workspace, runtime) -> dict:
    """Drive react_step/dispatch_tool until task_finish or the turn bound."""
    while True:
        try:
            action = react_step(ctx, backend)
        except TurnLimitExceeded:
            return {"status": "failure", "reason": "turn limit exceeded"}
        observation = dispatch_tool(action, sandbox, runtime)
        ctx.history.append(
            HistoryEntry(action, truncate_output(observation, ctx.limits.output_truncation_chars))
        )
        if action.tool == "task_finish":
            return action.arguments


# --- bounded structured asks ---------------------------------------------------


class AgentSession:
    """A context-managed conversation used for schema-bound pipeline calls.

    Every ask appends the request and reply to the history, assembles the
    prompt static-first, re-prompts up to the limit on parse failures, and
    compresses the session when the token estimate crosses the threshold.
    """

    def __init__(self, prelude: str, backend: AgentBackend, limits: Limits | None = None):
        self.ctx = AgentContext(static_prelude=prelude, limits=limits or Limits())
        self.backend = backend

    @property
    def kind(self) -> str:
        return self.backend.kind

    def ask(self, request: str, parser: Callable[[str], T]) -> T:
        _maybe_compress(self.ctx, self.backend)
        self.ctx.history.append(HistoryEntry(None, "[request] " + request))
        prompt = assemble_prompt(self.ctx)
        last_error: Exception | None = None
        for attempt in range(self.ctx.limits.reprompt_limit):
            if self.ctx.turn_count >= self.ctx.limits.max_turns:
                raise TurnLimitExceeded(f"turn limit {self.ctx.limits.max_turns} reached")
            suffix = "" if attempt == 0 else f"\n\nYour previous reply was rejected: {last_error}. Follow the requested format exactly."
            reply = self.backend.complete(prompt + suffix)
            self.ctx.turn_count += 1
            try:
                value = parser(reply)
            except Exception as exc:
                last_error = exc
                continue
            self.ctx.history.append(
                HistoryEntry(None, "[reply] " + truncate_output(reply, self.ctx.limits.output_truncation_chars))
            )
            return value
        raise UnparseableReply(
            f"backend reply failed validation after {self.ctx.limits.reprompt_limit} attempts: {last_error}"
        )
