"""Uniform interface to the container daemon and the host shell.

Everything above this module is daemon-agnostic: planning and execution talk
to a ContainerRuntime, which is either the in-memory scriptable fake used by
tests or a thin client over the daemon's HTTP engine API.

Detached sessions recover per-command exit codes with a sentinel protocol
(`__AE_SENTINEL_<token>_EXIT_<code>__` echoed after each command); detached
shells do not report exit codes natively, so this construction is ours.
"""

from __future__ import annotations

import io
import json
import logging
import os
import re
import selectors
import shlex
import subprocess
import tarfile
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import yaml

from .dockerfile import parse_dockerfile
from .errors import (
    BuildError,
    ConfigError,
    ContainerNotRunning,
    DaemonUnreachable,
    NameConflict,
    NotFound,
    SessionDead,
    SessionStartFailure,
    SpawnFailure,
    StatsUnavailable,
)

log = logging.getLogger(__name__)


# --- request/result shapes -----------------------------------------------------


@dataclass(frozen=True)
class ExecRequest:
    """One command to run on a target: host, container:<name>, session:<name>."""

    target: str
    command: str
    workdir: str | None = None
    env_vars: Mapping[str, str] = field(default_factory=dict)
    stdin_script: tuple[tuple[str, str], ...] = ()  # (expect pattern, reply)
    timeout_s: int = 1800


@dataclass(frozen=True)
class ExecResult:
    exit_code: int | None
    stdout: str = ""
    stderr: str = ""
    duration_ms: int = 0
    killed_reason: str | None = None  # timeout | stall | user
    auto_responses: tuple[str, ...] = ()

    def __post_init__(self):
        if self.exit_code is None and self.killed_reason is None:
            raise ValueError("killed result must carry a killed_reason")


@dataclass(frozen=True)
class StatsSample:
    container: str
    cpu_pct: float
    mem_bytes: int
    at: float


# --- sentinel protocol -----------------------------------------------------------


def wrap_session_command(command: str, token: str) -> str:
    return f"{command}\nprintf '__AE_SENTINEL_{token}_EXIT_%d__\\n' \"$?\""


def split_sentinel_output(raw: str, token: str) -> tuple[str, int | None]:
    """Recover (stdout, exit code) for one command from interleaved output."""
    match = re.search(rf"__AE_SENTINEL_{re.escape(token)}_EXIT_(\d+)__", raw)
    if not match:
        return raw, None
    return raw[: match.start()], int(match.group(1))


# --- abstract runtime ------------------------------------------------------------


class ContainerRuntime(ABC):
    """Build, pull, create, exec-inject, session, and stats operations."""

    @abstractmethod
    def build_image(self, dockerfile: str, tag: str) -> str: ...

    @abstractmethod
    def pull_image(self, ref: str) -> str: ...

    @abstractmethod
    def create_container(self, image: str, name: str, mounts: list[tuple[str, str]]) -> str: ...

    @abstractmethod
    def start_container(self, name: str) -> None: ...

    @abstractmethod
    def exec_in_container(self, req: ExecRequest) -> ExecResult: ...

    @abstractmethod
    def start_detached_shell(self, container: str, entrypoint: str) -> str: ...

    @abstractmethod
    def send_to_session(
        self, session: str, command: str, timeout_s: int = 1800, stdin_script: tuple[tuple[str, str], ...] = ()
    ) -> ExecResult: ...

    @abstractmethod
    def sample_stats(self, container: str) -> StatsSample: ...

    @abstractmethod
    def host_exec(self, req: ExecRequest) -> ExecResult: ...

    @abstractmethod
    def container_info(self, name: str) -> dict: ...

    def image_entrypoint(self, image: str) -> str:
        """Entry command baked into an image; '' when unknown or default."""
        return ""

    def execute(self, req: ExecRequest) -> ExecResult:
        """Route a request by its target prefix."""
        if req.target == "host":
            return self.host_exec(req)
        if req.target.startswith("container:"):
            return self.exec_in_container(req)
        if req.target.startswith("session:"):
            return self.send_to_session(
                req.target.split(":", 1)[1], req.command, req.timeout_s, req.stdin_script
            )
        raise ValueError(f"unknown execution target {req.target!r}")


# --- scriptable fake ---------------------------------------------------------------


@dataclass
class ExecRule:
    """Scripted outcome for commands matching a substring (or 're:' regex)."""

    match: str
    exit_code: int = 0
    stdout: str = ""
    stderr: str = ""
    duration_ms: int = 1
    killed_reason: str | None = None
    prompts: tuple[str, ...] = ()
    creates: tuple[str, ...] = ()
    once: bool = False
    daemon_down: bool = False

    def matches(self, command: str) -> bool:
        if self.match.startswith("re:"):
            return re.search(self.match[3:], command) is not None
        return self.match in command


@dataclass
class _FakeContainer:
    name: str
    image: str
    mounts: list[tuple[str, str]]
    running: bool = False


@dataclass
class _FakeSession:
    name: str
    container: str
    token: str
    transcript: list[str]
    cwd: str
    env: dict
    alive: bool = True


class FakeRuntime(ContainerRuntime):
    """In-memory runtime driven entirely by a declarative scenario.

    Every operation is total: scripted outcomes always produce a defined
    result and never hang. Calls are recorded for count assertions;
    daemon_calls excludes cache hits.
    """

    def __init__(
        self,
        images: tuple[str, ...] = (),
        build_script: tuple[dict, ...] = (),
        pull_results: dict | None = None,
        exec_rules: tuple[ExecRule, ...] = (),
        stats: dict | None = None,
        info: dict | None = None,
        image_entrypoints: dict | None = None,
        session_start_ok: bool = True,
        workspace_fallback: str | None = None,
    ):
        self.images = set(images)
        self._build_script = list(build_script)
        self._pull_results = dict(pull_results or {})
        self.exec_rules = list(exec_rules)
        self._stats = {k: list(v) for k, v in (stats or {}).items()}
        self._info = dict(info or {})
        self._image_entrypoints = dict(image_entrypoints or {})
        self._session_start_ok = session_start_ok
        self._workspace_fallback = workspace_fallback
        self.containers: dict[str, _FakeContainer] = {}
        self.sessions: dict[str, _FakeSession] = {}
        self.calls: list[tuple] = []
        self.daemon_calls: list[tuple] = []
        self._pulled: set[str] = set()
        self._session_counter = 0

    # -- scenario loading --

    @classmethod
    def from_file(cls, path: str | Path) -> "FakeRuntime":
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"scenario {path} must be a mapping")
        rules = tuple(
            ExecRule(
                match=r["match"],
                exit_code=r.get("exit_code", 0),
                stdout=r.get("stdout", ""),
                stderr=r.get("stderr", ""),
                duration_ms=r.get("duration_ms", 1),
                killed_reason=r.get("killed_reason"),
                prompts=tuple(r.get("prompts", ())),
                creates=tuple(r.get("creates", ())),
                once=r.get("once", False),
                daemon_down=r.get("daemon_down", False),
            )
            for r in doc.get("exec_rules", ())
        )
        return cls(
            images=tuple(doc.get("images", ())),
            build_script=tuple(doc.get("build", ())),
            pull_results=doc.get("pull"),
            exec_rules=rules,
            stats=doc.get("stats"),
            info=doc.get("info"),
            image_entrypoints=doc.get("image_entrypoints"),
            session_start_ok=doc.get("session_start_ok", True),
        )

    # -- images --

    def build_image(self, dockerfile: str, tag: str) -> str:
        parse_dockerfile(dockerfile)  # local grammar check precedes any daemon call
        self.calls.append(("build_image", tag))
        self.daemon_calls.append(("build_image", tag))
        outcome = self._build_script.pop(0) if self._build_script else {"ok": True}
        if outcome.get("daemon_down"):
            raise DaemonUnreachable("scripted daemon outage")
        if not outcome.get("ok", True):
            raise BuildError(f"build failed for {tag}", log=outcome.get("log", "scripted build failure"))
        self.images.add(tag)
        return tag

    def pull_image(self, ref: str) -> str:
        self.calls.append(("pull_image", ref))
        if ref in self._pulled:
            return ref  # cache hit, no daemon round-trip
        self.daemon_calls.append(("pull_image", ref))
        outcome = self._pull_results.get(ref, "ok")
        if outcome == "not-found":
            raise NotFound(f"image {ref} not found")
        if outcome == "daemon-down":
            raise DaemonUnreachable("scripted daemon outage")
        self._pulled.add(ref)
        self.images.add(ref)
        return ref

    # -- containers --

    def create_container(self, image: str, name: str, mounts: list[tuple[str, str]]) -> str:
        self.calls.append(("create_container", name))
        self.daemon_calls.append(("create_container", name))
        if image not in self.images:
            raise NotFound(f"image {image} not available")
        if name in self.containers:
            raise NameConflict(name)
        self.containers[name] = _FakeContainer(name=name, image=image, mounts=list(mounts))
        return name

    def start_container(self, name: str) -> None:
        self.calls.append(("start_container", name))
        container = self.containers.get(name)
        if container is None:
            raise NotFound(f"container {name} not found")
        container.running = True

    def exec_in_container(self, req: ExecRequest) -> ExecResult:
        self.calls.append(("exec_in_container", req.target, req.command))
        name = req.target.split(":", 1)[1]
        container = self.containers.get(name)
        if container is None or not container.running:
            raise ContainerNotRunning(name)
        return self._run_command(req, container)

    # -- sessions --

    def start_detached_shell(self, container: str, entrypoint: str) -> str:
        self.calls.append(("start_detached_shell", container, entrypoint))
        box = self.containers.get(container)
        if box is None or not self._session_start_ok:
            raise SessionStartFailure(container)
        box.running = True
        self._session_counter += 1
        name = f"sess-{container}-{self._session_counter:02d}"
        workdir = box.mounts[0][1] if box.mounts else "/"
        session = _FakeSession(
            name=name,
            container=container,
            token=f"{self._session_counter:032x}",
            transcript=[entrypoint],
            cwd=workdir,
            env={},
        )
        self.sessions[name] = session
        return name

    def send_to_session(
        self, session: str, command: str, timeout_s: int = 1800, stdin_script: tuple[tuple[str, str], ...] = ()
    ) -> ExecResult:
        self.calls.append(("send_to_session", session, command))
        sess = self.sessions.get(session)
        if sess is None or not sess.alive:
            raise SessionDead(session)
        sess.transcript.append(command)
        container = self.containers[sess.container]
        inner = self._session_builtin(sess, command)
        if inner is None:
            req = ExecRequest(
                target=f"container:{sess.container}",
                command=command,
                workdir=sess.cwd,
                stdin_script=stdin_script,
                timeout_s=timeout_s,
            )
            inner = self._run_command(req, container)
        if inner.exit_code is None:
            return inner
        raw = inner.stdout + f"__AE_SENTINEL_{sess.token}_EXIT_{inner.exit_code}__\n"
        stdout, code = split_sentinel_output(raw, sess.token)
        return replace(inner, stdout=stdout, exit_code=code)

    def _session_builtin(self, sess: _FakeSession, command: str) -> ExecResult | None:
        stripped = command.strip()
        if stripped.startswith("cd "):
            target = stripped[3:].strip()
            sess.cwd = target if target.startswith("/") else str(Path(sess.cwd) / target)
            return ExecResult(0)
        if stripped == "pwd":
            return ExecResult(0, stdout=sess.cwd + "\n")
        if stripped.startswith("export "):
            if "=" in stripped[7:]:
                key, value = stripped[7:].split("=", 1)
                sess.env[key.strip()] = value.strip()
                return ExecResult(0)
        return None

    # -- stats / info --

    def sample_stats(self, container: str) -> StatsSample:
        self.calls.append(("sample_stats", container))
        box = self.containers.get(container)
        if box is None or not box.running:
            raise StatsUnavailable(container)
        stream = self._stats.get(container)
        if not stream:
            raise StatsUnavailable(f"no scripted samples left for {container}")
        cpu = stream.pop(0)
        return StatsSample(container=container, cpu_pct=float(cpu), mem_bytes=100 << 20, at=time.time())

    def container_info(self, name: str) -> dict:
        self.calls.append(("container_info", name))
        if name in self._info:
            return self._info[name]
        box = self.containers.get(name)
        if box is None:
            raise NotFound(f"container {name} not found")
        return {
            "Name": box.name,
            "Image": box.image,
            "State": {"Running": box.running},
            "Mounts": [{"Source": h, "Destination": c} for h, c in box.mounts],
        }

    def image_entrypoint(self, image: str) -> str:
        return self._image_entrypoints.get(image, "")

    # -- host --

    def host_exec(self, req: ExecRequest) -> ExecResult:
        self.calls.append(("host_exec", req.command))
        return self._run_command(req, None)

    # -- shared scripted execution --

    def _run_command(self, req: ExecRequest, container: _FakeContainer | None) -> ExecResult:
        rule = None
        for candidate in self.exec_rules:
            if candidate.matches(req.command):
                rule = candidate
                break
        if rule is not None and rule.once:
            self.exec_rules.remove(rule)
        if rule is None:
            return self._builtin(req.command)
        if rule.daemon_down:
            raise DaemonUnreachable(f"scripted daemon outage at {req.command!r}")

        replies: list[str] = []
        emitted = rule.stdout
        for prompt in rule.prompts:
            reply = _scripted_reply(prompt, req.stdin_script)
            if reply is None:
                # unanswered prompt: the command blocks and is flagged stalled
                return ExecResult(
                    exit_code=None,
                    stdout=emitted + prompt,
                    stderr=rule.stderr,
                    duration_ms=rule.duration_ms,
                    killed_reason="stall",
                    auto_responses=tuple(replies),
                )
            replies.append(reply)
            emitted += prompt + reply + "\n"
        if rule.killed_reason:
            return ExecResult(
                exit_code=None,
                stdout=emitted,
                stderr=rule.stderr,
                duration_ms=rule.duration_ms,
                killed_reason=rule.killed_reason,
                auto_responses=tuple(replies),
            )
        self._materialize(rule.creates, req, container)
        return ExecResult(
            exit_code=rule.exit_code,
            stdout=emitted,
            stderr=rule.stderr,
            duration_ms=rule.duration_ms,
            auto_responses=tuple(replies),
        )

    def _builtin(self, command: str) -> ExecResult:
        stripped = command.strip()
        if stripped.startswith("echo "):
            return ExecResult(0, stdout=stripped[5:].strip().strip("'\"") + "\n", duration_ms=1)
        if stripped == "false":
            return ExecResult(1, duration_ms=1)
        return ExecResult(0, duration_ms=1)

    def _materialize(self, creates: tuple[str, ...], req: ExecRequest, container: _FakeContainer | None) -> None:
        if not creates:
            return
        if container is not None and container.mounts:
            root = Path(container.mounts[0][0])
        elif req.workdir:
            root = Path(req.workdir)
        elif self._workspace_fallback:
            root = Path(self._workspace_fallback)
        else:
            return
        for rel in creates:
            target = root / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text("", encoding="utf-8")


def _scripted_reply(prompt: str, stdin_script: tuple[tuple[str, str], ...]) -> str | None:
    for pattern, reply in stdin_script:
        try:
            if re.search(pattern, prompt, re.IGNORECASE):
                return reply
        except re.error:
            if pattern in prompt:
                return reply
    return None


# --- host execution (shared by the real runtime) -----------------------------------


def host_exec_impl(req: ExecRequest) -> ExecResult:
    """Run a host command with timeout enforcement and expect-style replies."""
    start = time.monotonic()
    env = dict(os.environ)
    env.update(req.env_vars)
    try:
        proc = subprocess.Popen(
            ["/bin/sh", "-c", req.command],
            cwd=req.workdir or None,
            env=env,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            start_new_session=True,  # so a timeout kill reaches descendants
        )
    except OSError as exc:
        raise SpawnFailure(str(exc)) from exc

    if not req.stdin_script:
        try:
            stdout, stderr = proc.communicate(timeout=req.timeout_s)
        except subprocess.TimeoutExpired:
            _kill_group(proc)
            stdout, stderr = proc.communicate()
            return ExecResult(
                None, stdout or "", stderr or "", _ms_since(start), killed_reason="timeout"
            )
        return ExecResult(proc.returncode, stdout or "", stderr or "", _ms_since(start))

    return _expect_loop(proc, req, start)


def _kill_group(proc: subprocess.Popen) -> None:
    import signal

    try:
        os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def _expect_loop(proc: subprocess.Popen, req: ExecRequest, start: float) -> ExecResult:
    sel = selectors.DefaultSelector()
    os.set_blocking(proc.stdout.fileno(), False)
    os.set_blocking(proc.stderr.fileno(), False)
    sel.register(proc.stdout, selectors.EVENT_READ, "out")
    sel.register(proc.stderr, selectors.EVENT_READ, "err")
    buffers = {"out": "", "err": ""}
    replies: list[str] = []
    answered: set[int] = set()
    deadline = start + req.timeout_s
    while True:
        if time.monotonic() > deadline:
            _kill_group(proc)
            return ExecResult(
                None, buffers["out"], buffers["err"], _ms_since(start),
                killed_reason="timeout", auto_responses=tuple(replies),
            )
        for key, _ in sel.select(timeout=0.05):
            chunk = key.fileobj.read()
            if chunk:
                buffers[key.data] += chunk
        for idx, (pattern, reply) in enumerate(req.stdin_script):
            if idx in answered:
                continue
            if re.search(pattern, buffers["out"], re.IGNORECASE):
                try:
                    proc.stdin.write(reply + "\n")
                    proc.stdin.flush()
                    replies.append(reply)
                except (BrokenPipeError, OSError):
                    pass
                answered.add(idx)
        if proc.poll() is not None:
            for key, _ in sel.select(timeout=0.05):
                chunk = key.fileobj.read()
                if chunk:
                    buffers[key.data] += chunk
            return ExecResult(
                proc.returncode, buffers["out"], buffers["err"], _ms_since(start),
                auto_responses=tuple(replies),
            )


def _ms_since(start: float) -> int:
    return int((time.monotonic() - start) * 1000)


# --- engine API client ---------------------------------------------------------------


class DockerEngineRuntime(ContainerRuntime):
    """Thin client over the container daemon's HTTP engine API.

    The daemon endpoint comes from AE_DOCKER_HOST (unix:///var/run/docker.sock
    by default, or tcp://host:port). This is the only module that speaks the
    wire protocol; everything above stays daemon-agnostic.
    """

    def __init__(self, host: str | None = None, api_version: str = "v1.41", timeout: int = 600):
        import httpx

        self._httpx = httpx
        raw = host or os.environ.get("AE_DOCKER_HOST") or "unix:///var/run/docker.sock"
        self._host = raw
        self._api = api_version
        if raw.startswith("unix://"):
            self._uds_path = raw[len("unix://"):]
            transport = httpx.HTTPTransport(uds=self._uds_path)
            self._client = httpx.Client(transport=transport, base_url="http://docker", timeout=timeout)
        else:
            self._uds_path = None
            base = raw.replace("tcp://", "http://")
            self._client = httpx.Client(base_url=base, timeout=timeout)
        self._sessions: dict[str, "_EngineSession"] = {}
        self._session_counter = 0

    # -- plumbing --

    def _request(self, method: str, path: str, **kwargs):
        try:
            return self._client.request(method, f"/{self._api}{path}", **kwargs)
        except self._httpx.TransportError as exc:
            raise DaemonUnreachable(str(exc)) from exc

    # -- images --

    def build_image(self, dockerfile: str, tag: str) -> str:
        parse_dockerfile(dockerfile)
        buf = io.BytesIO()
        with tarfile.open(fileobj=buf, mode="w") as tar:
            data = dockerfile.encode("utf-8")
            info = tarfile.TarInfo("Dockerfile")
            info.size = len(data)
            tar.addfile(info, io.BytesIO(data))
        resp = self._request(
            "POST",
            f"/build?t={tag}&rm=1",
            content=buf.getvalue(),
            headers={"Content-Type": "application/x-tar"},
        )
        log_lines, error = [], None
        for line in resp.iter_lines():
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                continue
            if "stream" in obj:
                log_lines.append(obj["stream"])
            if "error" in obj:
                error = obj["error"]
        if resp.status_code >= 400 or error:
            raise BuildError(error or f"build failed ({resp.status_code})", log="".join(log_lines))
        return tag

    def pull_image(self, ref: str) -> str:
        name, _, tag = ref.partition(":")
        resp = self._request("POST", f"/images/create?fromImage={name}&tag={tag or 'latest'}")
        body = resp.read().decode("utf-8", "replace")
        if resp.status_code == 404 or '"error"' in body.lower() and "not found" in body.lower():
            raise NotFound(ref)
        if resp.status_code >= 400:
            raise BuildError(f"pull failed ({resp.status_code})", log=body)
        return ref

    def image_entrypoint(self, image: str) -> str:
        resp = self._request("GET", f"/images/{image}/json")
        if resp.status_code != 200:
            return ""
        cfg = resp.json().get("Config") or {}
        parts = cfg.get("Entrypoint") or cfg.get("Cmd") or []
        return " ".join(parts) if isinstance(parts, list) else str(parts)

    # -- containers --

    def create_container(self, image: str, name: str, mounts: list[tuple[str, str]]) -> str:
        payload = {
            "Image": image,
            # Keep the container alive for command injection; the original
            # entrypoint is handled by the execution-mode machinery above.
            "Entrypoint": ["/bin/sh"],
            "Cmd": ["-c", "sleep infinity"],
            "HostConfig": {"Binds": [f"{h}:{c}" for h, c in mounts]},
        }
        resp = self._request("POST", f"/containers/create?name={name}", json=payload)
        if resp.status_code == 409:
            raise NameConflict(name)
        if resp.status_code == 404:
            raise NotFound(image)
        if resp.status_code >= 400:
            raise BuildError(f"create failed: {resp.text}")
        return name

    def start_container(self, name: str) -> None:
        resp = self._request("POST", f"/containers/{name}/start")
        if resp.status_code not in (204, 304):
            raise ContainerNotRunning(f"{name}: {resp.text}")

    def container_info(self, name: str) -> dict:
        resp = self._request("GET", f"/containers/{name}/json")
        if resp.status_code == 404:
            raise NotFound(name)
        return resp.json()

    # -- exec --

    def exec_in_container(self, req: ExecRequest) -> ExecResult:
        name = req.target.split(":", 1)[1]
        start = time.monotonic()
        command = req.command
        if req.stdin_script:
            # Pre-pipe scripted replies; direct exec has no interactive channel.
            feed = "".join(reply + "\n" for _, reply in req.stdin_script)
            command = f"printf %s {shlex.quote(feed)} | {{ {command}; }}"
        wrapped = f"timeout -k 10 {req.timeout_s} /bin/sh -c {shlex.quote(command)}"
        payload = {
            "AttachStdout": True,
            "AttachStderr": True,
            "Cmd": ["/bin/sh", "-c", wrapped],
            "WorkingDir": req.workdir or "/",
            "Env": [f"{k}={v}" for k, v in req.env_vars.items()],
        }
        resp = self._request("POST", f"/containers/{name}/exec", json=payload)
        if resp.status_code == 404:
            raise ContainerNotRunning(name)
        if resp.status_code == 409:
            raise ContainerNotRunning(f"{name} is not running")
        exec_id = resp.json()["Id"]
        started = self._request("POST", f"/exec/{exec_id}/start", json={"Detach": False, "Tty": False})
        stdout, stderr = _demux_stream(started.read())
        inspect = self._request("GET", f"/exec/{exec_id}/json").json()
        code = inspect.get("ExitCode")
        if code == 124:  # GNU timeout: command exceeded the wall-clock bound
            return ExecResult(None, stdout, stderr, _ms_since(start), killed_reason="timeout")
        return ExecResult(code, stdout, stderr, _ms_since(start))

    # -- sessions --

    def start_detached_shell(self, container: str, entrypoint: str) -> str:
        if self._uds_path is None:
            raise SessionStartFailure("detached sessions require a unix-socket daemon endpoint")
        payload = {
            "AttachStdin": True,
            "AttachStdout": True,
            "AttachStderr": True,
            "Tty": False,
            "Cmd": ["/bin/sh"],
        }
        self.start_container(container)
        resp = self._request("POST", f"/containers/{container}/exec", json=payload)
        if resp.status_code >= 400:
            raise SessionStartFailure(f"{container}: {resp.text}")
        exec_id = resp.json()["Id"]
        try:
            stream = _HijackedExecStream(self._uds_path, self._api, exec_id)
        except OSError as exc:
            raise SessionStartFailure(str(exc)) from exc
        self._session_counter += 1
        name = f"sess-{container}-{self._session_counter:02d}"
        session = _EngineSession(name=name, stream=stream, token=os.urandom(16).hex(), transcript=[])
        self._sessions[name] = session
        if entrypoint.strip():
            session.transcript.append(entrypoint)
            stream.write(entrypoint + "\n")  # replay the original entry command first
        return name

    def send_to_session(
        self, session: str, command: str, timeout_s: int = 1800, stdin_script: tuple[tuple[str, str], ...] = ()
    ) -> ExecResult:
        sess = self._sessions.get(session)
        if sess is None or not sess.stream.alive:
            raise SessionDead(session)
        start = time.monotonic()
        sess.transcript.append(command)
        sess.stream.write(wrap_session_command(command, sess.token) + "\n")
        raw = sess.stream.read_until(
            lambda buf: re.search(rf"__AE_SENTINEL_{sess.token}_EXIT_\d+__", buf) is not None,
            timeout_s,
        )
        stdout, code = split_sentinel_output(raw, sess.token)
        if code is None:
            return ExecResult(None, stdout, "", _ms_since(start), killed_reason="timeout")
        return ExecResult(code, stdout, "", _ms_since(start))

    # -- stats / host --

    def sample_stats(self, container: str) -> StatsSample:
        resp = self._request("GET", f"/containers/{container}/stats?stream=false")
        if resp.status_code != 200:
            raise StatsUnavailable(container)
        doc = resp.json()
        try:
            cpu = doc["cpu_stats"]
            pre = doc["precpu_stats"]
            cpu_delta = cpu["cpu_usage"]["total_usage"] - pre["cpu_usage"]["total_usage"]
            sys_delta = cpu.get("system_cpu_usage", 0) - pre.get("system_cpu_usage", 0)
            online = cpu.get("online_cpus") or len(cpu["cpu_usage"].get("percpu_usage") or [1])
            pct = (cpu_delta / sys_delta) * online * 100.0 if sys_delta > 0 else 0.0
            mem = doc.get("memory_stats", {}).get("usage", 0)
        except (KeyError, TypeError, ZeroDivisionError) as exc:
            raise StatsUnavailable(f"{container}: {exc}") from exc
        return StatsSample(container=container, cpu_pct=pct, mem_bytes=mem, at=time.time())

    def host_exec(self, req: ExecRequest) -> ExecResult:
        return host_exec_impl(req)


@dataclass
class _EngineSession:
    name: str
    stream: "_HijackedExecStream"
    token: str
    transcript: list[str]


class _HijackedExecStream:
    """Raw attached exec stream over the daemon's unix socket."""

    def __init__(self, uds_path: str, api: str, exec_id: str):
        import socket

        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.connect(uds_path)
        body = json.dumps({"Detach": False, "Tty": False}).encode()
        request = (
            f"POST /{api}/exec/{exec_id}/start HTTP/1.1\r\n"
            "Host: docker\r\n"
            "Content-Type: application/json\r\n"
            "Connection: Upgrade\r\n"
            "Upgrade: tcp\r\n"
            f"Content-Length: {len(body)}\r\n\r\n"
        ).encode() + body
        self._sock.sendall(request)
        # consume HTTP response headers; the stream follows
        buf = b""
        while b"\r\n\r\n" not in buf:
            chunk = self._sock.recv(4096)
            if not chunk:
                raise OSError("daemon closed the attach stream")
            buf += chunk
        self._residue = buf.split(b"\r\n\r\n", 1)[1]
        self.alive = True

    def write(self, text: str) -> None:
        try:
            self._sock.sendall(text.encode("utf-8"))
        except OSError:
            self.alive = False
            raise SessionDead("attach stream closed")

    def read_until(self, predicate, timeout_s: int) -> str:
        deadline = time.monotonic() + timeout_s
        raw = self._residue
        self._residue = b""
        text = _demux_stream(raw)[0]
        while not predicate(text):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            self._sock.settimeout(min(remaining, 1.0))
            try:
                chunk = self._sock.recv(65536)
            except TimeoutError:
                continue
            except OSError:
                self.alive = False
                break
            if not chunk:
                self.alive = False
                break
            raw += chunk
            out, err = _demux_stream(raw)
            text = out + err
        return text


def _demux_stream(raw: bytes) -> tuple[str, str]:
    """Demultiplex the daemon's 8-byte-framed stdout/stderr stream."""
    out, err = bytearray(), bytearray()
    i = 0
    while i + 8 <= len(raw):
        kind = raw[i]
        length = int.from_bytes(raw[i + 4 : i + 8], "big")
        frame = raw[i + 8 : i + 8 + length]
        if kind == 2:
            err.extend(frame)
        else:
            out.extend(frame)
        i += 8 + length
    if i == 0 and raw:  # not framed (TTY or raw stream)
        out.extend(raw)
    return out.decode("utf-8", "replace"), err.decode("utf-8", "replace")
