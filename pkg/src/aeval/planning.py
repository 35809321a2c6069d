"""Planning stage: validate artifact nodes against the repository, construct
the container substrate via three adaptive strategies, normalize execution
to host-centric scheduling, and emit the four-stage meta-task plan."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .acquisition import PaperSummary, RepoHandle
from .agent import AgentSession, fenced_blocks
from .config import Settings
from .dockerfile import is_standard_entrypoint, parse_dockerfile
from .errors import (
    BuildError,
    BuildFailedFinal,
    DaemonUnreachable,
    InvalidDockerfile,
    NotFound,
    UnparseableReply,
)
from .graph import ARTIFACT_INPUT, ARTIFACT_OUTPUT, COMMAND, AEGraph
from .graph_builder import DocBundle
from .runtime import ContainerRuntime

log = logging.getLogger(__name__)

DOCKERFILE_REUSE = "DockerfileReuse"
SYNTHESIS = "Synthesis"
TEMPLATE_FALLBACK = "TemplateFallback"

DIRECT_EXEC = "DirectExec"
DETACHED_SHELL_REPLAY = "DetachedShellReplay"

STAGE_ORDER = ("Check", "Run", "Verify", "Evaluate")

FALLBACK_TEMPLATE = """\
FROM ubuntu:22.04
RUN apt-get update && apt-get install -y --no-install-recommends \\
    python3 python3-pip git make curl ca-certificates \\
    && rm -rf /var/lib/apt/lists/*
WORKDIR /workspace
ENTRYPOINT ["/bin/bash"]
"""

_MANIFEST_NAMES = (
    "requirements.txt",
    "environment.yml",
    "environment.yaml",
    "setup.py",
    "pyproject.toml",
    "package.json",
    "Cargo.toml",
    "go.mod",
    "pom.xml",
    "Gemfile",
)

_BASE_IMAGE_ALLOWLIST = (
    "ubuntu",
    "debian",
    "python",
    "node",
    "golang",
    "rust",
    "openjdk",
    "eclipse-temurin",
    "ruby",
    "gcc",
    "continuumio/miniconda3",
)


# --- types -----------------------------------------------------------------------


@dataclass
class ContainerEnv:
    """Normalized description of the execution substrate."""

    container_name: str
    image_ref: str
    construction_strategy: str
    exec_mode: str
    entrypoint: str
    path_map: tuple[tuple[str, str], ...]
    build_attempts: int
    session_name: str | None = None

    def to_json(self) -> dict:
        return {
            "container_name": self.container_name,
            "image_ref": self.image_ref,
            "construction_strategy": self.construction_strategy,
            "exec_mode": self.exec_mode,
            "entrypoint": self.entrypoint,
            "path_map": [list(pair) for pair in self.path_map],
            "build_attempts": self.build_attempts,
            "session_name": self.session_name,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ContainerEnv":
        return cls(
            container_name=doc["container_name"],
            image_ref=doc["image_ref"],
            construction_strategy=doc["construction_strategy"],
            exec_mode=doc["exec_mode"],
            entrypoint=doc["entrypoint"],
            path_map=tuple((h, c) for h, c in doc["path_map"]),
            build_attempts=doc["build_attempts"],
            session_name=doc.get("session_name"),
        )


@dataclass
class ArtifactValidation:
    node: str
    status: str  # Found | Substituted | Missing
    original_path: str
    resolved_path: str | None = None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class StageSpec:
    stage: str
    tasks: list[dict] = field(default_factory=list)
    expected_outputs: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"stage": self.stage, "tasks": self.tasks, "expected_outputs": self.expected_outputs}


@dataclass
class MetaTaskSpec:
    repo_context: str
    agent_role: str
    stages: list[StageSpec]
    graph_ref: str
    env_ref: ContainerEnv

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.stage == name:
                return s
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "repo_context": self.repo_context,
            "agent_role": self.agent_role,
            "stages": [s.to_json() for s in self.stages],
            "graph_ref": self.graph_ref,
            "env_ref": self.env_ref.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MetaTaskSpec":
        return cls(
            repo_context=doc["repo_context"],
            agent_role=doc["agent_role"],
            stages=[
                StageSpec(s["stage"], list(s["tasks"]), list(s["expected_outputs"]))
                for s in doc["stages"]
            ],
            graph_ref=doc["graph_ref"],
            env_ref=ContainerEnv.from_json(doc["env_ref"]),
        )


@dataclass
class StrategyChoice:
    strategy: str
    dockerfile_path: str | None = None
    image_ref: str | None = None
    manifest_paths: tuple[str, ...] = ()


@dataclass
class EnvRequest:
    repo: RepoHandle
    choice: StrategyChoice
    dockerfile_text: str | None
    container_name: str
    settings: Settings
    llm: AgentSession | None = None


# --- artifact validation -----------------------------------------------------------


def validate_artifacts(graph: AEGraph, repo: RepoHandle) -> tuple[AEGraph, list[ArtifactValidation]]:
    """Check Artifact node paths against the tree; substitute unique basename
    matches; flag missing inputs. Output artifacts may legitimately not exist
    yet and are left alone."""
    root = Path(repo.local_root)
    input_ids = {e.src for e in graph.edges if e.kind == ARTIFACT_INPUT}
    by_basename: dict[str, list[Path]] = {}
    for path in root.rglob("*"):
        if path.is_file():
            by_basename.setdefault(path.name, []).append(path.relative_to(root))
    validations: list[ArtifactValidation] = []
    for node in sorted(graph.artifact_nodes(), key=lambda n: n.id):
        declared = node.path
        if (root / declared).exists():
            validations.append(ArtifactValidation(node.id, "Found", declared, declared))
            continue
        if node.id not in input_ids:
            continue  # pure output, nothing to verify before execution
        matches = by_basename.get(Path(declared).name, [])
        if len(matches) == 1:
            resolved = str(matches[0])
            graph = graph.replace_node(dataclasses.replace(node, path=resolved))
            validations.append(ArtifactValidation(node.id, "Substituted", declared, resolved))
        else:
            validations.append(ArtifactValidation(node.id, "Missing", declared, None))
    return graph, validations


# --- strategy selection --------------------------------------------------------------


def select_strategy(repo: RepoHandle) -> StrategyChoice:
    """Dockerfile or documented image -> reuse; manifests -> synthesis;
    otherwise the fixed base template."""
    root = Path(repo.local_root)
    for candidate in ("Dockerfile", "docker/Dockerfile"):
        if (root / candidate).is_file():
            return StrategyChoice(DOCKERFILE_REUSE, dockerfile_path=candidate)
    for path in sorted(root.glob("Dockerfile.*")):
        return StrategyChoice(DOCKERFILE_REUSE, dockerfile_path=str(path.relative_to(root)))
    image = _documented_image(root)
    if image:
        return StrategyChoice(DOCKERFILE_REUSE, image_ref=image)
    manifests = tuple(
        name for name in _MANIFEST_NAMES if (root / name).is_file()
    )
    if manifests:
        return StrategyChoice(SYNTHESIS, manifest_paths=manifests)
    return StrategyChoice(TEMPLATE_FALLBACK)


def _documented_image(root: Path) -> str | None:
    for path in sorted(root.iterdir()):
        if path.is_file() and path.name.lower().startswith("readme"):
            text = path.read_text(encoding="utf-8", errors="replace")
            match = re.search(r"docker\s+pull\s+([^\s`'\"]+)", text)
            if match:
                return match.group(1)
    return None


def manifest_bundle(repo: RepoHandle, choice: StrategyChoice) -> DocBundle:
    root = Path(repo.local_root)
    bundle = DocBundle()
    for rel in choice.manifest_paths:
        bundle.files.append((rel, (root / rel).read_text(encoding="utf-8", errors="replace")))
    return bundle


# --- dockerfile synthesis --------------------------------------------------------------


_SYNTH_REQUEST = """\
Write a Dockerfile for the project whose dependency manifests follow. Use
ubuntu:22.04 or an official language base image. Set WORKDIR /workspace;
the repository is bind-mounted there, so install dependencies from the
manifests (COPY them if needed). Reply with one fenced code block containing
only the Dockerfile.

Manifests:
"""


def synthesize_dockerfile(manifests: DocBundle, llm: AgentSession) -> str:
    """Backend-synthesized Dockerfile, grammar-checked locally."""
    if not manifests.files:
        raise ValueError("at least one dependency manifest is required")
    request = _SYNTH_REQUEST + manifests.render()

    def parser(reply: str) -> str:
        blocks = fenced_blocks(reply) or [reply]
        last_error = None
        for block in blocks:
            try:
                df = parse_dockerfile(block)
            except InvalidDockerfile as exc:
                last_error = exc
                continue
            base = df.base_image.split(":")[0]
            if base not in _BASE_IMAGE_ALLOWLIST:
                last_error = InvalidDockerfile(f"base image {df.base_image!r} not in allowlist")
                continue
            return block.strip() + "\n"
        raise ValueError(str(last_error) if last_error else "no Dockerfile block in reply")

    try:
        return llm.ask(request, parser)
    except UnparseableReply as exc:
        raise InvalidDockerfile(f"synthesis failed after re-prompts: {exc}") from exc


def _repair_dockerfile(llm: AgentSession | None, dockerfile: str, build_log: str) -> str:
    if llm is None:
        return dockerfile
    request = (
        "The Dockerfile below failed to build. Repair it and reply with one "
        "fenced code block containing only the corrected Dockerfile.\n\n"
        f"Build log:\n{build_log[-4000:]}\n\nDockerfile:\n{dockerfile}"
    )

    def parser(reply: str) -> str:
        blocks = fenced_blocks(reply) or [reply]
        for block in blocks:
            try:
                parse_dockerfile(block)
                return block.strip() + "\n"
            except InvalidDockerfile:
                continue
        raise ValueError("no valid Dockerfile in repair reply")

    try:
        return llm.ask(request, parser)
    except Exception as exc:  # keep the old text on any repair failure
        log.warning("dockerfile repair unavailable: %s", exc)
        return dockerfile


# --- container construction --------------------------------------------------------------


def container_name_for(repo: RepoHandle) -> str:
    digest = hashlib.sha256(str(repo.local_root).encode("utf-8")).hexdigest()[:12]
    return f"aeval-{digest}"


def build_container(request: EnvRequest, runtime: ContainerRuntime) -> ContainerEnv:
    """Build or pull the image with bounded attempts, then create the container.

    Up to settings.image_build_attempts tries under the chosen strategy (with
    backend-proposed Dockerfile repair between Synthesis attempts), then a
    single template-fallback attempt (plus one retry only if the daemon was
    unreachable). Raises BuildFailedFinal when even the fallback fails.
    """
    settings = request.settings
    strategy = request.choice.strategy
    dockerfile_text = request.dockerfile_text
    image: str | None = None
    attempts = 0
    last_log = ""

    if strategy != TEMPLATE_FALLBACK:
        for attempt in range(1, settings.image_build_attempts + 1):
            attempts = attempt
            try:
                if request.choice.image_ref and dockerfile_text is None:
                    image = runtime.pull_image(request.choice.image_ref)
                else:
                    image = runtime.build_image(dockerfile_text, f"{request.container_name}:latest")
                break
            except NotFound as exc:
                last_log = str(exc)
                log.info("image pull not found; downgrading to template: %s", exc)
                break
            except BuildError as exc:
                last_log = exc.log or str(exc)
                log.info("build attempt %d failed: %s", attempt, exc)
                if strategy == SYNTHESIS and attempt < settings.image_build_attempts:
                    dockerfile_text = _repair_dockerfile(request.llm, dockerfile_text, last_log)

    if image is None:
        strategy = TEMPLATE_FALLBACK
        dockerfile_text = FALLBACK_TEMPLATE
        attempts = 0
        for _ in range(2):  # one attempt, one extra only for a daemon hiccup
            attempts += 1
            try:
                image = runtime.build_image(dockerfile_text, f"{request.container_name}:fallback")
                break
            except DaemonUnreachable:
                if attempts >= 2:
                    raise
            except BuildError as exc:
                raise BuildFailedFinal(
                    f"template fallback build failed: {exc}"
                ) from exc
        if image is None:
            raise BuildFailedFinal(f"image construction failed: {last_log}")

    entrypoint = ""
    if dockerfile_text is not None:
        entrypoint = parse_dockerfile(dockerfile_text).entrypoint
    elif request.choice.image_ref:
        entrypoint = runtime.image_entrypoint(request.choice.image_ref)

    mounts = [(str(request.repo.local_root), settings.container_workdir)]
    runtime.create_container(image, request.container_name, mounts)
    exec_mode = DIRECT_EXEC if is_standard_entrypoint(entrypoint) else DETACHED_SHELL_REPLAY
    if exec_mode == DIRECT_EXEC:
        runtime.start_container(request.container_name)
    # DetachedShellReplay containers stay created-paused until the session starts.
    return ContainerEnv(
        container_name=request.container_name,
        image_ref=image,
        construction_strategy=strategy,
        exec_mode=exec_mode,
        entrypoint=entrypoint,
        path_map=tuple(mounts),
        build_attempts=attempts,
    )


def normalize_execution(env: ContainerEnv, runtime: ContainerRuntime) -> ContainerEnv:
    """Decide the injection mode and make the substrate ready; idempotent.

    Standard entrypoints take direct command injection; custom entrypoints
    get a detached shell session whose first instruction replays the
    original entrypoint.
    """
    if env.exec_mode == DIRECT_EXEC:
        runtime.start_container(env.container_name)
        return env
    if env.session_name is not None:
        return env
    session = runtime.start_detached_shell(env.container_name, env.entrypoint)
    return dataclasses.replace(env, session_name=session)


# --- graph annotation ---------------------------------------------------------------


def annotate_graph_env(graph: AEGraph, env: ContainerEnv) -> AEGraph:
    """Label every Command with the container and rewrite absolute host paths."""
    for node in graph.command_nodes():
        text = node.text
        for host, container in env.path_map:
            text = text.replace(host.rstrip("/") + "/", container.rstrip("/") + "/")
            text = text.replace(host.rstrip("/"), container)
        updated = dataclasses.replace(node, env=f"container:{env.container_name}", text=text)
        graph = graph.replace_node(updated)
    return graph


# --- meta-task -------------------------------------------------------------------


_CLAIM_HINT_RE = re.compile(
    r"\b(accuracy|precision|recall|f1|auc|score|output|produce|generate|print|report|table|figure|result)\b",
    re.IGNORECASE,
)


def claims_from_summary(summary: PaperSummary | None) -> list[str]:
    if summary is None or not summary.evaluation_summary:
        return []
    sentences = re.split(r"(?<=[.!?])\s+|\n+", summary.evaluation_summary)
    claims = [s.strip() for s in sentences if len(s.strip()) > 10 and _CLAIM_HINT_RE.search(s)]
    return claims[:5]


def emit_meta_task(
    graph: AEGraph,
    env: ContainerEnv,
    summary: PaperSummary | None,
    validations: list[ArtifactValidation] | None = None,
    graph_ref: str = "ae_graph.planned.json",
) -> MetaTaskSpec:
    """Four stages in canonical order: Check, Run, Verify, Evaluate."""
    validations = validations or []
    check = StageSpec("Check", expected_outputs=["all required input artifacts resolved"])
    for v in validations:
        if v.status == "Missing":
            check.tasks.append({"kind": "recheck-artifact", "node": v.node, "path": v.original_path})
    check.tasks.append({"kind": "container-ready", "container": env.container_name})

    run = StageSpec("Run", expected_outputs=["every command node reaches a terminal state"])
    node_map = graph.node_map()
    for node_id in graph.topological_order():
        node = node_map[node_id]
        if node.kind == COMMAND:
            run.tasks.append({"kind": "run-command", "node": node.id, "text": node.text})

    verify = StageSpec("Verify", expected_outputs=["each claim mapped to a verdict"])
    produced = {e.dst for e in graph.edges if e.kind == ARTIFACT_OUTPUT}
    for node in sorted(graph.artifact_nodes(), key=lambda n: n.id):
        if node.id in produced:
            verify.tasks.append({"kind": "artifact-exists", "node": node.id, "path": node.path})
    for claim in claims_from_summary(summary):
        verify.tasks.append({"kind": "claim", "text": claim})

    evaluate = StageSpec(
        "Evaluate",
        tasks=[
            {
                "kind": "badge-rule",
                "text": "functional iff every command node succeeded and no verify claim is unsupported",
            }
        ],
        expected_outputs=["badge decision with rationale"],
    )
    repo_context = (
        f"strategy={env.construction_strategy} exec_mode={env.exec_mode} "
        f"commands={len(graph.command_nodes())} artifacts={len(graph.artifact_nodes())}"
    )
    return MetaTaskSpec(
        repo_context=repo_context,
        agent_role="Execute the planned workflow, recover from failures, and judge badge eligibility.",
        stages=[check, run, verify, evaluate],
        graph_ref=graph_ref,
        env_ref=env,
    )


# --- orchestration -------------------------------------------------------------------


@dataclass
class PlanningResult:
    graph: AEGraph
    env: ContainerEnv
    meta: MetaTaskSpec
    validations: list[ArtifactValidation]


def plan(
    graph: AEGraph,
    repo: RepoHandle,
    summary: PaperSummary | None,
    llm: AgentSession,
    runtime: ContainerRuntime,
    settings: Settings,
    workdir: Path | None = None,
) -> PlanningResult:
    """Full planning pass; emits the planned graph, env, and meta-task files."""
    graph, validations = validate_artifacts(graph, repo)
    choice = select_strategy(repo)
    dockerfile_text = None
    if choice.strategy == DOCKERFILE_REUSE and choice.dockerfile_path:
        dockerfile_text = (Path(repo.local_root) / choice.dockerfile_path).read_text(
            encoding="utf-8", errors="replace"
        )
    elif choice.strategy == SYNTHESIS:
        dockerfile_text = synthesize_dockerfile(manifest_bundle(repo, choice), llm)
    elif choice.strategy == TEMPLATE_FALLBACK:
        dockerfile_text = FALLBACK_TEMPLATE
    env = build_container(
        EnvRequest(
            repo=repo,
            choice=choice,
            dockerfile_text=dockerfile_text,
            container_name=container_name_for(repo),
            settings=settings,
            llm=llm,
        ),
        runtime,
    )
    env = normalize_execution(env, runtime)
    graph = annotate_graph_env(graph, env)
    meta = emit_meta_task(graph, env, summary, validations)
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
        (workdir / "ae_graph.planned.json").write_text(graph.serialize(), encoding="utf-8")
        (workdir / "container_env.json").write_text(
            json.dumps(env.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (workdir / "meta_task.json").write_text(
            json.dumps(meta.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return PlanningResult(graph=graph, env=env, meta=meta, validations=validations)
