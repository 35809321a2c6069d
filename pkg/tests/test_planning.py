"""Planning tests: artifact validation, strategy selection, synthesis,
bounded container construction with fallback, execution normalization, and
the meta-task layout."""

from __future__ import annotations

import pytest

from aeval.acquisition import PaperSummary, RepoHandle
from aeval.agent import AgentSession, mock_backend
from aeval.config import Settings
from aeval.errors import BuildFailedFinal, DaemonUnreachable, InvalidDockerfile
from aeval.graph import (
    ARTIFACT_INPUT,
    ARTIFACT_OUTPUT,
    SEQUENTIAL,
    AEGraph,
    Edge,
    Node,
)
from aeval.planning import (
    DETACHED_SHELL_REPLAY,
    DIRECT_EXEC,
    DOCKERFILE_REUSE,
    FALLBACK_TEMPLATE,
    SYNTHESIS,
    TEMPLATE_FALLBACK,
    EnvRequest,
    StrategyChoice,
    annotate_graph_env,
    build_container,
    claims_from_summary,
    container_name_for,
    emit_meta_task,
    manifest_bundle,
    normalize_execution,
    plan,
    select_strategy,
    synthesize_dockerfile,
    validate_artifacts,
)
from aeval.runtime import FakeRuntime

from conftest import host_env


def repo_at(tmp_path, files: dict) -> RepoHandle:
    for rel, content in files.items():
        path = tmp_path / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
    return RepoHandle(str(tmp_path), str(tmp_path), tmp_path, "pre-downloaded")


def graph_with_artifacts() -> AEGraph:
    g = (
        AEGraph()
        .add_node(Node.start("start-000", use_docker=False))
        .add_node(Node.command("command-000", "python run.py", env="host"))
        .add_node(Node.artifact("artifact-000", "data/input.csv", "input-data"))
        .add_node(Node.artifact("artifact-001", "results/out.txt", "output-data"))
        .add_edge(Edge("start-000", "command-000", SEQUENTIAL))
        .add_edge(Edge("artifact-000", "command-000", ARTIFACT_INPUT))
        .add_edge(Edge("command-000", "artifact-001", ARTIFACT_OUTPUT))
    )
    return g


DOCKERFILE_REPLY = (
    "```dockerfile\n"
    "FROM python:3.11-slim\n"
    "WORKDIR /workspace\n"
    "COPY requirements.txt /workspace/requirements.txt\n"
    "RUN pip install -r requirements.txt\n"
    "```"
)


class TestValidateArtifacts:
    def test_existing_path_found(self, tmp_path):
        repo = repo_at(tmp_path, {"data/input.csv": "1"})
        _, validations = validate_artifacts(graph_with_artifacts(), repo)
        by_node = {v.node: v for v in validations}
        assert by_node["artifact-000"].status == "Found"

    def test_unique_basename_substituted(self, tmp_path):
        repo = repo_at(tmp_path, {"datasets/input.csv": "1"})
        graph, validations = validate_artifacts(graph_with_artifacts(), repo)
        by_node = {v.node: v for v in validations}
        assert by_node["artifact-000"].status == "Substituted"
        assert by_node["artifact-000"].resolved_path == "datasets/input.csv"
        assert graph.node("artifact-000").path == "datasets/input.csv"
        # oracle: exhaustive filesystem walk for that basename
        matches = [p for p in tmp_path.rglob("input.csv")]
        assert len(matches) == 1

    def test_ambiguous_basename_is_missing(self, tmp_path):
        repo = repo_at(tmp_path, {"a/input.csv": "1", "b/input.csv": "2"})
        _, validations = validate_artifacts(graph_with_artifacts(), repo)
        by_node = {v.node: v for v in validations}
        assert by_node["artifact-000"].status == "Missing"

    def test_absent_input_is_missing(self, tmp_path):
        repo = repo_at(tmp_path, {"unrelated.txt": "x"})
        _, validations = validate_artifacts(graph_with_artifacts(), repo)
        by_node = {v.node: v for v in validations}
        assert by_node["artifact-000"].status == "Missing"
        assert by_node["artifact-000"].resolved_path is None

    def test_nonexistent_output_not_flagged(self, tmp_path):
        repo = repo_at(tmp_path, {"data/input.csv": "1"})
        _, validations = validate_artifacts(graph_with_artifacts(), repo)
        assert "artifact-001" not in {v.node for v in validations}


class TestSelectStrategy:
    def test_dockerfile_at_root(self, tmp_path):
        repo = repo_at(tmp_path, {"Dockerfile": "FROM ubuntu:22.04\n"})
        assert select_strategy(repo).strategy == DOCKERFILE_REUSE

    def test_requirements_only(self, tmp_path):
        repo = repo_at(tmp_path, {"requirements.txt": "numpy\n"})
        choice = select_strategy(repo)
        assert choice.strategy == SYNTHESIS
        assert choice.manifest_paths == ("requirements.txt",)

    def test_neither_falls_back(self, tmp_path):
        repo = repo_at(tmp_path, {"README.md": "# bare"})
        assert select_strategy(repo).strategy == TEMPLATE_FALLBACK

    def test_documented_pull_reference(self, tmp_path):
        repo = repo_at(tmp_path, {"README.md": "Run `docker pull ghcr.io/x/tool:1.2` first."})
        choice = select_strategy(repo)
        assert choice.strategy == DOCKERFILE_REUSE
        assert choice.image_ref == "ghcr.io/x/tool:1.2"


class TestSynthesizeDockerfile:
    def _manifests(self, tmp_path):
        repo = repo_at(tmp_path, {"requirements.txt": "numpy\npandas\n"})
        return manifest_bundle(repo, StrategyChoice(SYNTHESIS, manifest_paths=("requirements.txt",)))

    def test_scripted_success(self, tmp_path):
        session = AgentSession("p", mock_backend([DOCKERFILE_REPLY]))
        text = synthesize_dockerfile(self._manifests(tmp_path), session)
        assert text.startswith("FROM python:3.11-slim")
        assert "RUN pip install -r requirements.txt" in text

    def test_prose_then_dockerfile_two_calls(self, tmp_path):
        backend = mock_backend(["let me think about this...", DOCKERFILE_REPLY])
        synthesize_dockerfile(self._manifests(tmp_path), AgentSession("p", backend))
        assert len(backend.prompts) == 2

    def test_empty_manifests_precondition(self):
        from aeval.graph_builder import DocBundle

        with pytest.raises(ValueError):
            synthesize_dockerfile(DocBundle(), AgentSession("p", mock_backend(["x"])))

    def test_disallowed_base_image_rejected(self, tmp_path):
        evil = "```dockerfile\nFROM shady/unknown:1\nRUN true\n```"
        backend = mock_backend([evil, evil, evil])
        with pytest.raises(InvalidDockerfile):
            synthesize_dockerfile(self._manifests(tmp_path), AgentSession("p", backend))


def env_request(tmp_path, choice, dockerfile=None, llm=None, repo=None):
    repo = repo or repo_at(tmp_path, {"README.md": "# r"})
    return EnvRequest(
        repo=repo,
        choice=choice,
        dockerfile_text=dockerfile,
        container_name="aeval-test",
        settings=Settings(),
        llm=llm,
    )


class TestBuildContainer:
    def test_success_first_attempt(self, tmp_path):
        fake = FakeRuntime(build_script=({"ok": True},))
        env = build_container(
            env_request(tmp_path, StrategyChoice(SYNTHESIS), dockerfile="FROM python:3.11\nRUN true\n"),
            fake,
        )
        assert env.build_attempts == 1
        assert env.construction_strategy == SYNTHESIS

    def test_fail_then_succeed_counts_two(self, tmp_path):
        fake = FakeRuntime(build_script=({"ok": False, "log": "boom"}, {"ok": True}))
        env = build_container(
            env_request(tmp_path, StrategyChoice(SYNTHESIS), dockerfile="FROM python:3.11\nRUN true\n"),
            fake,
        )
        assert env.build_attempts == 2

    def test_three_failures_downgrade_to_template(self, tmp_path):
        fake = FakeRuntime(
            build_script=({"ok": False}, {"ok": False}, {"ok": False}, {"ok": True})
        )
        env = build_container(
            env_request(tmp_path, StrategyChoice(SYNTHESIS), dockerfile="FROM python:3.11\nRUN true\n"),
            fake,
        )
        assert env.construction_strategy == TEMPLATE_FALLBACK
        builds = [c for c in fake.daemon_calls if c[0] == "build_image"]
        assert len(builds) == 4  # three strategy attempts plus one fallback

    def test_fallback_failure_is_final(self, tmp_path):
        fake = FakeRuntime(build_script=({"ok": False}, {"ok": False}, {"ok": False}, {"ok": False}))
        with pytest.raises(BuildFailedFinal):
            build_container(
                env_request(tmp_path, StrategyChoice(SYNTHESIS), dockerfile="FROM python:3.11\nRUN true\n"),
                fake,
            )

    def test_repair_between_synthesis_attempts(self, tmp_path):
        fake = FakeRuntime(build_script=({"ok": False, "log": "E: no package"}, {"ok": True}))
        repaired = "```dockerfile\nFROM python:3.11\nRUN echo repaired\n```"
        llm = AgentSession("p", mock_backend([repaired]))
        env = build_container(
            env_request(
                tmp_path, StrategyChoice(SYNTHESIS), dockerfile="FROM python:3.11\nRUN true\n", llm=llm
            ),
            fake,
        )
        assert env.build_attempts == 2
        assert len(llm.backend.prompts) == 1  # a single repair consultation

    def test_pull_not_found_downgrades(self, tmp_path):
        fake = FakeRuntime(pull_results={"ghcr.io/x/t:1": "not-found"}, build_script=({"ok": True},))
        env = build_container(
            env_request(tmp_path, StrategyChoice(DOCKERFILE_REUSE, image_ref="ghcr.io/x/t:1")),
            fake,
        )
        assert env.construction_strategy == TEMPLATE_FALLBACK

    def test_daemon_down_propagates(self, tmp_path):
        fake = FakeRuntime(build_script=({"daemon_down": True},))
        with pytest.raises(DaemonUnreachable):
            build_container(
                env_request(tmp_path, StrategyChoice(SYNTHESIS), dockerfile="FROM python:3.11\nRUN true\n"),
                fake,
            )

    def test_never_more_than_three_per_strategy(self, tmp_path):
        fake = FakeRuntime(build_script=tuple({"ok": False} for _ in range(10)))
        with pytest.raises(BuildFailedFinal):
            build_container(
                env_request(tmp_path, StrategyChoice(SYNTHESIS), dockerfile="FROM python:3.11\nRUN true\n"),
                fake,
            )
        builds = [c for c in fake.daemon_calls if c[0] == "build_image"]
        assert len(builds) == 4


class TestNormalizeExecution:
    def _built_env(self, tmp_path, entrypoint):
        dockerfile = "FROM ubuntu:22.04\nWORKDIR /workspace\n"
        if entrypoint:
            dockerfile += f"ENTRYPOINT {entrypoint}\n"
        fake = FakeRuntime()
        env = build_container(
            env_request(tmp_path, StrategyChoice(DOCKERFILE_REUSE, dockerfile_path="Dockerfile"), dockerfile=dockerfile),
            fake,
        )
        return env, fake

    def test_standard_entrypoint_direct_exec(self, tmp_path):
        env, fake = self._built_env(tmp_path, '["/bin/bash"]')
        env = normalize_execution(env, fake)
        assert env.exec_mode == DIRECT_EXEC
        assert fake.sessions == {}

    def test_custom_entrypoint_replays_in_session(self, tmp_path):
        env, fake = self._built_env(tmp_path, '["python", "server.py"]')
        env = normalize_execution(env, fake)
        assert env.exec_mode == DETACHED_SHELL_REPLAY
        assert fake.sessions[env.session_name].transcript[0] == "python server.py"

    def test_idempotent(self, tmp_path):
        env, fake = self._built_env(tmp_path, '["python", "server.py"]')
        env1 = normalize_execution(env, fake)
        env2 = normalize_execution(env1, fake)
        assert env1 == env2
        assert len(fake.sessions) == 1

    def test_path_map_covers_mount(self, tmp_path):
        env, fake = self._built_env(tmp_path, "")
        env = normalize_execution(env, fake)
        assert env.path_map[0][1] == "/workspace"


class TestAnnotateGraph:
    def test_labels_and_path_rewrite(self):
        env = host_env()
        g = (
            AEGraph()
            .add_node(Node.start("start-000", use_docker=True))
            .add_node(Node.command("command-000", "python /repo/run.py", env="host"))
            .add_edge(Edge("start-000", "command-000", SEQUENTIAL))
        )
        g = annotate_graph_env(g, env)
        node = g.node("command-000")
        assert node.env == "container:box"
        assert node.text == "python /workspace/run.py"

    def test_no_dangling_env_labels(self):
        env = host_env()
        g = annotate_graph_env(graph_with_artifacts(), env)
        for node in g.command_nodes():
            assert node.env in ("host", f"container:{env.container_name}")


class TestMetaTask:
    def test_stage_order_canonical(self):
        meta = emit_meta_task(graph_with_artifacts(), host_env(), None, [])
        assert [s.stage for s in meta.stages] == ["Check", "Run", "Verify", "Evaluate"]

    def test_run_tasks_in_topological_order(self):
        g = (
            AEGraph()
            .add_node(Node.start("start-000", use_docker=False))
            .add_node(Node.command("command-000", "one", env="host"))
            .add_node(Node.command("command-001", "two", env="host"))
            .add_edge(Edge("start-000", "command-000", SEQUENTIAL))
            .add_edge(Edge("command-000", "command-001", SEQUENTIAL))
        )
        meta = emit_meta_task(g, host_env(), None, [])
        run = meta.stage("Run")
        assert [t["node"] for t in run.tasks] == ["command-000", "command-001"]

    def test_missing_artifact_in_check_stage(self):
        from aeval.planning import ArtifactValidation

        missing = ArtifactValidation("artifact-000", "Missing", "data/input.csv", None)
        meta = emit_meta_task(graph_with_artifacts(), host_env(), None, [missing])
        recheck = [t for t in meta.stage("Check").tasks if t["kind"] == "recheck-artifact"]
        assert recheck == [{"kind": "recheck-artifact", "node": "artifact-000", "path": "data/input.csv"}]

    def test_output_artifacts_in_verify_stage(self):
        meta = emit_meta_task(graph_with_artifacts(), host_env(), None, [])
        checks = [t for t in meta.stage("Verify").tasks if t["kind"] == "artifact-exists"]
        assert checks == [{"kind": "artifact-exists", "node": "artifact-001", "path": "results/out.txt"}]

    def test_claims_extracted_from_summary(self):
        summary = PaperSummary(
            "p",
            "The tool trains a model. It reports accuracy above 0.9 on the test set. Weather is nice.",
            [],
        )
        claims = claims_from_summary(summary)
        assert claims == ["It reports accuracy above 0.9 on the test set."]

    def test_round_trip_json(self):
        meta = emit_meta_task(graph_with_artifacts(), host_env(), None, [])
        from aeval.planning import MetaTaskSpec

        assert MetaTaskSpec.from_json(meta.to_json()).to_json() == meta.to_json()


class TestPlanPipeline:
    def test_full_plan_writes_files(self, tmp_path):
        repo = repo_at(
            tmp_path / "repo",
            {"README.md": "run `python run.py`", "requirements.txt": "numpy\n", "data/input.csv": "1"},
        )
        g = graph_with_artifacts()
        fake = FakeRuntime()
        llm = AgentSession("p", mock_backend([DOCKERFILE_REPLY]))
        workdir = tmp_path / "work"
        result = plan(g, repo, None, llm, fake, Settings(), workdir)
        assert result.env.construction_strategy == SYNTHESIS
        assert (workdir / "ae_graph.planned.json").exists()
        assert (workdir / "container_env.json").exists()
        assert (workdir / "meta_task.json").exists()
        planned = result.graph
        assert all(n.env.startswith("container:") for n in planned.command_nodes())
        assert planned.validate().ok

    def test_container_name_is_stable_hash(self, tmp_path):
        repo = repo_at(tmp_path, {"README.md": "x"})
        assert container_name_for(repo) == container_name_for(repo)
        assert container_name_for(repo).startswith("aeval-")
