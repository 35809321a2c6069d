"""Acceptance suite: one test per release criterion, each printing a PASS line.

Everything runs against the scripted mock backend and the in-memory fake
runtime only; total runtime is a few seconds.
"""

from __future__ import annotations

import json
import random
import shutil
from fractions import Fraction
from pathlib import Path

import pytest

from aeval.agent import (
    AgentContext,
    AgentSession,
    HistoryEntry,
    assemble_prompt,
    compress_session,
    mock_backend,
    run_agent_loop,
    truncate_output,
    Workspace,
)
from aeval.bench import (
    ArtifactManifest,
    GcsEntry,
    RunResult,
    load_manifest,
    render_percent,
    run_result_from_report,
    score,
    score_by_split,
)
from aeval.config import Limits, RunConfig, Settings
from aeval.errors import BuildFailedFinal
from aeval.execution import (
    ExecutionTranscript,
    PrivilegePolicy,
    detect_stall,
    execute_with_retry,
    run_graph,
)
from aeval.graph import FAILED, SKIPPED, SUCCEEDED, Node, deserialize, structurally_equal
from aeval.pipeline import run_evaluation
from aeval.planning import (
    EnvRequest,
    StrategyChoice,
    build_container,
    emit_meta_task,
    normalize_execution,
)
from aeval.runtime import ExecRule, FakeRuntime

from conftest import (
    FIXTURES,
    action_reply,
    chain_graph,
    diamond_graph,
    host_env,
    json_reply,
    make_tarball,
    random_valid_graph,
    reachability_oracle,
)

GOLDEN = FIXTURES / "golden"
ARTIFACT_NAMES = (
    "reuse-clean",
    "reuse-fail",
    "synthesis-clean",
    "synthesis-fail",
    "template-clean",
    "template-fail",
)
EXPECTED_FUNCTIONAL = {
    "reuse-clean": True,
    "reuse-fail": False,
    "synthesis-clean": True,
    "synthesis-fail": False,
    "template-clean": True,
    "template-fail": False,
}


def _report(line: str) -> None:
    print(f"ACCEPTANCE PASS: {line}")


# --- criterion 1: metric arithmetic reproduction -------------------------------------


def test_criterion_1_metric_arithmetic():
    def synthetic(n, consistent, split):
        manifests = [
            ArtifactManifest(f"{split}-{i}", "venue", "url", "docker", True, [GcsEntry("make")], split)
            for i in range(n)
        ]
        results = [
            RunResult(f"{split}-{i}", True, True, True, 0, ["make"] if i < consistent else [])
            for i in range(n)
        ]
        return manifests, results

    em, er = synthetic(12, 10, "exploration")
    vm, vr = synthetic(36, 31, "validation")
    cards = score_by_split(em + vm, er + vr)
    assert render_percent(cards["all"].bcr) == "85.42%"
    assert (cards["all"].bcr.numerator, cards["all"].bcr.denominator) == (41, 48)
    assert render_percent(cards["exploration"].bcr) == "83.33%"
    assert render_percent(cards["validation"].bcr) == "86.11%"
    _report("criterion 1 metric arithmetic (41/48 -> 85.42%, 10/12 -> 83.33%, 31/36 -> 86.11%)")


# --- criterion 2: graph engine property suite ------------------------------------------


def test_criterion_2_graph_property_suite():
    rng = random.Random(0xAE0001)
    checked = 0
    for _ in range(100):
        g = random_valid_graph(rng, max_commands=9, max_artifacts=5)
        order = g.topological_order()
        pos = {nid: i for i, nid in enumerate(order)}
        assert len(order) == len(g.nodes)
        for e in g.edges:
            assert pos[e.src] < pos[e.dst]
        oracle = reachability_oracle(g)
        for node in g.nodes:
            assert g.downstream_of(node.id) == oracle[node.id]
        text = g.serialize()
        decoded = deserialize(text)
        assert structurally_equal(decoded, g)
        assert decoded.serialize() == text
        checked += 1
    assert checked == 100
    _report("criterion 2 graph properties on 100 randomized DAGs (ordering, reachability oracle, round trip)")


# --- criterion 3: retry bounds --------------------------------------------------------


def test_criterion_3_retry_bounds():
    # command retries: five attempts exactly, never more
    node = Node.command("command-000", "cursed step", env="host")
    fake = FakeRuntime(exec_rules=(ExecRule(match="cursed", exit_code=1, stderr="broken"),))
    session = AgentSession("p", mock_backend([json_reply({"action": "retry-unchanged"})] * 4))
    transcript = ExecutionTranscript()
    state, used, _ = execute_with_retry(
        node, host_env(), session, fake,
        settings=Settings(), policy=PrivilegePolicy(), transcript=transcript, workspace_root=".",
    )
    assert state == FAILED and used == 5
    execs = [c for c in fake.calls if c[0] == "host_exec"]
    assert len(execs) == 5
    assert len(session.backend.prompts) == 4  # diagnosis only between attempts

    # image builds: three attempts per strategy, then a single fallback
    def request(tmp_repo):
        from aeval.acquisition import RepoHandle

        return EnvRequest(
            repo=RepoHandle("r", "r", tmp_repo, "pre-downloaded"),
            choice=StrategyChoice("Synthesis"),
            dockerfile_text="FROM python:3.11\nRUN true\n",
            container_name="aeval-bounds",
            settings=Settings(),
        )

    fake = FakeRuntime(build_script=tuple({"ok": False} for _ in range(10)))
    with pytest.raises(BuildFailedFinal):
        build_container(request(Path(".")), fake)
    builds = [c for c in fake.daemon_calls if c[0] == "build_image"]
    assert len(builds) == 4  # 3 strategy attempts + 1 fallback

    fake2 = FakeRuntime(build_script=({"ok": False}, {"ok": True}))
    env = build_container(request(Path(".")), fake2)
    assert env.build_attempts == 2
    _report("criterion 3 retry bounds (5 command attempts; 3 builds per strategy + 1 fallback, by call counts)")


# --- criterion 4: failure isolation ----------------------------------------------------


def _run_with_failures(graph, fail_nodes):
    rules = [
        ExecRule(match=graph.node(nid).text, exit_code=1, stderr="planted") for nid in sorted(fail_nodes)
    ]
    fake = FakeRuntime(exec_rules=tuple(rules))
    session = AgentSession("p", mock_backend([json_reply({"action": "give-up"})] * max(1, len(fail_nodes))))
    meta = emit_meta_task(graph, host_env(), None, [])
    return run_graph(graph, meta, host_env(), session, fake, settings=Settings(), workspace_root=".")


def _assert_skip_oracle(graph, final):
    oracle = reachability_oracle(graph)
    states = {n.id: n.status.state for n in final.command_nodes()}
    failed = {nid for nid, s in states.items() if s == FAILED}
    expected_skip = set()
    for nid in failed:
        expected_skip |= {d for d in oracle[nid] if d in states}
    expected_skip -= failed
    assert {nid for nid, s in states.items() if s == SKIPPED} == expected_skip
    for nid, state in states.items():
        if not any(nid in oracle[f] for f in failed) and nid not in failed:
            assert state == SUCCEEDED  # independent branches always complete


def test_criterion_4_failure_isolation():
    # chain: failure at the head skips the whole tail
    _, final = _run_with_failures(chain_graph(4), {"command-000"})
    states = {n.id: n.status.state for n in final.command_nodes()}
    assert states["command-000"] == FAILED
    assert all(states[f"command-{i:03d}"] == SKIPPED for i in (1, 2, 3))

    # diamond: one failed branch, sibling completes, join skipped
    _, final = _run_with_failures(diamond_graph(), {"command-001"})
    _assert_skip_oracle(diamond_graph(), final)
    states = {n.id: n.status.state for n in final.command_nodes()}
    assert states["command-002"] == SUCCEEDED

    # randomized DAGs against the any-failed-ancestor oracle
    rng = random.Random(0xAE0004)
    for _ in range(30):
        graph = random_valid_graph(rng, max_commands=8, max_artifacts=3)
        commands = [n.id for n in graph.command_nodes()]
        fail_set = {nid for nid in commands if rng.random() < 0.3}
        _, final = _run_with_failures(graph, fail_set)
        _assert_skip_oracle(graph, final)
    _report("criterion 4 failure isolation (chain, diamond, 30 random DAGs match the any-failed-ancestor oracle)")


# --- criterion 5: execution normalization ------------------------------------------------


def _build_env(tmp_path, entrypoint_clause):
    from aeval.acquisition import RepoHandle

    dockerfile = "FROM ubuntu:22.04\nWORKDIR /workspace\n" + entrypoint_clause
    fake = FakeRuntime()
    env = build_container(
        EnvRequest(
            repo=RepoHandle("r", "r", tmp_path, "pre-downloaded"),
            choice=StrategyChoice("DockerfileReuse", dockerfile_path="Dockerfile"),
            dockerfile_text=dockerfile,
            container_name=f"aeval-norm-{abs(hash(entrypoint_clause)) % 10**6}",
            settings=Settings(),
        ),
        fake,
    )
    return normalize_execution(env, fake), fake


def test_criterion_5_execution_normalization(tmp_path):
    detached = ["python server.py", "npm start", "/opt/entry.sh --serve"]
    for entry in detached:
        import json as _json

        env, fake = _build_env(tmp_path, f"ENTRYPOINT {_json.dumps(entry.split())}\n")
        assert env.exec_mode == "DetachedShellReplay"
        session = fake.sessions[env.session_name]
        assert session.transcript[0] == entry  # entrypoint replayed as instruction #1
        fake.send_to_session(env.session_name, "cd /workspace/sub")
        pwd = fake.send_to_session(env.session_name, "pwd")
        assert pwd.stdout.strip() == "/workspace/sub"  # state persists across sends

    direct = ["", 'ENTRYPOINT ["/bin/bash"]\n', 'ENTRYPOINT ["sh"]\n']
    for clause in direct:
        env, fake = _build_env(tmp_path, clause)
        assert env.exec_mode == "DirectExec"
        assert fake.sessions == {}  # direct mode never opens a session
    _report("criterion 5 execution normalization (3 detached-replay and 3 direct-exec fixtures, zero deviations)")


# --- criterion 6: stall detection ---------------------------------------------------------


def test_criterion_6_stall_detection():
    window = Settings().stall_window_samples
    assert window == 18
    assert detect_stall([1.0] * 18, threshold_pct=5.0, window=window) is not None
    assert detect_stall([1.0] * 17, threshold_pct=5.0, window=window) is None
    spike = [1.0] * 9 + [80.0] + [1.0] * 8
    assert detect_stall(spike, threshold_pct=5.0, window=window) is None
    assert detect_stall([5.0] * 18, threshold_pct=5.0, window=window) is None  # not strictly below
    signal = detect_stall([1.0] * 25, threshold_pct=5.0, window=window)
    assert signal is not None and len(signal.window_samples) == 18
    assert max(signal.window_samples) < signal.threshold_pct
    _report("criterion 6 stall detection (complete 18-sample windows only; 17-sample and spike cases silent)")


# --- criterion 7: context management --------------------------------------------------------


def test_criterion_7_context_management(tmp_path):
    # truncation: identity, boundary, elision arithmetic
    assert truncate_output("x" * 80, 100) == "x" * 80
    exact = "y" * 100
    assert truncate_output(exact, 100) == exact
    import math

    text = "".join(chr(ord("a") + i % 26) for i in range(1000))
    out = truncate_output(text, 100)
    head, tail = math.ceil(0.4 * 100), 100 - math.ceil(0.4 * 100)
    assert out == text[:head] + f"…[{1000 - head - tail} chars elided]…" + text[-tail:]

    # compression: estimate shrinks, prelude untouched
    limits = Limits(compression_threshold_tokens=64)
    ctx = AgentContext(static_prelude="PRELUDE", limits=limits)
    for i in range(6):
        ctx.history.append(HistoryEntry(None, f"[obs {i}] " + "z" * 200))
    before = ctx.token_estimate
    compress_session(ctx, mock_backend(["compact state summary"]))
    assert ctx.token_estimate < before
    assert ctx.static_prelude == "PRELUDE"
    assert len(ctx.history) == 1

    # prompt layout: byte-identical to the checked-in golden file
    from aeval.agent import AgentAction

    gctx = AgentContext(static_prelude="ROLE: evaluation fixture agent\nFollow the reply format exactly.")
    gctx.history.append(HistoryEntry(None, "[request] inspect the repository"))
    gctx.history.append(
        HistoryEntry(AgentAction("look at docs first", "read_file", {"path": "README.md"}), "# demo-tool docs")
    )
    assert assemble_prompt(gctx) == (GOLDEN / "prompt.txt").read_text(encoding="utf-8")

    # turn bound: backend consulted exactly max_turns times, never more
    limit = 7
    loop_ctx = AgentContext(static_prelude="p", limits=Limits(max_turns=limit))
    backend = mock_backend([action_reply("docker_check", {})] * 50)
    result = run_agent_loop(loop_ctx, backend, Workspace(root=tmp_path), FakeRuntime())
    assert result["status"] == "failure"
    assert len(backend.prompts) == limit
    _report("criterion 7 context management (truncation arithmetic, compression, prompt golden, turn bound)")


# --- criterion 8: end-to-end fixture matrix ----------------------------------------------


def _canonicalize(text: str, repo: Path, container: str) -> str:
    return text.replace(str(repo), "<REPO>").replace(container, "<CONTAINER>")


def _evaluate_fixture(name: str, tmp_path: Path, run_tag: str, repo: Path | None = None):
    fix = FIXTURES / "artifacts" / name
    if repo is None:
        repo = tmp_path / name / "repo"
        shutil.copytree(fix / "repo", repo)
    workdir = tmp_path / name / f"work-{run_tag}"
    config = RunConfig(
        repo=str(repo),
        backend=f"mock:{fix / 'backend.yaml'}",
        runtime=f"fake:{fix / 'scenario.yaml'}",
        workdir=str(workdir),
    )
    outcome = run_evaluation(config)
    assert outcome.exit_code == 0, f"{name}: {outcome.detail}"
    return repo, workdir, json.loads((workdir / "report.json").read_text())


def test_criterion_8_end_to_end_fixture_matrix(tmp_path):
    strategies_seen = set()
    results_dir = tmp_path / "results"
    for name in ARTIFACT_NAMES:
        repo, work1, report1 = _evaluate_fixture(name, tmp_path, "a")
        _, work2, report2 = _evaluate_fixture(name, tmp_path, "b", repo=repo)

        # byte-stable modulo timestamps
        strip = lambda doc: {k: v for k, v in doc.items() if k != "generated_at"}
        assert strip(report1) == strip(report2), f"{name}: unstable report"
        assert (work1 / "report.md").read_bytes() == (work2 / "report.md").read_bytes()
        assert (work1 / "execution.log.jsonl").read_bytes() == (work2 / "execution.log.jsonl").read_bytes()

        # authored ground truth
        assert report1["badge"]["functional"] is EXPECTED_FUNCTIONAL[name], name
        strategies_seen.add(report1["environment"]["construction_strategy"])

        target = results_dir / name
        target.mkdir(parents=True)
        shutil.copy(work1 / "report.json", target / "report.json")

    assert strategies_seen == {"DockerfileReuse", "Synthesis", "TemplateFallback"}

    # miniature benchmark over the fixture suite: BCR 6/6
    manifests = load_manifest(FIXTURES / "bench/manifest.json")
    results = [
        run_result_from_report(results_dir / m.artifact_id / "report.json", m.artifact_id)
        for m in manifests
    ]
    card = score(manifests, results)
    assert (card.bcr.numerator, card.bcr.denominator) == (6, 6)
    assert render_percent(card.bcr) == "100%"
    assert card.mean_intervention.fraction == Fraction(0, 1)

    # golden meta-task and report for the detached-replay fixture
    repo, work, report = _evaluate_fixture("reuse-clean", tmp_path / "golden-run", "g")
    env = json.loads((work / "container_env.json").read_text())
    meta = _canonicalize((work / "meta_task.json").read_text(), repo, env["container_name"])
    assert meta == (GOLDEN / "meta_task.reuse-clean.json").read_text()
    report.pop("generated_at")
    canonical = _canonicalize(
        json.dumps(report, indent=2, sort_keys=True) + "\n", repo, env["container_name"]
    )
    assert canonical == (GOLDEN / "report.reuse-clean.json").read_text()
    _report("criterion 8 e2e matrix (6 fixtures x 2 runs byte-stable, badges match ground truth, mini-BCR 6/6)")


# --- criterion 9: acquisition halt rule -------------------------------------------------


def test_criterion_9_acquisition_halt(tmp_path):
    # unreachable link
    workdir = tmp_path / "halt-link"
    config = RunConfig(
        paper=str(FIXTURES / "papers/halt_link.txt"),
        backend=f"mock:{FIXTURES / 'papers/halt_link_backend.yaml'}",
        runtime=f"fake:{FIXTURES / 'papers/empty_scenario.yaml'}",
        workdir=str(workdir),
    )
    outcome = run_evaluation(config)
    assert outcome.exit_code == 3
    diagnostics = json.loads((workdir / "acquisition.json").read_text())
    assert diagnostics["halted"] == "download"
    assert diagnostics["diagnostics"]["error"]
    assert not (workdir / "ae_graph.initial.json").exists()
    assert not (workdir / "report.json").exists()

    # failed correspondence
    archive = make_tarball(tmp_path, files={"other/README.md": "# unrelated project\n"})
    paper = tmp_path / "paper.txt"
    paper.write_text(f"## Data Availability\nArtifact: file://{archive}\n", encoding="utf-8")
    script = tmp_path / "backend.yaml"
    import yaml

    script.write_text(
        yaml.safe_dump(
            [
                json_reply({"evaluation_summary": "widget experiments", "ranked_urls": [f"file://{archive}"]}),
                json_reply({"score": 0.1, "rationale": "different project"}),
            ]
        ),
        encoding="utf-8",
    )
    workdir2 = tmp_path / "halt-mismatch"
    config = RunConfig(
        paper=str(paper),
        backend=f"mock:{script}",
        runtime=f"fake:{FIXTURES / 'papers/empty_scenario.yaml'}",
        workdir=str(workdir2),
    )
    outcome = run_evaluation(config)
    assert outcome.exit_code == 3
    diagnostics = json.loads((workdir2 / "acquisition.json").read_text())
    assert diagnostics["halted"] == "correspondence"
    assert not (workdir2 / "ae_graph.initial.json").exists()
    _report("criterion 9 acquisition halt (unreachable link and failed correspondence stop before any downstream stage)")
