"""Shared test helpers: graph factories, mock reply builders, fixture staging."""

from __future__ import annotations

import json
import random
import shutil
from pathlib import Path

import pytest

from aeval.graph import (
    ARTIFACT_INPUT,
    ARTIFACT_OUTPUT,
    SEQUENTIAL,
    AEGraph,
    Edge,
    Node,
)
from aeval.planning import ContainerEnv

FIXTURES = Path(__file__).parent / "fixtures"


# --- graph factories -------------------------------------------------------------


def chain_graph(n_commands: int = 3) -> AEGraph:
    g = AEGraph().add_node(Node.start("start-000", use_docker=False))
    prev = "start-000"
    for i in range(n_commands):
        nid = f"command-{i:03d}"
        g = g.add_node(Node.command(nid, f"step {i}", env="host"))
        g = g.add_edge(Edge(prev, nid, SEQUENTIAL))
        prev = nid
    return g


def diamond_graph() -> AEGraph:
    """start -> c0 -> {c1, c2} -> c3"""
    g = AEGraph().add_node(Node.start("start-000", use_docker=False))
    for i in range(4):
        g = g.add_node(Node.command(f"command-{i:03d}", f"step {i}", env="host"))
    g = g.add_edge(Edge("start-000", "command-000", SEQUENTIAL))
    g = g.add_edge(Edge("command-000", "command-001", SEQUENTIAL))
    g = g.add_edge(Edge("command-000", "command-002", SEQUENTIAL))
    g = g.add_edge(Edge("command-001", "command-003", SEQUENTIAL))
    g = g.add_edge(Edge("command-002", "command-003", SEQUENTIAL))
    return g


def random_valid_graph(rng: random.Random, max_commands: int = 8, max_artifacts: int = 4) -> AEGraph:
    """Generator for valid DAGs: forward-only edges guarantee acyclicity."""
    g = AEGraph().add_node(Node.start("start-000", use_docker=bool(rng.getrandbits(1))))
    n_cmd = rng.randint(1, max_commands)
    cmds = []
    for i in range(n_cmd):
        nid = f"command-{i:03d}"
        g = g.add_node(Node.command(nid, f"step {i}", env="host"))
        cmds.append(nid)
    for i, nid in enumerate(cmds):
        if i == 0 or rng.random() < 0.4:
            g = g.add_edge(Edge("start-000", nid, SEQUENTIAL))
        else:
            g = g.add_edge(Edge(cmds[rng.randrange(0, i)], nid, SEQUENTIAL))
        for j in range(i + 1, n_cmd):
            if rng.random() < 0.15:
                g = g.add_edge(Edge(nid, cmds[j], SEQUENTIAL))
    for k in range(rng.randint(0, max_artifacts)):
        aid = f"artifact-{k:03d}"
        g = g.add_node(Node.artifact(aid, f"data/file{k}.csv", "input-data"))
        roll = rng.random()
        if roll < 0.4:
            g = g.add_edge(Edge(aid, rng.choice(cmds), ARTIFACT_INPUT))
        elif roll < 0.8:
            g = g.add_edge(Edge(rng.choice(cmds), aid, ARTIFACT_OUTPUT))
        else:
            i = rng.randrange(0, n_cmd)
            g = g.add_edge(Edge(cmds[i], aid, ARTIFACT_OUTPUT))
            if i + 1 < n_cmd:
                g = g.add_edge(Edge(aid, cmds[rng.randrange(i + 1, n_cmd)], ARTIFACT_INPUT))
    assert g.validate().ok, [v.message for v in g.validate().violations]
    return g


def reachability_oracle(g: AEGraph) -> dict[str, set[str]]:
    """Transitive closure by repeated matrix relaxation."""
    ids = sorted(n.id for n in g.nodes)
    idx = {nid: i for i, nid in enumerate(ids)}
    n = len(ids)
    reach = [[False] * n for _ in range(n)]
    for e in g.edges:
        reach[idx[e.src]][idx[e.dst]] = True
    for k in range(n):
        for i in range(n):
            if reach[i][k]:
                row_k = reach[k]
                row_i = reach[i]
                for j in range(n):
                    if row_k[j]:
                        row_i[j] = True
    return {ids[i]: {ids[j] for j in range(n) if reach[i][j]} - {ids[i]} for i in range(n)}


def make_tarball(tmp_path: Path, name="artifact.tar.gz", files=None) -> Path:
    """Build a small project tarball fixture."""
    import io
    import tarfile

    files = files or {
        "demo-tool/README.md": "# demo-tool\nrun: python3 run.py\n",
        "demo-tool/run.py": "print('ok')\n",
    }
    archive = tmp_path / name
    with tarfile.open(archive, "w:gz") as tar:
        for rel, content in files.items():
            data = content.encode("utf-8")
            info = tarfile.TarInfo(rel)
            info.size = len(data)
            tar.addfile(info, io.BytesIO(data))
    return archive


# --- mock reply builders ------------------------------------------------------------


def json_reply(obj: dict) -> str:
    return "```json\n" + json.dumps(obj) + "\n```"


def action_reply(tool: str, arguments: dict, thought: str = "") -> str:
    return json_reply({"thought": thought, "tool": tool, "arguments": arguments})


def graph_reply(nodes: list[dict], edges: list[dict], thought: str = "derived from docs") -> str:
    return json_reply({"chain_of_thought": thought, "graph": {"nodes": nodes, "edges": edges}})


# --- environments --------------------------------------------------------------------


def host_env() -> ContainerEnv:
    return ContainerEnv(
        container_name="box",
        image_ref="ubuntu:22.04",
        construction_strategy="TemplateFallback",
        exec_mode="DirectExec",
        entrypoint="",
        path_map=(("/repo", "/workspace"),),
        build_attempts=1,
    )


# --- fixture staging -------------------------------------------------------------------


@pytest.fixture
def stage_artifact(tmp_path):
    """Copy a fixture artifact to a scratch dir so runs never mutate fixtures."""

    def _stage(name: str):
        src = FIXTURES / "artifacts" / name
        repo = tmp_path / name / "repo"
        shutil.copytree(src / "repo", repo)
        return {
            "repo": repo,
            "backend": src / "backend.yaml",
            "scenario": src / "scenario.yaml",
            "workdir": tmp_path / name / "work",
        }

    return _stage
