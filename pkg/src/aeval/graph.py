"""Dependency-aware evaluation graph.

Nodes are the entry point (Start), executable instructions (Command), and
files consumed or produced (Artifact). Edges encode execution order
(Sequential) and data flow (ArtifactInput, ArtifactOutput).

Graphs are immutable values: every mutation returns a new graph, so readers
on a concurrent monitoring flow never observe a partially applied update.

Reachability note: a pure input artifact has no producer, so no directed
path from Start can exist to it. Validation therefore requires a directed
path from Start for Command nodes and weak (undirected) connectivity to the
Start component for Artifact nodes; both catch orphaned subgraphs.
"""

from __future__ import annotations

import heapq
import json
import re
from dataclasses import dataclass, replace

from .errors import (
    CyclicGraph,
    DuplicateId,
    InvalidTransition,
    KindMismatch,
    MalformedNode,
    ParseError,
    UnknownEndpoint,
    UnknownNode,
    ValidationFailure,
)

START = "Start"
COMMAND = "Command"
ARTIFACT = "Artifact"
NODE_KINDS = (START, COMMAND, ARTIFACT)

SEQUENTIAL = "Sequential"
ARTIFACT_INPUT = "ArtifactInput"
ARTIFACT_OUTPUT = "ArtifactOutput"
EDGE_KINDS = (SEQUENTIAL, ARTIFACT_INPUT, ARTIFACT_OUTPUT)

PENDING = "Pending"
RUNNING = "Running"
SUCCEEDED = "Succeeded"
FAILED = "Failed"
SKIPPED = "Skipped"
EXEC_STATES = (PENDING, RUNNING, SUCCEEDED, FAILED, SKIPPED)
TERMINAL_STATES = (SUCCEEDED, FAILED, SKIPPED)

ARTIFACT_TYPES = ("input-data", "output-data", "config", "script", "other")

# Pending -> Skipped marks never-run commands downstream of a terminal
# failure; Failed -> Pending is the explicit retry reset.
ALLOWED_TRANSITIONS = frozenset(
    {
        (PENDING, RUNNING),
        (PENDING, SKIPPED),
        (RUNNING, SUCCEEDED),
        (RUNNING, FAILED),
        (RUNNING, SKIPPED),
        (FAILED, PENDING),
    }
)

_ENV_LABEL_RE = re.compile(r"^(host|container:[A-Za-z0-9._-]+)$")


@dataclass(frozen=True)
class ExecStatus:
    """Execution state tracked on a Command node."""

    state: str = PENDING
    attempts: int = 0
    last_error_digest: str | None = None

    def transition(self, new_state: str) -> "ExecStatus":
        if new_state not in EXEC_STATES:
            raise InvalidTransition(f"unknown state {new_state!r}")
        if (self.state, new_state) not in ALLOWED_TRANSITIONS:
            raise InvalidTransition(f"{self.state} -> {new_state} is not allowed")
        return replace(self, state=new_state)


@dataclass(frozen=True)
class Node:
    """A graph node; kind-specific attributes are set exactly for the kind."""

    id: str
    kind: str
    use_docker: bool | None = None
    text: str | None = None
    env: str | None = None
    status: ExecStatus | None = None
    path: str | None = None
    type: str | None = None

    @staticmethod
    def start(node_id: str, use_docker: bool = False) -> "Node":
        return Node(id=node_id, kind=START, use_docker=use_docker)

    @staticmethod
    def command(node_id: str, text: str, env: str = "host", status: ExecStatus | None = None) -> "Node":
        return Node(id=node_id, kind=COMMAND, text=text, env=env, status=status or ExecStatus())

    @staticmethod
    def artifact(node_id: str, path: str, type: str = "other") -> "Node":
        return Node(id=node_id, kind=ARTIFACT, path=path, type=type)

    def check_shape(self) -> None:
        """Raise MalformedNode unless kind and attributes agree."""
        if not isinstance(self.id, str) or not self.id:
            raise MalformedNode("node id must be a nonempty string")
        if self.kind not in NODE_KINDS:
            raise MalformedNode(f"{self.id}: unknown kind {self.kind!r}")
        wanted = {
            START: ("use_docker",),
            COMMAND: ("text", "env", "status"),
            ARTIFACT: ("path", "type"),
        }[self.kind]
        for name in ("use_docker", "text", "env", "status", "path", "type"):
            value = getattr(self, name)
            if name in wanted and value is None:
                raise MalformedNode(f"{self.id}: {self.kind} node missing {name}")
            if name not in wanted and value is not None:
                raise MalformedNode(f"{self.id}: {self.kind} node must not carry {name}")
        if self.kind == START:
            if not isinstance(self.use_docker, bool):
                raise MalformedNode(f"{self.id}: use_docker must be boolean")
        elif self.kind == COMMAND:
            if not isinstance(self.text, str) or not self.text.strip():
                raise MalformedNode(f"{self.id}: command text must be nonempty")
            if not _ENV_LABEL_RE.match(self.env or ""):
                raise MalformedNode(f"{self.id}: bad env label {self.env!r}")
            if self.status.state not in EXEC_STATES or self.status.attempts < 0:
                raise MalformedNode(f"{self.id}: malformed status")
        else:
            if not isinstance(self.path, str) or not self.path:
                raise MalformedNode(f"{self.id}: artifact path must be nonempty")
            if self.type not in ARTIFACT_TYPES:
                raise MalformedNode(f"{self.id}: unknown artifact type {self.type!r}")


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: str

    _RULES = {
        SEQUENTIAL: ((START, COMMAND), COMMAND),
        ARTIFACT_INPUT: ((ARTIFACT,), COMMAND),
        ARTIFACT_OUTPUT: ((COMMAND,), ARTIFACT),
    }

    def check_kinds(self, src_kind: str, dst_kind: str) -> None:
        if self.kind not in EDGE_KINDS:
            raise KindMismatch(f"unknown edge kind {self.kind!r}")
        src_ok, dst_ok = self._RULES[self.kind]
        if src_kind not in src_ok or dst_kind != dst_ok:
            raise KindMismatch(
                f"{self.kind} edge cannot connect {src_kind} -> {dst_kind} ({self.src} -> {self.dst})"
            )


@dataclass(frozen=True)
class Violation:
    code: str  # cycle | unreachable | missing-start | duplicate-start
    message: str
    nodes: tuple[str, ...] = ()


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


class IdAllocator:
    """Deterministic node ids: <kind>-<zero-padded index>, per kind."""

    def __init__(self):
        self._counts: dict[str, int] = {}

    def allocate(self, kind: str) -> str:
        index = self._counts.get(kind, 0)
        self._counts[kind] = index + 1
        return f"{kind.lower()}-{index:03d}"


@dataclass(frozen=True)
class AEGraph:
    """Immutable graph value; mutation methods return new graphs."""

    nodes: tuple[Node, ...] = ()
    edges: tuple[Edge, ...] = ()

    # -- lookups ----------------------------------------------------------

    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise UnknownNode(node_id)

    def has_node(self, node_id: str) -> bool:
        return any(n.id == node_id for n in self.nodes)

    def start_nodes(self) -> tuple[Node, ...]:
        return tuple(n for n in self.nodes if n.kind == START)

    def command_nodes(self) -> tuple[Node, ...]:
        return tuple(n for n in self.nodes if n.kind == COMMAND)

    def artifact_nodes(self) -> tuple[Node, ...]:
        return tuple(n for n in self.nodes if n.kind == ARTIFACT)

    # -- mutation (value semantics) ----------------------------------------

    def add_node(self, node: Node) -> "AEGraph":
        node.check_shape()
        if self.has_node(node.id):
            raise DuplicateId(node.id)
        return AEGraph(self.nodes + (node,), self.edges)

    def add_edge(self, edge: Edge) -> "AEGraph":
        by_id = self.node_map()
        for endpoint in (edge.src, edge.dst):
            if endpoint not in by_id:
                raise UnknownEndpoint(endpoint)
        edge.check_kinds(by_id[edge.src].kind, by_id[edge.dst].kind)
        if edge in self.edges:  # redundant duplicates are harmless
            return self
        return AEGraph(self.nodes, self.edges + (edge,))

    def replace_node(self, node: Node) -> "AEGraph":
        node.check_shape()
        if not self.has_node(node.id):
            raise UnknownNode(node.id)
        return AEGraph(tuple(node if n.id == node.id else n for n in self.nodes), self.edges)

    def with_command_state(
        self,
        node_id: str,
        new_state: str,
        *,
        attempts: int | None = None,
        last_error_digest: str | None = None,
    ) -> "AEGraph":
        node = self.node(node_id)
        if node.kind != COMMAND:
            raise KindMismatch(f"{node_id} is not a Command node")
        status = node.status.transition(new_state)
        if attempts is not None:
            status = replace(status, attempts=attempts)
        if last_error_digest is not None:
            status = replace(status, last_error_digest=last_error_digest)
        return self.replace_node(replace(node, status=status))

    def reset_for_retry(self, node_id: str) -> "AEGraph":
        """Explicit Failed -> Pending reset."""
        return self.with_command_state(node_id, PENDING)

    # -- queries -----------------------------------------------------------

    def _adjacency(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            adj[e.src].append(e.dst)
        return adj

    def validate(self) -> ValidationResult:
        violations: list[Violation] = []
        starts = self.start_nodes()
        if not starts:
            violations.append(Violation("missing-start", "graph has no Start node"))
        elif len(starts) > 1:
            violations.append(
                Violation("duplicate-start", "graph has more than one Start node", tuple(n.id for n in starts))
            )
        for witness in self._cycle_witnesses():
            violations.append(
                Violation("cycle", "cycle: " + " -> ".join(witness + (witness[0],)), witness)
            )
        if starts:
            violations.extend(self._unreachable_violations(tuple(n.id for n in starts)))
        return ValidationResult(tuple(violations))

    def _cycle_witnesses(self) -> list[tuple[str, ...]]:
        adj = self._adjacency()
        witnesses = []
        for scc in _tarjan_sccs(sorted(adj), adj):
            if len(scc) > 1:
                witnesses.append(_witness_cycle(scc, adj))
            elif any(e.src == scc[0] == e.dst for e in self.edges):
                witnesses.append((scc[0],))
        return witnesses

    def _unreachable_violations(self, start_ids: tuple[str, ...]) -> list[Violation]:
        undirected: dict[str, set[str]] = {n.id: set() for n in self.nodes}
        for e in self.edges:
            undirected[e.src].add(e.dst)
            undirected[e.dst].add(e.src)
        weak = _reach(start_ids, undirected)
        directed = _reach(start_ids, {k: set(v) for k, v in self._adjacency().items()})
        out = []
        for n in sorted(self.nodes, key=lambda n: n.id):
            if n.kind == START:
                continue
            if n.id not in weak:
                out.append(Violation("unreachable", f"{n.id} is not connected to Start", (n.id,)))
            elif n.kind == COMMAND and n.id not in directed:
                out.append(
                    Violation("unreachable", f"{n.id} has no execution path from Start", (n.id,))
                )
        return out

    def topological_order(self) -> list[str]:
        """Deterministic Kahn order; ties broken by lexicographic node id."""
        adj = self._adjacency()
        indeg = {nid: 0 for nid in adj}
        for e in self.edges:
            indeg[e.dst] += 1
        ready = [nid for nid, d in sorted(indeg.items()) if d == 0]
        heapq.heapify(ready)
        order: list[str] = []
        while ready:
            nid = heapq.heappop(ready)
            order.append(nid)
            for succ in adj[nid]:
                indeg[succ] -= 1
                if indeg[succ] == 0:
                    heapq.heappush(ready, succ)
        if len(order) != len(self.nodes):
            raise CyclicGraph("graph contains at least one cycle")
        return order

    def downstream_of(self, node_id: str) -> set[str]:
        """All nodes reachable from node_id via one or more edges."""
        if not self.has_node(node_id):
            raise UnknownNode(node_id)
        adj = self._adjacency()
        seen: set[str] = set()
        frontier = list(adj[node_id])
        while frontier:
            nid = frontier.pop()
            if nid in seen:
                continue
            seen.add(nid)
            frontier.extend(adj[nid])
        seen.discard(node_id)
        return seen

    # -- serialization -------------------------------------------------------

    def to_document(self) -> dict:
        return {
            "nodes": [_node_to_obj(n) for n in sorted(self.nodes, key=lambda n: n.id)],
            "edges": [
                {"src": e.src, "dst": e.dst, "kind": e.kind}
                for e in sorted(self.edges, key=lambda e: (e.src, e.dst, e.kind))
            ],
        }

    def serialize(self) -> str:
        result = self.validate()
        if not result.ok:
            raise ValidationFailure(
                "cannot serialize an invalid graph", result.violations
            )
        return json.dumps(self.to_document(), indent=2) + "\n"


def structurally_equal(a: AEGraph, b: AEGraph) -> bool:
    return a.to_document() == b.to_document()


def _reach(roots, adj) -> set[str]:
    seen = set(roots)
    frontier = list(roots)
    while frontier:
        nid = frontier.pop()
        for succ in adj.get(nid, ()):
            if succ not in seen:
                seen.add(succ)
                frontier.append(succ)
    return seen


def _tarjan_sccs(ids, adj) -> list[list[str]]:
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = [0]
    sccs: list[list[str]] = []

    for root in ids:
        if root in index:
            continue
        work = [(root, iter(adj[root]))]
        index[root] = low[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, successors = work[-1]
            advanced = False
            for succ in successors:
                if succ not in index:
                    index[succ] = low[succ] = counter[0]
                    counter[0] += 1
                    stack.append(succ)
                    on_stack.add(succ)
                    work.append((succ, iter(adj[succ])))
                    advanced = True
                    break
                if succ in on_stack:
                    low[node] = min(low[node], index[succ])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                scc = []
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    scc.append(member)
                    if member == node:
                        break
                sccs.append(sorted(scc))
    return sccs


def _witness_cycle(scc: list[str], adj) -> tuple[str, ...]:
    members = set(scc)
    origin = scc[0]
    # shortest in-SCC path from a successor of origin back to origin
    for succ in sorted(s for s in adj[origin] if s in members):
        parent = {succ: None}
        queue = [succ]
        while queue:
            nid = queue.pop(0)
            if nid == origin:
                path = []
                cur = nid
                while cur is not None:
                    path.append(cur)
                    cur = parent[cur]
                path.reverse()  # succ ... origin
                return tuple([origin] + path[:-1])
            for nxt in sorted(s for s in adj[nid] if s in members):
                if nxt not in parent:
                    parent[nxt] = nid
                    queue.append(nxt)
    return tuple(scc)  # fallback, should not happen for a true SCC


# --- document decoding -------------------------------------------------------


def _node_to_obj(n: Node) -> dict:
    obj: dict = {"id": n.id, "kind": n.kind}
    if n.kind == START:
        obj["use_docker"] = n.use_docker
    elif n.kind == COMMAND:
        obj["text"] = n.text
        obj["env"] = n.env
        obj["status"] = {
            "state": n.status.state,
            "attempts": n.status.attempts,
            "last_error_digest": n.status.last_error_digest,
        }
    else:
        obj["path"] = n.path
        obj["type"] = n.type
    return obj


def _node_from_obj(obj, where: str) -> Node:
    if not isinstance(obj, dict):
        raise ParseError("node entry must be an object", field=where)
    kind = obj.get("kind")
    node_id = obj.get("id")
    if not isinstance(node_id, str) or not node_id:
        raise ParseError("missing or empty node id", field=f"{where}.id")
    if kind == START:
        if "use_docker" not in obj:
            raise ParseError("Start node missing use_docker", field=f"{where}.use_docker")
        return Node.start(node_id, bool(obj["use_docker"]))
    if kind == COMMAND:
        for name in ("text", "env"):
            if not isinstance(obj.get(name), str):
                raise ParseError(f"Command node missing {name}", field=f"{where}.{name}")
        status = _status_from_obj(obj.get("status"), f"{where}.status")
        return Node.command(node_id, obj["text"], obj["env"], status)
    if kind == ARTIFACT:
        for name in ("path", "type"):
            if not isinstance(obj.get(name), str):
                raise ParseError(f"Artifact node missing {name}", field=f"{where}.{name}")
        return Node.artifact(node_id, obj["path"], obj["type"])
    raise ParseError(f"unknown node kind {kind!r}", field=f"{where}.kind")


def _status_from_obj(obj, where: str) -> ExecStatus:
    if obj is None:
        return ExecStatus()
    if not isinstance(obj, dict):
        raise ParseError("status must be an object", field=where)
    state = obj.get("state", PENDING)
    if state not in EXEC_STATES:
        raise ParseError(f"unknown status state {state!r}", field=f"{where}.state")
    attempts = obj.get("attempts", 0)
    if not isinstance(attempts, int) or attempts < 0:
        raise ParseError("attempts must be a non-negative integer", field=f"{where}.attempts")
    return ExecStatus(state, attempts, obj.get("last_error_digest"))


def from_document(doc: dict) -> AEGraph:
    """Build a validated graph from a decoded document object."""
    if not isinstance(doc, dict):
        raise ParseError("graph document must be an object")
    for key in ("nodes", "edges"):
        if not isinstance(doc.get(key), list):
            raise ParseError(f"missing or malformed top-level key {key!r}", field=key)
    graph = AEGraph()
    for i, obj in enumerate(doc["nodes"]):
        node = _node_from_obj(obj, f"nodes[{i}]")
        try:
            graph = graph.add_node(node)
        except DuplicateId as exc:
            raise ValidationFailure(f"duplicate node id {exc}") from exc
    for i, obj in enumerate(doc["edges"]):
        if not isinstance(obj, dict):
            raise ParseError("edge entry must be an object", field=f"edges[{i}]")
        for name in ("src", "dst", "kind"):
            if not isinstance(obj.get(name), str):
                raise ParseError(f"edge missing {name}", field=f"edges[{i}].{name}")
        try:
            graph = graph.add_edge(Edge(obj["src"], obj["dst"], obj["kind"]))
        except (UnknownEndpoint, KindMismatch) as exc:
            raise ValidationFailure(str(exc)) from exc
    result = graph.validate()
    if not result.ok:
        raise ValidationFailure(
            "decoded graph violates invariants: "
            + "; ".join(v.message for v in result.violations),
            result.violations,
        )
    return graph


def deserialize(text: str) -> AEGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    return from_document(doc)
