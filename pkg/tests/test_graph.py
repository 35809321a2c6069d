"""Graph engine unit tests: construction, validation, ordering, queries,
status transitions, and the document round trip."""

from __future__ import annotations

import itertools

import pytest

from aeval.errors import (
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
from aeval.graph import (
    ALLOWED_TRANSITIONS,
    ARTIFACT_INPUT,
    ARTIFACT_OUTPUT,
    EXEC_STATES,
    FAILED,
    PENDING,
    RUNNING,
    SEQUENTIAL,
    SKIPPED,
    SUCCEEDED,
    AEGraph,
    Edge,
    ExecStatus,
    IdAllocator,
    Node,
    deserialize,
    structurally_equal,
)

from conftest import chain_graph, diamond_graph


class TestAddNode:
    def test_start_base_case(self):
        g = AEGraph().add_node(Node.start("start-000", use_docker=False))
        assert len(g.nodes) == 1

    def test_duplicate_id(self):
        g = chain_graph(1)
        with pytest.raises(DuplicateId):
            g.add_node(Node.command("command-000", "again", env="host"))

    def test_command_missing_env(self):
        node = Node(id="c1", kind="Command", text="run", env=None, status=ExecStatus())
        with pytest.raises(MalformedNode):
            AEGraph().add_node(node)

    def test_kind_attribute_leakage(self):
        node = Node(id="c1", kind="Start", use_docker=True, path="x")
        with pytest.raises(MalformedNode):
            AEGraph().add_node(node)

    def test_bad_env_label(self):
        with pytest.raises(MalformedNode):
            AEGraph().add_node(Node.command("c1", "run", env="spaceship"))

    def test_bad_artifact_type(self):
        with pytest.raises(MalformedNode):
            AEGraph().add_node(Node.artifact("a1", "data.csv", type="flotsam"))

    def test_value_semantics(self):
        g1 = AEGraph().add_node(Node.start("start-000", use_docker=False))
        g2 = g1.add_node(Node.command("command-000", "run", env="host"))
        assert len(g1.nodes) == 1 and len(g2.nodes) == 2


class TestAddEdge:
    def setup_method(self):
        self.g = (
            AEGraph()
            .add_node(Node.start("s", use_docker=False))
            .add_node(Node.command("c1", "one", env="host"))
            .add_node(Node.command("c2", "two", env="host"))
            .add_node(Node.artifact("a1", "data.csv", "input-data"))
        )

    def test_sequential_command_command(self):
        g = self.g.add_edge(Edge("c1", "c2", SEQUENTIAL))
        assert Edge("c1", "c2", SEQUENTIAL) in g.edges

    def test_sequential_start_command(self):
        g = self.g.add_edge(Edge("s", "c1", SEQUENTIAL))
        assert len(g.edges) == 1

    def test_artifact_input_wrong_src(self):
        with pytest.raises(KindMismatch):
            self.g.add_edge(Edge("c1", "c2", ARTIFACT_INPUT))

    def test_artifact_output_ok(self):
        g = self.g.add_edge(Edge("c1", "a1", ARTIFACT_OUTPUT))
        assert len(g.edges) == 1

    def test_unknown_endpoint(self):
        with pytest.raises(UnknownEndpoint):
            self.g.add_edge(Edge("c1", "ghost", SEQUENTIAL))

    def test_duplicate_edge_is_noop(self):
        g = self.g.add_edge(Edge("c1", "c2", SEQUENTIAL))
        g = g.add_edge(Edge("c1", "c2", SEQUENTIAL))
        assert len(g.edges) == 1


class TestValidate:
    def test_chain_ok(self):
        assert chain_graph(2).validate().ok

    def test_smallest_cycle_witness(self):
        g = (
            chain_graph(2)
            .add_edge(Edge("command-001", "command-000", SEQUENTIAL))
        )
        result = g.validate()
        cycles = [v for v in result.violations if v.code == "cycle"]
        assert len(cycles) == 1
        assert set(cycles[0].nodes) == {"command-000", "command-001"}

    def test_duplicate_start(self):
        g = chain_graph(1).add_node(Node.start("start-001", use_docker=True))
        codes = {v.code for v in g.validate().violations}
        assert "duplicate-start" in codes

    def test_missing_start(self):
        g = AEGraph().add_node(Node.command("c1", "run", env="host"))
        codes = {v.code for v in g.validate().violations}
        assert "missing-start" in codes

    def test_unreachable_island(self):
        g = (
            chain_graph(1)
            .add_node(Node.command("command-900", "lost", env="host"))
            .add_node(Node.command("command-901", "lost too", env="host"))
            .add_edge(Edge("command-900", "command-901", SEQUENTIAL))
        )
        unreachable = {v.nodes[0] for v in g.validate().violations if v.code == "unreachable"}
        assert unreachable == {"command-900", "command-901"}

    def test_input_artifact_is_reachable_enough(self):
        g = (
            chain_graph(1)
            .add_node(Node.artifact("artifact-000", "data.csv", "input-data"))
            .add_edge(Edge("artifact-000", "command-000", ARTIFACT_INPUT))
        )
        assert g.validate().ok

    def test_orphan_artifact_unreachable(self):
        g = chain_graph(1).add_node(Node.artifact("artifact-000", "data.csv", "input-data"))
        codes = {v.code for v in g.validate().violations}
        assert "unreachable" in codes


class TestTopologicalOrder:
    def test_chain(self):
        assert chain_graph(2).topological_order() == ["start-000", "command-000", "command-001"]

    def test_diamond_among_valid_orders_with_tiebreak(self):
        g = diamond_graph()
        order = g.topological_order()
        valid = []
        ids = [n.id for n in g.nodes]
        for perm in itertools.permutations(ids):
            pos = {nid: i for i, nid in enumerate(perm)}
            if all(pos[e.src] < pos[e.dst] for e in g.edges):
                valid.append(list(perm))
        assert order in valid
        # lexicographic tie-break: command-001 before command-002
        assert order.index("command-001") < order.index("command-002")

    def test_cycle_raises(self):
        g = chain_graph(2).add_edge(Edge("command-001", "command-000", SEQUENTIAL))
        with pytest.raises(CyclicGraph):
            g.topological_order()

    def test_respects_every_edge(self):
        g = diamond_graph()
        pos = {nid: i for i, nid in enumerate(g.topological_order())}
        for e in g.edges:
            assert pos[e.src] < pos[e.dst]


class TestDownstream:
    def test_leaf_empty(self):
        assert chain_graph(2).downstream_of("command-001") == set()

    def test_start_covers_chain(self):
        g = chain_graph(3)
        assert g.downstream_of("start-000") == {"command-000", "command-001", "command-002"}

    def test_unknown_node(self):
        with pytest.raises(UnknownNode):
            chain_graph(1).downstream_of("ghost")

    def test_monotone_under_edge_addition(self):
        g = diamond_graph()
        before = {nid: g.downstream_of(nid) for nid in (n.id for n in g.nodes)}
        g2 = g.add_edge(Edge("command-001", "command-002", SEQUENTIAL))
        for nid, prev in before.items():
            assert prev <= g2.downstream_of(nid)


class TestStatusTransitions:
    def test_exhaustive_matrix(self):
        for old, new in itertools.product(EXEC_STATES, repeat=2):
            status = ExecStatus(state=old)
            if (old, new) in ALLOWED_TRANSITIONS:
                assert status.transition(new).state == new
            else:
                with pytest.raises(InvalidTransition):
                    status.transition(new)

    def test_allowed_relation_shape(self):
        assert ALLOWED_TRANSITIONS == {
            (PENDING, RUNNING),
            (PENDING, SKIPPED),
            (RUNNING, SUCCEEDED),
            (RUNNING, FAILED),
            (RUNNING, SKIPPED),
            (FAILED, PENDING),
        }

    def test_reset_for_retry(self):
        g = chain_graph(1)
        g = g.with_command_state("command-000", RUNNING)
        g = g.with_command_state("command-000", FAILED)
        g = g.reset_for_retry("command-000")
        assert g.node("command-000").status.state == PENDING


class TestSerialization:
    def test_start_only_round_trip_byte_identical(self):
        g = AEGraph().add_node(Node.start("start-000", use_docker=False))
        text = g.serialize()
        assert deserialize(text).serialize() == text

    def test_round_trip_structural_equality(self):
        g = diamond_graph()
        assert structurally_equal(deserialize(g.serialize()), g)

    def test_invalid_json(self):
        with pytest.raises(ParseError):
            deserialize("{nodes: oops")

    def test_edge_to_unknown_node(self):
        doc = """{"nodes": [{"id": "start-000", "kind": "Start", "use_docker": false}],
                  "edges": [{"src": "start-000", "dst": "ghost", "kind": "Sequential"}]}"""
        with pytest.raises(ValidationFailure):
            deserialize(doc)

    def test_missing_field_diagnostics(self):
        doc = '{"nodes": [{"id": "c1", "kind": "Command", "env": "host"}], "edges": []}'
        with pytest.raises(ParseError) as err:
            deserialize(doc)
        assert "text" in str(err.value)

    def test_serialize_rejects_invalid(self):
        g = chain_graph(2).add_edge(Edge("command-001", "command-000", SEQUENTIAL))
        with pytest.raises(ValidationFailure):
            g.serialize()


def test_id_allocator_per_kind():
    alloc = IdAllocator()
    assert alloc.allocate("Start") == "start-000"
    assert alloc.allocate("Command") == "command-000"
    assert alloc.allocate("Command") == "command-001"
    assert alloc.allocate("Artifact") == "artifact-000"
