"""Aggregate evaluation documentation and drive the backend to produce the
initial execution graph.

The builder extracts, never invents: every Command node text must appear
verbatim (modulo surrounding whitespace and code-fence markers) somewhere in
the documentation bundle, or the reply is rejected and re-prompted.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .acquisition import RepoHandle
from .agent import AgentSession, parse_json_reply, truncate_to_budget
from .config import Settings
from .errors import NoDocumentation, UnparseableReply
from .graph import (
    ARTIFACT,
    COMMAND,
    SEQUENTIAL,
    START,
    AEGraph,
    IdAllocator,
    from_document,
)

log = logging.getLogger(__name__)

_DOC_PREFIXES = ("readme", "requirements", "setup", "install")


@dataclass
class DocBundle:
    """Documentation files relevant to evaluation, size-capped."""

    files: list[tuple[str, str]] = field(default_factory=list)

    @property
    def total_chars(self) -> int:
        return sum(len(text) for _, text in self.files)

    def render(self) -> str:
        parts = []
        for path, text in self.files:
            parts.append(f"===== {path} =====\n{text}")
        return "\n\n".join(parts)

    def full_text(self) -> str:
        return "\n".join(text for _, text in self.files)


def _is_doc_file(rel: Path) -> bool:
    name = rel.name.lower()
    if len(rel.parts) == 1:
        return name.startswith(_DOC_PREFIXES) or name.endswith(".md")
    if len(rel.parts) == 2 and rel.parts[0] == "docs":
        return name.endswith(".md")
    return False


def collect_docs(repo: RepoHandle, settings: Settings | None = None) -> DocBundle:
    """Gather README/REQUIREMENTS/SETUP/INSTALL files plus root and docs/ markdown.

    Root README first, then lexicographic order; per-file and total character
    caps are applied with head-tail truncation. Raises NoDocumentation when
    nothing matches (callers route to the undocumented report path).
    """
    settings = settings or Settings()
    root = Path(repo.local_root)
    matched: list[Path] = []
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(root)
        if _is_doc_file(rel):
            matched.append(rel)

    def sort_key(rel: Path):
        name = rel.name.lower()
        is_root_readme = len(rel.parts) == 1 and name.startswith("readme")
        return (not is_root_readme, str(rel))

    matched.sort(key=sort_key)
    bundle = DocBundle()
    remaining = settings.doc_total_char_cap
    for rel in matched:
        if remaining <= 0:
            break
        text = (root / rel).read_text(encoding="utf-8", errors="replace")
        budget = min(settings.doc_file_char_cap, remaining)
        text = truncate_to_budget(text, budget)
        bundle.files.append((str(rel), text))
        remaining -= len(text)
    if not bundle.files:
        raise NoDocumentation(f"no documentation files under {root}")
    return bundle


_GRAPH_REQUEST = """\
Translate the evaluation instructions in the documentation below into an
execution graph. Reply with one fenced JSON block of the form:
{"chain_of_thought": "<your reasoning>",
 "graph": {"nodes": [...], "edges": [...]}}

Node objects: {"id", "kind": "Start"|"Command"|"Artifact", and for Start
"use_docker": bool; for Command "text": <one executable shell instruction,
no prose>, "env": "host"; for Artifact "path": <repository-relative path>,
"type": "input-data"|"output-data"|"config"|"script"|"other"}.
Edge objects: {"src", "dst", "kind": "Sequential"|"ArtifactInput"|"ArtifactOutput"}.

Rules: exactly one Start node; set use_docker true only when the docs
prescribe container usage; copy command text verbatim from the docs
(fenced code blocks are the primary source, inline code secondary);
preserve placeholders like <your_path> untouched; artifact paths exactly
as written. The root README is authoritative when documents conflict.

Documentation bundle:
"""


def build_initial_graph(bundle: DocBundle, llm: AgentSession) -> AEGraph:
    """Parse the documentation into a validated graph via the backend.

    The reply is renumbered to canonical ids, missing Start links are added,
    and the result must pass graph validation plus the verbatim-command
    check; invalid replies are re-prompted up to the session limit.
    """
    if not bundle.files:
        raise ValueError("documentation bundle is empty")
    corpus = _normalize_ws(bundle.full_text())
    request = _GRAPH_REQUEST + truncate_to_budget(bundle.render(), 60_000)

    def parser(reply: str) -> AEGraph:
        obj = parse_json_reply(reply)
        doc = obj.get("graph", obj)
        thought = obj.get("chain_of_thought")
        if thought:
            log.debug("graph construction reasoning: %s", str(thought)[:2000])
        graph = _decode_llm_graph(doc)
        for node in graph.command_nodes():
            if _normalize_ws(node.text) not in corpus:
                raise ValueError(f"command not found in documentation: {node.text!r}")
        result = graph.validate()
        if not result.ok:
            raise ValueError("; ".join(v.message for v in result.violations))
        return graph

    try:
        graph = llm.ask(request, parser)
    except UnparseableReply as exc:
        raise UnparseableReply(f"graph construction failed: {exc}") from exc
    if not graph.command_nodes():
        log.warning("NoCommands: documentation yielded a Start-only graph")
    return graph


def _normalize_ws(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def _decode_llm_graph(doc) -> AEGraph:
    """Renumber backend-chosen ids to <kind>-<index> and repair Start links."""
    if not isinstance(doc, dict) or not isinstance(doc.get("nodes"), list):
        raise ValueError("reply must contain a graph object with nodes")
    nodes = doc["nodes"]
    edges = doc.get("edges", [])
    if not isinstance(edges, list):
        raise ValueError("edges must be a list")
    alloc = IdAllocator()
    id_map: dict[str, str] = {}
    renumbered = []
    for obj in nodes:
        if not isinstance(obj, dict) or "id" not in obj or "kind" not in obj:
            raise ValueError("node entries need id and kind")
        kind = obj["kind"]
        if kind not in (START, COMMAND, ARTIFACT):
            raise ValueError(f"unknown node kind {kind!r}")
        new_id = alloc.allocate(kind)
        id_map[str(obj["id"])] = new_id
        clean = dict(obj)
        clean["id"] = new_id
        if kind == COMMAND:
            clean.setdefault("env", "host")
            clean.pop("status", None)
        renumbered.append(clean)
    remapped_edges = []
    for obj in edges:
        if not isinstance(obj, dict):
            raise ValueError("edge entries must be objects")
        src, dst = str(obj.get("src")), str(obj.get("dst"))
        if src not in id_map or dst not in id_map:
            raise ValueError(f"edge references unknown node: {src} -> {dst}")
        remapped_edges.append({"src": id_map[src], "dst": id_map[dst], "kind": obj.get("kind")})

    start_ids = [n["id"] for n in renumbered if n["kind"] == START]
    if not start_ids:
        raise ValueError("graph has no Start node")
    start_id = start_ids[0]
    with_incoming_seq = {
        e["dst"] for e in remapped_edges if e["kind"] == SEQUENTIAL
    }
    for node in renumbered:
        if node["kind"] == COMMAND and node["id"] not in with_incoming_seq:
            remapped_edges.append({"src": start_id, "dst": node["id"], "kind": SEQUENTIAL})
    return from_document({"nodes": renumbered, "edges": remapped_edges})


def write_graph(graph: AEGraph, path: Path) -> None:
    Path(path).write_text(graph.serialize(), encoding="utf-8")
