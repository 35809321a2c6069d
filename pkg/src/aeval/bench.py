"""Ground-truth model and metric computation: artifact manifests with Golden
Command Sets, transcript matching, and exact-rational scoring of evaluation
runs (badge consistency, link consistency, acquisition success, interventions)."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path

from .errors import CardinalityMismatch, ParseError
from .execution import ExecutionTranscript

MANIFEST_VERSION = 1

MATCH_MODES = ("exact", "normalized", "regex")

_WORKSPACE_PREFIX = "/workspace/"


@dataclass(frozen=True)
class Ratio:
    """Exact count ratio; unlike Fraction, never reduced (6/6 stays 6/6)."""

    numerator: int
    denominator: int

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.numerator, self.denominator)


@dataclass(frozen=True)
class GcsEntry:
    command: str
    match_mode: str = "normalized"


@dataclass
class ArtifactManifest:
    artifact_id: str
    source_venue: str
    repo_url: str
    env_kind: str  # docker | non-docker
    functional_label: bool
    gcs: list[GcsEntry] = field(default_factory=list)
    split: str | None = None  # exploration | validation


@dataclass
class RunResult:
    """Per-artifact outcome of one evaluation run, as scored inputs."""

    artifact_id: str
    link_ok: bool
    acquired: bool
    functional_verdict: bool
    interventions: int
    ok_commands: list[str] = field(default_factory=list)
    cost_usd: float | None = None


@dataclass
class PerArtifactScore:
    artifact_id: str
    link_ok: bool
    acquired: bool
    gcs_all_executed: bool
    badge_consistent: bool
    interventions: int

    def to_json(self) -> dict:
        return {
            "artifact_id": self.artifact_id,
            "link_ok": self.link_ok,
            "acquired": self.acquired,
            "gcs_all_executed": self.gcs_all_executed,
            "badge_consistent": self.badge_consistent,
            "interventions": self.interventions,
        }


@dataclass
class ScoreCard:
    lcr: Ratio
    rasr: Ratio
    bcr: Ratio
    mean_intervention: Ratio
    per_artifact: list[PerArtifactScore]
    mean_cost_usd: float | None = None

    def to_json(self) -> dict:
        return {
            "lcr": _ratio_json(self.lcr),
            "rasr": _ratio_json(self.rasr),
            "bcr": _ratio_json(self.bcr),
            "mean_intervention": {
                "numerator": self.mean_intervention.numerator,
                "denominator": self.mean_intervention.denominator,
                "value": float(self.mean_intervention.fraction),
            },
            "mean_cost_usd": self.mean_cost_usd,
            "per_artifact": [p.to_json() for p in self.per_artifact],
        }


def _ratio_json(ratio: Ratio) -> dict:
    return {
        "numerator": ratio.numerator,
        "denominator": ratio.denominator,
        "percent": render_percent(ratio),
    }


def render_percent(value) -> str:
    """Exact rational (Ratio or Fraction) as a percent string, half-up."""
    pct = (Decimal(value.numerator) * 100 / Decimal(value.denominator)).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )
    if pct == pct.to_integral_value():
        return f"{int(pct)}%"
    return f"{pct}%"


# --- manifests --------------------------------------------------------------------


def load_manifest(path: str | Path) -> list[ArtifactManifest]:
    """Load and validate the versioned manifest file."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not valid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(doc, dict) or doc.get("version") != MANIFEST_VERSION:
        raise ParseError(f"manifest must declare version {MANIFEST_VERSION}")
    entries = doc.get("artifacts")
    if not isinstance(entries, list):
        raise ParseError("manifest must contain an artifacts list", field="artifacts")
    manifests = []
    for i, entry in enumerate(entries):
        manifests.append(_manifest_from_obj(entry, i))
    return manifests


def _manifest_from_obj(entry, index: int) -> ArtifactManifest:
    where = f"artifacts[{index}]"
    if not isinstance(entry, dict):
        raise ParseError("manifest entry must be an object", field=where)
    label = str(entry.get("label", "")).lower()
    if label not in ("functional", "reusable", "none"):
        raise ParseError(f"label must be functional/reusable/none, got {label!r}", field=f"{where}.label")
    functional = label in ("functional", "reusable")  # reusable implies functional
    gcs = []
    for j, g in enumerate(entry.get("gcs", [])):
        if isinstance(g, str):
            g = {"command": g}
        mode = g.get("match_mode", "normalized")
        if mode not in MATCH_MODES:
            raise ParseError(f"unknown match_mode {mode!r}", field=f"{where}.gcs[{j}]")
        if mode == "regex":
            try:
                re.compile(g["command"])
            except re.error as exc:
                raise ParseError(f"bad regex: {exc}", field=f"{where}.gcs[{j}]") from exc
        gcs.append(GcsEntry(command=g["command"], match_mode=mode))
    if functional and not gcs:
        raise ParseError("functional-labeled artifacts need a nonempty GCS", field=f"{where}.gcs")
    env_kind = entry.get("env_kind", "docker")
    if env_kind not in ("docker", "non-docker"):
        raise ParseError(f"env_kind must be docker/non-docker", field=f"{where}.env_kind")
    return ArtifactManifest(
        artifact_id=str(entry.get("artifact_id") or f"artifact-{index}"),
        source_venue=str(entry.get("source_venue", "")),
        repo_url=str(entry.get("repo_url", "")),
        env_kind=env_kind,
        functional_label=functional,
        gcs=gcs,
        split=entry.get("split"),
    )


# --- matching --------------------------------------------------------------------


def normalize_command(command: str) -> str:
    """Collapse whitespace and strip container path-prefix rewrites."""
    tokens = []
    for token in command.split():
        if token.startswith(_WORKSPACE_PREFIX):
            token = token[len(_WORKSPACE_PREFIX):]
        if token.startswith("./"):
            token = token[2:]
        tokens.append(token)
    return " ".join(tokens)


def match_gcs_commands(ok_commands: list[str], gcs: list[GcsEntry]) -> list[bool]:
    """Per-entry match flags against successfully executed command texts."""
    flags = []
    normalized_ok = [normalize_command(c) for c in ok_commands]
    for entry in gcs:
        if entry.match_mode == "exact":
            flags.append(entry.command in ok_commands)
        elif entry.match_mode == "normalized":
            flags.append(normalize_command(entry.command) in normalized_ok)
        else:
            pattern = re.compile(entry.command)
            flags.append(any(pattern.search(c) for c in ok_commands))
    return flags


def match_gcs(transcript: ExecutionTranscript, gcs: list[GcsEntry]) -> list[bool]:
    return match_gcs_commands(transcript.ok_commands(), gcs)


# --- scoring --------------------------------------------------------------------


def score(manifests: list[ArtifactManifest], run_results: list[RunResult]) -> ScoreCard:
    """Exact-rational metrics over one run result per manifest entry."""
    if not manifests:
        raise CardinalityMismatch("empty manifest")
    by_id = {r.artifact_id: r for r in run_results}
    missing = [m.artifact_id for m in manifests if m.artifact_id not in by_id]
    if missing or len(run_results) != len(manifests):
        raise CardinalityMismatch(
            f"need exactly one run result per manifest entry; missing={missing} "
            f"got {len(run_results)} results for {len(manifests)} artifacts"
        )
    total = len(manifests)
    per_artifact = []
    links = acquired = consistent = 0
    interventions_sum = 0
    costs = []
    for manifest in manifests:
        result = by_id[manifest.artifact_id]
        flags = match_gcs_commands(result.ok_commands, manifest.gcs)
        gcs_all = all(flags)  # vacuously true for an empty GCS
        badge_consistent = gcs_all and (result.functional_verdict == manifest.functional_label)
        links += result.link_ok
        acquired += result.acquired
        consistent += badge_consistent
        interventions_sum += result.interventions
        if result.cost_usd is not None:
            costs.append(result.cost_usd)
        per_artifact.append(
            PerArtifactScore(
                artifact_id=manifest.artifact_id,
                link_ok=result.link_ok,
                acquired=result.acquired,
                gcs_all_executed=gcs_all,
                badge_consistent=badge_consistent,
                interventions=result.interventions,
            )
        )
    return ScoreCard(
        lcr=Ratio(links, total),
        rasr=Ratio(acquired, total),
        bcr=Ratio(consistent, total),
        mean_intervention=Ratio(interventions_sum, total),
        per_artifact=per_artifact,
        mean_cost_usd=(sum(costs) / len(costs)) if costs else None,
    )


def score_by_split(
    manifests: list[ArtifactManifest], run_results: list[RunResult]
) -> dict[str, ScoreCard]:
    """Aggregate plus one scorecard per declared split."""
    cards = {"all": score(manifests, run_results)}
    by_id = {r.artifact_id: r for r in run_results}
    splits = sorted({m.split for m in manifests if m.split})
    for split in splits:
        subset = [m for m in manifests if m.split == split]
        cards[split] = score(subset, [by_id[m.artifact_id] for m in subset])
    return cards


def render_table(card: ScoreCard) -> str:
    """Columns mirroring the benchmark report layout."""
    mean_interventions = float(card.mean_intervention.fraction)
    cost = f"{card.mean_cost_usd:.3f}" if card.mean_cost_usd is not None else "-"
    header = f"{'LCR':>8} {'RASR':>8} {'BCR':>8} {'Intervention Count':>20} {'Cost ($)':>10}"
    row = (
        f"{render_percent(card.lcr):>8} {render_percent(card.rasr):>8} "
        f"{render_percent(card.bcr):>8} {mean_interventions:>20.2f} {cost:>10}"
    )
    return header + "\n" + row


def run_result_from_report(report_path: str | Path, artifact_id: str) -> RunResult:
    """Build a scoreable result from an evaluation run's report.json."""
    doc = json.loads(Path(report_path).read_text(encoding="utf-8"))
    metrics = doc.get("metrics_input", {})
    return RunResult(
        artifact_id=artifact_id,
        link_ok=bool(metrics.get("link_ok")),
        acquired=bool(metrics.get("acquired")),
        functional_verdict=bool(metrics.get("functional")),
        interventions=int(metrics.get("interventions", 0)),
        ok_commands=list(metrics.get("executed_ok_commands", [])),
        cost_usd=metrics.get("cost_usd"),
    )
