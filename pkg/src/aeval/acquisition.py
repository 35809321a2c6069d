"""Stage 1 preprocessing: extract the artifact link and evaluation summary
from a paper text, download the repository, and verify that the artifact
corresponds to the paper. Any failed step halts with a diagnostic record."""

from __future__ import annotations

import json
import logging
import re
import shutil
import subprocess
import tarfile
import zipfile
from dataclasses import dataclass, field
from errno import ENOSPC
from pathlib import Path
from urllib.parse import urlparse
from urllib.request import url2pathname

import requests

from .agent import AgentSession, parse_json_reply, truncate_to_budget
from .errors import (
    AcquisitionHalt,
    ArchiveCorrupt,
    DiskFull,
    NetworkError,
    NotFound,
    UnsupportedScheme,
)

log = logging.getLogger(__name__)

_URL_RE = re.compile(r"(?:https?|file)://[^\s<>()\[\]{}\"']+")
_SECTION_KEYWORDS = ("artifact", "availability", "available", "data", "replication", "reproduc")
_ARCHIVE_SUFFIXES = (".tar.gz", ".tgz", ".tar.bz2", ".tar", ".zip")


@dataclass
class PaperSummary:
    source_path: str
    evaluation_summary: str
    candidate_urls: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "source_path": self.source_path,
            "evaluation_summary": self.evaluation_summary,
            "candidate_urls": list(self.candidate_urls),
        }


@dataclass
class RepoHandle:
    origin_url: str
    resolved_url: str
    local_root: Path
    retrieval_method: str  # git-clone | archive-download | pre-downloaded

    def to_json(self) -> dict:
        return {
            "origin_url": self.origin_url,
            "resolved_url": self.resolved_url,
            "local_root": str(self.local_root),
            "retrieval_method": self.retrieval_method,
        }


@dataclass
class CorrespondenceVerdict:
    score: float
    decision: bool
    rationale: str

    def to_json(self) -> dict:
        return {"score": self.score, "decision": self.decision, "rationale": self.rationale}


# --- link extraction --------------------------------------------------------------


def _find_urls_with_sections(text: str) -> list[tuple[str, bool]]:
    """All URLs in document order, flagged if found under a keyword section."""
    current_section = ""
    found: list[tuple[str, bool]] = []
    for line in text.splitlines():
        header = _header_text(line)
        if header is not None:
            current_section = header.lower()
        in_keyword_section = any(k in current_section for k in _SECTION_KEYWORDS)
        for match in _URL_RE.finditer(line):
            found.append((_strip_trailing_punctuation(match.group(0)), in_keyword_section))
    return found


def _header_text(line: str) -> str | None:
    stripped = line.strip()
    md = re.match(r"^#{1,6}\s+(.*)$", stripped)
    if md:
        return md.group(1)
    tex = re.match(r"^\\(?:sub)*section\*?\{(.*)\}", stripped)
    if tex:
        return tex.group(1)
    if 0 < len(stripped) < 60 and not any(c in stripped for c in ".:/") and len(stripped.split()) <= 6:
        if any(k in stripped.lower() for k in _SECTION_KEYWORDS):
            return stripped
    return None


def extract_links(paper_text: str, llm: AgentSession) -> PaperSummary:
    """Keyword-guided URL extraction plus an LLM evaluation-setup digest.

    URLs come from the text itself; the backend only ranks them and writes
    the summary, so it can never introduce a URL absent from the input.
    """
    if not paper_text.strip():
        raise ValueError("paper text must be nonempty")
    located = _find_urls_with_sections(paper_text)
    ordered: list[str] = []
    for url, _ in sorted(located, key=lambda item: not item[1]):
        normalized = normalize_url(url)
        if normalized not in ordered:
            ordered.append(normalized)
    if not ordered:
        return PaperSummary(source_path="", evaluation_summary="", candidate_urls=[])

    request = (
        "Read this paper text. Reply with one fenced JSON block: "
        '{"evaluation_summary": <concise digest of the experimental setup>, '
        '"ranked_urls": <the artifact repository URLs below, best first>}.\n'
        f"Candidate URLs: {json.dumps(ordered)}\n\n"
        + truncate_to_budget(paper_text, 20_000)
    )

    def parser(reply: str) -> tuple[str, list[str]]:
        obj = parse_json_reply(reply)
        summary = str(obj.get("evaluation_summary", "")).strip()
        urls = obj.get("ranked_urls")
        if not isinstance(urls, list):
            raise ValueError("ranked_urls must be a list")
        return summary, [str(u) for u in urls]

    summary, ranked = llm.ask(request, parser)
    candidates = [normalize_url(u) for u in ranked if _known(u, ordered)]
    for url in ordered:  # keep anything the backend dropped, heuristic order
        if url not in candidates:
            candidates.append(url)
    if not summary:
        summary = truncate_to_budget(paper_text.strip(), 400)
    return PaperSummary(source_path="", evaluation_summary=summary, candidate_urls=candidates)


def _known(url: str, ordered: list[str]) -> bool:
    try:
        return normalize_url(url) in ordered
    except UnsupportedScheme:
        return False


# --- URL normalization --------------------------------------------------------------


def _strip_trailing_punctuation(url: str) -> str:
    return url.rstrip(".,;:!?)]}>'\"")


def normalize_url(url: str, resolver=None) -> str:
    """Canonical, idempotent form of a repository URL.

    file:// passes through untouched (sanctioned for local fixtures); any
    other non-http(s) scheme is rejected. An optional resolver callable may
    follow redirects first (e.g. DOI indirection).
    """
    url = _strip_trailing_punctuation(url.strip())
    parsed = urlparse(url)
    if parsed.scheme == "file":
        return url
    if parsed.scheme not in ("http", "https"):
        raise UnsupportedScheme(f"unsupported scheme {parsed.scheme!r} in {url}")
    if resolver is not None:
        url = _strip_trailing_punctuation(resolver(url))
        parsed = urlparse(url)
    host = parsed.netloc.lower()
    parts = [p for p in parsed.path.split("/") if p]
    if host == "github.com" and len(parts) >= 2:
        owner, repo = parts[0], parts[1]
        repo = repo[:-4] if repo.endswith(".git") else repo
        if len(parts) > 2 and parts[2] in ("archive", "releases"):
            return f"https://github.com/{parsed.path.strip('/')}"
        return f"https://github.com/{owner}/{repo}"
    if host.endswith("zenodo.org") and len(parts) >= 2 and parts[0] in ("record", "records"):
        return f"https://zenodo.org/records/{parts[1]}"
    return f"{parsed.scheme}://{parsed.netloc}{parsed.path}" + (
        f"?{parsed.query}" if parsed.query else ""
    )


def http_resolver(url: str, timeout: int = 30) -> str:
    """Follow redirects with a plain client; returns the final URL."""
    try:
        resp = requests.head(url, allow_redirects=True, timeout=timeout)
        if resp.status_code >= 400:
            resp = requests.get(url, allow_redirects=True, timeout=timeout, stream=True)
            resp.close()
        return str(resp.url)
    except requests.RequestException as exc:
        raise NetworkError(str(exc)) from exc


# --- download --------------------------------------------------------------------


def download_repository(url: str, dest: Path) -> RepoHandle:
    """Materialize the repository under dest; archives are unpacked one level."""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    target = dest / "src"
    if target.exists():
        shutil.rmtree(target)
    parsed = urlparse(url)
    resolved = url
    try:
        if _looks_like_archive(parsed.path):
            resolved = _fetch_archive(url, parsed, target)
            method = "archive-download"
        else:
            _git_clone(url, parsed, target)
            method = "git-clone"
    except OSError as exc:
        if exc.errno == ENOSPC:
            raise DiskFull(str(exc)) from exc
        raise
    local_root = _unwrap_single_dir(target)
    if not any(local_root.iterdir()):
        raise ArchiveCorrupt(f"repository at {url} is empty")
    return RepoHandle(origin_url=url, resolved_url=resolved, local_root=local_root, retrieval_method=method)


def _looks_like_archive(path: str) -> bool:
    return any(path.endswith(sfx) for sfx in _ARCHIVE_SUFFIXES)


def _fetch_archive(url: str, parsed, target: Path) -> str:
    target.mkdir(parents=True, exist_ok=True)
    if parsed.scheme == "file":
        archive = Path(url2pathname(parsed.path))
        if not archive.exists():
            raise NotFound(f"no such file: {archive}")
        data = archive.read_bytes()
        resolved = url
    else:
        try:
            resp = requests.get(url, allow_redirects=True, timeout=120)
        except requests.RequestException as exc:
            raise NetworkError(str(exc)) from exc
        if resp.status_code == 404:
            raise NotFound(url)
        if resp.status_code >= 400:
            raise NetworkError(f"{url} returned {resp.status_code}")
        data = resp.content
        resolved = str(resp.url)
    _unpack(data, parsed.path, target)
    return resolved


def _unpack(data: bytes, name: str, target: Path) -> None:
    import io

    try:
        if name.endswith(".zip"):
            with zipfile.ZipFile(io.BytesIO(data)) as zf:
                _check_members(zf.namelist())
                zf.extractall(target)
        else:
            with tarfile.open(fileobj=io.BytesIO(data)) as tf:
                _check_members(tf.getnames())
                tf.extractall(target)
    except (tarfile.TarError, zipfile.BadZipFile, EOFError) as exc:
        raise ArchiveCorrupt(str(exc)) from exc


def _check_members(names: list[str]) -> None:
    for name in names:
        if name.startswith("/") or ".." in Path(name).parts:
            raise ArchiveCorrupt(f"archive member escapes extraction root: {name}")


def _git_clone(url: str, parsed, target: Path) -> None:
    source = url
    if parsed.scheme == "file":
        source = url2pathname(parsed.path)
        if not Path(source).exists():
            raise NotFound(f"no such repository: {source}")
    proc = subprocess.run(
        ["git", "clone", "--quiet", source, str(target)],
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        stderr = proc.stderr.lower()
        if "not found" in stderr or "does not exist" in stderr or "repository" in stderr and "not" in stderr:
            raise NotFound(f"git clone failed: {proc.stderr.strip()}")
        raise NetworkError(f"git clone failed: {proc.stderr.strip()}")


def _unwrap_single_dir(target: Path) -> Path:
    entries = [p for p in target.iterdir() if p.name != "__MACOSX"]
    if len(entries) == 1 and entries[0].is_dir():
        return entries[0]
    return target


# --- correspondence ---------------------------------------------------------------


def find_readme(root: Path) -> Path | None:
    candidates = sorted(
        (p for p in root.iterdir() if p.is_file() and p.name.lower().startswith("readme")),
        key=lambda p: (p.name.lower() != "readme.md", p.name.lower()),
    )
    return candidates[0] if candidates else None


def verify_correspondence(
    summary: PaperSummary,
    repo: RepoHandle,
    llm: AgentSession,
    threshold: float = 0.6,
) -> CorrespondenceVerdict:
    """Score paper/artifact agreement from the repository README."""
    readme = find_readme(repo.local_root)
    if readme is None:
        return CorrespondenceVerdict(score=0.0, decision=False, rationale="repository has no README")
    readme_text = readme.read_text(encoding="utf-8", errors="replace")
    request = (
        "Compare the paper evaluation summary with the repository README. Reply "
        'with one fenced JSON block: {"score": <similarity in [0,1]>, "rationale": <short text>}.\n\n'
        f"Paper summary:\n{truncate_to_budget(summary.evaluation_summary, 4000)}\n\n"
        f"README:\n{truncate_to_budget(readme_text, 8000)}"
    )

    def parser(reply: str) -> tuple[float, str]:
        obj = parse_json_reply(reply)
        score = float(obj["score"])
        if not 0.0 <= score <= 1.0:
            raise ValueError("score out of range")
        return score, str(obj.get("rationale", ""))

    score, rationale = llm.ask(request, parser)
    return CorrespondenceVerdict(score=score, decision=score >= threshold, rationale=rationale)


# --- pipeline step ------------------------------------------------------------------


@dataclass
class AcquisitionRecord:
    summary: PaperSummary
    repo: RepoHandle | None
    verdict: CorrespondenceVerdict | None
    halted: str | None = None  # failing step name
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "paper_summary": self.summary.to_json(),
            "repo": self.repo.to_json() if self.repo else None,
            "correspondence": self.verdict.to_json() if self.verdict else None,
            "halted": self.halted,
            "diagnostics": self.diagnostics,
        }


def acquire(
    paper_path: Path,
    workdir: Path,
    llm: AgentSession,
    threshold: float = 0.6,
    resolver=None,
) -> AcquisitionRecord:
    """Run the three-step acquisition; writes acquisition.json either way.

    Raises AcquisitionHalt on any failed step; a partial RepoHandle is never
    returned.
    """
    paper_text = Path(paper_path).read_text(encoding="utf-8", errors="replace")
    record = AcquisitionRecord(
        summary=PaperSummary(source_path=str(paper_path), evaluation_summary="", candidate_urls=[]),
        repo=None,
        verdict=None,
    )

    def halt(step: str, message: str) -> AcquisitionHalt:
        record.halted = step
        record.diagnostics = {"step": step, "error": message}
        _write_record(workdir, record)
        return AcquisitionHalt(step, message, record.diagnostics)

    try:
        summary = extract_links(paper_text, llm)
    except Exception as exc:
        raise halt("link-extraction", str(exc)) from exc
    summary.source_path = str(paper_path)
    record.summary = summary
    if not summary.candidate_urls:
        raise halt("link-extraction", "no artifact URLs found in the paper text")

    repo = None
    last_error = "no candidate URLs"
    for url in summary.candidate_urls:
        try:
            resolved = normalize_url(url, resolver=resolver)
            repo = download_repository(resolved, workdir / "repo")
            break
        except Exception as exc:
            last_error = f"{url}: {exc}"
            log.info("download failed for %s: %s", url, exc)
    if repo is None:
        raise halt("download", last_error)
    record.repo = repo

    try:
        verdict = verify_correspondence(summary, repo, llm, threshold=threshold)
    except Exception as exc:
        raise halt("correspondence", str(exc)) from exc
    record.verdict = verdict
    if not verdict.decision:
        raise halt(
            "correspondence",
            f"artifact does not correspond to the paper (score {verdict.score:.2f} < {threshold})",
        )
    _write_record(workdir, record)
    return record


def _write_record(workdir: Path, record: AcquisitionRecord) -> None:
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "acquisition.json").write_text(
        json.dumps(record.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
