"""Minimal Dockerfile grammar: enough to validate synthesized files and to
extract base image and entrypoint without a daemon."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from .errors import InvalidDockerfile

KNOWN_INSTRUCTIONS = {
    "FROM",
    "RUN",
    "COPY",
    "ADD",
    "WORKDIR",
    "ENTRYPOINT",
    "CMD",
    "ENV",
    "ARG",
    "LABEL",
    "EXPOSE",
    "USER",
    "SHELL",
    "VOLUME",
    "HEALTHCHECK",
    "STOPSIGNAL",
}

# Entrypoints that leave command injection semantics unchanged.
STANDARD_ENTRYPOINTS = {"", "sh", "bash", "/bin/sh", "/bin/bash"}


@dataclass(frozen=True)
class Instruction:
    keyword: str
    value: str
    line_no: int


@dataclass(frozen=True)
class Dockerfile:
    instructions: tuple[Instruction, ...]

    @property
    def base_image(self) -> str:
        for ins in self.instructions:
            if ins.keyword == "FROM":
                # strip "AS stage" aliases and platform flags
                parts = [p for p in ins.value.split() if not p.startswith("--")]
                return parts[0] if parts else ""
        return ""

    @property
    def entrypoint(self) -> str:
        """Effective entry command: last ENTRYPOINT, else last CMD, else ''."""
        chosen = ""
        for keyword in ("ENTRYPOINT", "CMD"):
            for ins in self.instructions:
                if ins.keyword == keyword:
                    chosen = _exec_form_to_text(ins.value)
            if chosen:
                return chosen
        return chosen


def _exec_form_to_text(value: str) -> str:
    value = value.strip()
    if value.startswith("["):
        try:
            parts = json.loads(value)
            if isinstance(parts, list):
                return " ".join(str(p) for p in parts)
        except json.JSONDecodeError:
            pass
    return value


def parse_dockerfile(text: str) -> Dockerfile:
    """Parse or raise InvalidDockerfile with a line diagnostic."""
    if not text.strip():
        raise InvalidDockerfile("empty Dockerfile")
    instructions: list[Instruction] = []
    pending = ""
    pending_start = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not pending and (not line or line.startswith("#")):
            continue
        if not pending:
            pending_start = line_no
        pending += (" " if pending else "") + line.rstrip("\\").strip()
        if line.endswith("\\"):
            continue
        match = re.match(r"^([A-Za-z]+)\s+(.+)$", pending)
        if not match:
            raise InvalidDockerfile(f"line {pending_start}: cannot parse {pending!r}")
        keyword = match.group(1).upper()
        if keyword not in KNOWN_INSTRUCTIONS:
            raise InvalidDockerfile(f"line {pending_start}: unknown instruction {keyword}")
        instructions.append(Instruction(keyword, match.group(2).strip(), pending_start))
        pending = ""
    if pending:
        raise InvalidDockerfile("unterminated line continuation")
    first_real = next((i for i in instructions if i.keyword != "ARG"), None)
    if first_real is None or first_real.keyword != "FROM":
        raise InvalidDockerfile("first instruction must be FROM")
    return Dockerfile(tuple(instructions))


def is_standard_entrypoint(entrypoint: str) -> bool:
    return entrypoint.strip() in STANDARD_ENTRYPOINTS
