"""Run configuration: tunables, limits, and the config-file/flag/env merge.

Precedence (lowest to highest): config file, command-line flags, environment
variables (AE_LLM_ENDPOINT, AE_LLM_KEY, AE_DOCKER_HOST).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass(frozen=True)
class Limits:
    """Agent interaction bounds."""

    max_turns: int = 60
    compression_threshold_tokens: int = 100_000
    output_truncation_chars: int = 8_000
    reprompt_limit: int = 3
    token_chars: int = 4  # chars-per-token estimate calibration


@dataclass(frozen=True)
class Settings:
    """Pipeline tunables beyond the agent limits."""

    correspondence_threshold: float = 0.6
    image_build_attempts: int = 3
    command_attempts: int = 5  # 1 initial + 4 retries
    command_timeout_s: int = 1800
    stall_window_s: int = 180
    stall_sample_interval_s: int = 10
    stall_cpu_threshold_pct: float = 5.0
    doc_file_char_cap: int = 40_000
    doc_total_char_cap: int = 120_000
    digest_chars: int = 500
    container_workdir: str = "/workspace"
    deep_diagnosis: bool = False
    model: str = ""
    llm_endpoint: str = ""
    llm_key: str = ""
    docker_host: str = ""

    @property
    def stall_window_samples(self) -> int:
        return self.stall_window_s // self.stall_sample_interval_s


@dataclass
class RunConfig:
    """One evaluation run: exactly one of paper/repo set."""

    paper: str | None = None
    repo: str | None = None
    backend: str = ""
    runtime: str = ""
    workdir: str = "aeval-work"
    policy: str = "no-sudo"
    jobs: int = 1
    limits: Limits = field(default_factory=Limits)
    settings: Settings = field(default_factory=Settings)

    def validate(self) -> None:
        if bool(self.paper) == bool(self.repo):
            raise ConfigError("exactly one of --paper or --repo must be given")
        if not self.backend:
            raise ConfigError("backend not configured (use --backend mock:<script> or remote)")
        if not self.runtime:
            raise ConfigError("runtime not configured (use --runtime fake:<scenario> or daemon)")
        if self.policy not in ("no-sudo", "prompt-sudo"):
            raise ConfigError(f"unknown privilege policy {self.policy!r}")
        if self.jobs < 1:
            raise ConfigError("--jobs must be >= 1")


def _dataclass_update(obj, values: dict):
    known = {f.name for f in dataclasses.fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return dataclasses.replace(obj, **values)


def load_config(
    config_file: str | None,
    flag_values: dict | None = None,
    env: dict | None = None,
) -> RunConfig:
    """Merge file < flags < env into a RunConfig."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file not found: {config_file}")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid config file: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must be a mapping")
        cfg = _apply_doc(cfg, doc)
    for key, value in (flag_values or {}).items():
        if value is None:
            continue
        if key in ("limits", "settings"):
            cfg = _apply_doc(cfg, {key: value})
        else:
            cfg = _apply_doc(cfg, {key: value})
    # Environment variables win over everything.
    overrides = {}
    if env.get("AE_LLM_ENDPOINT"):
        overrides["llm_endpoint"] = env["AE_LLM_ENDPOINT"]
    if env.get("AE_LLM_KEY"):
        overrides["llm_key"] = env["AE_LLM_KEY"]
    if env.get("AE_DOCKER_HOST"):
        overrides["docker_host"] = env["AE_DOCKER_HOST"]
    if overrides:
        cfg.settings = _dataclass_update(cfg.settings, overrides)
    return cfg


def _apply_doc(cfg: RunConfig, doc: dict) -> RunConfig:
    doc = dict(doc)
    limits = doc.pop("limits", None)
    settings = doc.pop("settings", None)
    for key, value in doc.items():
        if key not in {f.name for f in dataclasses.fields(RunConfig)}:
            raise ConfigError(f"unknown config key: {key}")
        setattr(cfg, key, value)
    if limits:
        cfg.limits = _dataclass_update(cfg.limits, dict(limits))
    if settings:
        cfg.settings = _dataclass_update(cfg.settings, dict(settings))
    return cfg
