"""Project configuration: a TOML file with an explicit schema version.

CLI flags override config keys; the loader validates that every referenced
path exists so a bad config fails before any stage runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import tomli

CONFIG_SCHEMA = "auditforge/1"


class ConfigError(ValueError):
    """The project config file is missing, malformed, or references
    paths that do not exist."""


@dataclass(frozen=True)
class GatewaySettings:
    backend: str = "stub"  # stub | http
    fixtures: str = ""
    endpoint_url: str = ""
    model_name: str = "default"
    max_retries: int = 3
    parallelism: int = 4


@dataclass(frozen=True)
class DistillSettings:
    catalog: str = ""  # empty -> built-in catalog
    templates: str = ""  # empty -> shipped agent templates
    policy: str = "round-robin"
    seed: int = 0


@dataclass(frozen=True)
class PreprocessSettings:
    max_tokens: int = 4096
    dedup_threshold: float = 0.9
    strip_comments: bool = False
    instruction: str = ""  # empty -> default instruction text


@dataclass(frozen=True)
class GateSettings:
    baseline_label_loss: float = 1.12
    finish_threshold: float = 0.84
    removal_threshold: float = 1.74
    rationale_weight: float = 0.7
    assumed_correct_probability: float = 0.7
    assumed_rationale_confidence: float = 0.8
    max_iterations: int = 10
    revision_fraction: float = 0.1
    state: str = ""
    predictions: str = ""  # glob


@dataclass(frozen=True)
class PathSettings:
    out_dir: str = "out"
    seeds: str = ""
    corpus: str = ""
    reports_dir: str = ""


@dataclass(frozen=True)
class ProjectConfig:
    gateway: GatewaySettings = GatewaySettings()
    distill: DistillSettings = DistillSettings()
    preprocess: PreprocessSettings = PreprocessSettings()
    gate: GateSettings = GateSettings()
    paths: PathSettings = PathSettings()
    base_dir: Path = field(default_factory=Path)

    def resolve(self, value: str) -> Path:
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path


def _section(payload: dict, name: str, cls):
    raw = payload.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"config section [{name}] must be a table")
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"config section [{name}] has unknown key {sorted(unknown)[0]!r}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"config section [{name}]: {exc}") from exc


def load_project_config(path: str | Path) -> ProjectConfig:
    path = Path(path)
    try:
        payload = tomli.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    if payload.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(
            f"config schema mismatch in {path}: expected {CONFIG_SCHEMA!r}, "
            f"got {payload.get('schema')!r}"
        )
    config = ProjectConfig(
        gateway=_section(payload, "gateway", GatewaySettings),
        distill=_section(payload, "distill", DistillSettings),
        preprocess=_section(payload, "preprocess", PreprocessSettings),
        gate=_section(payload, "gate", GateSettings),
        paths=_section(payload, "paths", PathSettings),
        base_dir=path.parent,
    )
    return config


def validate_stage_inputs(config: ProjectConfig, stages: list[str]) -> None:
    """Check that every path a requested stage needs exists, before running."""
    required: list[tuple[str, str]] = []
    if "distill" in stages:
        required.append(("paths.seeds", config.paths.seeds))
        if config.distill.catalog:
            required.append(("distill.catalog", config.distill.catalog))
        if config.distill.templates:
            required.append(("distill.templates", config.distill.templates))
        if config.gateway.backend == "stub":
            required.append(("gateway.fixtures", config.gateway.fixtures))
    if "gate-step" in stages:
        required.append(("gate.state", config.gate.state))
    if "evaluate" in stages:
        required.append(("paths.corpus", config.paths.corpus))
        required.append(("paths.reports_dir", config.paths.reports_dir))
    for key, value in required:
        if not value:
            raise ConfigError(f"config key {key} is required for the requested stages")
        if not config.resolve(value).exists():
            raise ConfigError(f"config key {key} references a missing path: {value}")
