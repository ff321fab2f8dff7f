# -*- coding: utf-8 -*-
"""
流水线配置 - Pipeline configuration
One YAML file, validated by pydantic; unknown keys are rejected at every level.

Lookup order: explicit ``--config`` path, ``$CI_REPLAY_CONFIG``,
``./ci-replay.yaml`` when present, then built-in defaults.
"""
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Set

import yaml
from pydantic import BaseModel, ConfigDict, Field, SecretStr, ValidationError, field_validator

from .catalog import ProjectFamily
from .errors import ConfigError
from .models import Forge, utc_iso

logger = logging.getLogger(__name__)

CONFIG_ENV = "CI_REPLAY_CONFIG"
DEFAULT_CONFIG_NAME = "ci-replay.yaml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ForgeSettings(_Section):
    base_url: str
    token_env: str
    fallback_token_env: str = "PHANTOMRUN_TOKEN"
    per_page: int = Field(default=100, ge=1, le=100)
    page_cap: int = Field(default=10, ge=1)

    @field_validator("base_url")
    @classmethod
    def _https(cls, v: str) -> str:
        if not v.startswith("https://"):
            raise ValueError(f"base_url must be an absolute https URL: {v!r}")
        return v.rstrip("/")

    def token(self) -> SecretStr:
        """从环境变量读取令牌 - read the PAT from the environment"""
        return SecretStr(os.getenv(self.token_env) or os.getenv(self.fallback_token_env) or "")


def _default_forges() -> Dict[Forge, ForgeSettings]:
    return {
        Forge.GITHUB: ForgeSettings(base_url="https://api.github.com", token_env="PHANTOMRUN_GITHUB_TOKEN"),
        Forge.GITLAB: ForgeSettings(base_url="https://gitlab.com", token_env="PHANTOMRUN_GITLAB_TOKEN"),
    }


class DiscoveryCriteria(_Section):
    required_topic: str = "embedded"
    allowed_languages: Set[str] = Field(default_factory=lambda: {"C", "C++"})
    min_stars_exclusive: int = Field(default=20, ge=0)
    window_end: str = "2025-10-03T00:00:00Z"

    @field_validator("allowed_languages")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("allowed_languages must not be empty")
        return v

    @field_validator("window_end", mode="before")
    @classmethod
    def _utc(cls, v) -> str:
        return utc_iso(v)

    def admits(self, repo) -> bool:
        return (self.required_topic in repo.topics
                and repo.primary_language in self.allowed_languages
                and repo.stars > self.min_stars_exclusive)


class WorkflowFilter(_Section):
    """build_workflow(r) 判定 - allow/deny token lists"""
    allow: List[str] = Field(default_factory=lambda: ["build", "compile", "firmware", "twister", "ci"])
    deny: List[str] = Field(default_factory=lambda: ["docs", "doc", "lint", "format", "labeler", "bot", "stale"])


class NormalizationConfig(_Section):
    # "*" is one path segment: <repo>/<repo> on GitHub runners, <namespace>/<project> on GitLab
    path_prefixes_to_strip: List[str] = Field(default_factory=lambda: [
        "/home/runner/work/*/*", "/__w/*/*", "/builds/*/*", "/github/workspace", "/workspace",
    ])
    strip_timestamps: bool = True
    canonical_reorder: bool = True
    drop_severities: List[str] = Field(default_factory=lambda: ["note"])

    @field_validator("path_prefixes_to_strip")
    @classmethod
    def _absolute(cls, v: List[str]) -> List[str]:
        for prefix in v:
            if not prefix.startswith("/"):
                raise ValueError(f"path prefix must be absolute: {prefix!r}")
            if any("*" in s and s != "*" for s in prefix.split("/")):
                raise ValueError(f"'*' must be a whole path segment: {prefix!r}")
        return v


class RuntimeSettings(_Section):
    command: str = "docker"
    build_flags: List[str] = Field(default_factory=list)
    run_flags: List[str] = Field(default_factory=list)
    timeout_minutes: float = Field(default=60, gt=0)
    keep_images: bool = False


class ProjectSettings(_Section):
    label: Optional[str] = None
    profile: ProjectFamily = ProjectFamily.GENERIC
    workflow: Optional[str] = None
    # git URL or local path; defaults to the forge web host
    clone_url: Optional[str] = None


def default_runner_images() -> Dict[str, str]:
    return {
        "ubuntu-latest": "ubuntu:24.04",
        "ubuntu-24.04": "ubuntu:24.04",
        "ubuntu-22.04": "ubuntu:22.04",
        "ubuntu-20.04": "ubuntu:20.04",
    }


def default_action_adapters() -> Dict[str, List[str]]:
    # 空列表 = 步骤在容器中无需执行
    return {
        "actions/checkout": [],
        "actions/cache": [],
        "actions/upload-artifact": [],
        "actions/download-artifact": [],
        "actions/setup-python": ["command -v python3"],
        "carlosperate/arm-none-eabi-gcc-action": ["command -v arm-none-eabi-gcc"],
    }


class PipelineConfig(_Section):
    forges: Dict[Forge, ForgeSettings] = Field(default_factory=_default_forges)
    discovery: DiscoveryCriteria = Field(default_factory=DiscoveryCriteria)
    workflow_filter: WorkflowFilter = Field(default_factory=WorkflowFilter)
    normalization: NormalizationConfig = Field(default_factory=NormalizationConfig)
    runtime: RuntimeSettings = Field(default_factory=RuntimeSettings)
    runner_images: Dict[str, str] = Field(default_factory=default_runner_images)
    action_adapters: Dict[str, List[str]] = Field(default_factory=default_action_adapters)
    projects: Dict[str, ProjectSettings] = Field(default_factory=dict)
    parallelism: int = Field(default=4, ge=1)
    dataset_root: Path = Path("dataset")
    fixtures_dir: Optional[Path] = None
    catalog_path: Optional[Path] = None

    def forge(self, forge: Forge) -> ForgeSettings:
        if forge not in self.forges:
            raise ConfigError(f"no settings for forge {forge.value}")
        return self.forges[forge]

    def project(self, slug: str) -> ProjectSettings:
        return self.projects.get(slug, ProjectSettings())

    def project_label(self, repo) -> str:
        """报表中的项目名 - label used in report tables"""
        return self.project(repo.slug).label or repo.name


def resolve_config_path(explicit: Optional[str] = None) -> Optional[Path]:
    if explicit:
        return Path(explicit)
    env = os.getenv(CONFIG_ENV)
    if env:
        return Path(env)
    local = Path(DEFAULT_CONFIG_NAME)
    return local if local.is_file() else None


def load_config(explicit: Optional[str] = None) -> PipelineConfig:
    path = resolve_config_path(explicit)
    if path is None:
        logger.debug("[CONFIG] no config file, using defaults")
        return PipelineConfig()
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    try:
        config = PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e
    logger.info(f"[CONFIG] loaded {path}")
    return config
