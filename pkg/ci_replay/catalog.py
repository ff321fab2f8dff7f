# -*- coding: utf-8 -*-
"""
模式目录 - Pattern catalog loader
Reads ``data/catalog.yaml`` (or a configured replacement) into validated,
pre-compiled rule tables shared by logparse, miner and reconstructor.
"""
import hashlib
import logging
import re
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .models import Category, CauseKind, Severity, Tool

logger = logging.getLogger(__name__)

DEFAULT_CATALOG = Path(__file__).parent / "data" / "catalog.yaml"


class ProjectFamily(str, Enum):
    AUTOTOOLS_MAKE = "autotools_make"
    CMAKE_NINJA = "cmake_ninja"
    MAKE_BUILDROOT = "make_buildroot"
    SCONS_PLATFORMIO = "scons_platformio"
    GENERIC = "generic"


class _Rule(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


def _compile(pattern: str) -> re.Pattern:
    try:
        return re.compile(pattern)
    except re.error as e:
        raise ValueError(f"bad regex {pattern!r}: {e}") from e


class PatternSpec(_Rule):
    name: str
    regex: str
    tool: Tool
    severity: Optional[Severity] = None
    category: Optional[Category] = None
    message: Optional[str] = None
    terminal: bool = False
    continuation: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        compiled = _compile(self.regex)
        groups = set(compiled.groupindex)
        if self.severity is None and "severity" not in groups:
            raise ValueError(f"pattern {self.name}: needs a fixed severity or a 'severity' group")
        if self.message is None and "message" not in groups:
            raise ValueError(f"pattern {self.name}: needs a message template or a 'message' group")
        return self

    @property
    def compiled(self) -> re.Pattern:
        return _compiled(self.regex)


@lru_cache(maxsize=None)
def _compiled(regex: str) -> re.Pattern:
    return re.compile(regex)


class StageMarker(_Rule):
    stage_name: str
    start_pattern: str

    @field_validator("start_pattern")
    @classmethod
    def _valid(cls, v: str) -> str:
        _compile(v)
        return v


class StageProfile(_Rule):
    project_family: ProjectFamily
    stage_markers: Tuple[StageMarker, ...]

    @field_validator("stage_markers")
    @classmethod
    def _markers(cls, v):
        if not v:
            raise ValueError("stage_markers must not be empty")
        names = [m.stage_name for m in v]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate stage names in profile: {names}")
        return v


class CategoryRule(_Rule):
    category: Category
    regex: str


class ContinuationRule(_Rule):
    append: bool = False
    patterns: Tuple[str, ...]


class CauseRule(_Rule):
    kind: CauseKind
    patterns: Tuple[str, ...]


class MarkerRule(_Rule):
    name: str
    regex: str


class TracebackRule(_Rule):
    start: str
    frame: str


class Catalog(_Rule):
    version: int = 1
    auxiliary: Tuple[str, ...] = ()
    timestamps: Tuple[str, ...] = ()
    severity_words: Dict[str, Severity] = Field(default_factory=dict)
    continuations: Dict[str, ContinuationRule] = Field(default_factory=dict)
    categories: Tuple[CategoryRule, ...] = ()
    base: Tuple[PatternSpec, ...] = ()
    traceback: Optional[TracebackRule] = None
    extensions: Dict[str, Tuple[PatternSpec, ...]] = Field(default_factory=dict)
    families: Dict[ProjectFamily, Tuple[str, ...]] = Field(default_factory=dict)
    profiles: Dict[ProjectFamily, Tuple[StageMarker, ...]] = Field(default_factory=dict)
    markers: Tuple[MarkerRule, ...] = ()
    causes: Tuple[CauseRule, ...] = ()

    @model_validator(mode="after")
    def _references(self):
        for family, groups in self.families.items():
            for g in groups:
                if g not in self.extensions:
                    raise ValueError(f"family {family.value} names unknown extension {g!r}")
        for spec in self.all_patterns():
            if spec.continuation and spec.continuation not in self.continuations:
                raise ValueError(f"pattern {spec.name}: unknown continuation {spec.continuation!r}")
        for family in ProjectFamily:
            if family not in self.profiles:
                raise ValueError(f"no stage profile for family {family.value}")
        return self

    def all_patterns(self) -> List[PatternSpec]:
        out = list(self.base)
        for specs in self.extensions.values():
            out.extend(specs)
        return out

    def patterns_for(self, family: ProjectFamily) -> Tuple[PatternSpec, ...]:
        """Family extensions first, then the base patterns"""
        ext: List[PatternSpec] = []
        for group in self.families.get(family, ()):
            ext.extend(self.extensions[group])
        return tuple(ext) + self.base

    def profile(self, family) -> StageProfile:
        family = ProjectFamily(family)
        return StageProfile(project_family=family, stage_markers=self.profiles[family])

    def fingerprint(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()


@lru_cache(maxsize=8)
def _load(path: str) -> Catalog:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot load pattern catalog {path}: {e}") from e
    try:
        catalog = Catalog.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid pattern catalog {path}:\n{e}") from e
    logger.debug(f"[CATALOG] {path}: {len(catalog.all_patterns())} patterns, {len(catalog.causes)} cause rules")
    return catalog


def load_catalog(path=None) -> Catalog:
    return _load(str(path or DEFAULT_CATALOG))
