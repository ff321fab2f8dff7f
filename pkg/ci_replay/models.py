"""
核心数据模型 - Core domain model
Shared value types for mining, reconstruction, parsing and fidelity scoring.

All models are frozen pydantic models: equal fields compare equal, and
``decode(type(x), encode(x)) == x`` for every instance.
"""
import re
from datetime import datetime, timezone
from enum import Enum
from typing import Dict, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

_HEX_RE = re.compile(r"^[0-9a-f]{7,40}$")


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


M = TypeVar("M", bound=BaseModel)


def encode(model: BaseModel) -> str:
    """One line of JSON; the canonical on-disk encoding"""
    return model.model_dump_json()


def decode(cls: Type[M], line: str) -> M:
    return cls.model_validate_json(line)


def utc_iso(value) -> str:
    """Render a datetime / ISO string as ``YYYY-MM-DDTHH:MM:SSZ``"""
    if isinstance(value, str):
        value = datetime.fromisoformat(value.strip().replace("Z", "+00:00"))
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_utc(value: str) -> datetime:
    return datetime.fromisoformat(value.replace("Z", "+00:00"))


# ---------------------------------------------------------------- enums

class Forge(str, Enum):
    GITHUB = "github"
    GITLAB = "gitlab"


class IntegrationKind(str, Enum):
    PULL_REQUEST = "pull_request"
    MERGE_REQUEST = "merge_request"


class Conclusion(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    CANCELLED = "cancelled"
    OTHER = "other"


class Tool(str, Enum):
    COMPILER = "compiler"
    LINKER = "linker"
    MAKE = "make"
    CMAKE = "cmake"
    NINJA = "ninja"
    KCONFIG = "kconfig"
    DEVICETREE = "devicetree"
    SCONS = "scons"
    INTERPRETER = "interpreter"
    CONFIGURE = "configure"
    BUILDROOT = "buildroot"
    WEST = "west"
    OTHER = "other"


class Severity(str, Enum):
    FATAL_ERROR = "fatal_error"
    ERROR = "error"
    WARNING = "warning"
    NOTE = "note"


class Category(str, Enum):
    UNDECLARED_IDENTIFIER = "undeclared_identifier"
    MISSING_HEADER = "missing_header"
    UNDEFINED_REFERENCE = "undefined_reference"
    MAKE_RULE_FAILURE = "make_rule_failure"
    CONFIG_FAILURE = "config_failure"
    TRACEBACK = "traceback"
    OTHER = "other"


class Scheme(str, Enum):
    PR_PLAIN = "pr_plain"
    PR_TARGET = "pr_target"
    PROJ_MR_SHA = "proj_mr_sha"
    FIRMWARE_HW = "firmware_hw"
    UNKNOWN = "unknown"


class Outcome(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"


class LogSource(str, Enum):
    ORIGINAL_CI = "original_ci"
    RECONSTRUCTED = "reconstructed"


class CauseKind(str, Enum):
    HARDWARE_DEPENDENCY_MISSING = "hardware_dependency_missing"
    REMOVED_PACKAGE_REPOSITORY = "removed_package_repository"
    PROPRIETARY_TOOLCHAIN_UNAVAILABLE = "proprietary_toolchain_unavailable"
    IMPLICIT_ENVIRONMENT_DEPENDENCY = "implicit_environment_dependency"
    OTHER = "other"


class RecordStatus(str, Enum):
    RECONSTRUCTED = "reconstructed"
    FAILED = "failed"


ERROR_SEVERITIES = frozenset({Severity.ERROR, Severity.FATAL_ERROR})


# ---------------------------------------------------------------- repositories & runs

class RepositoryRef(_Frozen):
    forge: Forge
    owner: str
    name: str
    primary_language: str = ""
    stars: int = Field(default=0, ge=0)
    topics: Tuple[str, ...] = ()
    # GitLab numeric project id; None on GitHub
    forge_id: Optional[str] = None

    @field_validator("owner", "name")
    @classmethod
    def _no_separators(cls, v: str) -> str:
        if not v or "/" in v or "\\" in v:
            raise ValueError(f"invalid repository path component: {v!r}")
        return v

    @field_validator("topics", mode="before")
    @classmethod
    def _sorted_topics(cls, v):
        return tuple(sorted(set(v or ())))

    @property
    def slug(self) -> str:
        return f"{self.owner}/{self.name}"


def matrix_target(matrix: Dict[str, str]) -> str:
    """Joined matrix axis values, usable inside a file name"""
    parts = [re.sub(r"[\s/\\]+", "_", str(v)) for v in matrix.values()]
    return "-".join(p for p in parts if p)


class CIRun(_Frozen):
    repo: RepositoryRef
    run_id: str
    integration_kind: IntegrationKind
    integration_id: str
    commit_sha: str
    conclusion: Conclusion
    workflow_name: str
    is_build_workflow: bool
    created_at: str
    workflow_path: Optional[str] = None
    job_name: Optional[str] = None
    matrix: Dict[str, str] = Field(default_factory=dict)

    @field_validator("commit_sha", mode="before")
    @classmethod
    def _hex_sha(cls, v: str) -> str:
        v = str(v).strip().lower()
        if not _HEX_RE.match(v):
            raise ValueError(f"commit_sha must be hex, length >= 7: {v!r}")
        return v

    @field_validator("created_at", mode="before")
    @classmethod
    def _utc(cls, v) -> str:
        return utc_iso(v)

    @property
    def target(self) -> str:
        return matrix_target(self.matrix)

    @property
    def project(self) -> str:
        return self.repo.slug


# ---------------------------------------------------------------- build specification

class SourceRef(_Frozen):
    repo: str
    commit_sha: str


class BuildSpec(_Frozen):
    base_os_image: str
    env_vars: Dict[str, str] = Field(default_factory=dict)
    setup_commands: Tuple[str, ...] = ()
    build_commands: Tuple[str, ...]
    matrix_axes: Dict[str, str] = Field(default_factory=dict)
    # absent when a spec is extracted outside a concrete run
    source_ref: Optional[SourceRef] = None

    @field_validator("build_commands")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("build_commands must not be empty")
        return v

    @field_validator("base_os_image")
    @classmethod
    def _image(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("base_os_image must not be empty")
        return v.strip()


# ---------------------------------------------------------------- diagnostics

class Span(_Frozen):
    start_line: int = Field(ge=1)
    end_line: int = Field(ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.end_line < self.start_line:
            raise ValueError("span end precedes start")
        return self


class DiagnosticEvent(_Frozen):
    tool: Tool
    severity: Severity
    file: Optional[str] = None
    line: Optional[int] = Field(default=None, ge=1)
    column: Optional[int] = Field(default=None, ge=1)
    message: str
    category: Category = Category.OTHER
    raw_span: Span
    # marks a terminal build failure (make "Error N", ninja "build stopped", ...)
    terminal: bool = False

    @model_validator(mode="after")
    def _location(self):
        if self.column is not None and self.line is None:
            raise ValueError("column requires line")
        if self.line is not None and self.file is None:
            raise ValueError("line requires file")
        if self.file is not None and self.file.startswith("/"):
            raise ValueError(f"file must be relative: {self.file!r}")
        return self

    @property
    def located(self) -> bool:
        return self.file is not None

    def identity(self) -> tuple:
        """Everything but provenance (raw_span)"""
        return (self.tool, self.severity, self.file, self.line, self.column,
                self.message, self.category, self.terminal)

    def __eq__(self, other):
        if not isinstance(other, DiagnosticEvent):
            return NotImplemented
        return self.identity() == other.identity()

    def __hash__(self):
        return hash(self.identity())


class LogMetadata(_Frozen):
    scheme: Scheme
    integration_id: Optional[str] = None
    target: Optional[str] = None
    project_id: Optional[str] = None
    commit_sha: Optional[str] = None
    hardware: Optional[str] = None

    @model_validator(mode="after")
    def _scheme_fields(self):
        present = {k for k in ("integration_id", "target", "project_id", "commit_sha", "hardware")
                   if getattr(self, k) is not None}
        required = {
            Scheme.PR_PLAIN: {"integration_id"},
            Scheme.PR_TARGET: {"integration_id", "target"},
            Scheme.PROJ_MR_SHA: {"project_id", "integration_id", "commit_sha"},
            Scheme.FIRMWARE_HW: {"target", "hardware"},
            Scheme.UNKNOWN: set(),
        }[self.scheme]
        if present != required:
            raise ValueError(f"scheme {self.scheme.value} requires exactly {sorted(required)}, got {sorted(present)}")
        return self


class Stage(_Frozen):
    stage_name: str
    events: Tuple[DiagnosticEvent, ...] = ()


class NormalizedLog(_Frozen):
    outcome: Outcome
    stages: Tuple[Stage, ...]
    source: LogSource = LogSource.ORIGINAL_CI
    config_digest: str = ""

    @model_validator(mode="after")
    def _outcome_matches_events(self):
        failing = any(e.severity in ERROR_SEVERITIES or e.terminal
                      for s in self.stages for e in s.events)
        if failing != (self.outcome == Outcome.FAILURE):
            raise ValueError("outcome must be failure iff an error or terminal event exists")
        return self

    def events(self) -> Tuple[DiagnosticEvent, ...]:
        return tuple(e for s in self.stages for e in s.events)


# ---------------------------------------------------------------- reconstruction

class FailureCause(_Frozen):
    kind: CauseKind
    evidence: str

    @field_validator("evidence")
    @classmethod
    def _evidence(cls, v: str) -> str:
        if not v:
            raise ValueError("evidence must not be empty")
        return v


class ReconstructionRecord(_Frozen):
    run: CIRun
    status: RecordStatus
    outcome: Optional[Outcome] = None
    cause: Optional[FailureCause] = None
    log_artifact_id: Optional[str] = None

    @model_validator(mode="after")
    def _status_fields(self):
        if self.status == RecordStatus.RECONSTRUCTED and (self.outcome is None or self.cause is not None):
            raise ValueError("reconstructed record needs an outcome and no cause")
        if self.status == RecordStatus.FAILED and (self.cause is None or self.outcome is not None):
            raise ValueError("failed record needs a cause and no outcome")
        return self
