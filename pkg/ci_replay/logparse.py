# -*- coding: utf-8 -*-
"""
构建日志解析与规范化 - Build log parsing and normalization

Raw log text -> DiagnosticEvents -> stages -> NormalizedLog.
All functions are pure; the pattern catalog is data (``data/catalog.yaml``).

A normalized log renders to a canonical text form (``render_normalized``)
made of stage headers and one ``@@`` line per event. That form parses back
to the same NormalizedLog, so normalization is idempotent.
"""
import hashlib
import logging
import re
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

from .catalog import Catalog, PatternSpec, ProjectFamily, StageProfile, load_catalog
from .config import NormalizationConfig
from .models import (
    ERROR_SEVERITIES,
    Category,
    DiagnosticEvent,
    Forge,
    LogMetadata,
    LogSource,
    NormalizedLog,
    Outcome,
    RepositoryRef,
    Scheme,
    Severity,
    Span,
    Stage,
    Tool,
)

logger = logging.getLogger(__name__)

PREAMBLE = "preamble"
SYNTHETIC_FAILURE_MESSAGE = "build failed without a recognised diagnostic"

ANSI_RE = re.compile(r"\x1b\[[0-9;?]*[A-Za-z]|\x1b\][^\x07]*\x07|\x1b[()][A-Z0-9]")
_BACKTICK_RE = re.compile(r"`([^`'\n]*)'")
_QUOTES = str.maketrans({"‘": "'", "’": "'", "“": '"', "”": '"'})

STAGE_HEADER_RE = re.compile(r"^=== stage (?P<name>\S+) ===$")
EVENT_LINE_RE = re.compile(
    r"^@@ (?P<tool>\S+) (?P<severity>\S+) (?P<category>\S+) (?P<terminal>terminal|-) "
    r"(?P<loc>.+?) ::(?: (?P<message>.*))?$"
)
_LOC_RE = re.compile(r"^(?P<file>.+?)(?::(?P<line>\d+)(?::(?P<column>\d+))?)?$")

_GROUP_RUN_RE = re.compile(r"^##\[group\]Run ")
_GROUP_END_RE = re.compile(r"^##\[endgroup\]")

RawLog = Union[str, bytes]


class StageRange(NamedTuple):
    stage_name: str
    start_line: int
    end_line: int

    @property
    def line_range(self) -> Tuple[int, int]:
        return (self.start_line, self.end_line)


def decode_log(raw_log: RawLog) -> str:
    """Lossy UTF-8 decoding; a bad byte never aborts parsing"""
    if isinstance(raw_log, bytes):
        return raw_log.decode("utf-8", errors="replace")
    return raw_log


def split_lines(text: str) -> List[str]:
    lines = text.split("\n")
    if len(lines) > 1 and lines[-1] == "":
        lines.pop()
    return lines


# ---------------------------------------------------------------- line cleaning

class LineCleaner:
    """Strips colour codes, carriage-return overwrites and leading timestamps"""

    def __init__(self, catalog: Catalog, strip_timestamps: bool = True):
        self.strip_timestamps = strip_timestamps
        self._timestamps = [re.compile(p) for p in catalog.timestamps]
        self._auxiliary = [re.compile(p) for p in catalog.auxiliary]

    def clean(self, line: str) -> str:
        line = ANSI_RE.sub("", line)
        if "\r" in line:
            parts = [p for p in line.split("\r") if p.strip()]
            line = parts[-1] if parts else ""
        line = line.rstrip()
        if self.strip_timestamps:
            for ts in self._timestamps:
                m = ts.match(line)
                if m:
                    line = line[m.end():]
                    break
        line = _BACKTICK_RE.sub(r"'\1'", line.translate(_QUOTES))
        return line

    def is_auxiliary(self, line: str) -> bool:
        return any(a.search(line) for a in self._auxiliary)

    def visible(self, lines: Sequence[str]) -> List[Optional[str]]:
        """Cleaned lines; runner bookkeeping (incl. ``Run`` group bodies) becomes None"""
        out: List[Optional[str]] = []
        in_run_group = False
        for raw in lines:
            line = self.clean(raw)
            if _GROUP_RUN_RE.match(line):
                in_run_group = True
                out.append(None)
                continue
            if in_run_group:
                if _GROUP_END_RE.match(line):
                    in_run_group = False
                out.append(None)
                continue
            out.append(None if self.is_auxiliary(line) else line)
        return out


# ---------------------------------------------------------------- filename schemas

_FILENAME_SCHEMES = (
    (Scheme.PR_TARGET, re.compile(r"^pr-(?P<integration_id>\d+)__(?P<target>[^/]+)\.log$")),
    (Scheme.PROJ_MR_SHA, re.compile(
        r"^proj(?P<project_id>\d+)_mr(?P<integration_id>\d+)_sha(?P<commit_sha>[0-9a-f]{7,40})\.log$")),
    (Scheme.FIRMWARE_HW, re.compile(r"^(?P<target>[^/]+)_Firmware\((?P<hardware>[^()/]+)\)\.log$")),
    (Scheme.PR_PLAIN, re.compile(r"^pr-(?P<integration_id>\d+)\.log$")),
)


def parse_filename_metadata(filename: str) -> LogMetadata:
    """解析日志文件名 - first matching schema wins; anything else is unknown"""
    for scheme, pattern in _FILENAME_SCHEMES:
        m = pattern.match(filename)
        if m:
            return LogMetadata(scheme=scheme, **m.groupdict())
    return LogMetadata(scheme=Scheme.UNKNOWN)


def render_filename(meta: LogMetadata) -> str:
    if meta.scheme == Scheme.PR_PLAIN:
        return f"pr-{meta.integration_id}.log"
    if meta.scheme == Scheme.PR_TARGET:
        return f"pr-{meta.integration_id}__{meta.target}.log"
    if meta.scheme == Scheme.PROJ_MR_SHA:
        return f"proj{meta.project_id}_mr{meta.integration_id}_sha{meta.commit_sha}.log"
    if meta.scheme == Scheme.FIRMWARE_HW:
        return f"{meta.target}_Firmware({meta.hardware}).log"
    raise ValueError("unknown scheme has no filename")


# ---------------------------------------------------------------- stages

def _segment(visible: Sequence[Optional[str]], profile: StageProfile) -> List[StageRange]:
    n = len(visible)
    openings: List[Tuple[int, str]] = []
    headers = [(i, STAGE_HEADER_RE.match(t)) for i, t in enumerate(visible) if t is not None]
    headers = [(i, m.group("name")) for i, m in headers if m]
    if headers:
        # canonical rendering: explicit headers replace profile markers
        openings = headers
    else:
        taken = set()
        for marker in profile.stage_markers:
            rx = re.compile(marker.start_pattern)
            for i, text in enumerate(visible):
                if text is not None and rx.search(text):
                    if i not in taken:
                        openings.append((i, marker.stage_name))
                        taken.add(i)
                    break
        openings.sort()

    ranges: List[StageRange] = []
    if not openings or openings[0][0] > 0:
        first = openings[0][0] if openings else n
        ranges.append(StageRange(PREAMBLE, 1, max(first, 1)))
    for k, (i, name) in enumerate(openings):
        end = openings[k + 1][0] if k + 1 < len(openings) else n
        ranges.append(StageRange(name, i + 1, end))
    return ranges


def segment_stages(raw_log: RawLog, profile: StageProfile, *, catalog: Optional[Catalog] = None,
                   strip_timestamps: bool = True) -> List[StageRange]:
    """Partition the log's lines into stages; lines before the first marker form ``preamble``"""
    catalog = catalog or load_catalog()
    lines = split_lines(decode_log(raw_log)) or [""]
    visible = LineCleaner(catalog, strip_timestamps).visible(lines)
    return _segment(visible, profile)


# ---------------------------------------------------------------- diagnostics

def workspace_prefixes(repo: Optional[RepositoryRef]) -> List[str]:
    """Checkout directories of hosted runners for one repository

    GitLab nests projects under their full namespace, which a one-segment
    pattern cannot know.
    """
    if repo is None:
        return []
    if repo.forge == Forge.GITLAB:
        return [f"/builds/{repo.owner.replace('~', '/')}/{repo.name}"]
    return [f"/home/runner/work/{repo.name}/{repo.name}", f"/__w/{repo.name}/{repo.name}"]


class PathPrefixes:
    """Workspace prefixes to strip; a ``*`` segment matches any one path segment"""

    def __init__(self, prefixes: Sequence[str] = ()):
        bodies = []
        for prefix in prefixes:
            segments = prefix.rstrip("/").split("/")
            bodies.append((len(segments), "/".join("[^/]+" if s == "*" else re.escape(s) for s in segments)))
        # 段数多的优先
        bodies.sort(key=lambda b: (-b[0], -len(b[1])))
        self._anchored = [re.compile(f"^{body}(?=/|$)") for _, body in bodies]
        self._inline = re.compile(r"(?<![\w.~/-])(?:" + "|".join(b for _, b in bodies) + ")/") if bodies else None

    def relativize(self, path: Optional[str]) -> Optional[str]:
        if path is None:
            return None
        ends = [m.end() for rx in self._anchored for m in [rx.match(path)] if m]
        if ends:
            path = path[max(ends):]
        path = path.lstrip("/")
        return path or None

    def strip_message(self, message: str) -> str:
        if self._inline is not None:
            message = self._inline.sub("", message)
        return " ".join(message.split())


class _Extractor:
    def __init__(self, catalog: Catalog, family: ProjectFamily, prefixes: Sequence[str]):
        self.catalog = catalog
        self.patterns: Tuple[PatternSpec, ...] = catalog.patterns_for(family)
        self.prefixes = PathPrefixes(prefixes)
        self.categories = [(re.compile(r.regex), r.category) for r in catalog.categories]
        self.continuations = {
            name: (rule.append, [re.compile(p) for p in rule.patterns])
            for name, rule in catalog.continuations.items()
        }
        tb = catalog.traceback
        self.tb_start = re.compile(tb.start) if tb else None
        self.tb_frame = re.compile(tb.frame) if tb else None

    def _event(self, *, tool, severity, message, category=None, file=None, line=None, column=None,
               terminal=False, span=(1, 1)) -> DiagnosticEvent:
        message = self.prefixes.strip_message(message)
        if category is None:
            category = next((c for rx, c in self.categories if rx.search(message)), Category.OTHER)
        file = self.prefixes.relativize(file)
        if file is None:
            line = column = None
        elif line is None:
            column = None
        return DiagnosticEvent(
            tool=tool, severity=severity, file=file,
            line=int(line) if line else None, column=int(column) if column else None,
            message=message, category=category, terminal=terminal,
            raw_span=Span(start_line=span[0], end_line=span[1]),
        )

    def _canonical(self, text: str, lineno: int) -> Optional[DiagnosticEvent]:
        m = EVENT_LINE_RE.match(text)
        if not m:
            return None
        try:
            tool, severity, category = Tool(m["tool"]), Severity(m["severity"]), Category(m["category"])
        except ValueError:
            return None
        file = line = column = None
        if m["loc"] != "-":
            loc = _LOC_RE.match(m["loc"])
            file, line, column = loc["file"], loc["line"], loc["column"]
        return self._event(tool=tool, severity=severity, category=category, message=m["message"] or "",
                           file=file, line=line, column=column, terminal=m["terminal"] == "terminal",
                           span=(lineno, lineno))

    def _traceback(self, visible, i, offset) -> Tuple[DiagnosticEvent, int]:
        file = line = None
        last = i
        message = visible[i]
        j = i + 1
        while j < len(visible):
            text = visible[j]
            if not text:
                break
            frame = self.tb_frame.match(text)
            if frame:
                file, line = frame["file"], frame["line"]
                last = j
            elif text[:1].isspace():
                last = j
            else:
                # exception line closes the block
                message = text
                last = j
                break
            j += 1
        event = self._event(tool=Tool.INTERPRETER, severity=Severity.ERROR, category=Category.TRACEBACK,
                            message=message.strip(), file=file, line=line,
                            span=(offset + i + 1, offset + last + 1))
        return event, last

    def _match(self, visible, i, offset) -> Tuple[Optional[DiagnosticEvent], int]:
        text = visible[i]
        for spec in self.patterns:
            m = spec.compiled.match(text)
            if not m:
                continue
            groups = {k: (v or "") for k, v in m.groupdict().items()}
            if spec.severity is not None:
                severity = spec.severity
            else:
                severity = self.catalog.severity_words[groups["severity"].lower()]
            last = i
            extra: List[str] = []
            if spec.continuation:
                append, rules = self.continuations[spec.continuation]
                j = i + 1
                while j < len(visible) and visible[j] and any(r.match(visible[j]) for r in rules):
                    if append:
                        extra.append(visible[j].strip())
                    last = j
                    j += 1
            if spec.message is not None:
                if extra and "detail" in groups:
                    groups["detail"] = " ".join([groups["detail"]] + extra).strip()
                    extra = []
                message = spec.message.format(**groups)
            else:
                message = groups["message"]
            if extra:
                message = " ".join([message] + extra)
            event = self._event(
                tool=spec.tool, severity=severity, category=spec.category, message=message.strip(),
                file=groups.get("file") or None, line=groups.get("line") or None,
                column=groups.get("column") or None, terminal=spec.terminal,
                span=(offset + i + 1, offset + last + 1),
            )
            return event, last
        return None, i

    def extract(self, visible: Sequence[Optional[str]], offset: int = 0) -> List[DiagnosticEvent]:
        events: List[DiagnosticEvent] = []
        i = 0
        while i < len(visible):
            text = visible[i]
            if not text:
                i += 1
                continue
            event = self._canonical(text, offset + i + 1)
            last = i
            if event is None and self.tb_start is not None and self.tb_start.match(text):
                event, last = self._traceback(visible, i, offset)
            elif event is None:
                event, last = self._match(visible, i, offset)
            if event is not None:
                events.append(event)
            i = last + 1
        return events


def parse_diagnostics(raw_log: RawLog, profile: StageProfile, *, catalog: Optional[Catalog] = None,
                      path_prefixes: Sequence[str] = (), strip_timestamps: bool = True) -> List[DiagnosticEvent]:
    """One event per recognised diagnostic, in log order; unrecognised lines yield nothing"""
    catalog = catalog or load_catalog()
    lines = split_lines(decode_log(raw_log))
    visible = LineCleaner(catalog, strip_timestamps).visible(lines)
    return _Extractor(catalog, profile.project_family, path_prefixes).extract(visible)


# ---------------------------------------------------------------- normalization

def _sort_key(e: DiagnosticEvent):
    return (e.file or "", e.line or 0, e.column or 0, e.category.value, e.message,
            e.tool.value, e.severity.value, e.terminal)


def canonical_order(events: Sequence[DiagnosticEvent]) -> List[DiagnosticEvent]:
    """Located events are sorted into the positions located events occupied; the rest stay put"""
    located = sorted((e for e in events if e.located), key=_sort_key)
    it = iter(located)
    return [next(it) if e.located else e for e in events]


def config_digest(cfg: NormalizationConfig, profile: StageProfile, catalog: Catalog) -> str:
    h = hashlib.sha256()
    for part in (cfg.model_dump_json(), profile.model_dump_json(), catalog.fingerprint()):
        h.update(part.encode("utf-8"))
        h.update(b"\0")
    return h.hexdigest()


def normalize(raw_log: RawLog, filename: str, outcome: Optional[Outcome] = None,
              cfg: Optional[NormalizationConfig] = None, profile: Optional[StageProfile] = None, *,
              source: LogSource = LogSource.ORIGINAL_CI, catalog: Optional[Catalog] = None,
              repo: Optional[RepositoryRef] = None) -> NormalizedLog:
    """Normalize one build log into the comparison representation

    Outcome follows content: failure iff an error/fatal or terminal event
    survives normalization. When the caller knows the build failed but no
    diagnostic was recognised, a synthetic terminal event is added.
    ``repo`` adds that repository's runner checkout directories to the
    stripped prefixes.
    """
    catalog = catalog or load_catalog()
    cfg = cfg or NormalizationConfig()
    profile = profile or catalog.profile(ProjectFamily.GENERIC)

    lines = split_lines(decode_log(raw_log)) or [""]
    visible = LineCleaner(catalog, cfg.strip_timestamps).visible(lines)
    extractor = _Extractor(catalog, profile.project_family,
                           [*cfg.path_prefixes_to_strip, *workspace_prefixes(repo)])
    dropped = set(cfg.drop_severities)

    stages: List[Stage] = []
    ranges = _segment(visible, profile)
    for rng in ranges:
        events = extractor.extract(visible[rng.start_line - 1:rng.end_line], offset=rng.start_line - 1)
        events = [e for e in events if e.severity.value not in dropped]
        if cfg.canonical_reorder:
            events = canonical_order(events)
        stages.append(Stage(stage_name=rng.stage_name, events=tuple(events)))

    if len(stages) > 1 and stages[0].stage_name == PREAMBLE and not stages[0].events:
        stages = stages[1:]

    failing = any(e.severity in ERROR_SEVERITIES or e.terminal for s in stages for e in s.events)
    if outcome == Outcome.FAILURE and not failing:
        last = stages[-1]
        end = ranges[-1].end_line
        synthetic = DiagnosticEvent(tool=Tool.OTHER, severity=Severity.ERROR, category=Category.OTHER,
                                    message=SYNTHETIC_FAILURE_MESSAGE, terminal=True,
                                    raw_span=Span(start_line=end, end_line=end))
        stages[-1] = Stage(stage_name=last.stage_name, events=last.events + (synthetic,))
        failing = True
    elif outcome == Outcome.SUCCESS and failing:
        logger.debug(f"[PARSE] {filename}: reported success but log carries errors; outcome follows content")

    result = NormalizedLog(
        outcome=Outcome.FAILURE if failing else Outcome.SUCCESS,
        stages=tuple(stages),
        source=source,
        config_digest=config_digest(cfg, profile, catalog),
    )
    logger.debug(f"[PARSE] {filename}: {len(result.stages)} stages, {len(result.events())} events")
    return result


def render_event(e: DiagnosticEvent) -> str:
    if e.file is None:
        loc = "-"
    else:
        loc = e.file
        if e.line is not None:
            loc += f":{e.line}"
            if e.column is not None:
                loc += f":{e.column}"
    flag = "terminal" if e.terminal else "-"
    return f"@@ {e.tool.value} {e.severity.value} {e.category.value} {flag} {loc} :: {e.message}"


def render_normalized(log: NormalizedLog) -> str:
    """Canonical text form; ``normalize`` of this text gives back ``log``"""
    out: List[str] = []
    for stage in log.stages:
        out.append(f"=== stage {stage.stage_name} ===")
        out.extend(render_event(e) for e in stage.events)
    return "\n".join(out) + "\n"
