# -*- coding: utf-8 -*-
"""
CI 运行挖掘 - Forge mining pipeline
discover -> enumerate -> filter (failed AND build workflow) -> fetch log -> marker scan
"""
import logging
import re
from typing import List, NamedTuple, Optional, Tuple

from .catalog import Catalog, load_catalog
from .config import DiscoveryCriteria, WorkflowFilter
from .forge import ForgeSession, within_window
from .logparse import LineCleaner, decode_log, render_filename, split_lines
from .models import CIRun, Conclusion, Forge, LogMetadata, RepositoryRef, Scheme

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class MarkerHit(NamedTuple):
    pattern_name: str
    line_no: int


class MarkerScan(NamedTuple):
    is_compilation_failure: bool
    matches: Tuple[MarkerHit, ...]


class FetchedLog(NamedTuple):
    content: bytes
    filename: str


# ---------------------------------------------------------------- build-workflow predicate

def _tokens(text: Optional[str]) -> set:
    if not text:
        return set()
    text = text.rsplit("/", 1)[-1]
    text = re.sub(r"\.ya?ml$", "", text, flags=re.IGNORECASE)
    return set(_TOKEN_RE.findall(text.lower()))


def is_build_workflow(workflow_name: str, workflow_path: Optional[str] = None, job_name: Optional[str] = None,
                      rules: Optional[WorkflowFilter] = None) -> bool:
    """Allow-listed token present and no deny-listed token (deny wins)"""
    rules = rules or WorkflowFilter()
    tokens = _tokens(workflow_name) | _tokens(workflow_path) | _tokens(job_name)
    if tokens & {t.lower() for t in rules.deny}:
        return False
    return bool(tokens & {t.lower() for t in rules.allow})


# ---------------------------------------------------------------- pipeline stages

def discover_repositories(session: ForgeSession, criteria: DiscoveryCriteria) -> List[RepositoryRef]:
    candidates = session.api.search_repositories(criteria.required_topic, criteria.allowed_languages,
                                                 criteria.min_stars_exclusive)
    repos = [r for r in candidates if criteria.admits(r)]
    repos.sort(key=lambda r: (-r.stars, r.slug))
    logger.info(f"[MINE] {session.forge.value}: {len(repos)}/{len(candidates)} candidate repositories admitted")
    return repos


def enumerate_runs(session: ForgeSession, repo: RepositoryRef, window_end: str,
                   rules: Optional[WorkflowFilter] = None) -> List[CIRun]:
    if repo.forge != session.forge:
        raise ValueError(f"{repo.slug} is hosted on {repo.forge.value}, session is {session.forge.value}")

    def predicate(name, path, job):
        return is_build_workflow(name, path, job, rules)

    runs = [r for r in session.api.list_runs(repo, window_end, predicate) if within_window(r, window_end)]
    logger.info(f"[MINE] {repo.slug}: {len(runs)} runs up to {window_end}")
    return runs


def filter_valid(runs: List[CIRun]) -> List[CIRun]:
    """fail(r) and build_workflow(r); order preserved"""
    return [r for r in runs if r.conclusion == Conclusion.FAILURE and r.is_build_workflow]


def suggested_filename(run: CIRun) -> str:
    """File name for a harvested log; ``run-<id>.log`` when metadata is missing"""
    iid = run.integration_id
    if iid.isdigit():
        if run.repo.forge == Forge.GITLAB and run.repo.forge_id and run.repo.forge_id.isdigit():
            return render_filename(LogMetadata(scheme=Scheme.PROJ_MR_SHA, project_id=run.repo.forge_id,
                                               integration_id=iid, commit_sha=run.commit_sha))
        if run.repo.forge == Forge.GITHUB:
            if run.target:
                return render_filename(LogMetadata(scheme=Scheme.PR_TARGET, integration_id=iid, target=run.target))
            return render_filename(LogMetadata(scheme=Scheme.PR_PLAIN, integration_id=iid))
    return f"run-{run.run_id}.log"


def fetch_log(session: ForgeSession, run: CIRun) -> FetchedLog:
    if run.conclusion != Conclusion.FAILURE:
        logger.warning(f"[MINE] fetching log of non-failed run {run.run_id} ({run.conclusion.value})")
    content = session.api.fetch_log(run)
    filename = suggested_filename(run)
    logger.debug(f"[MINE] {run.project} run {run.run_id}: {len(content)} bytes -> {filename}")
    return FetchedLog(content, filename)


def scan_compilation_markers(raw_log, catalog: Optional[Catalog] = None) -> MarkerScan:
    """Every (marker, line) hit; compilation failure iff at least one"""
    catalog = catalog or load_catalog()
    cleaner = LineCleaner(catalog)
    markers = [(m.name, re.compile(m.regex)) for m in catalog.markers]
    hits: List[MarkerHit] = []
    for line_no, raw in enumerate(split_lines(decode_log(raw_log)), start=1):
        line = cleaner.clean(raw)
        for name, rx in markers:
            if rx.search(line):
                hits.append(MarkerHit(name, line_no))
    return MarkerScan(bool(hits), tuple(hits))
