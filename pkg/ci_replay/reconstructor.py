# -*- coding: utf-8 -*-
"""
构建重建 - Containerized build reconstruction

checkout_baseline -> extract_build_spec -> emit_container_plan -> execute_rebuild

The container plan is written next to the source, never into it: the
Dockerfile and build script go to a private build context, and the checked
out tree is mounted read-write at ``/workspace`` when the script runs.
"""
import hashlib
import json
import logging
import os
import re
import shlex
import subprocess
import tempfile
import time
import uuid
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .catalog import Catalog, load_catalog
from .ci_config import WORKSPACE, extract_build_spec, matrix_instances, read_ci_configs, selector_for_run
from .config import PipelineConfig, RuntimeSettings
from .errors import (
    CloneFailedError,
    CommitUnreachableError,
    ImageBuildFailedError,
    JobNotFoundError,
    RebuildTimeoutError,
    RuntimeUnavailableError,
    UnsupportedConfigError,
)
from .forge import gitlab_namespace
from .logparse import LineCleaner, decode_log, split_lines
from .miner import is_build_workflow
from .models import (
    BuildSpec,
    CauseKind,
    CIRun,
    FailureCause,
    Forge,
    IntegrationKind,
    Outcome,
    ReconstructionRecord,
    RecordStatus,
    RepositoryRef,
    SourceRef,
)

logger = logging.getLogger(__name__)

SCRIPT_PATH = "/opt/ci-replay/build.sh"
PHASE_SETUP = "##[ci-replay] phase setup"
PHASE_BUILD = "##[ci-replay] phase build"
EMPTY_LOG_EVIDENCE = "<empty log>"
MAX_EVIDENCE = 300
# docker run: daemon-side failure, container never started
RUNTIME_FAILURE_EXIT = 125


class SourceTree(BaseModel):
    """源码基线 - checked-out working tree, owned by one replay at a time"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    path: Path
    repo: str
    commit_sha: str
    tree_hash: str
    strategy: IntegrationKind
    integration_id: str = ""


class ContainerPlan(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dockerfile_text: str
    build_script_text: str
    context_label: str

    @field_validator("dockerfile_text")
    @classmethod
    def _from_first(cls, v: str) -> str:
        if not v.startswith("FROM "):
            raise ValueError("dockerfile must begin with FROM")
        return v

    @property
    def digest(self) -> str:
        h = hashlib.sha256(self.dockerfile_text.encode("utf-8"))
        h.update(b"\0")
        h.update(self.build_script_text.encode("utf-8"))
        return h.hexdigest()

    @property
    def image_tag(self) -> str:
        return f"ci-replay:{self.digest[:16]}"


class ReplayResult(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    outcome: Outcome
    exit_code: int
    log: bytes
    wall_time: float
    plan: ContainerPlan

    @model_validator(mode="after")
    def _outcome(self):
        if (self.outcome == Outcome.SUCCESS) != (self.exit_code == 0):
            raise ValueError("outcome must be success iff exit_code == 0")
        return self


# ---------------------------------------------------------------- source baseline

def _git(args: Sequence[str], cwd: Optional[Path] = None, timeout: float = 600) -> subprocess.CompletedProcess:
    env = dict(os.environ, GIT_TERMINAL_PROMPT="0", GIT_ASKPASS="true")
    try:
        return subprocess.run(["git", *args], cwd=cwd, capture_output=True, text=True, timeout=timeout, env=env)
    except FileNotFoundError as e:
        raise CloneFailedError("git executable not found") from e
    except subprocess.TimeoutExpired as e:
        raise CloneFailedError(f"git {args[0]} timed out after {timeout:g} s") from e


def clone_url_for(repo: RepositoryRef, base_url: Optional[str] = None) -> str:
    """Web clone URL from the API base (api.github.com -> github.com)"""
    if repo.forge == Forge.GITHUB:
        host = "https://github.com"
        if base_url and "api.github.com" not in base_url:
            # GitHub Enterprise: https://host/api/v3
            host = base_url.split("/api/", 1)[0]
        return f"{host}/{repo.owner}/{repo.name}.git"
    host = (base_url or "https://gitlab.com").rstrip("/")
    return f"{host}/{gitlab_namespace(repo.owner)}/{repo.name}.git"


def _integration_ref(kind: IntegrationKind, integration_id: str) -> Optional[str]:
    if not integration_id.isdigit():
        return None
    if kind == IntegrationKind.MERGE_REQUEST:
        return f"refs/merge-requests/{integration_id}/head"
    return f"refs/pull/{integration_id}/head"


def _has_commit(dest: Path, sha: str) -> bool:
    return _git(["cat-file", "-e", f"{sha}^{{commit}}"], cwd=dest).returncode == 0


def checkout_baseline(repo: RepositoryRef, commit_sha: str, integration_kind: IntegrationKind, *,
                      workdir: Path, clone_url: Optional[str] = None, integration_id: str = "") -> SourceTree:
    """检出失败提交 - working tree at exactly ``commit_sha``"""
    url = clone_url or clone_url_for(repo)
    dest = Path(workdir) / "src"
    dest.mkdir(parents=True, exist_ok=True)
    if _git(["init", "--quiet"], cwd=dest).returncode != 0:
        raise CloneFailedError(f"git init failed in {dest}")
    fetched = _git(["fetch", "--quiet", "--tags", url, "+refs/heads/*:refs/remotes/origin/*"], cwd=dest)
    if fetched.returncode != 0:
        tail = fetched.stderr.strip().splitlines()
        raise CloneFailedError(f"{repo.slug}: {tail[-1] if tail else 'fetch failed'}")
    ref = _integration_ref(integration_kind, integration_id)
    if ref:
        r = _git(["fetch", "--quiet", url, f"+{ref}:refs/ci-replay/integration"], cwd=dest)
        if r.returncode != 0:
            logger.info(f"[REPLAY] {repo.slug}: {ref} not fetchable, relying on branch history")
    if not _has_commit(dest, commit_sha):
        _git(["fetch", "--quiet", url, commit_sha], cwd=dest)
    if not _has_commit(dest, commit_sha):
        raise CommitUnreachableError(f"{repo.slug}: commit {commit_sha} is not reachable")
    co = _git(["-c", "advice.detachedHead=false", "checkout", "--quiet", "--force", "--detach", commit_sha], cwd=dest)
    if co.returncode != 0:
        raise CloneFailedError(f"{repo.slug}: checkout of {commit_sha} failed: {co.stderr.strip()}")
    full = _git(["rev-parse", "HEAD"], cwd=dest).stdout.strip()
    tree = _git(["rev-parse", "HEAD^{tree}"], cwd=dest).stdout.strip()
    logger.info(f"[REPLAY] {repo.slug}@{full[:12]} checked out ({integration_kind.value}, tree {tree[:12]})")
    return SourceTree(path=dest, repo=repo.slug, commit_sha=full, tree_hash=tree,
                      strategy=integration_kind, integration_id=integration_id)


# ---------------------------------------------------------------- container plan

def _context_label(spec: BuildSpec) -> str:
    label = f"{spec.source_ref.repo}@{spec.source_ref.commit_sha}" if spec.source_ref else "local"
    if spec.matrix_axes:
        label += " [" + ", ".join(f"{k}={v}" for k, v in spec.matrix_axes.items()) + "]"
    return label


def emit_container_plan(spec: BuildSpec) -> ContainerPlan:
    """Dockerfile + POSIX build script; a pure function of ``spec``"""
    label = _context_label(spec)
    dockerfile = [f"FROM {spec.base_os_image}"]
    if spec.source_ref:
        dockerfile.append(f"LABEL ci-replay.source={json.dumps(spec.source_ref.repo)} "
                          f"ci-replay.commit={json.dumps(spec.source_ref.commit_sha)}")
    dockerfile += [
        f"WORKDIR {WORKSPACE}",
        f"COPY build.sh {SCRIPT_PATH}",
        f'ENTRYPOINT ["/bin/sh", "{SCRIPT_PATH}"]',
    ]

    script = ["#!/bin/sh", f"# {label}", "set -e"]
    script += [f"export {key}={shlex.quote(value)}" for key, value in spec.env_vars.items()]
    script.append(f"echo {shlex.quote(PHASE_SETUP)}")
    script += list(spec.setup_commands)
    script.append(f"echo {shlex.quote(PHASE_BUILD)}")
    script += list(spec.build_commands)
    return ContainerPlan(dockerfile_text="\n".join(dockerfile) + "\n",
                         build_script_text="\n".join(script) + "\n",
                         context_label=label)


# ---------------------------------------------------------------- runtimes

class ContainerRuntime:
    """Narrow runtime contract: probe, build image, run, remove image"""

    def probe(self) -> None:
        raise NotImplementedError

    def build_image(self, context_dir: Path, tag: str, timeout: float) -> Tuple[int, bytes]:
        raise NotImplementedError

    def run(self, tag: str, source_dir: Path, timeout: float) -> Tuple[int, bytes]:
        raise NotImplementedError

    def remove_image(self, tag: str) -> None:
        pass


class SubprocessRuntime(ContainerRuntime):
    """docker / podman CLI"""

    def __init__(self, settings: Optional[RuntimeSettings] = None):
        self.settings = settings or RuntimeSettings()
        self.command = self.settings.command

    def _call(self, args: List[str], timeout: float) -> Tuple[int, bytes]:
        try:
            proc = subprocess.run([self.command, *args], stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                                  timeout=timeout)
        except FileNotFoundError as e:
            raise RuntimeUnavailableError(f"container runtime {self.command!r} not found") from e
        return proc.returncode, proc.stdout

    def probe(self) -> None:
        try:
            code, out = self._call(["version"], timeout=60)
        except subprocess.TimeoutExpired as e:
            raise RuntimeUnavailableError(f"{self.command} version timed out") from e
        if code != 0:
            tail = out.decode("utf-8", errors="replace").strip().splitlines()[-1:]
            raise RuntimeUnavailableError(f"{self.command} is not usable: {tail[0] if tail else code}")

    def build_image(self, context_dir: Path, tag: str, timeout: float) -> Tuple[int, bytes]:
        try:
            return self._call(["build", *self.settings.build_flags, "-t", tag, str(context_dir)], timeout)
        except subprocess.TimeoutExpired as e:
            raise RebuildTimeoutError(timeout, e.output or b"") from e

    def run(self, tag: str, source_dir: Path, timeout: float) -> Tuple[int, bytes]:
        name = f"ci-replay-{uuid.uuid4().hex[:12]}"
        args = ["run", "--rm", "--name", name, *self.settings.run_flags,
                "-v", f"{Path(source_dir).resolve()}:{WORKSPACE}", "-w", WORKSPACE, tag]
        try:
            return self._call(args, timeout)
        except subprocess.TimeoutExpired as e:
            subprocess.run([self.command, "rm", "-f", name], capture_output=True)
            raise RebuildTimeoutError(timeout, e.output or b"") from e

    def remove_image(self, tag: str) -> None:
        subprocess.run([self.command, "rmi", "-f", tag], capture_output=True)


def execute_rebuild(plan: ContainerPlan, source: SourceTree, runtime: ContainerRuntime, *,
                    timeout: float = 3600, keep_image: bool = False,
                    catalog: Optional[Catalog] = None) -> ReplayResult:
    """Build the image and run the script against the mounted tree

    A non-zero exit before the build phase starts (or a runtime-level
    failure) is a reconstruction failure, not a build outcome.
    """
    runtime.probe()
    tag = plan.image_tag
    start = time.monotonic()
    with tempfile.TemporaryDirectory(prefix="ci-replay-ctx-") as ctx:
        ctx_dir = Path(ctx)
        (ctx_dir / "Dockerfile").write_text(plan.dockerfile_text, encoding="utf-8")
        (ctx_dir / "build.sh").write_text(plan.build_script_text, encoding="utf-8")
        try:
            code, build_log = runtime.build_image(ctx_dir, tag, timeout)
            if code != 0:
                cause = classify_reconstruction_failure(build_log, catalog)
                logger.warning(f"[REPLAY] {plan.context_label}: image build failed ({cause.kind.value})")
                raise ImageBuildFailedError(cause, build_log)
            remaining = max(timeout - (time.monotonic() - start), 1.0)
            code, log = runtime.run(tag, source.path, remaining)
        finally:
            if not keep_image:
                runtime.remove_image(tag)
    wall = time.monotonic() - start
    if code == RUNTIME_FAILURE_EXIT or (code != 0 and PHASE_BUILD.encode() not in log):
        cause = classify_reconstruction_failure(log, catalog)
        logger.warning(f"[REPLAY] {plan.context_label}: setup failed with exit {code} ({cause.kind.value})")
        raise ImageBuildFailedError(cause, log)
    outcome = Outcome.SUCCESS if code == 0 else Outcome.FAILURE
    logger.info(f"[REPLAY] {plan.context_label}: {outcome.value} (exit {code}, {wall:.1f}s)")
    return ReplayResult(outcome=outcome, exit_code=code, log=log, wall_time=wall, plan=plan)


# ---------------------------------------------------------------- failure causes

def classify_reconstruction_failure(attempt_log, catalog: Optional[Catalog] = None) -> FailureCause:
    """第一条命中的规则决定原因 - rules are tried in catalog order, first match wins

    Rules see cleaned lines; evidence is the matching line as it appears in the log.
    """
    catalog = catalog or load_catalog()
    cleaner = LineCleaner(catalog)
    raw_lines = split_lines(decode_log(attempt_log or b""))
    lines = [(cleaner.clean(l), l.strip()) for l in raw_lines]
    for rule in catalog.causes:
        for pattern in rule.patterns:
            rx = re.compile(pattern)
            for line, original in lines:
                if original and rx.search(line):
                    return FailureCause(kind=rule.kind, evidence=original[:MAX_EVIDENCE])
    tail = [original for _, original in lines if original]
    return FailureCause(kind=CauseKind.OTHER, evidence=tail[-1][:MAX_EVIDENCE] if tail else EMPTY_LOG_EVIDENCE)


# ---------------------------------------------------------------- one run end-to-end

class ReconstructionAttempt(NamedTuple):
    run: CIRun
    plan: Optional[ContainerPlan]
    result: Optional[ReplayResult]
    cause: Optional[FailureCause]
    log: bytes

    @property
    def status(self) -> Optional[RecordStatus]:
        if self.cause is not None:
            return RecordStatus.FAILED
        if self.result is not None:
            return RecordStatus.RECONSTRUCTED
        return None

    def record(self, log_artifact_id: Optional[str] = None) -> Optional[ReconstructionRecord]:
        """None under plan-only (no outcome, no failure)"""
        if self.status is None:
            return None
        return ReconstructionRecord(
            run=self.run, status=self.status,
            outcome=self.result.outcome if self.result else None,
            cause=self.cause, log_artifact_id=log_artifact_id,
        )


def _other(message: str) -> FailureCause:
    return FailureCause(kind=CauseKind.OTHER, evidence=message or EMPTY_LOG_EVIDENCE)


def reconstruct(run: CIRun, config: PipelineConfig, runtime: Optional[ContainerRuntime], *,
                plan_only: bool = False, catalog: Optional[Catalog] = None) -> ReconstructionAttempt:
    """Checkout -> spec -> plan -> replay for one run; per-run failures become a FailureCause

    RuntimeUnavailableError propagates: it is a batch-level problem.
    """
    project = config.project(run.repo.slug)
    plan: Optional[ContainerPlan] = None
    with tempfile.TemporaryDirectory(prefix="ci-replay-src-") as work:
        try:
            base_url = config.forges[run.repo.forge].base_url if run.repo.forge in config.forges else None
            tree = checkout_baseline(run.repo, run.commit_sha, run.integration_kind, workdir=Path(work),
                                     clone_url=project.clone_url or clone_url_for(run.repo, base_url),
                                     integration_id=run.integration_id)
            files = read_ci_configs(tree.path)
            selector = project.workflow or selector_for_run(
                files, run, lambda job: is_build_workflow(job, rules=config.workflow_filter))
            matrix = dict(run.matrix)
            if not matrix:
                instances = matrix_instances(files, selector)
                if len(instances) > 1:
                    logger.info(f"[REPLAY] run {run.run_id}: {len(instances)} matrix instances, using the first")
                matrix = instances[0]
            spec = extract_build_spec(files, selector, matrix, runner_images=config.runner_images,
                                      action_adapters=config.action_adapters,
                                      source_ref=SourceRef(repo=run.repo.slug, commit_sha=tree.commit_sha))
            plan = emit_container_plan(spec)
            if plan_only:
                return ReconstructionAttempt(run, plan, None, None, b"")
            result = execute_rebuild(plan, tree, runtime, timeout=config.runtime.timeout_minutes * 60,
                                     keep_image=config.runtime.keep_images, catalog=catalog)
            return ReconstructionAttempt(run, plan, result, None, result.log)
        except (UnsupportedConfigError, JobNotFoundError, CloneFailedError, CommitUnreachableError) as e:
            logger.warning(f"[REPLAY] run {run.run_id}: {e}")
            return ReconstructionAttempt(run, plan, None, _other(str(e)), b"")
        except ImageBuildFailedError as e:
            return ReconstructionAttempt(run, plan, None, e.cause, e.log)
        except RebuildTimeoutError as e:
            logger.warning(f"[REPLAY] run {run.run_id}: {e}")
            return ReconstructionAttempt(run, plan, None, _other(str(e)), e.log)
