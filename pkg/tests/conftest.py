"""Shared fixtures: model factories, a scripted container runtime, dataset dirs, git toy repo."""
import os
import shutil
import subprocess
from pathlib import Path
from typing import List, Optional, Tuple

import pytest
import requests

from ci_replay.catalog import load_catalog
from ci_replay.models import CIRun, Conclusion, Forge, IntegrationKind, RepositoryRef
from ci_replay.reconstructor import ContainerRuntime
from ci_replay.store import ArtifactStore

FIXTURES = Path(__file__).parent / "fixtures"


# ---------------------------------------------------------------- factories

def make_repo(name: str = "zephyr", owner: str = "zephyrproject-rtos", forge: Forge = Forge.GITHUB,
              stars: int = 100, language: str = "C", topics=("embedded",), forge_id: Optional[str] = None
              ) -> RepositoryRef:
    return RepositoryRef(forge=forge, owner=owner, name=name, primary_language=language, stars=stars,
                         topics=topics, forge_id=forge_id)


def make_run(run_id: str = "1001", *, repo: Optional[RepositoryRef] = None, conclusion=Conclusion.FAILURE,
             is_build: bool = True, workflow_name: str = "Build", sha: str = "0abc1234",
             integration_id: str = "17", created_at: str = "2025-09-01T12:00:00Z", **extra) -> CIRun:
    repo = repo or make_repo()
    kind = IntegrationKind.MERGE_REQUEST if repo.forge == Forge.GITLAB else IntegrationKind.PULL_REQUEST
    return CIRun(repo=repo, run_id=run_id, integration_kind=kind, integration_id=integration_id,
                 commit_sha=sha, conclusion=conclusion, workflow_name=workflow_name,
                 is_build_workflow=is_build, created_at=created_at, **extra)


# ---------------------------------------------------------------- container runtime stub

class StubRuntime(ContainerRuntime):
    """Scripted runtime: returns queued (exit code, output) pairs and records every call"""

    def __init__(self, build: Tuple[int, bytes] = (0, b"built\n"), runs: Optional[List[Tuple[int, bytes]]] = None,
                 available: bool = True):
        self.build_result = build
        self.run_results = list(runs or [(0, b"##[ci-replay] phase setup\n##[ci-replay] phase build\n")])
        self.available = available
        self.calls: List[tuple] = []
        self.contexts: List[dict] = []

    def probe(self) -> None:
        from ci_replay.errors import RuntimeUnavailableError

        self.calls.append(("probe",))
        if not self.available:
            raise RuntimeUnavailableError("stub runtime is down")

    def build_image(self, context_dir: Path, tag: str, timeout: float):
        self.calls.append(("build", tag))
        self.contexts.append({p.name: p.read_text(encoding="utf-8") for p in Path(context_dir).iterdir()})
        return self.build_result

    def run(self, tag: str, source_dir: Path, timeout: float):
        self.calls.append(("run", tag, str(source_dir)))
        if len(self.run_results) > 1:
            return self.run_results.pop(0)
        return self.run_results[0]

    def remove_image(self, tag: str) -> None:
        self.calls.append(("rmi", tag))


@pytest.fixture
def stub_runtime():
    return StubRuntime()


# ---------------------------------------------------------------- environment

@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Any real HTTP request fails the test"""
    def deny(self, method, url, *args, **kwargs):
        raise AssertionError(f"network access attempted: {method} {url}")

    monkeypatch.setattr(requests.Session, "request", deny)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for var in ("PHANTOMRUN_TOKEN", "PHANTOMRUN_GITHUB_TOKEN", "PHANTOMRUN_GITLAB_TOKEN", "CI_REPLAY_CONFIG"):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture
def catalog():
    return load_catalog()


@pytest.fixture
def store(tmp_path):
    s = ArtifactStore(tmp_path / "dataset")
    s.init()
    return s


@pytest.fixture
def fixtures_dir():
    return FIXTURES


def read_fixture(*parts: str) -> str:
    return FIXTURES.joinpath(*parts).read_text(encoding="utf-8")


# ---------------------------------------------------------------- git toy repo

def _git(args, cwd):
    env = dict(os.environ, GIT_AUTHOR_NAME="ci", GIT_AUTHOR_EMAIL="ci@example.invalid",
               GIT_COMMITTER_NAME="ci", GIT_COMMITTER_EMAIL="ci@example.invalid",
               GIT_AUTHOR_DATE="2025-09-01T12:00:00Z", GIT_COMMITTER_DATE="2025-09-01T12:00:00Z")
    return subprocess.run(["git", *args], cwd=cwd, env=env, check=True, capture_output=True, text=True).stdout.strip()


@pytest.fixture
def toy_repo(tmp_path):
    """The bundled toy project committed into a fresh repository: (path, head sha)"""
    if shutil.which("git") is None:
        pytest.skip("git executable not available")
    dest = tmp_path / "toy-origin"
    shutil.copytree(FIXTURES / "toy_repo", dest)
    _git(["init", "--quiet", "--initial-branch=main"], dest)
    _git(["add", "-A"], dest)
    _git(["commit", "--quiet", "-m", "toy project with an undeclared identifier"], dest)
    _git(["tag", "v0.1"], dest)
    return dest, _git(["rev-parse", "HEAD"], dest)


def commit_file(repo: Path, relpath: str, content: str, message: str) -> str:
    (repo / relpath).write_text(content, encoding="utf-8")
    _git(["add", relpath], repo)
    _git(["commit", "--quiet", "-m", message], repo)
    return _git(["rev-parse", "HEAD"], repo)


def tree_hash(repo: Path, rev: str = "HEAD") -> str:
    return _git(["rev-parse", f"{rev}^{{tree}}"], repo)


def rev_parse(repo: Path, rev: str) -> str:
    return _git(["rev-parse", rev], repo)


def move_tip_to_ref(repo: Path, ref: str, back_to: str) -> str:
    """Parks the branch tip on ``ref`` only and resets the branch to ``back_to``; returns the parked commit"""
    tip = rev_parse(repo, "HEAD")
    _git(["update-ref", ref, tip], repo)
    _git(["reset", "--quiet", "--hard", back_to], repo)
    return tip
