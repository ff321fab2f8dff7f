# -*- coding: utf-8 -*-
"""
代码托管平台接入 - Forge sessions and REST clients
GitHub Actions and GitLab CI, behind one session type that owns the token,
the rate-limit budget, retries, and optional fixture recording/replay.

Fixture files live at ``<fixtures_dir>/<forge>.json``. In replay mode no
socket is ever opened; a request with no recorded response is an error.
"""
import base64
import io
import json
import logging
import re
import threading
import time
import zipfile
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional
from urllib.parse import quote

import requests
from pydantic import SecretStr

from .errors import (
    ConfigError,
    ForgeError,
    InvalidTokenError,
    LogExpiredError,
    NetworkUnreachableError,
    RateLimitedError,
    RepoNotFoundError,
)
from .models import CIRun, Conclusion, Forge, IntegrationKind, RepositoryRef, parse_utc

logger = logging.getLogger(__name__)

MAX_RETRIES = 5
REQUEST_TIMEOUT = 30
_KEPT_HEADERS = ("content-type", "link", "retry-after", "x-ratelimit-remaining", "x-ratelimit-reset",
                 "ratelimit-remaining", "ratelimit-reset", "x-next-page", "x-total-pages")
_MR_REF_RE = re.compile(r"^refs/merge-requests/(\d+)/head$")

BuildPredicate = Callable[[str, Optional[str], Optional[str]], bool]


class FixtureMode(str, Enum):
    LIVE = "live"
    RECORD = "record"
    REPLAY = "replay"


class ForgeResponse(NamedTuple):
    status: int
    headers: Dict[str, str]
    body: bytes

    def json(self) -> Any:
        return json.loads(self.body.decode("utf-8"))


def map_conclusion(value: Optional[str]) -> Conclusion:
    """Forge status -> Conclusion; anything unlisted (skipped, timed_out, ...) is ``other``"""
    v = (value or "").lower()
    if v == "success":
        return Conclusion.SUCCESS
    if v in ("failure", "failed"):
        return Conclusion.FAILURE
    if v in ("cancelled", "canceled"):
        return Conclusion.CANCELLED
    return Conclusion.OTHER


def gitlab_owner(namespace_path: str) -> str:
    """GitLab sub-groups: ``a/b`` is kept as ``a~b`` so owner stays one path component"""
    return namespace_path.replace("/", "~")


def gitlab_namespace(owner: str) -> str:
    return owner.replace("~", "/")


# ---------------------------------------------------------------- fixtures

class FixtureStore:
    """请求/响应录制 - recorded responses for one forge"""

    def __init__(self, directory, forge: Forge):
        self.path = Path(directory) / f"{forge.value}.json"
        self._lock = threading.Lock()
        self._entries: Dict[str, dict] = {}
        if self.path.exists():
            try:
                data = json.loads(self.path.read_text(encoding="utf-8"))
            except (OSError, ValueError) as e:
                raise ConfigError(f"unreadable fixture file {self.path}: {e}") from e
            for entry in data.get("entries", []):
                self._entries[self.key(entry["method"], entry["path"], entry.get("params"))] = entry

    @staticmethod
    def key(method: str, path: str, params: Optional[Dict[str, Any]]) -> str:
        return json.dumps([method.upper(), path, {k: str(v) for k, v in (params or {}).items()}], sort_keys=True)

    def lookup(self, method: str, path: str, params) -> Optional[ForgeResponse]:
        entry = self._entries.get(self.key(method, path, params))
        if entry is None:
            return None
        if "body_b64" in entry:
            body = base64.b64decode(entry["body_b64"])
        elif "json" in entry:
            # hand-written fixtures may inline the document
            body = json.dumps(entry["json"]).encode("utf-8")
        else:
            body = entry.get("body", "").encode("utf-8")
        return ForgeResponse(int(entry["status"]), dict(entry.get("headers", {})), body)

    def record(self, method: str, path: str, params, response: ForgeResponse) -> None:
        entry = {
            "method": method.upper(), "path": path,
            "params": {k: str(v) for k, v in (params or {}).items()},
            "status": response.status,
            "headers": {k: v for k, v in response.headers.items() if k.lower() in _KEPT_HEADERS},
        }
        try:
            entry["body"] = response.body.decode("utf-8")
        except UnicodeDecodeError:
            entry["body_b64"] = base64.b64encode(response.body).decode("ascii")
        with self._lock:
            self._entries[self.key(method, path, params)] = entry
            self.path.parent.mkdir(parents=True, exist_ok=True)
            payload = {"entries": [self._entries[k] for k in sorted(self._entries)]}
            self.path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- rate budget

class RateBudget:
    """Per-session request budget; the only state shared between worker threads"""

    def __init__(self):
        self._lock = threading.Lock()
        self.remaining: Optional[int] = None
        self.reset_at: Optional[float] = None

    def update(self, headers: Dict[str, str]) -> None:
        lower = {k.lower(): v for k, v in headers.items()}
        remaining = lower.get("x-ratelimit-remaining") or lower.get("ratelimit-remaining")
        reset = lower.get("x-ratelimit-reset") or lower.get("ratelimit-reset")
        with self._lock:
            if remaining is not None and remaining.strip().isdigit():
                self.remaining = int(remaining)
            if reset is not None and reset.strip().isdigit():
                self.reset_at = float(reset)

    def wait_seconds(self, now: float) -> float:
        with self._lock:
            if self.remaining == 0 and self.reset_at:
                return max(self.reset_at - now, 0.0)
            return 0.0


# ---------------------------------------------------------------- session

class ForgeSession:
    def __init__(self, forge: Forge, base_url: str, token: SecretStr, *, fixtures: Optional[FixtureStore] = None,
                 mode: FixtureMode = FixtureMode.LIVE, per_page: int = 100, page_cap: int = 10,
                 sleep: Callable[[float], None] = time.sleep, clock: Callable[[], float] = time.time):
        self.forge = forge
        self.base_url = base_url.rstrip("/")
        self._token = token
        self.fixtures = fixtures
        self.mode = mode
        self.per_page = per_page
        self.page_cap = page_cap
        self.budget = RateBudget()
        self._sleep = sleep
        self._clock = clock
        self._http: Optional[requests.Session] = None
        self._verified = False
        self.requests_sent = 0

    def __repr__(self) -> str:
        return f"ForgeSession({self.forge.value}, {self.base_url}, token_present={self.token_present})"

    @property
    def token_present(self) -> bool:
        return bool(self._token.get_secret_value())

    @property
    def rate_limit_remaining(self) -> Optional[int]:
        return self.budget.remaining

    @property
    def api(self) -> "ForgeClient":
        return GitHubClient(self) if self.forge == Forge.GITHUB else GitLabClient(self)

    def _headers(self) -> Dict[str, str]:
        token = self._token.get_secret_value()
        if self.forge == Forge.GITHUB:
            headers = {"Accept": "application/vnd.github+json", "X-GitHub-Api-Version": "2022-11-28"}
            if token:
                headers["Authorization"] = f"Bearer {token}"
        else:
            headers = {"Accept": "application/json"}
            if token:
                headers["PRIVATE-TOKEN"] = token
        return headers

    def _send(self, method: str, path: str, params) -> ForgeResponse:
        if self.mode == FixtureMode.REPLAY:
            resp = self.fixtures.lookup(method, path, params) if self.fixtures else None
            if resp is None:
                raise ForgeError(f"no recorded response for {method} {path} {params or ''}")
            return resp
        if self._http is None:
            self._http = requests.Session()
        wait = self.budget.wait_seconds(self._clock())
        if wait:
            logger.warning(f"[FORGE] rate budget exhausted, sleeping {wait:.0f}s")
            self._sleep(wait)
        try:
            r = self._http.request(method, self.base_url + path, params=params, headers=self._headers(),
                                   timeout=REQUEST_TIMEOUT)
        except (requests.ConnectionError, requests.Timeout) as e:
            raise NetworkUnreachableError(f"{self.base_url}: {e.__class__.__name__}") from e
        self.requests_sent += 1
        resp = ForgeResponse(r.status_code, dict(r.headers), r.content)
        if self.mode == FixtureMode.RECORD and self.fixtures is not None:
            self.fixtures.record(method, path, params, resp)
        return resp

    def _retry_after(self, resp: ForgeResponse, attempt: int) -> float:
        lower = {k.lower(): v for k, v in resp.headers.items()}
        value = lower.get("retry-after")
        if value and value.strip().isdigit():
            return float(value)
        wait = self.budget.wait_seconds(self._clock())
        return wait or float(2 ** attempt)

    def request(self, method: str, path: str, params: Optional[Dict[str, Any]] = None,
                allow: tuple = ()) -> ForgeResponse:
        """Send with retries; statuses in ``allow`` are returned to the caller instead of raising"""
        for attempt in range(MAX_RETRIES + 1):
            resp = self._send(method, path, params)
            self.budget.update(resp.headers)
            if resp.status == 401:
                raise InvalidTokenError(f"{self.forge.value} rejected the access token")
            limited = resp.status == 429 or (resp.status == 403 and self.budget.remaining == 0)
            if limited or resp.status >= 500:
                delay = self._retry_after(resp, attempt)
                if attempt == MAX_RETRIES:
                    if limited:
                        raise RateLimitedError(f"rate limited on {path}", retry_after=delay)
                    raise ForgeError(f"{path}: HTTP {resp.status} after {MAX_RETRIES} retries", status=resp.status)
                logger.warning(f"[FORGE] {path}: HTTP {resp.status}, retry {attempt + 1}/{MAX_RETRIES} in {delay:.0f}s")
                self._sleep(delay)
                continue
            self._verified = True
            if resp.status in allow or resp.status < 400:
                return resp
            raise ForgeError(f"{method} {path}: HTTP {resp.status}", status=resp.status)
        raise AssertionError("unreachable")

    def get_json(self, path: str, params: Optional[Dict[str, Any]] = None) -> Any:
        return self.request("GET", path, params).json()


def authenticate(forge: Forge, base_url: str, token: SecretStr, *, fixtures_dir=None,
                 mode: FixtureMode = FixtureMode.LIVE, per_page: int = 100, page_cap: int = 10,
                 sleep: Callable[[float], None] = time.sleep) -> ForgeSession:
    """Build a session; credentials are checked lazily on the first request"""
    if not base_url.startswith("https://"):
        raise ConfigError(f"forge base_url must be an absolute https URL: {base_url!r}")
    if isinstance(token, str):
        token = SecretStr(token)
    if mode != FixtureMode.REPLAY and not token.get_secret_value():
        raise InvalidTokenError(f"no access token for {forge.value}")
    if mode != FixtureMode.LIVE and fixtures_dir is None:
        raise ConfigError(f"{mode.value} mode needs a fixtures directory")
    fixtures = FixtureStore(fixtures_dir, forge) if fixtures_dir is not None else None
    session = ForgeSession(forge, base_url, token, fixtures=fixtures, mode=mode,
                           per_page=per_page, page_cap=page_cap, sleep=sleep)
    logger.info(f"[FORGE] {session!r} mode={mode.value}")
    return session


# ---------------------------------------------------------------- clients

class ForgeClient:
    def __init__(self, session: ForgeSession):
        self.s = session

    def _pages(self, path: str, params: Dict[str, Any], items_key: Optional[str] = None):
        for page in range(1, self.s.page_cap + 1):
            resp = self.s.request("GET", path, dict(params, per_page=self.s.per_page, page=page))
            data = resp.json()
            items = data.get(items_key, []) if items_key else data
            yield from items
            lower = {k.lower(): v for k, v in resp.headers.items()}
            if len(items) < self.s.per_page or lower.get("x-next-page", None) == "":
                return


class GitHubClient(ForgeClient):

    def _repo(self, data: dict) -> RepositoryRef:
        return RepositoryRef(
            forge=Forge.GITHUB, owner=data["owner"]["login"], name=data["name"],
            primary_language=data.get("language") or "", stars=int(data.get("stargazers_count") or 0),
            topics=data.get("topics") or (),
        )

    def search_repositories(self, topic: str, languages, min_stars_exclusive: int) -> List[RepositoryRef]:
        seen: Dict[str, RepositoryRef] = {}
        for language in sorted(languages):
            q = f"topic:{topic} language:{language} stars:>{min_stars_exclusive}"
            for item in self._pages("/search/repositories", {"q": q, "sort": "stars", "order": "desc"}, "items"):
                repo = self._repo(item)
                seen.setdefault(repo.slug, repo)
        return list(seen.values())

    def get_repository(self, owner: str, name: str) -> RepositoryRef:
        resp = self.s.request("GET", f"/repos/{owner}/{name}", allow=(404,))
        if resp.status == 404:
            raise RepoNotFoundError(f"github:{owner}/{name} not found", status=404)
        return self._repo(resp.json())

    def list_runs(self, repo: RepositoryRef, window_end: str, is_build: BuildPredicate) -> List[CIRun]:
        path = f"/repos/{repo.owner}/{repo.name}/actions/runs"
        params = {"event": "pull_request", "created": f"<={window_end[:10]}"}
        try:
            items = list(self._pages(path, params, "workflow_runs"))
        except ForgeError as e:
            if e.status == 404:
                raise RepoNotFoundError(f"github:{repo.slug} not found", status=404) from e
            raise
        runs: List[CIRun] = []
        for item in items:
            prs = item.get("pull_requests") or []
            workflow_path = item.get("path")
            name = item.get("name") or ""
            runs.append(CIRun(
                repo=repo, run_id=str(item["id"]),
                integration_kind=IntegrationKind.PULL_REQUEST,
                integration_id=str(prs[0]["number"]) if prs else "",
                commit_sha=item["head_sha"],
                conclusion=map_conclusion(item.get("conclusion")),
                workflow_name=name, workflow_path=workflow_path,
                is_build_workflow=is_build(name, workflow_path, None),
                created_at=item["created_at"],
            ))
        return runs

    def fetch_log(self, run: CIRun) -> bytes:
        path = f"/repos/{run.repo.owner}/{run.repo.name}/actions/runs/{run.run_id}/logs"
        resp = self.s.request("GET", path, allow=(404, 410))
        if resp.status in (404, 410):
            raise LogExpiredError(f"log for run {run.run_id} no longer available", status=resp.status)
        if resp.body[:4] == b"PK\x03\x04":
            with zipfile.ZipFile(io.BytesIO(resp.body)) as zf:
                names = sorted(n for n in zf.namelist() if not n.endswith("/"))
                return b"".join(zf.read(n) for n in names)
        return resp.body


class GitLabClient(ForgeClient):

    def _repo(self, data: dict, language: str) -> RepositoryRef:
        return RepositoryRef(
            forge=Forge.GITLAB,
            owner=gitlab_owner(data["namespace"]["full_path"]), name=data["path"],
            primary_language=language, stars=int(data.get("star_count") or 0),
            topics=data.get("topics") or data.get("tag_list") or (),
            forge_id=str(data["id"]),
        )

    def _primary_language(self, project_id) -> str:
        langs = self.s.get_json(f"/api/v4/projects/{project_id}/languages") or {}
        return max(langs, key=lambda k: (langs[k], k)) if langs else ""

    def search_repositories(self, topic: str, languages, min_stars_exclusive: int) -> List[RepositoryRef]:
        out = []
        for item in self._pages("/api/v4/projects", {"topic": topic, "order_by": "star_count", "sort": "desc"}):
            if int(item.get("star_count") or 0) <= min_stars_exclusive:
                continue
            out.append(self._repo(item, self._primary_language(item["id"])))
        return out

    def get_repository(self, owner: str, name: str) -> RepositoryRef:
        full = quote(f"{gitlab_namespace(owner)}/{name}", safe="")
        resp = self.s.request("GET", f"/api/v4/projects/{full}", allow=(404,))
        if resp.status == 404:
            raise RepoNotFoundError(f"gitlab:{owner}/{name} not found", status=404)
        data = resp.json()
        return self._repo(data, self._primary_language(data["id"]))

    def list_runs(self, repo: RepositoryRef, window_end: str, is_build: BuildPredicate) -> List[CIRun]:
        pid = repo.forge_id
        if pid is None:
            raise RepoNotFoundError(f"gitlab:{repo.slug} has no project id")
        runs: List[CIRun] = []
        params = {"source": "merge_request_event", "updated_before": window_end}
        for pipeline in self._pages(f"/api/v4/projects/{pid}/pipelines", params):
            m = _MR_REF_RE.match(pipeline.get("ref") or "")
            if not m:
                continue
            for job in self._pages(f"/api/v4/projects/{pid}/pipelines/{pipeline['id']}/jobs", {}):
                stage = job.get("stage") or ""
                runs.append(CIRun(
                    repo=repo, run_id=str(job["id"]),
                    integration_kind=IntegrationKind.MERGE_REQUEST,
                    integration_id=m.group(1),
                    commit_sha=(job.get("commit") or {}).get("id") or pipeline["sha"],
                    conclusion=map_conclusion(job.get("status")),
                    workflow_name=stage, workflow_path=".gitlab-ci.yml", job_name=job.get("name"),
                    # the pipeline file name tokenizes to "ci"; judge by stage and job only
                    is_build_workflow=is_build(stage, None, job.get("name")),
                    created_at=job.get("created_at") or pipeline["created_at"],
                ))
        return runs

    def fetch_log(self, run: CIRun) -> bytes:
        path = f"/api/v4/projects/{run.repo.forge_id}/jobs/{run.run_id}/trace"
        resp = self.s.request("GET", path, allow=(404, 410))
        if resp.status in (404, 410):
            raise LogExpiredError(f"trace for job {run.run_id} no longer available", status=resp.status)
        return resp.body


def within_window(run: CIRun, window_end: str) -> bool:
    return parse_utc(run.created_at) <= parse_utc(window_end)
