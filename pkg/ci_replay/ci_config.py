# -*- coding: utf-8 -*-
"""
CI 配置解析 - CI configuration -> BuildSpec

Supported subset: jobs, ``steps``/``script`` lists, env/variables at workflow,
job and step level, simple matrix axes with scalar values, ``runs-on`` /
``container`` / ``image`` resolution, and an adapter table for third-party
actions. Anything else raises UnsupportedConfigError with the reason.

Only the compilation stage is kept: test and deploy commands are dropped,
twister is run with ``--build-only``.
"""
import itertools
import logging
import re
import shlex
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import yaml
from pydantic import ValidationError

from .config import default_action_adapters, default_runner_images
from .errors import JobNotFoundError, UnsupportedConfigError
from .models import BuildSpec, CIRun, Forge, SourceRef

logger = logging.getLogger(__name__)

WORKSPACE = "/workspace"
GITHUB_WORKFLOW_DIR = ".github/workflows/"
GITLAB_CI_FILE = ".gitlab-ci.yml"

_EXPR_RE = re.compile(r"\$\{\{\s*(.*?)\s*\}\}")
_MATRIX_REF_RE = re.compile(r"^matrix\.([A-Za-z_][\w-]*)$")
_ENV_REF_RE = re.compile(r"^env\.([A-Za-z_]\w*)$")
_TWISTER_RE = re.compile(r"(\btwister)(?=\s|$)")

# commands that look like compilation; setup ends at the first of these
_BUILD_CMD_RE = re.compile(
    r"(?:^|[\s;&|(])(?:make|gmake|cmake|ninja|meson|scons|west\s+build|pio\s+run|platformio\s+run|"
    r"idf\.py|bazel|gcc|g\+\+|cc|clang|arm-none-eabi-gcc|\./configure|configure|\S*build\S*\.sh|"
    r"\S*twister|\./waf|bitbake)(?:\s|$)"
)
# installers and shell bookkeeping, always setup
_SETUP_CMD_RE = re.compile(
    r"^\s*(?:sudo\s+)?(?:apt-get|apt|yum|dnf|apk|pip3?|python3?\s+-m\s+pip|brew|conda|gem|npm|curl|wget|"
    r"git\s+(?:clone|submodule|config|fetch)|export|echo|mkdir|cd|tar|unzip|command\s+-v)\b"
)
# test / deploy commands, never part of a replay
_NON_BUILD_RE = re.compile(
    r"^\s*(?:ctest|pytest|make\s+(?:test|check|install|flash|deploy)|ninja\s+(?:test|check)|"
    r"west\s+(?:flash|debug)|pio\s+test|platformio\s+test|\S*deploy\S*|\S*upload\S*|\S*publish\S*|"
    r"gh\s+release|twine\s+upload|docker\s+push|qemu-system-\S+)\b"
)
_NON_BUILD_STEP_RE = re.compile(r"\b(?:test|tests|testing|deploy|publish|release|upload|flash)\b", re.IGNORECASE)
_BUILD_STEP_RE = re.compile(r"\b(?:build|compile|twister|firmware)\b", re.IGNORECASE)

_GITLAB_RESERVED = {
    "image", "services", "stages", "variables", "before_script", "after_script", "cache", "default",
    "include", "workflow", "types",
}
_SUPPORTED_SHELLS = {None, "bash", "sh"}


# ---------------------------------------------------------------- helpers

def _load_yaml(path: str, text: str) -> dict:
    try:
        # BaseLoader keeps every scalar a string (on: / yes / 1.0 stay literal)
        doc = yaml.load(text, Loader=yaml.BaseLoader)
    except yaml.YAMLError as e:
        raise UnsupportedConfigError(f"unparseable YAML in {path}: {e.__class__.__name__}") from e
    if not isinstance(doc, dict):
        raise UnsupportedConfigError(f"{path} is not a mapping")
    return doc


def _as_list(value) -> List:
    if value is None or value == "":
        return []
    return value if isinstance(value, list) else [value]


def _scalar(value, what: str) -> str:
    if isinstance(value, (dict, list)):
        raise UnsupportedConfigError(f"non-scalar value for {what}")
    return "" if value is None else str(value)


def _logical_lines(script: str) -> List[str]:
    """Physical lines joined across trailing-backslash continuations"""
    out: List[str] = []
    buf: List[str] = []
    for line in script.splitlines():
        buf.append(line)
        if line.rstrip().endswith("\\"):
            continue
        out.append("\n".join(buf))
        buf = []
    if buf:
        out.append("\n".join(buf))
    return out


def keep_build_lines(script: str) -> str:
    """Drop test/deploy lines; add ``--build-only`` to twister"""
    out = []
    for ln in _logical_lines(script):
        if not ln.strip() or _NON_BUILD_RE.match(ln):
            continue
        if "--build-only" not in ln:
            ln = _TWISTER_RE.sub(r"\1 --build-only", ln, count=1)
        out.append(ln)
    return "\n".join(out)


def looks_like_build(command: str) -> bool:
    return any(_BUILD_CMD_RE.search(ln) for ln in _logical_lines(command) if not _SETUP_CMD_RE.match(ln))


class _Expressions:
    """GitHub ``${{ }}`` substitution for one matrix instance"""

    def __init__(self, matrix: Mapping[str, str]):
        self.matrix = matrix

    def _one(self, m: re.Match) -> str:
        expr = m.group(1)
        mm = _MATRIX_REF_RE.match(expr)
        if mm:
            axis = mm.group(1)
            if axis not in self.matrix:
                raise UnsupportedConfigError(f"matrix axis {axis!r} has no value in the selected instance")
            return self.matrix[axis]
        me = _ENV_REF_RE.match(expr)
        if me:
            return "${" + me.group(1) + "}"
        if expr == "github.workspace":
            return WORKSPACE
        if expr == "runner.os":
            return "Linux"
        if expr.startswith("secrets."):
            raise UnsupportedConfigError(f"secrets-dependent step ({expr})")
        raise UnsupportedConfigError(f"expression not supported: ${{{{ {expr} }}}}")

    def __call__(self, text: str) -> str:
        return _EXPR_RE.sub(self._one, text)


# ---------------------------------------------------------------- matrices

def _github_matrix(job: dict, name: str) -> List[Dict[str, str]]:
    strategy = job.get("strategy") or {}
    matrix = strategy.get("matrix") if isinstance(strategy, dict) else None
    if not matrix:
        return [{}]
    if isinstance(matrix, str):
        raise UnsupportedConfigError(f"job {name}: matrix from expression")
    if "include" in matrix:
        raise UnsupportedConfigError(f"job {name}: matrix include")
    excludes = _as_list(matrix.get("exclude"))
    axes: List[Tuple[str, List[str]]] = []
    for axis, values in matrix.items():
        if axis == "exclude":
            continue
        if isinstance(values, str) or not isinstance(values, list):
            raise UnsupportedConfigError(f"job {name}: matrix axis {axis!r} is not a list")
        axes.append((axis, [_scalar(v, f"matrix axis {axis}") for v in values]))
    instances = [dict(zip([a for a, _ in axes], combo)) for combo in itertools.product(*[v for _, v in axes])]
    excluded = [{k: _scalar(v, "matrix exclude") for k, v in ex.items()} for ex in excludes if isinstance(ex, dict)]
    return [inst for inst in instances
            if not any(all(inst.get(k) == v for k, v in ex.items()) for ex in excluded)]


def _gitlab_matrix(job: dict, name: str) -> List[Dict[str, str]]:
    parallel = job.get("parallel")
    if parallel is None:
        return [{}]
    if not isinstance(parallel, dict) or "matrix" not in parallel:
        raise UnsupportedConfigError(f"job {name}: parallel without matrix")
    out: List[Dict[str, str]] = []
    for group in _as_list(parallel["matrix"]):
        if not isinstance(group, dict):
            raise UnsupportedConfigError(f"job {name}: malformed parallel matrix")
        axes = [(k, [_scalar(v, f"matrix axis {k}") for v in _as_list(vals)]) for k, vals in group.items()]
        out.extend(dict(zip([a for a, _ in axes], combo)) for combo in itertools.product(*[v for _, v in axes]))
    return out


# ---------------------------------------------------------------- job lookup

def _github_files(files: Mapping[str, str]) -> List[str]:
    return sorted(p for p in files if p.startswith(GITHUB_WORKFLOW_DIR) and p.endswith((".yml", ".yaml")))


def _gitlab_jobs(doc: dict) -> List[str]:
    return [k for k, v in doc.items()
            if k not in _GITLAB_RESERVED and not k.startswith(".") and isinstance(v, dict)]


def list_jobs(files: Mapping[str, str]) -> List[Tuple[str, str]]:
    """All (config path, job name) pairs"""
    out: List[Tuple[str, str]] = []
    for path in _github_files(files):
        jobs = _load_yaml(path, files[path]).get("jobs") or {}
        out.extend((path, j) for j in jobs)
    if GITLAB_CI_FILE in files:
        out.extend((GITLAB_CI_FILE, j) for j in _gitlab_jobs(_load_yaml(GITLAB_CI_FILE, files[GITLAB_CI_FILE])))
    return out


def _split_selector(selector: str) -> Tuple[Optional[str], str]:
    path, sep, job = selector.rpartition(":")
    if sep and path.endswith((".yml", ".yaml")):
        return path, job
    return None, selector


def _select(files: Mapping[str, str], selector: str) -> Tuple[str, str]:
    if not _github_files(files) and GITLAB_CI_FILE not in files:
        raise UnsupportedConfigError("no .github/workflows/*.yml or .gitlab-ci.yml present")
    path, job = _split_selector(selector)
    jobs = list_jobs(files)
    matches = [(p, j) for p, j in jobs if (path is None or p == path) and (not job or j == job)]
    if not matches:
        raise JobNotFoundError(f"no job matching {selector!r}")
    if len(matches) > 1:
        listed = ", ".join(f"{p}:{j}" for p, j in matches)
        raise UnsupportedConfigError(f"ambiguous job selector {selector!r} ({listed})")
    return matches[0]


def selector_for_run(files: Mapping[str, str], run: CIRun,
                     is_build: Optional[Callable[[str], bool]] = None) -> str:
    """Pick the job a CIRun ran; ``path:job``"""
    path = run.workflow_path or (GITLAB_CI_FILE if run.repo.forge == Forge.GITLAB else None)
    jobs = [(p, j) for p, j in list_jobs(files) if path is None or p == path]
    if run.job_name:
        named = [(p, j) for p, j in jobs if j == run.job_name]
        if len(named) == 1:
            return f"{named[0][0]}:{named[0][1]}"
    if len(jobs) == 1:
        return f"{jobs[0][0]}:{jobs[0][1]}"
    if is_build is not None:
        builds = [(p, j) for p, j in jobs if is_build(j)]
        if len(builds) == 1:
            return f"{builds[0][0]}:{builds[0][1]}"
    if not jobs:
        raise JobNotFoundError(f"run {run.run_id}: no job found in {path or 'CI configuration'}")
    raise UnsupportedConfigError(f"run {run.run_id}: cannot tell which of {len(jobs)} jobs in {path} was built")


def matrix_instances(files: Mapping[str, str], selector: str) -> List[Dict[str, str]]:
    path, job = _select(files, selector)
    doc = _load_yaml(path, files[path])
    if path == GITLAB_CI_FILE:
        instances = _gitlab_matrix(doc[job], job)
    else:
        instances = _github_matrix(doc["jobs"][job], job)
    if not instances:
        raise UnsupportedConfigError(f"job {job}: empty matrix")
    return instances


# ---------------------------------------------------------------- extraction

class _Steps:
    """Collects setup/build commands in order"""

    def __init__(self):
        self.setup: List[str] = []
        self.build: List[str] = []

    def add(self, command: str) -> None:
        command = keep_build_lines(command)
        if not command:
            return
        if not self.build and not looks_like_build(command):
            self.setup.append(command)
        else:
            self.build.append(command)


def _merge_env(target: Dict[str, str], env, expand: Callable[[str], str], where: str) -> None:
    if env is None:
        return
    if not isinstance(env, dict):
        raise UnsupportedConfigError(f"{where}: env must be a mapping")
    for key, value in env.items():
        if isinstance(value, dict):
            value = value.get("value", "")
        target[str(key)] = expand(_scalar(value, f"{where} env {key}"))


def _github_image(job: dict, name: str, runner_images: Mapping[str, str], expand) -> str:
    container = job.get("container")
    if container:
        image = container.get("image") if isinstance(container, dict) else container
        return expand(_scalar(image, f"job {name} container"))
    labels = [expand(_scalar(l, "runs-on")) for l in _as_list(job.get("runs-on"))]
    for label in labels:
        if label in runner_images:
            return runner_images[label]
    raise UnsupportedConfigError(f"job {name}: unknown runner label {', '.join(labels) or '<none>'}")


def _extract_github(path: str, doc: dict, job_name: str, matrix: Mapping[str, str],
                    runner_images: Mapping[str, str], adapters: Mapping[str, Sequence[str]]):
    job = doc["jobs"][job_name]
    if not isinstance(job, dict):
        raise UnsupportedConfigError(f"job {job_name}: not a mapping")
    if "uses" in job:
        raise UnsupportedConfigError(f"job {job_name}: reusable workflow {job['uses']}")
    if matrix not in _github_matrix(job, job_name):
        raise JobNotFoundError(f"job {job_name}: matrix instance {dict(matrix)} not in its matrix")
    expand = _Expressions(matrix)
    env: Dict[str, str] = {}
    _merge_env(env, doc.get("env"), expand, path)
    _merge_env(env, job.get("env"), expand, f"job {job_name}")
    image = _github_image(job, job_name, runner_images, expand)
    steps = _Steps()
    for i, step in enumerate(_as_list(job.get("steps"))):
        where = f"job {job_name} step {i + 1}"
        if not isinstance(step, dict):
            raise UnsupportedConfigError(f"{where}: not a mapping")
        label = _scalar(step.get("name"), f"{where} name")
        if "uses" in step:
            action = _scalar(step["uses"], f"{where} uses")
            if action.startswith(("./", "docker://")):
                raise UnsupportedConfigError(f"{where}: composite or container action {action}")
            ref = action.split("@", 1)[0]
            if ref not in adapters:
                raise UnsupportedConfigError(f"{where}: no adapter for action {ref}")
            for command in adapters[ref]:
                steps.add(command)
            continue
        if "run" not in step:
            raise UnsupportedConfigError(f"{where}: neither run nor uses")
        if _NON_BUILD_STEP_RE.search(label) and not _BUILD_STEP_RE.search(label):
            logger.debug(f"[EXTRACT] dropping non-build step {label!r}")
            continue
        shell = step.get("shell")
        if shell not in _SUPPORTED_SHELLS:
            raise UnsupportedConfigError(f"{where}: shell {shell!r}")
        _merge_env(env, step.get("env"), expand, where)
        command = expand(_scalar(step["run"], f"{where} run")).strip("\n")
        workdir = step.get("working-directory")
        if workdir:
            command = f"(\ncd {shlex.quote(expand(_scalar(workdir, where)))}\n{command}\n)"
        steps.add(command)
    return image, env, steps


def _gitlab_image(value, where: str) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, dict):
        value = value.get("name")
    return _scalar(value, f"{where} image") or None


def _extract_gitlab(doc: dict, job_name: str, matrix: Mapping[str, str]):
    if "include" in doc:
        raise UnsupportedConfigError("include: files")
    job = doc[job_name]
    for feature in ("extends", "trigger", "include"):
        if feature in job:
            raise UnsupportedConfigError(f"job {job_name}: {feature}")
    if matrix not in _gitlab_matrix(job, job_name):
        raise JobNotFoundError(f"job {job_name}: matrix instance {dict(matrix)} not in its matrix")
    default = doc.get("default") if isinstance(doc.get("default"), dict) else {}
    image = (_gitlab_image(job.get("image"), job_name) or _gitlab_image(default.get("image"), "default")
             or _gitlab_image(doc.get("image"), "top-level"))
    if not image:
        raise UnsupportedConfigError(f"job {job_name}: no image declared")

    env: Dict[str, str] = {"CI": "true", "CI_PROJECT_DIR": WORKSPACE}
    _merge_env(env, doc.get("variables"), str, "variables")
    _merge_env(env, job.get("variables"), str, f"job {job_name}")
    env.update(matrix)
    steps = _Steps()
    before = job.get("before_script", default.get("before_script", doc.get("before_script")))
    for command in _as_list(before):
        steps.setup.append(_scalar(command, f"job {job_name} before_script"))
    for command in _as_list(job.get("script")):
        steps.add(_scalar(command, f"job {job_name} script"))
    return image, env, steps


def extract_build_spec(ci_config_files: Mapping[str, str], job_selector: str,
                       matrix_instance: Optional[Mapping[str, str]] = None, *,
                       runner_images: Optional[Mapping[str, str]] = None,
                       action_adapters: Optional[Mapping[str, Sequence[str]]] = None,
                       source_ref: Optional[SourceRef] = None) -> BuildSpec:
    """提取构建规格 - the selected job's environment and compilation commands"""
    matrix = {str(k): str(v) for k, v in (matrix_instance or {}).items()}
    path, job = _select(ci_config_files, job_selector)
    doc = _load_yaml(path, ci_config_files[path])
    if path == GITLAB_CI_FILE:
        image, env, steps = _extract_gitlab(doc, job, matrix)
    else:
        image, env, steps = _extract_github(
            path, doc, job, matrix,
            runner_images if runner_images is not None else default_runner_images(),
            action_adapters if action_adapters is not None else default_action_adapters(),
        )
    if not steps.build:
        raise UnsupportedConfigError(f"job {job}: no compilation commands")
    try:
        spec = BuildSpec(base_os_image=image, env_vars=env, setup_commands=tuple(steps.setup),
                         build_commands=tuple(steps.build), matrix_axes=matrix, source_ref=source_ref)
    except ValidationError as e:
        raise UnsupportedConfigError(f"job {job}: {e.errors()[0]['msg']}") from e
    logger.info(f"[EXTRACT] {path}:{job} -> {image}, {len(spec.setup_commands)} setup / "
                f"{len(spec.build_commands)} build commands")
    return spec


def read_ci_configs(tree: Path) -> Dict[str, str]:
    """CI config files of a checked-out tree, keyed by repo-relative path"""
    tree = Path(tree)
    files: Dict[str, str] = {}
    wf_dir = tree / GITHUB_WORKFLOW_DIR
    if wf_dir.is_dir():
        for p in sorted(wf_dir.iterdir()):
            if p.suffix in (".yml", ".yaml") and p.is_file():
                files[f"{GITHUB_WORKFLOW_DIR}{p.name}"] = p.read_text(encoding="utf-8", errors="replace")
    gitlab = tree / GITLAB_CI_FILE
    if gitlab.is_file():
        files[GITLAB_CI_FILE] = gitlab.read_text(encoding="utf-8", errors="replace")
    return files
