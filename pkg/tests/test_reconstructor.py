import random
import shlex
import string

import pytest
from pydantic import ValidationError

from conftest import (
    StubRuntime,
    commit_file,
    make_repo,
    make_run,
    move_tip_to_ref,
    read_fixture,
    rev_parse,
    tree_hash,
)
from ci_replay.config import PipelineConfig, ProjectSettings, RuntimeSettings
from ci_replay.errors import (
    CommitUnreachableError,
    ImageBuildFailedError,
    RebuildTimeoutError,
    RuntimeUnavailableError,
)
from ci_replay.models import BuildSpec, CauseKind, Forge, IntegrationKind, Outcome, RecordStatus, SourceRef
from ci_replay.reconstructor import (
    PHASE_BUILD,
    PHASE_SETUP,
    ContainerPlan,
    ReplayResult,
    SourceTree,
    SubprocessRuntime,
    checkout_baseline,
    classify_reconstruction_failure,
    clone_url_for,
    emit_container_plan,
    execute_rebuild,
    reconstruct,
)

MINIMAL = BuildSpec(base_os_image="ubuntu:22.04", build_commands=("gcc main.c",))
BUILD_OUTPUT = (PHASE_SETUP + "\n" + PHASE_BUILD + "\n").encode()


def _tree(tmp_path):
    return SourceTree(path=tmp_path, repo="acme/fw", commit_sha="0abc1234", tree_hash="0" * 40,
                      strategy=IntegrationKind.PULL_REQUEST)


# ---------------------------------------------------------------- container plan

def test_minimal_plan_matches_golden_files():
    plan = emit_container_plan(MINIMAL)
    assert plan.dockerfile_text == read_fixture("golden", "minimal.Dockerfile")
    assert plan.build_script_text == read_fixture("golden", "minimal.build.sh")
    assert plan.context_label == "local"


def test_plan_labels_the_source():
    spec = BuildSpec(base_os_image="gcc:12", build_commands=("make",), matrix_axes={"board": "qemu_x86"},
                     source_ref=SourceRef(repo="acme/fw", commit_sha="0abc1234"))
    plan = emit_container_plan(spec)
    assert plan.context_label == "acme/fw@0abc1234 [board=qemu_x86]"
    assert plan.dockerfile_text.splitlines()[1] == 'LABEL ci-replay.source="acme/fw" ci-replay.commit="0abc1234"'
    assert plan.build_script_text.splitlines()[1] == "# acme/fw@0abc1234 [board=qemu_x86]"


def _random_spec(rng: random.Random) -> BuildSpec:
    def word(n):
        return "".join(rng.choice(string.ascii_lowercase) for _ in range(n))

    env = {}
    for _ in range(rng.randint(0, 5)):
        key = rng.choice(string.ascii_uppercase) + "".join(rng.choice(string.ascii_uppercase + "_0123456789")
                                                           for _ in range(rng.randint(0, 8)))
        env[key] = rng.choice(["", word(4), f"{word(3)} {word(3)}", "it's", "$HOME/x", "a;b"])
    setup = tuple(f"apt-get install -y {word(5)}" for _ in range(rng.randint(0, 3)))
    build = tuple(rng.choice(["make", "ninja -C out", "west build -b qemu_x86", "scons"]) + f" {word(3)}"
                  for _ in range(rng.randint(1, 4)))
    image = rng.choice(["ubuntu:22.04", "gcc:12", "debian:12", "ghcr.io/zephyrproject-rtos/ci:v0.28.0"])
    return BuildSpec(base_os_image=image, env_vars=env, setup_commands=setup, build_commands=build)


def test_plan_is_deterministic_and_ordered():
    rng = random.Random(42)
    for _ in range(500):
        spec = _random_spec(rng)
        plan = emit_container_plan(spec)
        again = emit_container_plan(spec.model_copy())
        assert plan == again
        assert plan.image_tag == again.image_tag

        assert plan.dockerfile_text.startswith(f"FROM {spec.base_os_image}\n")
        lines = plan.build_script_text.splitlines()
        assert lines[0] == "#!/bin/sh"
        assert lines[2] == "set -e"
        setup_at = lines.index(f"echo {shlex.quote(PHASE_SETUP)}")
        build_at = lines.index(f"echo {shlex.quote(PHASE_BUILD)}")
        exports = [f"export {k}={shlex.quote(v)}" for k, v in spec.env_vars.items()]
        assert lines[3:setup_at] == exports
        assert tuple(lines[setup_at + 1:build_at]) == spec.setup_commands
        assert tuple(lines[build_at + 1:]) == spec.build_commands


def test_plan_needs_a_from_line():
    with pytest.raises(ValidationError):
        ContainerPlan(dockerfile_text="RUN make\n", build_script_text="", context_label="x")


def test_replay_result_outcome_follows_exit_code():
    plan = emit_container_plan(MINIMAL)
    ReplayResult(outcome=Outcome.FAILURE, exit_code=2, log=b"", wall_time=1.0, plan=plan)
    with pytest.raises(ValidationError):
        ReplayResult(outcome=Outcome.SUCCESS, exit_code=1, log=b"", wall_time=1.0, plan=plan)
    with pytest.raises(ValidationError):
        ReplayResult(outcome=Outcome.FAILURE, exit_code=0, log=b"", wall_time=1.0, plan=plan)


# ---------------------------------------------------------------- execute_rebuild

def test_rebuild_success(tmp_path):
    runtime = StubRuntime()
    plan = emit_container_plan(MINIMAL)
    result = execute_rebuild(plan, _tree(tmp_path), runtime)
    assert (result.outcome, result.exit_code) == (Outcome.SUCCESS, 0)
    assert [c[0] for c in runtime.calls] == ["probe", "build", "run", "rmi"]
    assert runtime.calls[1] == ("build", plan.image_tag)
    assert runtime.contexts == [{"Dockerfile": plan.dockerfile_text, "build.sh": plan.build_script_text}]


def test_keep_image_skips_removal(tmp_path):
    runtime = StubRuntime()
    execute_rebuild(emit_container_plan(MINIMAL), _tree(tmp_path), runtime, keep_image=True)
    assert "rmi" not in [c[0] for c in runtime.calls]


def test_build_failure_after_the_build_phase_is_an_outcome(tmp_path):
    log = BUILD_OUTPUT + b"main.c:9:20: error: 'totl' undeclared\nmake: *** [hello] Error 1\n"
    runtime = StubRuntime(runs=[(2, log)])
    result = execute_rebuild(emit_container_plan(MINIMAL), _tree(tmp_path), runtime)
    assert (result.outcome, result.exit_code, result.log) == (Outcome.FAILURE, 2, log)


def test_setup_failure_is_a_reconstruction_failure(tmp_path):
    log = (PHASE_SETUP + "\nE: Unable to locate package gcc-arm-none-eabi\n").encode()
    runtime = StubRuntime(runs=[(100, log)])
    with pytest.raises(ImageBuildFailedError) as info:
        execute_rebuild(emit_container_plan(MINIMAL), _tree(tmp_path), runtime)
    assert info.value.cause.kind == CauseKind.REMOVED_PACKAGE_REPOSITORY
    assert info.value.log == log


def test_runtime_level_exit_is_a_reconstruction_failure(tmp_path):
    runtime = StubRuntime(runs=[(125, BUILD_OUTPUT + b"docker: Error response from daemon: OCI runtime create failed\n")])
    with pytest.raises(ImageBuildFailedError):
        execute_rebuild(emit_container_plan(MINIMAL), _tree(tmp_path), runtime)


@pytest.mark.parametrize("build_log", [
    b"Step 1/4 : FROM gcc:99\nmanifest for gcc:99 not found: manifest unknown\n",
    b"Error response from daemon: pull access denied for acme/vendor-sdk, repository does not exist\n",
])
def test_image_build_failure(tmp_path, build_log):
    runtime = StubRuntime(build=(1, build_log))
    with pytest.raises(ImageBuildFailedError) as info:
        execute_rebuild(emit_container_plan(MINIMAL), _tree(tmp_path), runtime)
    assert info.value.cause.kind == CauseKind.REMOVED_PACKAGE_REPOSITORY
    assert "run" not in [c[0] for c in runtime.calls]
    assert runtime.calls[-1][0] == "rmi"


def test_unavailable_runtime(tmp_path):
    runtime = StubRuntime(available=False)
    with pytest.raises(RuntimeUnavailableError):
        execute_rebuild(emit_container_plan(MINIMAL), _tree(tmp_path), runtime)
    assert runtime.calls == [("probe",)]


def test_missing_runtime_binary_is_unavailable():
    runtime = SubprocessRuntime(RuntimeSettings(command="ci-replay-no-such-runtime"))
    with pytest.raises(RuntimeUnavailableError):
        runtime.probe()


class _HangingRuntime(StubRuntime):
    def run(self, tag, source_dir, timeout):
        self.calls.append(("run", tag, str(source_dir)))
        raise RebuildTimeoutError(timeout, b"partial output\n")


def test_timeout_still_removes_the_image(tmp_path):
    runtime = _HangingRuntime()
    with pytest.raises(RebuildTimeoutError) as info:
        execute_rebuild(emit_container_plan(MINIMAL), _tree(tmp_path), runtime, timeout=5)
    assert info.value.log == b"partial output\n"
    assert runtime.calls[-1][0] == "rmi"


# ---------------------------------------------------------------- failure causes

@pytest.mark.parametrize("log,kind", [
    ("Opening /dev/ttyUSB0: No such file or directory", CauseKind.HARDWARE_DEPENDENCY_MISSING),
    ("No J-Link found", CauseKind.HARDWARE_DEPENDENCY_MISSING),
    ("iccarm: license checkout failed", CauseKind.PROPRIETARY_TOOLCHAIN_UNAVAILABLE),
    ("E: Unable to locate package gcc-arm-none-eabi", CauseKind.REMOVED_PACKAGE_REPOSITORY),
    ("ERROR: No matching distribution found for west==0.6.0", CauseKind.REMOVED_PACKAGE_REPOSITORY),
    ("build.sh: 4: arm-none-eabi-gcc: not found", CauseKind.IMPLICIT_ENVIRONMENT_DEPENDENCY),
    ("/bin/sh: 1: west: command not found", CauseKind.IMPLICIT_ENVIRONMENT_DEPENDENCY),
    ("ModuleNotFoundError: No module named 'elftools'", CauseKind.IMPLICIT_ENVIRONMENT_DEPENDENCY),
    ("Segmentation fault", CauseKind.OTHER),
])
def test_classify(log, kind):
    cause = classify_reconstruction_failure(log.encode())
    assert cause.kind == kind
    assert cause.evidence


def test_classify_evidence():
    log = b"step one\nE: Unable to locate package libfoo-dev\nstep three\n"
    assert classify_reconstruction_failure(log).evidence == "E: Unable to locate package libfoo-dev"
    assert classify_reconstruction_failure(b"first\nlast words\n\n").evidence == "last words"
    empty = classify_reconstruction_failure(b"")
    assert (empty.kind, empty.evidence) == (CauseKind.OTHER, "<empty log>")


def test_classify_evidence_is_quoted_from_the_log():
    text = "step one\n\x1b[31m2025-10-03T12:00:01Z make[1]: ‘arm-none-eabi-gcc’: command not found\x1b[0m\n"
    cause = classify_reconstruction_failure(text.encode("utf-8"))
    assert cause.kind == CauseKind.IMPLICIT_ENVIRONMENT_DEPENDENCY
    assert cause.evidence in text
    assert "‘arm-none-eabi-gcc’" in cause.evidence


def test_first_matching_rule_wins():
    log = b"/bin/sh: 1: openocd: not found\nJ-Link: connection failed, could not find debug probe\n"
    assert classify_reconstruction_failure(log).kind == CauseKind.HARDWARE_DEPENDENCY_MISSING


# ---------------------------------------------------------------- source baseline

def test_clone_urls():
    assert clone_url_for(make_repo(name="fw", owner="acme")) == "https://github.com/acme/fw.git"
    assert clone_url_for(make_repo(name="fw", owner="acme"), "https://ghe.acme.com/api/v3") == \
        "https://ghe.acme.com/acme/fw.git"
    gl = make_repo(name="rtems", owner="rtems~rtos", forge=Forge.GITLAB, forge_id="42")
    assert clone_url_for(gl) == "https://gitlab.com/rtems/rtos/rtems.git"


@pytest.mark.git
def test_checkout_reproduces_the_tagged_tree(toy_repo, tmp_path):
    origin, sha = toy_repo
    later = commit_file(origin, "README.md", "changed after the failing run\n", "docs")
    tree = checkout_baseline(make_repo(name="toy", owner="acme"), sha, IntegrationKind.PULL_REQUEST,
                             workdir=tmp_path / "work", clone_url=str(origin), integration_id="7")
    assert tree.commit_sha == sha
    assert tree.tree_hash == tree_hash(origin, "v0.1")
    assert tree.tree_hash != tree_hash(origin, later)
    assert (tree.path / "main.c").is_file()
    assert tree.strategy == IntegrationKind.PULL_REQUEST


@pytest.mark.git
def test_checkout_of_a_merge_request_head(toy_repo, tmp_path):
    origin, sha = toy_repo
    fixed = (origin / "main.c").read_text(encoding="utf-8").replace("totl", "total")
    commit_file(origin, "main.c", fixed, "fix the typo in the merge request")
    mr_head = move_tip_to_ref(origin, "refs/merge-requests/17/head", sha)
    repo = make_repo(name="toy", owner="acme", forge=Forge.GITLAB, forge_id="42")
    tree = checkout_baseline(repo, mr_head, IntegrationKind.MERGE_REQUEST, workdir=tmp_path / "work",
                             clone_url=str(origin), integration_id="17")
    assert tree.commit_sha == mr_head
    assert tree.tree_hash == tree_hash(origin, mr_head)
    assert tree.tree_hash != tree_hash(origin, sha)
    assert tree.strategy == IntegrationKind.MERGE_REQUEST
    assert rev_parse(tree.path, "refs/ci-replay/integration") == mr_head
    assert "totl" not in (tree.path / "main.c").read_text(encoding="utf-8")


@pytest.mark.git
def test_checkout_of_unknown_commit(toy_repo, tmp_path):
    origin, _ = toy_repo
    with pytest.raises(CommitUnreachableError):
        checkout_baseline(make_repo(name="toy", owner="acme"), "deadbeef0000000", IntegrationKind.PULL_REQUEST,
                          workdir=tmp_path / "work", clone_url=str(origin))


# ---------------------------------------------------------------- reconstruct

def _toy_config(origin, **project):
    return PipelineConfig(projects={"acme/toy-firmware": ProjectSettings(clone_url=str(origin), **project)})


def _toy_run(sha):
    return make_run("9001", repo=make_repo(name="toy-firmware", owner="acme"), sha=sha, integration_id="7",
                    workflow_path=".github/workflows/build.yml")


@pytest.mark.git
def test_plan_only_reconstruction(toy_repo):
    origin, sha = toy_repo
    attempt = reconstruct(_toy_run(sha), _toy_config(origin), None, plan_only=True)
    assert attempt.status is None and attempt.record() is None
    assert attempt.plan.dockerfile_text.startswith("FROM gcc:12\n")
    assert f'ci-replay.commit="{sha}"' in attempt.plan.dockerfile_text
    script = attempt.plan.build_script_text.splitlines()
    assert "export CFLAGS='-Wall -O2'" in script
    assert script[-1] == "make hello"


@pytest.mark.git
def test_reconstruction_reports_the_replayed_outcome(toy_repo):
    origin, sha = toy_repo
    runtime = StubRuntime(runs=[(2, BUILD_OUTPUT + b"make: *** [Makefile:5: hello] Error 1\n")])
    attempt = reconstruct(_toy_run(sha), _toy_config(origin), runtime)
    record = attempt.record("normalized_log/" + "a" * 64)
    assert record.status == RecordStatus.RECONSTRUCTED
    assert record.outcome == Outcome.FAILURE
    assert record.log_artifact_id.startswith("normalized_log/")
    assert runtime.contexts[0]["build.sh"] == attempt.plan.build_script_text


@pytest.mark.git
def test_unreachable_commit_becomes_a_failure_record(toy_repo):
    origin, _ = toy_repo
    attempt = reconstruct(_toy_run("deadbeef0000000"), _toy_config(origin), StubRuntime())
    record = attempt.record()
    assert record.status == RecordStatus.FAILED
    assert record.cause.kind == CauseKind.OTHER
    assert "not reachable" in record.cause.evidence


@pytest.mark.git
def test_unknown_workflow_becomes_a_failure_record(toy_repo):
    origin, sha = toy_repo
    attempt = reconstruct(_toy_run(sha), _toy_config(origin, workflow="release.yml:publish"), StubRuntime())
    assert attempt.status == RecordStatus.FAILED
    assert attempt.plan is None


@pytest.mark.git
def test_setup_failure_cause_is_kept(toy_repo):
    origin, sha = toy_repo
    runtime = StubRuntime(runs=[(127, (PHASE_SETUP + "\n/bin/sh: 1: west: command not found\n").encode())])
    attempt = reconstruct(_toy_run(sha), _toy_config(origin), runtime)
    assert attempt.cause.kind == CauseKind.IMPLICIT_ENVIRONMENT_DEPENDENCY
    assert attempt.plan is not None


@pytest.mark.git
def test_matrix_with_every_instance_excluded_becomes_a_failure_record(toy_repo):
    origin, _ = toy_repo
    sha = commit_file(origin, ".github/workflows/build.yml",
                      "name: Build\n"
                      "on: pull_request\n"
                      "jobs:\n"
                      "  build:\n"
                      "    runs-on: ubuntu-22.04\n"
                      "    strategy:\n"
                      "      matrix: {board: [a], exclude: [{board: a}]}\n"
                      "    steps:\n"
                      "      - run: make hello\n", "exclude every board")
    attempt = reconstruct(_toy_run(sha), _toy_config(origin), None, plan_only=True)
    assert attempt.status == RecordStatus.FAILED
    assert attempt.plan is None
    assert attempt.cause.kind == CauseKind.OTHER
    assert attempt.cause.evidence.startswith("unsupported-config: ")
    assert "empty matrix" in attempt.cause.evidence
