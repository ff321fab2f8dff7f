import pytest
from pydantic import ValidationError

from conftest import make_repo, make_run
from ci_replay.models import (
    BuildSpec,
    Category,
    CauseKind,
    CIRun,
    DiagnosticEvent,
    FailureCause,
    Forge,
    LogMetadata,
    NormalizedLog,
    Outcome,
    ReconstructionRecord,
    RecordStatus,
    Scheme,
    Severity,
    SourceRef,
    Span,
    Stage,
    Tool,
    decode,
    encode,
    utc_iso,
)


def _event(**kw):
    base = dict(tool=Tool.COMPILER, severity=Severity.ERROR, file="src/main.c", line=42, column=17,
                message="error: 'foo' undeclared", category=Category.UNDECLARED_IDENTIFIER,
                raw_span=Span(start_line=3, end_line=5))
    base.update(kw)
    return DiagnosticEvent(**base)


def test_repository_ref_rejects_path_separators():
    with pytest.raises(ValidationError):
        make_repo(owner="a/b")
    with pytest.raises(ValidationError):
        make_repo(name="")
    with pytest.raises(ValidationError):
        make_repo(stars=-1)


def test_repository_topics_are_a_set():
    repo = make_repo(topics=["embedded", "rtos", "embedded"])
    assert repo.topics == ("embedded", "rtos")
    assert repo.slug == "zephyrproject-rtos/zephyr"


def test_commit_sha_must_be_hex_of_at_least_seven():
    assert make_run(sha="ABCDEF0").commit_sha == "abcdef0"
    for bad in ("abc123", "xyz12345", ""):
        with pytest.raises(ValidationError):
            make_run(sha=bad)


def test_created_at_is_normalized_to_utc():
    run = make_run(created_at="2025-10-03T02:00:00+02:00")
    assert run.created_at == "2025-10-03T00:00:00Z"
    assert utc_iso("2025-10-03") == "2025-10-03T00:00:00Z"


def test_matrix_target_joins_axis_values():
    run = make_run(matrix={"board": "nucleo f401re", "arch": "arm/v7"})
    assert run.target == "nucleo_f401re-arm_v7"
    assert make_run().target == ""


def test_build_spec_requires_build_commands():
    with pytest.raises(ValidationError):
        BuildSpec(base_os_image="ubuntu:22.04", build_commands=())
    with pytest.raises(ValidationError):
        BuildSpec(base_os_image="  ", build_commands=("make",))


def test_build_spec_keeps_env_order():
    spec = BuildSpec(base_os_image="ubuntu:22.04", env_vars={"Z": "1", "A": "2", "M": "3"},
                     build_commands=("make",))
    assert list(spec.env_vars) == ["Z", "A", "M"]
    assert decode(BuildSpec, encode(spec)) == spec
    assert list(decode(BuildSpec, encode(spec)).env_vars) == ["Z", "A", "M"]


@pytest.mark.parametrize("kw", [
    dict(file=None, line=42, column=None),
    dict(line=None, column=3),
    dict(file="/home/runner/work/x.c"),
])
def test_event_location_invariants(kw):
    with pytest.raises(ValidationError):
        _event(**kw)


def test_event_equality_ignores_raw_span():
    a = _event(raw_span=Span(start_line=1, end_line=1))
    b = _event(raw_span=Span(start_line=90, end_line=93))
    assert a == b
    assert hash(a) == hash(b)
    assert a != _event(line=43)


def test_span_must_be_ordered():
    with pytest.raises(ValidationError):
        Span(start_line=5, end_line=4)


@pytest.mark.parametrize("meta", [
    dict(scheme=Scheme.PR_PLAIN, target="x"),
    dict(scheme=Scheme.PR_TARGET, integration_id="88"),
    dict(scheme=Scheme.UNKNOWN, integration_id="1"),
    dict(scheme=Scheme.PROJ_MR_SHA, project_id="42", integration_id="17"),
])
def test_log_metadata_scheme_fields(meta):
    with pytest.raises(ValidationError):
        LogMetadata(**meta)


def test_normalized_log_outcome_follows_events():
    error = _event()
    warning = _event(severity=Severity.WARNING, category=Category.OTHER)
    NormalizedLog(outcome=Outcome.FAILURE, stages=(Stage(stage_name="build", events=(error,)),))
    NormalizedLog(outcome=Outcome.SUCCESS, stages=(Stage(stage_name="build", events=(warning,)),))
    with pytest.raises(ValidationError):
        NormalizedLog(outcome=Outcome.SUCCESS, stages=(Stage(stage_name="build", events=(error,)),))
    with pytest.raises(ValidationError):
        NormalizedLog(outcome=Outcome.FAILURE, stages=(Stage(stage_name="build", events=(warning,)),))
    terminal = _event(tool=Tool.MAKE, severity=Severity.WARNING, file=None, line=None, column=None,
                      terminal=True, category=Category.MAKE_RULE_FAILURE)
    NormalizedLog(outcome=Outcome.FAILURE, stages=(Stage(stage_name="make", events=(terminal,)),))


def test_failure_cause_needs_evidence():
    with pytest.raises(ValidationError):
        FailureCause(kind=CauseKind.OTHER, evidence="")


def test_reconstruction_record_status_fields():
    run = make_run()
    ReconstructionRecord(run=run, status=RecordStatus.RECONSTRUCTED, outcome=Outcome.FAILURE)
    ReconstructionRecord(run=run, status=RecordStatus.FAILED,
                         cause=FailureCause(kind=CauseKind.OTHER, evidence="boom"))
    with pytest.raises(ValidationError):
        ReconstructionRecord(run=run, status=RecordStatus.RECONSTRUCTED)
    with pytest.raises(ValidationError):
        ReconstructionRecord(run=run, status=RecordStatus.FAILED, outcome=Outcome.FAILURE,
                             cause=FailureCause(kind=CauseKind.OTHER, evidence="boom"))


def test_models_are_frozen():
    run = make_run()
    with pytest.raises(ValidationError):
        run.run_id = "2"


def test_encode_decode_preserves_every_field():
    gl = make_repo(name="rtems", owner="rtems~rtos", forge=Forge.GITLAB, forge_id="42")
    values = [
        make_run(repo=gl, matrix={"bsp": "erc32"}, workflow_path=".gitlab-ci.yml", job_name="build:erc32"),
        BuildSpec(base_os_image="gcc:12", env_vars={"CC": "gcc"}, setup_commands=("apt-get update",),
                  build_commands=("./configure", "make"), matrix_axes={"bsp": "erc32"},
                  source_ref=SourceRef(repo="rtems~rtos/rtems", commit_sha="0abc123")),
        LogMetadata(scheme=Scheme.PROJ_MR_SHA, project_id="42", integration_id="17", commit_sha="0abc123"),
        NormalizedLog(outcome=Outcome.FAILURE, stages=(Stage(stage_name="make", events=(_event(),)),),
                      config_digest="abc"),
        ReconstructionRecord(run=make_run(), status=RecordStatus.FAILED,
                             cause=FailureCause(kind=CauseKind.HARDWARE_DEPENDENCY_MISSING,
                                                evidence="/dev/ttyUSB0: No such device")),
    ]
    for value in values:
        again = decode(type(value), encode(value))
        assert again == value
        assert again.model_dump() == value.model_dump()


def test_cirun_roundtrip_keeps_raw_span():
    log = NormalizedLog(outcome=Outcome.FAILURE, stages=(Stage(stage_name="make", events=(_event(),)),))
    again = decode(NormalizedLog, encode(log))
    assert again.stages[0].events[0].raw_span == Span(start_line=3, end_line=5)
    assert isinstance(decode(CIRun, encode(make_run())), CIRun)
