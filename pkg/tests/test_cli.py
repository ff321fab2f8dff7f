import io
import json
import shutil

import pytest

from conftest import FIXTURES, StubRuntime, make_run
from ci_replay import cli
from ci_replay.logparse import normalize
from ci_replay.models import LogSource, Outcome, ReconstructionRecord, RecordStatus, encode
from ci_replay.store import (
    ROLE_ORIGINAL_NORMALIZED,
    ROLE_REPLAY_NORMALIZED,
    ArtifactKind,
    ArtifactStore,
    ManifestStage,
    row_for,
)

ORIGINAL_SHA = "4f3c2a1b9d8e7f6a5b4c3d2e1f0a9b8c7d6e5f4a"
REPLAY_FAILURE = (b"##[ci-replay] phase setup\n##[ci-replay] phase build\n"
                  b"gcc -Wall -O2 -o hello main.c\n"
                  b"main.c:4:12: error: 'answer' undeclared (first use in this function)\n"
                  b"make: *** [Makefile:5: hello] Error 1\n")


def _run(*argv):
    out = io.StringIO()
    code = cli.main(list(argv), out=out)
    return code, out.getvalue()


def _records(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def _fixtures(tmp_path, sha=ORIGINAL_SHA):
    """Recorded GitHub responses, optionally pointing run 9001 at another commit"""
    fx = tmp_path / "fx"
    fx.mkdir()
    text = (FIXTURES / "forge" / "github.json").read_text(encoding="utf-8")
    (fx / "github.json").write_text(text.replace(ORIGINAL_SHA, sha), encoding="utf-8")
    return fx


def _mine(tmp_path, dataset, fixtures, *extra):
    return _run("mine", "--offline", "--fixtures", str(fixtures), "--dataset", str(dataset),
                "--format", "machine", *extra)


# ---------------------------------------------------------------- mine

def test_offline_mine_harvests_the_failing_build(tmp_path):
    code, out = _mine(tmp_path, tmp_path / "ds", _fixtures(tmp_path))
    assert code == 0
    records = _records(out)
    harvested = [r for r in records if "filename" in r]
    assert [(r["run_id"], r["filename"], r["compilation_failure"]) for r in harvested] == [("9001", "pr-7.log", True)]
    summary = records[-1]
    assert summary["summary"] == "mine" and summary["harvested"] == 1 and summary["repos"] == 1

    store = ArtifactStore(tmp_path / "ds")
    rows = store.manifest().stage_rows(ManifestStage.HARVEST)
    assert [(r.run.run_id, r.log_filename) for r in rows] == [("9001", "pr-7.log")]
    assert (tmp_path / "ds" / "raw-logs" / "github-9001" / "pr-7.log").is_file()


def test_offline_mine_is_deterministic(tmp_path):
    fixtures = _fixtures(tmp_path)
    _mine(tmp_path, tmp_path / "a", fixtures)
    _mine(tmp_path, tmp_path / "b", fixtures)
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()


def test_mining_twice_leaves_the_manifest_alone(tmp_path):
    fixtures = _fixtures(tmp_path)
    _mine(tmp_path, tmp_path / "ds", fixtures)
    before = (tmp_path / "ds" / "manifest.jsonl").read_bytes()
    code, _ = _mine(tmp_path, tmp_path / "ds", fixtures)
    assert code == 0
    assert (tmp_path / "ds" / "manifest.jsonl").read_bytes() == before


def test_explicit_repo_skips_discovery(tmp_path):
    code, out = _mine(tmp_path, tmp_path / "ds", _fixtures(tmp_path), "--repo", "github:acme/toy-firmware")
    assert code == 0
    assert _records(out)[-1]["harvested"] == 1


def test_live_mine_without_token_is_a_config_error(tmp_path):
    code, _ = _run("mine", "--dataset", str(tmp_path / "ds"), "--forge", "github")
    assert code == cli.EXIT_CONFIG


def test_offline_without_fixtures_is_a_config_error(tmp_path):
    code, _ = _run("mine", "--offline", "--dataset", str(tmp_path / "ds"))
    assert code == cli.EXIT_CONFIG


@pytest.mark.parametrize("repo", ["acme/toy-firmware", "bitbucket:acme/x", "github:solo"])
def test_bad_repo_argument(tmp_path, repo):
    code, _ = _mine(tmp_path, tmp_path / "ds", _fixtures(tmp_path), "--repo", repo)
    assert code == cli.EXIT_CONFIG


def test_usage_errors_exit_2(tmp_path):
    assert _run()[0] == 2
    assert _run("mine", "--jobs", "0", "--dataset", str(tmp_path / "ds"))[0] == cli.EXIT_CONFIG
    assert _run("compare", "--format", "xml")[0] == 2


def test_broken_config_file(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("parallelism: 4\nunknown_key: 1\n", encoding="utf-8")
    assert _run("report", "--config", str(cfg))[0] == cli.EXIT_CONFIG


# ---------------------------------------------------------------- reconstruct

def _toy_setup(tmp_path, toy_repo):
    origin, sha = toy_repo
    dataset = tmp_path / "ds"
    cfg = tmp_path / "ci-replay.yaml"
    cfg.write_text(f"projects:\n  acme/toy-firmware:\n    clone_url: {origin}\n", encoding="utf-8")
    code, _ = _mine(tmp_path, dataset, _fixtures(tmp_path, sha), "--config", str(cfg))
    assert code == 0
    return dataset, cfg


@pytest.mark.git
def test_plan_only_writes_artifacts_but_no_row(tmp_path, toy_repo):
    dataset, cfg = _toy_setup(tmp_path, toy_repo)
    code, out = _run("reconstruct", "--plan-only", "--config", str(cfg), "--dataset", str(dataset),
                     "--format", "machine")
    assert code == 0
    (record,) = _records(out)
    assert record["plan_only"] is True
    store = ArtifactStore(dataset)
    dockerfile = store.get(_parse_id(record["dockerfile"])).decode("utf-8")
    assert dockerfile.startswith("FROM gcc:12\n")
    assert "make hello" in store.get(_parse_id(record["build_script"])).decode("utf-8")
    assert not store.manifest().stage_rows(ManifestStage.RECONSTRUCT)


def _parse_id(text):
    from ci_replay.store import ArtifactId

    return ArtifactId.parse(text)


@pytest.mark.git
def test_full_pipeline_with_a_stub_runtime(tmp_path, toy_repo, monkeypatch):
    dataset, cfg = _toy_setup(tmp_path, toy_repo)
    runtime = StubRuntime(runs=[(2, REPLAY_FAILURE)])
    monkeypatch.setattr(cli, "SubprocessRuntime", lambda settings: runtime)
    common = ("--config", str(cfg), "--dataset", str(dataset), "--format", "machine")

    code, out = _run("reconstruct", *common)
    assert code == 0
    assert _records(out) == [{"run_id": "9001", "status": "reconstructed", "outcome": "failure"}]
    assert runtime.calls[0] == ("probe",)

    code, out = _run("parse", *common)
    assert code == 0
    sources = sorted(r["source"] for r in _records(out))
    assert sources == ["original_ci", "reconstructed"]
    assert all(r["outcome"] == "failure" for r in _records(out))

    code, out = _run("compare", *common)
    assert code == 0
    overall = [r for r in _records(out) if r["project"] is None][0]
    assert overall["n"] == 1 and overall["outcome_pass"] == 1

    code, out = _run("report", *common)
    assert code == 0
    rows = _records(out)
    recon = [r for r in rows if r["table"] == "reconstruction" and r["project"] == "toy-firmware"]
    assert recon == [{"table": "reconstruction", "project": "toy-firmware", "attempts": 1,
                      "reconstructed": 1, "rate": "100"}]
    assert any(r["table"] == "fidelity" for r in rows)

    manifest = ArtifactStore(dataset).manifest()
    assert manifest.get(ManifestStage.RECONSTRUCT, "9001").record.status == RecordStatus.RECONSTRUCTED
    assert manifest.get(ManifestStage.COMPARE, "9001").verdict.outcome_equivalent


@pytest.mark.git
def test_unavailable_runtime_exits_3(tmp_path, toy_repo, monkeypatch):
    dataset, cfg = _toy_setup(tmp_path, toy_repo)
    monkeypatch.setattr(cli, "SubprocessRuntime", lambda settings: StubRuntime(available=False))
    code, _ = _run("reconstruct", "--config", str(cfg), "--dataset", str(dataset))
    assert code == cli.EXIT_UNAVAILABLE
    assert not ArtifactStore(dataset).manifest().stage_rows(ManifestStage.RECONSTRUCT)


@pytest.mark.git
def test_failed_reconstruction_with_fail_fast(tmp_path, toy_repo, monkeypatch):
    dataset, cfg = _toy_setup(tmp_path, toy_repo)
    runtime = StubRuntime(build=(1, b"manifest for gcc:12 unknown\n"))
    monkeypatch.setattr(cli, "SubprocessRuntime", lambda settings: runtime)
    code, _ = _run("reconstruct", "--fail-fast", "--config", str(cfg), "--dataset", str(dataset))
    assert code == cli.EXIT_ABORTED
    row = ArtifactStore(dataset).manifest().get(ManifestStage.RECONSTRUCT, "9001")
    assert row.record.status == RecordStatus.FAILED


# ---------------------------------------------------------------- parse, compare, report

def test_parse_loose_files(tmp_path):
    code, out = _run("parse", "--dataset", str(tmp_path / "ds"), "--format", "machine",
                     str(FIXTURES / "logs" / "empty.log"), str(FIXTURES / "logs" / "diagnostic_samples.log"))
    assert code == 0
    empty, samples = _records(out)
    assert empty["events"] == 0 and empty["stages"] == 1
    assert samples["events"] > 0


def test_parse_missing_file_is_a_per_item_failure(tmp_path):
    code, _ = _run("parse", "--dataset", str(tmp_path / "ds"), str(tmp_path / "nope.log"))
    assert code == 0
    code, _ = _run("parse", "--fail-fast", "--dataset", str(tmp_path / "ds"), str(tmp_path / "nope.log"))
    assert code == cli.EXIT_ABORTED


def test_compare_on_an_empty_dataset(tmp_path):
    code, out = _run("compare", "--dataset", str(tmp_path / "ds"), "--format", "machine")
    assert code == 0
    assert _records(out) == [{"table": "fidelity", "project": None, "n": 0, "outcome_pass": 0, "outcome_rate": "-",
                              "structure_pass": 0, "structure_rate": "-"}]


def _parsed_pair(store, run, replay_text):
    original = normalize(REPLAY_FAILURE.decode(), "pr-7.log", repo=run.repo)
    replay = normalize(replay_text, "run-1.log", source=LogSource.RECONSTRUCTED, repo=run.repo)
    record = ReconstructionRecord(run=run, status=RecordStatus.RECONSTRUCTED, outcome=Outcome.FAILURE)
    store.append_manifest_row(row_for(ManifestStage.RECONSTRUCT, run, record=record))
    artifacts = {ROLE_ORIGINAL_NORMALIZED: store.put(encode(original).encode("utf-8"), ArtifactKind.NORMALIZED_LOG),
                 ROLE_REPLAY_NORMALIZED: store.put(encode(replay).encode("utf-8"), ArtifactKind.NORMALIZED_LOG)}
    store.append_manifest_row(row_for(ManifestStage.PARSE, run, artifacts=artifacts))
    return artifacts


def test_compare_excludes_runs_with_unreadable_logs(store):
    _parsed_pair(store, make_run("1"), REPLAY_FAILURE.decode())
    broken = _parsed_pair(store, make_run("2"), "src/other.c:1:1: error: different\n")[ROLE_REPLAY_NORMALIZED]
    path = store.root / "artifacts" / "normalized_log" / broken.digest[:2] / broken.digest
    path.chmod(0o644)
    path.write_bytes(b"{not json")
    common = ("compare", "--dataset", str(store.root), "--format", "machine")

    code, out = _run(*common)
    assert code == 0
    overall = [r for r in _records(out) if r["project"] is None][0]
    assert overall["n"] == 1 and overall["outcome_pass"] == 1
    manifest = ArtifactStore(store.root).manifest()
    assert manifest.get(ManifestStage.COMPARE, "1") is not None
    assert manifest.get(ManifestStage.COMPARE, "2") is None

    assert _run(*common, "--fail-fast")[0] == cli.EXIT_ABORTED


def test_sampling_an_empty_dataset_is_an_empty_report(tmp_path):
    code, out = _run("compare", "--sample", "5", "--dataset", str(tmp_path / "ds"), "--format", "machine")
    assert code == 0
    assert _records(out) == [{"table": "fidelity", "project": None, "n": 0, "outcome_pass": 0, "outcome_rate": "-",
                              "structure_pass": 0, "structure_rate": "-"}]


def test_report_without_dataset_is_a_config_error(tmp_path):
    assert _run("report", "--dataset", str(tmp_path / "missing"))[0] == cli.EXIT_CONFIG


def test_report_with_pdf(tmp_path):
    _mine(tmp_path, tmp_path / "ds", _fixtures(tmp_path))
    pdf = tmp_path / "report.pdf"
    code, out = _run("report", "--dataset", str(tmp_path / "ds"), "--pdf", str(pdf))
    assert code == 0
    assert "Reconstruction success per project" in out
    assert pdf.read_bytes().startswith(b"%PDF")


def test_config_from_environment(tmp_path, monkeypatch):
    cfg = tmp_path / "env.yaml"
    cfg.write_text(f"dataset_root: {tmp_path / 'from-env'}\n", encoding="utf-8")
    monkeypatch.setenv("CI_REPLAY_CONFIG", str(cfg))
    shutil.rmtree(tmp_path / "from-env", ignore_errors=True)
    assert _run("compare")[0] == 0
    assert (tmp_path / "from-env" / "dataset.json").is_file()
