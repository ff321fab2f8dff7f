# -*- coding: utf-8 -*-
"""
命令行入口 - ci-replay command line

    ci-replay mine         discover, filter and harvest failing build runs
    ci-replay reconstruct  replay harvested runs in containers
    ci-replay parse        normalize original and replayed logs
    ci-replay compare      outcome / structure fidelity of replays
    ci-replay report       reconstruction table and failure causes

Exit codes: 0 ok, 1 batch aborted (--fail-fast or a dataset error), 2 configuration error,
3 forge authentication / network failure or container runtime unavailable.
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from .catalog import Catalog, ProjectFamily, load_catalog
from .config import PipelineConfig, load_config
from .errors import (
    ConfigError,
    DuplicateKeyError,
    ForgeError,
    InvalidTokenError,
    LogExpiredError,
    NetworkUnreachableError,
    QuotaInfeasibleError,
    ReplayError,
    RuntimeUnavailableError,
)
from .fidelity import aggregate_fidelity, aggregate_reconstruction, judge, sample_stratified
from .forge import FixtureMode, ForgeSession, authenticate
from .logparse import normalize
from .miner import discover_repositories, enumerate_runs, fetch_log, filter_valid, scan_compilation_markers
from .models import CIRun, Conclusion, Forge, LogSource, NormalizedLog, Outcome, RecordStatus, RepositoryRef, decode, encode
from .pdf_report import generate_report_pdf
from .reconstructor import SubprocessRuntime, reconstruct
from .store import (
    ROLE_BUILD_SCRIPT,
    ROLE_DOCKERFILE,
    ROLE_ORIGINAL_NORMALIZED,
    ROLE_RAW_LOG,
    ROLE_REPLAY_LOG,
    ROLE_REPLAY_NORMALIZED,
    ArtifactKind,
    ArtifactStore,
    ManifestRow,
    ManifestStage,
    row_for,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ABORTED = 1
EXIT_CONFIG = 2
EXIT_UNAVAILABLE = 3


class FailFast(ReplayError):
    """First per-item failure under --fail-fast"""


class Context:
    """One command invocation: config, dataset, output format, batch policy"""

    def __init__(self, args: argparse.Namespace, config: PipelineConfig, out=None):
        self.args = args
        self.config = config
        self.out = out or sys.stdout
        self.machine = args.format == "machine"
        self.fail_fast = args.fail_fast
        self.skip_existing = args.skip_existing
        self.store = ArtifactStore(config.dataset_root)
        self.catalog: Catalog = load_catalog(config.catalog_path)
        self.failures = 0

    def emit(self, human: str, record: Optional[dict] = None) -> None:
        if self.machine:
            if record is not None:
                print(json.dumps(record, sort_keys=True), file=self.out)
        else:
            print(human, file=self.out)

    def item_failed(self, message: str) -> None:
        self.failures += 1
        logger.warning(message)
        if self.fail_fast:
            raise FailFast(message)

    def append(self, row: ManifestRow) -> bool:
        """Append unless an identical row exists; True when written"""
        existing = self.store.manifest().get(row.stage, row.run.run_id, row.target)
        if existing is not None:
            if existing == row:
                logger.debug(f"[STORE] {row.key} unchanged")
                return False
            if self.skip_existing:
                logger.info(f"[STORE] {row.key} exists, skipped")
                return False
            self.item_failed(f"[STORE] duplicate manifest key {row.key}")
            return False
        try:
            self.store.append_manifest_row(row)
        except DuplicateKeyError as e:
            self.item_failed(str(e))
            return False
        return True

    def pool(self) -> ThreadPoolExecutor:
        return ThreadPoolExecutor(max_workers=self.config.parallelism)


# ---------------------------------------------------------------- selection helpers

def _selected(ctx: Context, rows: Iterable[ManifestRow]) -> List[ManifestRow]:
    runs = set(ctx.args.run or ())
    projects = set(ctx.args.project or ())
    return [r for r in rows
            if (not runs or r.run.run_id in runs) and (not projects or r.run.project in projects)]


def _parse_repo_arg(text: str) -> Tuple[Forge, str, str]:
    forge, sep, path = text.partition(":")
    parts = path.strip("/").split("/")
    if not sep or len(parts) < 2:
        raise ConfigError(f"--repo expects forge:owner/name, got {text!r}")
    try:
        return Forge(forge), "~".join(parts[:-1]), parts[-1]
    except ValueError:
        raise ConfigError(f"unknown forge {forge!r} in --repo {text}") from None


def _session(ctx: Context, forge: Forge) -> Optional[ForgeSession]:
    settings = ctx.config.forge(forge)
    fixtures = ctx.config.fixtures_dir
    if ctx.args.offline:
        if fixtures is None:
            raise ConfigError("--offline needs --fixtures or fixtures_dir in the config")
        if not (Path(fixtures) / f"{forge.value}.json").is_file():
            logger.info(f"[MINE] no {forge.value} fixtures, skipping forge")
            return None
        mode = FixtureMode.REPLAY
    else:
        if not settings.token().get_secret_value():
            raise ConfigError(f"no access token for {forge.value}: set {settings.token_env} "
                              f"or {settings.fallback_token_env}")
        mode = FixtureMode.RECORD if ctx.args.record else FixtureMode.LIVE
        if mode == FixtureMode.RECORD and fixtures is None:
            raise ConfigError("--record needs --fixtures or fixtures_dir in the config")
    return authenticate(forge, settings.base_url, settings.token(), fixtures_dir=fixtures, mode=mode,
                        per_page=settings.per_page, page_cap=settings.page_cap)


# ---------------------------------------------------------------- mine

def cmd_mine(ctx: Context) -> int:
    ctx.store.init()
    explicit = [_parse_repo_arg(r) for r in ctx.args.repo or ()]
    forges = [Forge(f) for f in ctx.args.forge] if ctx.args.forge else \
        sorted({f for f, _, _ in explicit} or set(ctx.config.forges), key=lambda f: f.value)
    criteria = ctx.config.discovery
    stats = {"repos": 0, "runs": 0, "kept": 0, "harvested": 0, "expired": 0, "compilation": 0}

    for forge in forges:
        session = _session(ctx, forge)
        if session is None:
            continue
        repos: List[RepositoryRef] = []
        if explicit:
            for f, owner, name in explicit:
                if f != forge:
                    continue
                try:
                    repos.append(session.api.get_repository(owner, name))
                except ForgeError as e:
                    ctx.item_failed(f"[MINE] {forge.value}:{owner}/{name}: {e}")
        else:
            repos = discover_repositories(session, criteria)
        stats["repos"] += len(repos)

        def runs_of(repo):
            try:
                return repo, enumerate_runs(session, repo, criteria.window_end, ctx.config.workflow_filter), None
            except (ForgeError, ValueError) as e:
                return repo, [], e

        with ctx.pool() as pool:
            enumerated = list(pool.map(runs_of, repos))

        for repo, runs, error in enumerated:
            if error is not None:
                ctx.item_failed(f"[MINE] {repo.slug}: {error}")
                continue
            kept = filter_valid(runs)
            stats["runs"] += len(runs)
            stats["kept"] += len(kept)
            logger.info(f"[MINE] {repo.slug}: kept {len(kept)}/{len(runs)} runs")
            _harvest(ctx, session, kept, stats)

    ctx.emit(
        f"repos scanned: {stats['repos']}  runs: {stats['runs']}  kept: {stats['kept']}  "
        f"harvested: {stats['harvested']}  compilation failures: {stats['compilation']}  "
        f"logs expired: {stats['expired']}",
        {"summary": "mine", **stats},
    )
    return EXIT_OK


def _harvest(ctx: Context, session: ForgeSession, runs: Sequence[CIRun], stats: Dict[str, int]) -> None:
    manifest = ctx.store.manifest()
    todo = [r for r in runs if not (ctx.skip_existing and manifest.get(ManifestStage.HARVEST, r.run_id, r.target))]

    def fetch(run):
        try:
            return run, fetch_log(session, run), None
        except (LogExpiredError, ForgeError) as e:
            return run, None, e

    with ctx.pool() as pool:
        results = list(pool.map(fetch, todo))

    for run, fetched, error in results:
        if isinstance(error, LogExpiredError):
            stats["expired"] += 1
            logger.info(f"[MINE] run {run.run_id}: {error}")
            continue
        if error is not None:
            ctx.item_failed(f"[MINE] run {run.run_id}: {error}")
            continue
        scan = scan_compilation_markers(fetched.content, ctx.catalog)
        aid = ctx.store.put(fetched.content, ArtifactKind.RAW_LOG)
        ctx.store.link_raw_log(aid, run, fetched.filename)
        row = row_for(ManifestStage.HARVEST, run, artifacts={ROLE_RAW_LOG: aid},
                      log_filename=fetched.filename, compilation_failure=scan.is_compilation_failure)
        ctx.append(row)
        stats["harvested"] += 1
        stats["compilation"] += int(scan.is_compilation_failure)
        ctx.emit(f"{run.project} run {run.run_id} -> {fetched.filename} "
                 f"({'compilation' if scan.is_compilation_failure else 'other'} failure)",
                 {"run_id": run.run_id, "project": run.project, "filename": fetched.filename,
                  "compilation_failure": scan.is_compilation_failure, "artifact": str(aid)})


# ---------------------------------------------------------------- reconstruct

def cmd_reconstruct(ctx: Context) -> int:
    ctx.store.init()
    manifest = ctx.store.manifest()
    rows = _selected(ctx, manifest.stage_rows(ManifestStage.HARVEST))
    if ctx.skip_existing:
        rows = [r for r in rows if manifest.get(ManifestStage.RECONSTRUCT, r.run.run_id, r.target) is None]
    runtime = None
    if not ctx.args.plan_only:
        runtime = SubprocessRuntime(ctx.config.runtime)
        runtime.probe()

    with ctx.pool() as pool:
        attempts = list(pool.map(
            lambda row: reconstruct(row.run, ctx.config, runtime, plan_only=ctx.args.plan_only, catalog=ctx.catalog),
            rows))

    for row, attempt in zip(rows, attempts):
        artifacts = {}
        if attempt.plan is not None:
            artifacts[ROLE_DOCKERFILE] = ctx.store.put(attempt.plan.dockerfile_text.encode("utf-8"),
                                                       ArtifactKind.DOCKERFILE)
            artifacts[ROLE_BUILD_SCRIPT] = ctx.store.put(attempt.plan.build_script_text.encode("utf-8"),
                                                         ArtifactKind.BUILD_SCRIPT)
        if ctx.args.plan_only and attempt.cause is None:
            ctx.emit(f"{row.run.project} run {row.run.run_id}: plan {attempt.plan.context_label}",
                     {"run_id": row.run.run_id, "plan_only": True,
                      **{role: str(aid) for role, aid in artifacts.items()}})
            continue
        log_id = None
        if attempt.log or attempt.result is not None:
            artifacts[ROLE_REPLAY_LOG] = ctx.store.put(attempt.log, ArtifactKind.RAW_LOG)
            log_id = str(artifacts[ROLE_REPLAY_LOG])
        record = attempt.record(log_id)
        ctx.append(row_for(ManifestStage.RECONSTRUCT, row.run, artifacts=artifacts, record=record))
        if record.status == RecordStatus.RECONSTRUCTED:
            ctx.emit(f"{row.run.project} run {row.run.run_id}: reconstructed, build {record.outcome.value}",
                     {"run_id": row.run.run_id, "status": record.status.value, "outcome": record.outcome.value})
        else:
            ctx.emit(f"{row.run.project} run {row.run.run_id}: failed ({record.cause.kind.value}: "
                     f"{record.cause.evidence})",
                     {"run_id": row.run.run_id, "status": record.status.value, "cause": record.cause.kind.value,
                      "evidence": record.cause.evidence})
            if ctx.fail_fast:
                ctx.item_failed(f"[REPLAY] run {row.run.run_id}: reconstruction failed")
    return EXIT_OK


# ---------------------------------------------------------------- parse

def _normalize_bytes(ctx: Context, raw: bytes, filename: str, outcome: Optional[Outcome],
                     profile: ProjectFamily, source: LogSource,
                     repo: Optional[RepositoryRef] = None) -> NormalizedLog:
    return normalize(raw, filename, outcome, ctx.config.normalization, ctx.catalog.profile(profile),
                     source=source, catalog=ctx.catalog, repo=repo)


def _report_log(ctx: Context, name: str, log: NormalizedLog, aid, extra: Optional[dict] = None) -> None:
    n_events = len(log.events())
    ctx.emit(f"{name}: {len(log.stages)} stages, {n_events} events, {log.outcome.value}",
             {"log": name, "stages": len(log.stages), "events": n_events, "outcome": log.outcome.value,
              "artifact": str(aid), **(extra or {})})


def cmd_parse(ctx: Context) -> int:
    ctx.store.init()
    profile = ProjectFamily(ctx.args.profile) if ctx.args.profile else None
    if ctx.args.paths:
        def parse_file(path):
            try:
                raw = Path(path).read_bytes()
            except OSError as e:
                return path, None, e
            return path, _normalize_bytes(ctx, raw, Path(path).name, None, profile or ProjectFamily.GENERIC,
                                          LogSource.ORIGINAL_CI), None

        with ctx.pool() as pool:
            results = list(pool.map(parse_file, ctx.args.paths))
        for path, log, error in results:
            if error is not None:
                ctx.item_failed(f"[PARSE] {path}: {error}")
                continue
            aid = ctx.store.put(encode(log).encode("utf-8"), ArtifactKind.NORMALIZED_LOG)
            _report_log(ctx, str(path), log, aid)
        return EXIT_OK

    manifest = ctx.store.manifest()
    rows = _selected(ctx, manifest.stage_rows(ManifestStage.HARVEST))
    if ctx.skip_existing:
        rows = [r for r in rows if manifest.get(ManifestStage.PARSE, r.run.run_id, r.target) is None]

    def parse_row(row):
        family = profile or ctx.config.project(row.run.repo.slug).profile
        raw = ctx.store.get(row.artifacts[ROLE_RAW_LOG])
        outcome = Outcome.FAILURE if row.run.conclusion == Conclusion.FAILURE else None
        original = _normalize_bytes(ctx, raw, row.log_filename or row.run.run_id, outcome, family,
                                    LogSource.ORIGINAL_CI, row.run.repo)
        replay = None
        rec_row = manifest.get(ManifestStage.RECONSTRUCT, row.run.run_id, row.target)
        if rec_row and rec_row.record and rec_row.record.status == RecordStatus.RECONSTRUCTED:
            replay_raw = ctx.store.get(rec_row.artifacts[ROLE_REPLAY_LOG])
            replay = _normalize_bytes(ctx, replay_raw, f"replay-{row.run.run_id}", rec_row.record.outcome, family,
                                      LogSource.RECONSTRUCTED, row.run.repo)
        return row, original, replay

    def guarded(row):
        try:
            return parse_row(row), None
        except ReplayError as e:
            return (row, None, None), e

    with ctx.pool() as pool:
        results = list(pool.map(guarded, rows))

    for (row, original, replay), error in results:
        if error is not None:
            ctx.item_failed(f"[PARSE] run {row.run.run_id}: {error}")
            continue
        artifacts = {ROLE_ORIGINAL_NORMALIZED: ctx.store.put(encode(original).encode("utf-8"),
                                                             ArtifactKind.NORMALIZED_LOG)}
        if replay is not None:
            artifacts[ROLE_REPLAY_NORMALIZED] = ctx.store.put(encode(replay).encode("utf-8"),
                                                              ArtifactKind.NORMALIZED_LOG)
        ctx.append(row_for(ManifestStage.PARSE, row.run, artifacts=artifacts))
        _report_log(ctx, f"{row.run.project} run {row.run.run_id}", original,
                    artifacts[ROLE_ORIGINAL_NORMALIZED], {"run_id": row.run.run_id, "source": "original_ci"})
        if replay is not None:
            _report_log(ctx, f"{row.run.project} run {row.run.run_id} (replay)", replay,
                        artifacts[ROLE_REPLAY_NORMALIZED], {"run_id": row.run.run_id, "source": "reconstructed"})
    return EXIT_OK


# ---------------------------------------------------------------- compare

def _load_normalized(ctx: Context, artifact) -> NormalizedLog:
    return decode(NormalizedLog, ctx.store.get(artifact).decode("utf-8"))


def cmd_compare(ctx: Context) -> int:
    ctx.store.init()
    manifest = ctx.store.manifest()
    candidates = []
    for row in _selected(ctx, manifest.stage_rows(ManifestStage.PARSE)):
        rec_row = manifest.get(ManifestStage.RECONSTRUCT, row.run.run_id, row.target)
        if ROLE_REPLAY_NORMALIZED not in row.artifacts or rec_row is None or rec_row.record is None:
            continue
        candidates.append((row, rec_row.record))

    if ctx.args.sample is not None and candidates:
        chosen = sample_stratified([rec for _, rec in candidates], ctx.args.sample, ctx.args.seed,
                                   label=ctx.config.project_label)
        keys = {(r.run.run_id, r.run.target) for r in chosen}
        candidates = [(row, rec) for row, rec in candidates if (row.run.run_id, row.target) in keys]
        logger.info(f"[SAMPLE] {len(candidates)} runs (seed {ctx.args.seed})")

    verdicts = []
    for row, _ in candidates:
        try:
            original = _load_normalized(ctx, row.artifacts[ROLE_ORIGINAL_NORMALIZED])
            replay = _load_normalized(ctx, row.artifacts[ROLE_REPLAY_NORMALIZED])
            verdict = judge(row.run, ctx.config.project_label(row.run.repo), original, replay)
        except (ReplayError, ValidationError, UnicodeDecodeError) as e:
            ctx.item_failed(f"[COMPARE] run {row.run.run_id}: {e}; excluded from aggregates")
            continue
        verdicts.append(verdict)
        ctx.append(row_for(ManifestStage.COMPARE, row.run, verdict=verdict))

    report = aggregate_fidelity(verdicts)
    if ctx.machine:
        print(report.render_machine(), end="", file=ctx.out)
    else:
        print(report.render_text(), end="", file=ctx.out)
    if ctx.args.pdf:
        generate_report_pdf(ctx.args.pdf, fidelity=report)
    return EXIT_OK


# ---------------------------------------------------------------- report

def cmd_report(ctx: Context) -> int:
    if not ctx.store.exists():
        raise ConfigError(f"no dataset at {ctx.store.root}")
    manifest = ctx.store.manifest()
    records = [r.record for r in _selected(ctx, manifest.stage_rows(ManifestStage.RECONSTRUCT)) if r.record]
    report = aggregate_reconstruction(records, label=ctx.config.project_label)
    verdicts = [r.verdict for r in _selected(ctx, manifest.stage_rows(ManifestStage.COMPARE)) if r.verdict]
    fidelity = aggregate_fidelity(verdicts) if verdicts else None
    if ctx.machine:
        print(report.render_machine(), end="", file=ctx.out)
        if fidelity:
            print(fidelity.render_machine(), end="", file=ctx.out)
    else:
        print(report.render_text(), end="", file=ctx.out)
        if fidelity:
            print("\n" + fidelity.render_text(), end="", file=ctx.out)
    if ctx.args.pdf:
        generate_report_pdf(ctx.args.pdf, reconstruction=report, fidelity=fidelity)
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

COMMANDS = {
    "mine": cmd_mine,
    "reconstruct": cmd_reconstruct,
    "parse": cmd_parse,
    "compare": cmd_compare,
    "report": cmd_report,
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH",
                   help="config file (default: $CI_REPLAY_CONFIG, then ./ci-replay.yaml, then built-in defaults)")
    g.add_argument("--dataset", metavar="PATH", help="dataset root (default: config dataset_root, 'dataset')")
    g.add_argument("--offline", action="store_true", help="replay recorded forge responses, no network")
    g.add_argument("--fixtures", metavar="PATH", help="forge fixture directory (default: config fixtures_dir)")
    g.add_argument("--record", action="store_true", help="record live forge responses into --fixtures")
    g.add_argument("--jobs", type=int, metavar="N", help="parallel workers (default: config parallelism, 4)")
    g.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    g.add_argument("--format", choices=("human", "machine"), default="human",
                   help="human tables or line-delimited JSON records (default: human)")
    g.add_argument("--fail-fast", action="store_true", help="abort on the first per-item failure")
    g.add_argument("--skip-existing", action="store_true", help="skip runs that already have a manifest row")
    return p


def _selection(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run", action="append", metavar="RUN_ID", help="restrict to this run (repeatable)")
    p.add_argument("--project", action="append", metavar="OWNER/NAME", help="restrict to this project (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="ci-replay", description="Mine, replay and compare failing CI builds.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    mine = sub.add_parser("mine", parents=[common], help="harvest failing build-workflow runs")
    mine.add_argument("--forge", action="append", choices=[f.value for f in Forge], help="forge to mine (repeatable)")
    mine.add_argument("--repo", action="append", metavar="FORGE:OWNER/NAME",
                      help="mine this repository instead of running discovery (repeatable)")

    rec = sub.add_parser("reconstruct", parents=[common], help="replay harvested runs in containers")
    _selection(rec)
    rec.add_argument("--plan-only", action="store_true", help="emit Dockerfile and build script, do not run")

    parse = sub.add_parser("parse", parents=[common], help="normalize logs")
    _selection(parse)
    parse.add_argument("paths", nargs="*", help="log files (default: harvested and replayed logs in the dataset)")
    parse.add_argument("--profile", choices=[f.value for f in ProjectFamily],
                       help="stage profile (default: per-project config, 'generic')")

    cmp_ = sub.add_parser("compare", parents=[common], help="fidelity of replays against original logs")
    _selection(cmp_)
    cmp_.add_argument("--sample", type=int, metavar="N", help="stratified sample size")
    cmp_.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    cmp_.add_argument("--pdf", metavar="PATH", help="also write a PDF report")

    rep = sub.add_parser("report", parents=[common], help="reconstruction success and failure causes")
    _selection(rep)
    rep.add_argument("--pdf", metavar="PATH", help="also write a PDF report")
    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def _effective_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config)
    update = {}
    if args.dataset:
        update["dataset_root"] = Path(args.dataset)
    if args.fixtures:
        update["fixtures_dir"] = Path(args.fixtures)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        update["parallelism"] = args.jobs
    return config.model_copy(update=update) if update else config


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _configure_logging(args.verbose)
    try:
        ctx = Context(args, _effective_config(args), out)
        code = COMMANDS[args.command](ctx)
        if ctx.failures:
            logger.warning(f"{args.command}: {ctx.failures} item(s) failed, see warnings above")
        return code
    except FailFast as e:
        logger.error(f"[ERROR] aborted (--fail-fast): {e}")
        return EXIT_ABORTED
    except (ConfigError, QuotaInfeasibleError) as e:
        logger.error(f"[ERROR] {e}")
        return EXIT_CONFIG
    except (InvalidTokenError, NetworkUnreachableError, RuntimeUnavailableError) as e:
        logger.error(f"[ERROR] {e}")
        return EXIT_UNAVAILABLE
    except ReplayError as e:
        logger.error(f"[ERROR] {e.__class__.__name__}: {e}")
        return EXIT_ABORTED
