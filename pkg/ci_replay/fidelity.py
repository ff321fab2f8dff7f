# -*- coding: utf-8 -*-
"""
重建保真度评估 - Reconstruction fidelity
Two binary criteria per original/replay pair: same outcome, and identical
normalized diagnostic structure. Plus proportional stratified sampling and
the per-project aggregate tables.
"""
import json
import logging
from collections import defaultdict
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigMismatchError, QuotaInfeasibleError
from .logparse import render_event
from .models import CauseKind, CIRun, NormalizedLog, RecordStatus, ReconstructionRecord, RepositoryRef

logger = logging.getLogger(__name__)

ProjectLabel = Callable[[RepositoryRef], str]


def _default_label(repo: RepositoryRef) -> str:
    return repo.name


# ---------------------------------------------------------------- verdicts

class FidelityVerdict(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    run: CIRun
    project: str
    outcome_equivalent: bool
    structure_equivalent: bool
    # triage only; not part of equality
    mismatch_note: Optional[str] = None

    @model_validator(mode="after")
    def _hierarchy(self):
        if self.structure_equivalent and not self.outcome_equivalent:
            raise ValueError("structure equivalence implies outcome equivalence")
        return self

    def __eq__(self, other):
        if not isinstance(other, FidelityVerdict):
            return NotImplemented
        return (self.run, self.project, self.outcome_equivalent, self.structure_equivalent) == \
            (other.run, other.project, other.outcome_equivalent, other.structure_equivalent)


def outcome_equivalence(original: NormalizedLog, reconstructed: NormalizedLog) -> bool:
    return original.outcome == reconstructed.outcome


def structure_equivalence(original: NormalizedLog, reconstructed: NormalizedLog) -> bool:
    """Stage sequence and per-stage event sequence must match value-for-value"""
    if original.config_digest != reconstructed.config_digest:
        raise ConfigMismatchError(
            f"logs normalized under different configs "
            f"({original.config_digest[:12]} vs {reconstructed.config_digest[:12]})")
    return original.outcome == reconstructed.outcome and original.stages == reconstructed.stages


def first_mismatch(original: NormalizedLog, reconstructed: NormalizedLog) -> Optional[str]:
    """第一个差异 - human-readable note on the first differing stage or event"""
    if original.outcome != reconstructed.outcome:
        return f"outcome {original.outcome.value} vs {reconstructed.outcome.value}"
    for k in range(max(len(original.stages), len(reconstructed.stages))):
        if k >= len(original.stages):
            return f"extra stage {reconstructed.stages[k].stage_name!r} in reconstruction"
        if k >= len(reconstructed.stages):
            return f"reconstruction is missing stage {original.stages[k].stage_name!r}"
        a, b = original.stages[k], reconstructed.stages[k]
        if a.stage_name != b.stage_name:
            return f"stage {k + 1}: {a.stage_name!r} vs {b.stage_name!r}"
        for i in range(max(len(a.events), len(b.events))):
            if i >= len(a.events):
                return f"stage {a.stage_name}: extra event {render_event(b.events[i])}"
            if i >= len(b.events):
                return f"stage {a.stage_name}: missing event {render_event(a.events[i])}"
            if a.events[i] != b.events[i]:
                return (f"stage {a.stage_name}, event {i + 1}: "
                        f"{render_event(a.events[i])} vs {render_event(b.events[i])}")
    return None


def judge(run: CIRun, project: str, original: NormalizedLog, reconstructed: NormalizedLog) -> FidelityVerdict:
    outcome_ok = outcome_equivalence(original, reconstructed)
    structure_ok = structure_equivalence(original, reconstructed)
    return FidelityVerdict(
        run=run, project=project,
        outcome_equivalent=outcome_ok,
        structure_equivalent=structure_ok,
        mismatch_note=None if structure_ok else first_mismatch(original, reconstructed),
    )


# ---------------------------------------------------------------- sampling

def largest_remainder(sizes: Sequence[int], total: int, min_per_stratum: int = 0) -> List[int]:
    """Proportional integer quotas summing to ``total``

    Floors of the exact shares, then one extra unit to the largest remainders
    (ties: larger stratum, then lower index). With ``min_per_stratum`` every
    non-empty stratum is raised to that floor, taking units from the strata
    furthest above their exact share.
    """
    sizes_arr = np.asarray(sizes, dtype=np.int64)
    n = int(sizes_arr.sum())
    if total < 0:
        raise ValueError("total must be non-negative")
    if n == 0:
        return [0] * len(sizes_arr)
    scaled = sizes_arr * total
    quotas = scaled // n
    remainders = scaled % n
    extra = total - int(quotas.sum())
    order = np.lexsort((np.arange(len(sizes_arr)), -sizes_arr, -remainders))
    quotas[order[:extra]] += 1

    if min_per_stratum > 0:
        nonempty = sizes_arr > 0
        if total >= min_per_stratum * int(nonempty.sum()):
            floor_of = np.minimum(sizes_arr, min_per_stratum)
            # excess over exact share, in units of 1/n
            while True:
                short = np.flatnonzero(quotas < floor_of)
                if len(short) == 0:
                    break
                receiver = short[np.argmax(scaled[short])]
                excess = quotas * n - scaled
                donors = np.flatnonzero(quotas > floor_of)
                donor = donors[np.argmax(excess[donors])]
                quotas[donor] -= 1
                quotas[receiver] += 1
    return [int(q) for q in quotas]


def sample_stratified(records: Sequence[ReconstructionRecord], total: int, seed: int, *,
                      label: ProjectLabel = _default_label, min_per_stratum: int = 1) -> List[ReconstructionRecord]:
    """分层抽样 - proportional sample of reconstructed records, one stratum per project"""
    if total <= 0:
        raise ValueError("sample size must be positive")
    strata: Dict[str, List[ReconstructionRecord]] = defaultdict(list)
    for r in records:
        if r.status == RecordStatus.RECONSTRUCTED:
            strata[label(r.run.repo)].append(r)
    available = sum(len(v) for v in strata.values())
    if total > available:
        raise QuotaInfeasibleError(f"sample of {total} exceeds {available} reconstructed records")

    keys = sorted(strata)
    quotas = largest_remainder([len(strata[k]) for k in keys], total, min_per_stratum=min_per_stratum)
    rng = np.random.default_rng(seed)
    sample: List[ReconstructionRecord] = []
    for key, quota in zip(keys, quotas):
        members = sorted(strata[key], key=lambda r: (r.run.run_id, r.run.target))
        if quota > len(members):
            raise QuotaInfeasibleError(f"stratum {key!r} has {len(members)} records, quota {quota}")
        picked = np.sort(rng.choice(len(members), size=quota, replace=False))
        sample.extend(members[i] for i in picked)
        logger.debug(f"[SAMPLE] {key}: {quota} of {len(members)}")
    return sample


# ---------------------------------------------------------------- reports

def rate(passed: int, n: int, places: int = 1) -> Optional[Decimal]:
    if n == 0:
        return None
    quantum = Decimal(1).scaleb(-places)
    return (Decimal(passed) * 100 / Decimal(n)).quantize(quantum, rounding=ROUND_HALF_UP)


def format_rate(passed: int, n: int, places: int = 1) -> str:
    """Round half up; a trailing ``.0`` is dropped (``100``, ``98``, ``96.9``)"""
    value = rate(passed, n, places)
    if value is None:
        return "-"
    text = f"{value:f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text


class ReconstructionCounts(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    attempts: int = Field(default=0, ge=0)
    reconstructed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _bounded(self):
        if self.reconstructed > self.attempts:
            raise ValueError("reconstructed exceeds attempts")
        return self

    @property
    def percent(self) -> str:
        return format_rate(self.reconstructed, self.attempts)


class FidelityCounts(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(default=0, ge=0)
    outcome_pass: int = Field(default=0, ge=0)
    structure_pass: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _bounded(self):
        if self.outcome_pass > self.n or self.structure_pass > self.n:
            raise ValueError("pass count exceeds n")
        return self

    @property
    def outcome_percent(self) -> str:
        return format_rate(self.outcome_pass, self.n)

    @property
    def structure_percent(self) -> str:
        return format_rate(self.structure_pass, self.n)


def _ndjson(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


class ReconstructionReport(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    per_project: Dict[str, ReconstructionCounts] = Field(default_factory=dict)
    overall: ReconstructionCounts = Field(default_factory=ReconstructionCounts)
    cause_histogram: Dict[CauseKind, int] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _conserved(self):
        if sum(c.attempts for c in self.per_project.values()) != self.overall.attempts or \
                sum(c.reconstructed for c in self.per_project.values()) != self.overall.reconstructed:
            raise ValueError("overall counts must equal the per-project sums")
        if sum(self.cause_histogram.values()) != self.overall.attempts - self.overall.reconstructed:
            raise ValueError("cause histogram must cover every failed attempt")
        return self

    @property
    def failures(self) -> int:
        return self.overall.attempts - self.overall.reconstructed

    def cause_percent(self, kind: CauseKind) -> str:
        return format_rate(self.cause_histogram.get(kind, 0), self.failures, places=0)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"Project": p, "Attempts": c.attempts, "Reconstructed": f"{c.reconstructed} ({c.percent}%)"}
                for p, c in self.per_project.items()]
        rows.append({"Project": "Total", "Attempts": self.overall.attempts,
                     "Reconstructed": f"{self.overall.reconstructed} ({self.overall.percent}%)"})
        return pd.DataFrame(rows, columns=["Project", "Attempts", "Reconstructed"])

    def causes_frame(self) -> pd.DataFrame:
        rows = [{"Cause": k.value, "Count": v, "Share": f"{self.cause_percent(k)}%"}
                for k, v in self.cause_histogram.items()]
        return pd.DataFrame(rows, columns=["Cause", "Count", "Share"])

    def render_text(self) -> str:
        out = ["Reconstruction success per project", self.to_frame().to_string(index=False)]
        if self.cause_histogram:
            out += ["", f"Primary causes of reconstruction failure (n={self.failures})",
                    self.causes_frame().to_string(index=False)]
        return "\n".join(out) + "\n"

    def records(self) -> List[dict]:
        out = [{"table": "reconstruction", "project": p, "attempts": c.attempts,
                "reconstructed": c.reconstructed, "rate": c.percent}
               for p, c in self.per_project.items()]
        out.append({"table": "reconstruction", "project": None, "attempts": self.overall.attempts,
                    "reconstructed": self.overall.reconstructed, "rate": self.overall.percent})
        out += [{"table": "failure_causes", "cause": k.value, "count": v, "share": self.cause_percent(k)}
                for k, v in self.cause_histogram.items()]
        return out

    def render_machine(self) -> str:
        return _ndjson(self.records())


class FidelityReport(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    per_project: Dict[str, FidelityCounts] = Field(default_factory=dict)
    overall: FidelityCounts = Field(default_factory=FidelityCounts)

    @model_validator(mode="after")
    def _conserved(self):
        for field in ("n", "outcome_pass", "structure_pass"):
            if sum(getattr(c, field) for c in self.per_project.values()) != getattr(self.overall, field):
                raise ValueError(f"overall {field} must equal the per-project sum")
        return self

    def to_frame(self) -> pd.DataFrame:
        def row(name, c):
            return {"Project": name, "n": c.n,
                    "Outcome": f"{c.outcome_pass}/{c.n} ({c.outcome_percent}%)",
                    "Structure": f"{c.structure_pass}/{c.n} ({c.structure_percent}%)"}
        rows = [row(p, c) for p, c in self.per_project.items()]
        rows.append(row(f"Overall (n={self.overall.n})", self.overall))
        return pd.DataFrame(rows, columns=["Project", "n", "Outcome", "Structure"])

    def render_text(self) -> str:
        return "Reconstruction fidelity per project\n" + self.to_frame().to_string(index=False) + "\n"

    def records(self) -> List[dict]:
        def rec(name, c):
            return {"table": "fidelity", "project": name, "n": c.n,
                    "outcome_pass": c.outcome_pass, "outcome_rate": c.outcome_percent,
                    "structure_pass": c.structure_pass, "structure_rate": c.structure_percent}
        return [rec(p, c) for p, c in self.per_project.items()] + [rec(None, self.overall)]

    def render_machine(self) -> str:
        return _ndjson(self.records())


def aggregate_reconstruction(records: Sequence[ReconstructionRecord], *,
                             label: ProjectLabel = _default_label) -> ReconstructionReport:
    """Table of attempts vs. reconstructed per project, plus the failure-cause histogram"""
    if not records:
        return ReconstructionReport()
    df = pd.DataFrame({
        "project": [label(r.run.repo) for r in records],
        "ok": [r.status == RecordStatus.RECONSTRUCTED for r in records],
        "cause": [r.cause.kind.value if r.cause else None for r in records],
    })
    grouped = df.groupby("project", sort=True).agg(attempts=("ok", "size"), reconstructed=("ok", "sum"))
    per_project = {
        str(p): ReconstructionCounts(attempts=int(row["attempts"]), reconstructed=int(row["reconstructed"]))
        for p, row in grouped.iterrows()
    }
    counts = df["cause"].dropna().value_counts()
    histogram = {k: int(counts[k.value]) for k in CauseKind if k.value in counts.index}
    return ReconstructionReport(
        per_project=per_project,
        overall=ReconstructionCounts(attempts=len(df), reconstructed=int(df["ok"].sum())),
        cause_histogram=histogram,
    )


def aggregate_fidelity(verdicts: Sequence[FidelityVerdict]) -> FidelityReport:
    if not verdicts:
        return FidelityReport()
    df = pd.DataFrame({
        "project": [v.project for v in verdicts],
        "outcome": [v.outcome_equivalent for v in verdicts],
        "structure": [v.structure_equivalent for v in verdicts],
    })
    grouped = df.groupby("project", sort=True).agg(
        n=("outcome", "size"), outcome_pass=("outcome", "sum"), structure_pass=("structure", "sum"))
    per_project = {
        str(p): FidelityCounts(n=int(row["n"]), outcome_pass=int(row["outcome_pass"]),
                               structure_pass=int(row["structure_pass"]))
        for p, row in grouped.iterrows()
    }
    return FidelityReport(
        per_project=per_project,
        overall=FidelityCounts(n=len(df), outcome_pass=int(df["outcome"].sum()),
                               structure_pass=int(df["structure"].sum())),
    )
