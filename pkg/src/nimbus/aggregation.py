"""Testing Application Management: report validation and integration.

Partial reports (EPTRs) from a cloud's services merge into one
Environmental Test Report per cloud; the ETRs of a product integrate into
its :class:`FinalReport`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Collection, Iterable, Mapping, Sequence

from nimbus.errors import EmptyReportSet, MissingCloudReport, MixedCloud, OutputStandardViolation
from nimbus.execution import EPTR
from nimbus.fault import FaultRecord, RecoveryAction

DEFAULT_REQUIRED = frozenset({"cases_executed", "defects_found", "time_spent"})
IDENTITY_FIELDS = frozenset({"service_id", "task_id", "cloud_id", "finished_at"})


@dataclass(frozen=True)
class OutputStandard:
    required_fields: frozenset[str] = DEFAULT_REQUIRED
    allow_extra: bool = True

    def __post_init__(self):
        if not self.required_fields:
            raise ValueError("an output standard needs at least one required field")


def _as_mapping(report: EPTR | Mapping) -> Mapping:
    return report.to_dict() if isinstance(report, EPTR) else report


def validate_output_standard(report: EPTR | Mapping, standard: OutputStandard = OutputStandard()) -> list[str]:
    """Return the fields that break ``standard``; an empty list means conforming.

    A field counts as missing when absent or None. With ``allow_extra``
    off, fields outside the required set and the identity fields are
    reported too.
    """
    data = _as_mapping(report)
    violations = sorted(f for f in standard.required_fields if data.get(f) is None)
    if not standard.allow_extra:
        known = standard.required_fields | IDENTITY_FIELDS
        violations += sorted(f for f in data if f not in known)
    return violations


def _exact_sum(values: Iterable[int | float]):
    values = list(values)
    if all(isinstance(v, int) for v in values):
        return sum(values)
    return math.fsum(values)  # order-independent for floats


@dataclass(frozen=True)
class ETR:
    cloud_id: str
    technique_id: str
    total_cases: int
    total_defects: int
    cpu_time: int | float
    elapsed: int | float
    eptr_count: int

    def to_dict(self) -> dict:
        return {
            "cloud_id": self.cloud_id,
            "technique_id": self.technique_id,
            "total_cases": self.total_cases,
            "total_defects": self.total_defects,
            "cpu_time": self.cpu_time,
            "elapsed": self.elapsed,
            "eptr_count": self.eptr_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ETR:
        return cls(
            d["cloud_id"],
            d["technique_id"],
            d["total_cases"],
            d["total_defects"],
            d["cpu_time"],
            d["elapsed"],
            d["eptr_count"],
        )


def merge_eptrs(
    cloud_id: str,
    eptrs: Sequence[EPTR | Mapping],
    standard: OutputStandard = OutputStandard(),
    technique_id: str = "",
    started_at: int | float = 0,
) -> ETR:
    """Merge one cloud's partial reports. Any nonconforming report rejects the merge."""
    if not eptrs:
        raise EmptyReportSet(f"no partial reports for cloud {cloud_id!r}")
    rows = [_as_mapping(e) for e in eptrs]
    for row in rows:
        if row.get("cloud_id") and row["cloud_id"] != cloud_id:
            raise MixedCloud(f"report from cloud {row['cloud_id']!r} merged into {cloud_id!r}")
    for row in rows:
        bad = validate_output_standard(row, standard)
        if bad:
            raise OutputStandardViolation(row.get("service_id", "?"), bad)
    finished = [row["finished_at"] for row in rows if row.get("finished_at") is not None]
    return ETR(
        cloud_id=cloud_id,
        technique_id=technique_id,
        total_cases=_exact_sum(row["cases_executed"] for row in rows),
        total_defects=_exact_sum(row["defects_found"] for row in rows),
        cpu_time=_exact_sum(row["time_spent"] for row in rows),
        elapsed=max(finished) - started_at if finished else 0,
        eptr_count=len(rows),
    )


@dataclass(frozen=True)
class FinalReport:
    product_id: str
    etrs: dict[str, ETR]  # technique_id -> ETR
    deadline: float
    deadline_met: bool
    aborted_clouds: tuple[str, ...] = ()
    exception_log: tuple[FaultRecord, ...] = field(default=())

    @property
    def total_cases(self) -> int:
        return _exact_sum(e.total_cases for e in self.etrs.values())

    @property
    def total_defects(self) -> int:
        return _exact_sum(e.total_defects for e in self.etrs.values())

    @property
    def cpu_time(self) -> int | float:
        return _exact_sum(e.cpu_time for e in self.etrs.values())

    @property
    def elapsed(self) -> int | float:
        return max((e.elapsed for e in self.etrs.values()), default=0)

    def to_dict(self) -> dict:
        return {
            "product_id": self.product_id,
            "etrs": {t: self.etrs[t].to_dict() for t in sorted(self.etrs)},
            "totals": {
                "total_cases": self.total_cases,
                "total_defects": self.total_defects,
                "cpu_time": self.cpu_time,
                "elapsed": self.elapsed,
            },
            "deadline": self.deadline,
            "deadline_met": self.deadline_met,
            "aborted_clouds": list(self.aborted_clouds),
            "exception_log": [r.to_dict() for r in self.exception_log],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> FinalReport:
        return cls(
            product_id=d["product_id"],
            etrs={t: ETR.from_dict(e) for t, e in d["etrs"].items()},
            deadline=d["deadline"],
            deadline_met=d["deadline_met"],
            aborted_clouds=tuple(d.get("aborted_clouds", ())),
            exception_log=tuple(FaultRecord.from_dict(r) for r in d.get("exception_log", ())),
        )


def aborted_clouds(faults: Iterable[FaultRecord]) -> list[str]:
    out = []
    for r in faults:
        if r.action is RecoveryAction.ABORT_CLOUD and r.cloud_id and r.cloud_id not in out:
            out.append(r.cloud_id)
    return out


def integrate_etrs(
    product_id: str,
    etrs: Sequence[ETR],
    deadline: float,
    faults: Sequence[FaultRecord] = (),
    allocated: Mapping[str, Collection[str]] | None = None,
) -> FinalReport:
    """Combine per-cloud reports into the product's final report.

    ``allocated`` maps each leased cloud to its task ids. A cloud with no
    ETR is acceptable only if the fault log aborted it, or aborted every
    one of its tasks; otherwise :class:`MissingCloudReport` is raised.
    """
    faults = tuple(faults)
    aborted = aborted_clouds(faults)
    by_cloud = {e.cloud_id: e for e in etrs}
    if allocated is not None:
        aborted_tasks = {r.subject for r in faults if r.action is RecoveryAction.ABORT_TASK}
        for cloud_id in sorted(allocated):
            if cloud_id in by_cloud or cloud_id in aborted:
                continue
            tasks = allocated[cloud_id]
            if tasks and all(t in aborted_tasks for t in tasks):
                aborted.append(cloud_id)
                continue
            raise MissingCloudReport(cloud_id)
    per_technique = {e.technique_id or e.cloud_id: e for e in etrs}
    elapsed = max((e.elapsed for e in etrs), default=0)
    return FinalReport(
        product_id=product_id,
        etrs=per_technique,
        deadline=deadline,
        deadline_met=elapsed <= deadline,
        aborted_clouds=tuple(aborted),
        exception_log=faults,
    )
