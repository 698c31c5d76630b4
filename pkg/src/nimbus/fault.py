"""Exception taxonomy and recovery policy.

Runtime events are classified into one :class:`ExceptionKind`, and each
kind plus the current retry context maps to exactly one
:class:`RecoveryAction`. Both functions are total and pure.

Policy table (first matching row wins)::

    DeadlineExceeded                              -> Continue
    AllocationConflict                            -> Retry (re-negotiate)
    TechniqueUnavailable                          -> AbortTask
    any other kind, attempts >= max_retries       -> AbortTask
    TaskTimeout / OutputStandardViolation         -> Retry
    ServiceFailure, a live sibling exists         -> Reassign
    ServiceFailure, cloud_size < max_services     -> SpawnClone
    ServiceFailure, otherwise                     -> AbortCloud
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping


class ExceptionKind(str, Enum):
    SERVICE_FAILURE = "ServiceFailure"
    TASK_TIMEOUT = "TaskTimeout"
    ALLOCATION_CONFLICT = "AllocationConflict"
    OUTPUT_STANDARD_VIOLATION = "OutputStandardViolation"
    TECHNIQUE_UNAVAILABLE = "TechniqueUnavailable"
    DEADLINE_EXCEEDED = "DeadlineExceeded"


class RecoveryAction(str, Enum):
    RETRY = "Retry"
    REASSIGN = "Reassign"
    SPAWN_CLONE = "SpawnClone"
    ABORT_TASK = "AbortTask"
    ABORT_CLOUD = "AbortCloud"
    CONTINUE = "Continue"  # no intervention; the fault is only recorded


MAX_RETRIES = 2
TIMEOUT_FACTOR = 2.0

TAXONOMY: dict[str, ExceptionKind] = {
    "crash": ExceptionKind.SERVICE_FAILURE,
    "service_crash": ExceptionKind.SERVICE_FAILURE,
    "heartbeat_lost": ExceptionKind.SERVICE_FAILURE,
    "timeout": ExceptionKind.TASK_TIMEOUT,
    "no_eptr": ExceptionKind.TASK_TIMEOUT,
    "lease_race": ExceptionKind.ALLOCATION_CONFLICT,
    "allocation_conflict": ExceptionKind.ALLOCATION_CONFLICT,
    "stale_proposal": ExceptionKind.ALLOCATION_CONFLICT,
    "proposal_rejected": ExceptionKind.ALLOCATION_CONFLICT,
    "standard_violation": ExceptionKind.OUTPUT_STANDARD_VIOLATION,
    "malformed_report": ExceptionKind.OUTPUT_STANDARD_VIOLATION,
    "no_cloud": ExceptionKind.TECHNIQUE_UNAVAILABLE,
    "technique_unavailable": ExceptionKind.TECHNIQUE_UNAVAILABLE,
    "no_capacity": ExceptionKind.TECHNIQUE_UNAVAILABLE,
    "deadline_exceeded": ExceptionKind.DEADLINE_EXCEEDED,
}


@dataclass(frozen=True)
class RuntimeEvent:
    type: str
    subject: str = ""
    time: int | float = 0
    elapsed: float | None = None
    est_duration: float | None = None


def is_timeout(elapsed: float, est_duration: float, factor: float = TIMEOUT_FACTOR) -> bool:
    return elapsed > factor * est_duration


def classify(event: RuntimeEvent, timeout_factor: float = TIMEOUT_FACTOR) -> ExceptionKind:
    """Map a runtime event to its exception kind.

    Named event types follow :data:`TAXONOMY`. An unnamed event whose
    elapsed time passed ``timeout_factor`` times the estimate is a timeout;
    anything else is treated as a service failure.
    """
    kind = TAXONOMY.get(event.type)
    if kind is not None:
        return kind
    if event.elapsed is not None and event.est_duration is not None:
        if is_timeout(event.elapsed, event.est_duration, timeout_factor):
            return ExceptionKind.TASK_TIMEOUT
    return ExceptionKind.SERVICE_FAILURE


@dataclass(frozen=True)
class RecoveryContext:
    attempts: int = 0
    free_siblings: int = 0  # live services of the same cloud other than the failed one
    cloud_size: int = 1
    max_services: int = 1


def decide_recovery(
    kind: ExceptionKind, context: RecoveryContext, max_retries: int = MAX_RETRIES
) -> RecoveryAction:
    if context.attempts < 0:
        raise ValueError("attempts must be >= 0")
    kind = ExceptionKind(kind)
    if kind is ExceptionKind.DEADLINE_EXCEEDED:
        return RecoveryAction.CONTINUE
    if kind is ExceptionKind.ALLOCATION_CONFLICT:
        return RecoveryAction.RETRY
    if kind is ExceptionKind.TECHNIQUE_UNAVAILABLE:
        return RecoveryAction.ABORT_TASK
    if context.attempts >= max_retries:
        return RecoveryAction.ABORT_TASK
    if kind in (ExceptionKind.TASK_TIMEOUT, ExceptionKind.OUTPUT_STANDARD_VIOLATION):
        return RecoveryAction.RETRY
    if context.free_siblings > 0:
        return RecoveryAction.REASSIGN
    if context.cloud_size < context.max_services:
        return RecoveryAction.SPAWN_CLONE
    return RecoveryAction.ABORT_CLOUD


@dataclass(frozen=True)
class FaultRecord:
    time: int | float
    kind: ExceptionKind
    subject: str
    action: RecoveryAction | None = None
    attempt: int = 0
    product_id: str | None = None
    cloud_id: str | None = None
    cause: str | None = None  # faulty entity when it differs from the subject
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "kind": self.kind.value,
            "subject": self.subject,
            "action": self.action.value if self.action is not None else None,
            "attempt": self.attempt,
            "product_id": self.product_id,
            "cloud_id": self.cloud_id,
            "cause": self.cause,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> FaultRecord:
        action = d.get("action")
        return cls(
            d["time"],
            ExceptionKind(d["kind"]),
            d["subject"],
            RecoveryAction(action) if action is not None else None,
            d.get("attempt", 0),
            d.get("product_id"),
            d.get("cloud_id"),
            d.get("cause"),
            d.get("detail", ""),
        )


class FaultLog:
    """Append-only record of faults, in the order they were handled."""

    def __init__(self):
        self._records: list[FaultRecord] = []

    def append(self, record: FaultRecord) -> FaultRecord:
        self._records.append(record)
        return record

    def __iter__(self):
        return iter(self._records)

    def __len__(self):
        return len(self._records)

    def for_product(self, product_id: str) -> list[FaultRecord]:
        return [r for r in self._records if r.product_id == product_id]

    def to_list(self) -> list[dict]:
        return [r.to_dict() for r in self._records]
