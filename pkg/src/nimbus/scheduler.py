"""Workload estimation, clone sizing and load distribution within a cloud."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

from nimbus.errors import NoServices
from nimbus.model import ProductSpec, TechniqueSpec, TestingCloud

# A module whose estimated time alone exceeds the deadline is split into
# chunks of at most this many cases.
CHUNK_CASES = 32


def ceil_ticks(x: float) -> int:
    """Round up, ignoring float noise below 1e-9 (0.3 * 10 must give 3)."""
    return math.ceil(round(x, 9))


class DistributionMode(str, Enum):
    ROUND_ROBIN = "RoundRobin"
    WEIGHTED = "WeightedByCapacity"
    LPT = "LPT"


@dataclass(frozen=True)
class WorkloadEstimate:
    technique_id: str
    per_module_cases: dict[str, int]
    avg_case_time: float

    @property
    def total_cases(self) -> int:
        return sum(self.per_module_cases.values())

    @property
    def total_time(self) -> float:
        return self.total_cases * self.avg_case_time

    def to_dict(self) -> dict:
        return {
            "technique_id": self.technique_id,
            "per_module_cases": dict(self.per_module_cases),
            "avg_case_time": self.avg_case_time,
            "total_cases": self.total_cases,
            "total_time": self.total_time,
        }


@dataclass(frozen=True)
class TestTask:
    __test__ = False

    task_id: str
    product_id: str
    module_id: str
    case_count: int
    est_duration: float
    technique_id: str = ""
    size_kloc: float = 0.0

    def __post_init__(self):
        if isinstance(self.case_count, bool) or not isinstance(self.case_count, int) or self.case_count < 1:
            raise ValueError(f"task {self.task_id!r}: case_count must be an integer >= 1")
        if not self.est_duration > 0:
            raise ValueError(f"task {self.task_id!r}: est_duration must be > 0")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "product_id": self.product_id,
            "module_id": self.module_id,
            "technique_id": self.technique_id,
            "case_count": self.case_count,
            "est_duration": self.est_duration,
            "size_kloc": self.size_kloc,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TestTask:
        return cls(
            d["task_id"],
            d["product_id"],
            d["module_id"],
            d["case_count"],
            d["est_duration"],
            d.get("technique_id", ""),
            d.get("size_kloc", 0.0),
        )


@dataclass
class Assignment:
    mode: DistributionMode
    lists: dict[str, list[TestTask]] = field(default_factory=dict)

    def loads(self) -> dict[str, float]:
        return {sid: sum(t.est_duration for t in tasks) for sid, tasks in self.lists.items()}

    def makespan(self) -> float:
        return max(self.loads().values(), default=0)

    def tasks(self) -> list[TestTask]:
        return [t for tasks in self.lists.values() for t in tasks]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "lists": {sid: [t.task_id for t in tasks] for sid, tasks in self.lists.items()},
        }


class CloneDecision(NamedTuple):
    count: int
    feasible: bool


def estimate_workload(product: ProductSpec, technique: TechniqueSpec) -> WorkloadEstimate:
    """Predict test cases per module as ceil(size_kloc * test_case_density)."""
    cases = {m.module_id: max(1, ceil_ticks(m.size_kloc * technique.test_case_density)) for m in product.modules}
    return WorkloadEstimate(technique.technique_id, cases, technique.avg_case_time)


def decide_clone_count(
    estimate: WorkloadEstimate, deadline: float, cloud: TestingCloud | int
) -> CloneDecision:
    """Number of unit-capacity services needed to finish within ``deadline``.

    Never below one, never above the cloud's ``max_services``. When the cap
    binds, ``feasible`` is False; the caller proceeds anyway.
    """
    if not deadline > 0:
        raise ValueError("deadline must be > 0")
    cap = cloud if isinstance(cloud, int) else cloud.max_services
    count = min(cap, max(1, ceil_ticks(estimate.total_time / deadline)))
    return CloneDecision(count, count * deadline >= estimate.total_time)


def make_tasks(
    product: ProductSpec, estimate: WorkloadEstimate, deadline: float, chunk_cases: int = CHUNK_CASES
) -> list[TestTask]:
    """One task per module; a module too long for the deadline alone is chunked."""
    tasks = []
    tech = estimate.technique_id
    for m in product.modules:
        cases = estimate.per_module_cases[m.module_id]
        base_id = f"{product.product_id}/{tech}/{m.module_id}"
        if cases * estimate.avg_case_time > deadline and cases > chunk_cases:
            n = math.ceil(cases / chunk_cases)
            q, r = divmod(cases, n)
            width = len(str(n - 1))
            for k in range(n):
                c = q + (1 if k < r else 0)
                tasks.append(
                    TestTask(
                        f"{base_id}#{k:0{width}d}",
                        product.product_id,
                        m.module_id,
                        c,
                        c * estimate.avg_case_time,
                        tech,
                        m.size_kloc * c / cases,
                    )
                )
        else:
            tasks.append(
                TestTask(base_id, product.product_id, m.module_id, cases, cases * estimate.avg_case_time, tech, m.size_kloc)
            )
    return tasks


def partition_load(
    tasks: Sequence[TestTask],
    services: Sequence[tuple[str, float]],
    mode: DistributionMode | str = DistributionMode.LPT,
) -> Assignment:
    """Distribute ``tasks`` over ``services`` given as (service_id, capacity).

    RoundRobin deals tasks in input order over services in input order.
    WeightedByCapacity sends each task, in input order, to the service with
    the smallest assigned_duration / capacity. LPT sorts tasks by duration
    descending (ties by task id) and gives each to the service with the
    smallest assigned duration. Remaining ties go to the smallest service id.
    """
    mode = DistributionMode(mode)
    if not services:
        raise NoServices("cannot distribute load over zero services")
    lists: dict[str, list[TestTask]] = {sid: [] for sid, _ in services}
    if len(lists) != len(services):
        raise ValueError("duplicate service id")

    if mode is DistributionMode.ROUND_ROBIN:
        order = [sid for sid, _ in services]
        for i, task in enumerate(tasks):
            lists[order[i % len(order)]].append(task)
        return Assignment(mode, lists)

    load = {sid: 0.0 for sid, _ in services}
    capacity = dict(services)
    if mode is DistributionMode.WEIGHTED:
        sequence = list(tasks)
        key = lambda sid: (load[sid] / capacity[sid], sid.encode())  # noqa: E731
    else:
        sequence = sorted(tasks, key=lambda t: (-t.est_duration, t.task_id.encode()))
        key = lambda sid: (load[sid], sid.encode())  # noqa: E731
    for task in sequence:
        target = min(load, key=key)
        lists[target].append(task)
        load[target] += task.est_duration
    return Assignment(mode, lists)
