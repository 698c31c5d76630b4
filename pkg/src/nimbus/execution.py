"""Testing Service workers: run assigned tasks and emit partial test reports.

Two runners are provided. :class:`SimulatedRunner` draws defects from a
seeded SplitMix64 stream and is bit-exact on every platform.
:class:`ExternalRunner` hands each task to a user program and parses its
one-line result record.
"""

from __future__ import annotations

import json
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

from nimbus.errors import NotLeased, RunnerError, ServiceFailure
from nimbus.model import ServiceState, TestingService
from nimbus.scheduler import Assignment, TestTask, ceil_ticks

MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def fnv1a_64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


@dataclass(frozen=True)
class EPTR:
    """Partial test report: one service's result for one task."""

    service_id: str
    task_id: str
    cases_executed: int
    defects_found: int
    time_spent: int | float
    finished_at: int | float
    cloud_id: str = ""

    def __post_init__(self):
        if self.cases_executed < 0 or self.defects_found < 0:
            raise ValueError("case and defect counts must be >= 0")
        if self.defects_found > self.cases_executed:
            raise ValueError("defects_found cannot exceed cases_executed")
        if self.time_spent < 0:
            raise ValueError("time_spent must be >= 0")

    def to_dict(self) -> dict:
        return {
            "service_id": self.service_id,
            "task_id": self.task_id,
            "cloud_id": self.cloud_id,
            "cases_executed": self.cases_executed,
            "defects_found": self.defects_found,
            "time_spent": self.time_spent,
            "finished_at": self.finished_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> EPTR:
        return cls(
            d["service_id"],
            d["task_id"],
            d["cases_executed"],
            d["defects_found"],
            d["time_spent"],
            d["finished_at"],
            d.get("cloud_id", ""),
        )


def defect_probability(task: TestTask, defect_density: float) -> float:
    return min(1.0, defect_density * task.size_kloc / task.case_count)


def simulated_defects(task: TestTask, seed: int, defect_density: float) -> int:
    p = defect_probability(task, defect_density)
    threshold = int(p * 10000 + 0.5)  # round half up
    rng = SplitMix64(seed ^ fnv1a_64(task.task_id))
    return sum(1 for _ in range(task.case_count) if rng.next_u64() % 10000 < threshold)


def execution_ticks(task: TestTask, capacity: float = 1.0) -> int:
    return ceil_ticks(task.est_duration / capacity)


def simulated_runner(
    task: TestTask,
    seed: int,
    defect_density: float,
    *,
    service_id: str = "",
    capacity: float = 1.0,
    started_at: int = 0,
    cloud_id: str = "",
) -> EPTR:
    spent = execution_ticks(task, capacity)
    return EPTR(
        service_id=service_id,
        task_id=task.task_id,
        cases_executed=task.case_count,
        defects_found=simulated_defects(task, seed, defect_density),
        time_spent=spent,
        finished_at=started_at + spent,
        cloud_id=cloud_id,
    )


class Runner(Protocol):
    def run(self, task: TestTask, service: TestingService, started_at: int | float = 0) -> EPTR: ...


class SimulatedRunner:
    """Deterministic given (task, seed); densities are per product."""

    def __init__(self, seed: int, defect_density: float | Mapping[str, float] = 0.0, cloud_id: str = ""):
        self.seed = seed
        self.defect_density = defect_density
        self.cloud_id = cloud_id

    def density_for(self, product_id: str) -> float:
        if isinstance(self.defect_density, Mapping):
            return self.defect_density.get(product_id, 0.0)
        return self.defect_density

    def run(self, task: TestTask, service: TestingService, started_at: int | float = 0) -> EPTR:
        return simulated_runner(
            task,
            self.seed,
            self.density_for(task.product_id),
            service_id=service.service_id,
            capacity=service.capacity,
            started_at=started_at,
            cloud_id=self.cloud_id,
        )


class ExternalRunner:
    """Run a user program per task.

    The task is written to the program's stdin as JSON. On success the
    program prints ``EPTR <cases> <defects> <millis>``; a nonzero exit
    status is a :class:`RunnerError`. Times are milliseconds.
    """

    def __init__(self, command: Sequence[str], timeout: float | None = None, cloud_id: str = ""):
        self.command = list(command)
        self.timeout = timeout
        self.cloud_id = cloud_id

    def run(self, task: TestTask, service: TestingService, started_at: int | float = 0) -> EPTR:
        payload = json.dumps({"task": task.to_dict(), "service_id": service.service_id})
        try:
            proc = subprocess.run(
                self.command, input=payload, capture_output=True, text=True, timeout=self.timeout
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise RunnerError(f"runner {self.command[0]!r} could not complete: {exc}") from exc
        if proc.returncode != 0:
            raise RunnerError(
                f"runner exited with status {proc.returncode}: {proc.stderr.strip()[:200]}", proc.returncode
            )
        return self._parse(proc.stdout, task, service, started_at)

    def _parse(self, stdout: str, task: TestTask, service: TestingService, started_at) -> EPTR:
        for line in reversed(stdout.splitlines()):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4 or parts[0] != "EPTR":
                break
            try:
                cases, defects, millis = (int(x) for x in parts[1:])
                return EPTR(service.service_id, task.task_id, cases, defects, millis, started_at + millis, self.cloud_id)
            except ValueError as exc:
                raise RunnerError(f"bad result record {line!r}: {exc}") from exc
        raise RunnerError(f"runner printed no EPTR record (got {stdout.strip()[-200:]!r})")


def run_task(
    task: TestTask,
    runner: Runner,
    service: TestingService,
    started_at: int | float = 0,
    fail_at: int | None = None,
) -> EPTR:
    """Execute one task on a leased service.

    ``fail_at`` injects a crash that many ticks after the start; a crash
    before the task finishes raises :class:`ServiceFailure` and the partial
    work is discarded.
    """
    if service.state is ServiceState.FAILED:
        raise ServiceFailure(service.service_id, started_at)
    if service.state is not ServiceState.LEASED or service.leased_to != task.product_id:
        raise NotLeased(f"service {service.service_id!r} is not leased to {task.product_id!r}")
    eptr = runner.run(task, service, started_at)
    if fail_at is not None and fail_at < eptr.time_spent:
        raise ServiceFailure(service.service_id, started_at + fail_at)
    return eptr


def run_assignment(
    assignment: Assignment,
    runner: Runner,
    services: Mapping[str, TestingService],
    max_workers: int | None = None,
) -> list[EPTR]:
    """Run every service's task list, services in parallel, tasks serially.

    Reports come back ordered by (finished_at, service_id) regardless of
    thread scheduling. The first failure propagates.
    """

    def work(service_id: str) -> list[EPTR]:
        clock = 0
        out = []
        for task in assignment.lists[service_id]:
            eptr = run_task(task, runner, services[service_id], started_at=clock)
            clock = eptr.finished_at
            out.append(eptr)
        return out

    ids = [sid for sid, tasks in assignment.lists.items() if tasks]
    with ThreadPoolExecutor(max_workers=max_workers or max(1, len(ids))) as pool:
        results = list(pool.map(work, ids))
    return sorted((e for batch in results for e in batch), key=lambda e: (e.finished_at, e.service_id.encode()))
