"""Deterministic discrete-event simulation of the whole testing protocol.

Service Managers, Testing Clouds and Testing Services are actors on one
event loop. They talk only through messages that arrive a fixed number of
ticks after they are sent. Events are processed in (time, seq) order, with
seq being insertion order, so a run is a pure function of its
:class:`Scenario`.

Protocol per product::

    cs -> sm      RequestTesting
    sm -> cloud   ProposeCloud           (one per requested technique)
    cloud -> sm   AcceptProposal | RejectProposal
    sm            allocate; plan; spawn clones
    sm -> svc     AssignTask
    svc -> cloud  EPTRMsg                (one per completed task)
    cloud -> sm   ETRMsg                 (once every task is terminal)
    sm -> cloud   ReleaseLease

Failures are detected the moment they are injected. Recovery follows
:func:`nimbus.fault.decide_recovery`, and reassigned work travels as
another AssignTask.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping

from nimbus import allocation as alloc
from nimbus.aggregation import FinalReport, OutputStandard, integrate_etrs, merge_eptrs
from nimbus.errors import (
    AllocationConflict,
    NoCapacity,
    ScenarioInvalid,
    StaleProposal,
    TechniqueUnavailable,
    ValidationError,
)
from nimbus.execution import EPTR, execution_ticks, simulated_runner
from nimbus.fault import (
    MAX_RETRIES,
    TIMEOUT_FACTOR,
    ExceptionKind,
    FaultLog,
    FaultRecord,
    RecoveryAction,
    RecoveryContext,
    RuntimeEvent,
    classify,
    decide_recovery,
)
from nimbus.model import (
    SCHEMA_VERSION,
    ConsumerRequest,
    Registry,
    ServiceState,
    TechniqueSpec,
    TestingCloud,
    ValidatedRequest,
    validate_request,
)
from nimbus.scheduler import (
    DistributionMode,
    TestTask,
    decide_clone_count,
    estimate_workload,
    make_tasks,
    partition_load,
)

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


# -- scenario ----------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioRequest:
    arrival_time: int
    request: ConsumerRequest
    mode: DistributionMode = DistributionMode.LPT

    def to_dict(self) -> dict:
        return {"arrival_time": self.arrival_time, "mode": self.mode.value, **self.request.to_dict()}


@dataclass(frozen=True)
class FailureInjection:
    time: int
    service_id: str
    action: str = "fail"  # or "recover"

    def to_dict(self) -> dict:
        return {"time": self.time, "service_id": self.service_id, "action": self.action}


@dataclass(frozen=True)
class Scenario:
    seed: int
    catalog: tuple[TechniqueSpec, ...]
    clouds: tuple[dict, ...]
    requests: tuple[ScenarioRequest, ...]
    failure_injections: tuple[FailureInjection, ...] = ()
    latency: int = 1
    max_retries: int = MAX_RETRIES
    timeout_factor: float = TIMEOUT_FACTOR

    def with_seed(self, seed: int) -> Scenario:
        return Scenario(
            seed,
            self.catalog,
            self.clouds,
            self.requests,
            self.failure_injections,
            self.latency,
            self.max_retries,
            self.timeout_factor,
        )

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "kind": "scenario",
            "seed": self.seed,
            "latency": self.latency,
            "max_retries": self.max_retries,
            "timeout_factor": self.timeout_factor,
            "catalog": [t.to_dict() for t in self.catalog],
            "topology": {"clouds": [dict(c) for c in self.clouds]},
            "requests": [r.to_dict() for r in self.requests],
            "failure_injections": [f.to_dict() for f in self.failure_injections],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> Scenario:
        """Build and validate a scenario; any problem raises :class:`ScenarioInvalid`."""
        if not isinstance(doc, Mapping):
            raise ScenarioInvalid("scenario must be a JSON object")
        if doc.get("version") != SCHEMA_VERSION:
            raise ScenarioInvalid(f"unsupported version {doc.get('version')!r}")
        try:
            catalog = tuple(TechniqueSpec.from_dict(t) for t in doc.get("catalog", []))
            clouds = tuple(_normalize_cloud(c) for c in doc.get("topology", {}).get("clouds", []))
            requests = tuple(
                ScenarioRequest(
                    r["arrival_time"],
                    ConsumerRequest.from_dict(r),
                    DistributionMode(r.get("mode", DistributionMode.LPT.value)),
                )
                for r in doc.get("requests", [])
            )
            injections = tuple(
                FailureInjection(f["time"], f["service_id"], f.get("action", "fail"))
                for f in doc.get("failure_injections", [])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioInvalid(f"malformed scenario: {exc!r}") from exc
        scenario = cls(
            seed=doc.get("seed", 0),
            catalog=catalog,
            clouds=clouds,
            requests=requests,
            failure_injections=injections,
            latency=doc.get("latency", 1),
            max_retries=doc.get("max_retries", MAX_RETRIES),
            timeout_factor=doc.get("timeout_factor", TIMEOUT_FACTOR),
        )
        scenario.validate()
        return scenario

    def validate(self) -> None:
        """Raise :class:`ScenarioInvalid` naming the first violated constraint."""
        if not _is_int(self.seed):
            raise ScenarioInvalid("seed must be an integer")
        if not _is_int(self.latency) or self.latency < 0:
            raise ScenarioInvalid("latency must be an integer >= 0")
        if not _is_int(self.max_retries) or self.max_retries < 0:
            raise ScenarioInvalid("max_retries must be an integer >= 0")
        if not self.timeout_factor > 0:
            raise ScenarioInvalid("timeout_factor must be > 0")
        techniques = set()
        for t in self.catalog:
            if t.technique_id in techniques:
                raise ScenarioInvalid(f"duplicate technique {t.technique_id!r} in catalog")
            techniques.add(t.technique_id)
            for name in ("test_case_density", "avg_case_time", "avg_case_size"):
                if not _positive(getattr(t, name)):
                    raise ScenarioInvalid(f"technique {t.technique_id!r}: {name} must be > 0")
        cloud_ids, service_ids = set(), set()
        for c in self.clouds:
            cid = c["cloud_id"]
            if cid in cloud_ids:
                raise ScenarioInvalid(f"duplicate cloud id {cid!r}")
            cloud_ids.add(cid)
            if c["technique_id"] not in techniques:
                raise ScenarioInvalid(f"cloud {cid!r} uses unknown technique {c['technique_id']!r}")
            if not _is_int(c["max_services"]) or c["max_services"] < 1:
                raise ScenarioInvalid(f"cloud {cid!r}: max_services must be an integer >= 1")
            if not 1 <= len(c["services"]) <= c["max_services"]:
                raise ScenarioInvalid(f"cloud {cid!r}: needs between 1 and max_services services")
            for s in c["services"]:
                sid = s["service_id"]
                if sid in service_ids:
                    raise ScenarioInvalid(f"duplicate service id {sid!r}")
                service_ids.add(sid)
                if not _positive(s.get("capacity", 1.0)):
                    raise ScenarioInvalid(f"service {sid!r}: capacity must be > 0")
        last = None
        products = set()
        for r in self.requests:
            if not _is_int(r.arrival_time) or r.arrival_time < 0:
                raise ScenarioInvalid("arrival_time must be an integer >= 0")
            if last is not None and r.arrival_time < last:
                raise ScenarioInvalid("request arrival times must be nondecreasing")
            last = r.arrival_time
            pid = r.request.product.product_id
            if pid in products:
                raise ScenarioInvalid(f"duplicate product id {pid!r}")
            products.add(pid)
            try:
                validate_request(r.request, self.catalog)
            except ValidationError as exc:
                raise ScenarioInvalid(f"request for {pid!r}: {exc}") from exc
        for f in self.failure_injections:
            if not _is_int(f.time) or f.time < 0:
                raise ScenarioInvalid("failure injection time must be an integer >= 0")
            if f.service_id not in service_ids:
                raise ScenarioInvalid(f"failure injection names unknown service id {f.service_id!r}")
            if f.action not in ("fail", "recover"):
                raise ScenarioInvalid(f"unknown failure injection action {f.action!r}")


def _is_int(x: Any) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _positive(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) and x > 0


def _normalize_cloud(c: Mapping) -> dict:
    return {
        "cloud_id": c["cloud_id"],
        "technique_id": c["technique_id"],
        "max_services": c["max_services"],
        "services": [
            {"service_id": s["service_id"], "capacity": s.get("capacity", 1.0)} for s in c["services"]
        ],
    }


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioInvalid(f"{path}: not valid JSON ({exc})") from exc
    return Scenario.from_dict(doc)


# -- result ------------------------------------------------------------------

@dataclass
class SimResult:
    seed: int
    messages: list[dict]
    faults: list[FaultRecord]
    reports: dict[str, FinalReport]
    rejected: dict[str, FaultRecord]
    tasks: dict[str, dict]
    executions: list[dict]
    leases: list[dict]
    plans: list[dict]
    service_timeline: list[dict]
    first_arrival: int
    end_time: int
    disjointness_checks: int
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "kind": "trace",
            "seed": self.seed,
            "first_arrival": self.first_arrival,
            "end_time": self.end_time,
            "disjointness_checks": self.disjointness_checks,
            "messages": self.messages,
            "faults": [r.to_dict() for r in self.faults],
            "reports": {p: self.reports[p].to_dict() for p in sorted(self.reports)},
            "rejected": {p: self.rejected[p].to_dict() for p in sorted(self.rejected)},
            "tasks": {t: self.tasks[t] for t in sorted(self.tasks)},
            "executions": self.executions,
            "leases": self.leases,
            "plans": self.plans,
            "service_timeline": self.service_timeline,
            "metrics": self.metrics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @property
    def aborted_clouds(self) -> list[str]:
        return [r.cloud_id for r in self.faults if r.action is RecoveryAction.ABORT_CLOUD]


# -- metrics -----------------------------------------------------------------

def _merge_intervals(intervals):
    out = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return out


def _overlap(intervals, lo, hi) -> float:
    return sum(max(0, min(b, hi) - max(a, lo)) for a, b in _merge_intervals(intervals))


def compute_metrics(trace: Mapping) -> dict:
    """Makespan plus per-service availability and utilization.

    availability = up ticks / ticks the service existed within the run;
    utilization = busy ticks / up ticks. An empty trace gives zeros.
    """
    executions = trace.get("executions", [])
    timeline = trace.get("service_timeline", [])
    start = trace.get("first_arrival", 0)
    end = trace.get("end_time", 0)
    finished = [e["end"] for e in executions if e["outcome"] == "completed"]
    makespan = max(finished) - start if finished else 0

    exists, down = {}, {}
    for ev in timeline:
        sid, t = ev["service_id"], ev["time"]
        if ev["event"] == "spawn":
            exists[sid] = [t, end]
        elif ev["event"] == "retire":
            exists[sid][1] = t
        elif ev["event"] == "down":
            down.setdefault(sid, []).append([t, None])
        elif ev["event"] == "up":
            spans = down.get(sid)
            if spans and spans[-1][1] is None:
                spans[-1][1] = t
    busy = {}
    for e in executions:
        busy.setdefault(e["service_id"], []).append((e["start"], e["end"]))

    availability, utilization = {}, {}
    for sid in sorted(exists):
        lo, hi = max(start, exists[sid][0]), min(end, exists[sid][1])
        total = max(0, hi - lo)
        down_spans = [(a, hi if b is None else b) for a, b in down.get(sid, [])]
        up = total - _overlap(down_spans, lo, hi)
        busy_ticks = _overlap(busy.get(sid, []), lo, hi)
        availability[sid] = up / total if total else 0.0
        utilization[sid] = busy_ticks / up if up else 0.0
    return {"makespan": makespan, "availability": availability, "utilization": utilization}


# -- simulation --------------------------------------------------------------

@dataclass
class _Manager:
    request: ValidatedRequest
    mode: DistributionMode
    arrival: int
    phase: str = "new"
    round: int = 0
    proposals: list = field(default_factory=list)
    replies: dict = field(default_factory=dict)
    lease: alloc.Lease | None = None
    cloud_reports: dict = field(default_factory=dict)


@dataclass
class _CloudRun:
    cloud_id: str
    product_id: str
    technique_id: str
    started_at: int
    task_ids: list[str]
    outstanding: set[str]
    eptrs: list[EPTR] = field(default_factory=list)
    in_flight: int = 0
    aborted: bool = False
    reported: bool = False
    etr: Any = None


@dataclass
class _Task:
    task: TestTask
    cloud_id: str
    owner: str
    status: str = "pending"
    attempts: int = 0
    executions: int = 0


@dataclass
class _Worker:
    queue: deque = field(default_factory=deque)
    current: dict | None = None


class Simulation:
    def __init__(self, scenario: Scenario, standard: OutputStandard = OutputStandard()):
        scenario.validate()
        self.scenario = scenario
        self.standard = standard
        self.seed = scenario.seed & MASK64
        self.latency = scenario.latency
        self.catalog = scenario.catalog

        self.registry = Registry()
        for c in scenario.clouds:
            cloud = TestingCloud.from_dict(c)
            for s in cloud.services:
                s.technique_id = cloud.technique_id
            alloc.add_cloud(self.registry, cloud)

        self.now = 0
        self._queue: list = []
        self._seq = 0
        self._msg_seq = 0
        self.messages: list[dict] = []
        self.faults = FaultLog()
        self.executions: list[dict] = []
        self.leases: list[dict] = []
        self.plans: list[dict] = []
        self.timeline: list[dict] = []
        self.reports: dict[str, FinalReport] = {}
        self.rejected: dict[str, FaultRecord] = {}
        self.managers: dict[str, _Manager] = {}
        self.runs: dict[str, _CloudRun] = {}
        self.tasks: dict[str, _Task] = {}
        self.workers: dict[str, _Worker] = {}
        self.waiting: list[str] = []
        self.clone_counter: dict[str, int] = {}
        self.checks = 0

        for cloud in self.registry.clouds.values():
            for s in cloud.services:
                self.workers[s.service_id] = _Worker()
                self.timeline.append({"time": 0, "service_id": s.service_id, "event": "spawn"})

    # event plumbing

    def _push(self, time: int, kind: str, data: Any) -> None:
        heapq.heappush(self._queue, (time, self._seq, kind, data))
        self._seq += 1

    def _send(self, kind: str, src: str, dst: str, body: dict) -> None:
        msg = {
            "seq": self._msg_seq,
            "kind": kind,
            "src": src,
            "dst": dst,
            "sent": self.now,
            "delivered": self.now + self.latency,
            "body": body,
        }
        self._msg_seq += 1
        self.messages.append(msg)
        self._push(self.now + self.latency, "deliver", msg)

    def _fault(self, kind, subject, action=None, attempt=0, product_id=None, cloud_id=None, cause=None, detail=""):
        record = FaultRecord(self.now, kind, subject, action, attempt, product_id, cloud_id, cause, detail)
        log.info("fault %s", record.to_dict())
        return self.faults.append(record)

    # main loop

    def run(self) -> SimResult:
        for r in self.scenario.requests:
            pid = r.request.product.product_id
            self.managers[pid] = _Manager(validate_request(r.request, self.catalog), r.mode, r.arrival_time)
        for r in self.scenario.requests:
            self._push(r.arrival_time, "arrive", r.request.product.product_id)
        for f in self.scenario.failure_injections:
            self._push(f.time, "inject", f)
        self.now = 0
        last_active = 0

        while self._queue:
            time, _, kind, data = heapq.heappop(self._queue)
            self.now = time
            if getattr(self, f"_on_{kind}")(data) is not False:
                last_active = time  # stale timers do not extend the run
            if not alloc.verify_disjointness(self.registry):
                raise RuntimeError(f"disjointness violated at tick {self.now}")
            self.checks += 1

        for pid in sorted(self.waiting, key=lambda p: (self.managers[p].arrival, p.encode())):
            self._reject(pid, "no capacity at quiescence")
        self.waiting.clear()
        for tid, t in self.tasks.items():
            if t.status == "pending":
                raise RuntimeError(f"task {tid} never reached a terminal state")

        first = min((r.arrival_time for r in self.scenario.requests), default=0)
        result = SimResult(
            seed=self.seed,
            messages=self.messages,
            faults=list(self.faults),
            reports=self.reports,
            rejected=self.rejected,
            tasks={
                tid: {
                    "product_id": t.task.product_id,
                    "cloud_id": t.cloud_id,
                    "case_count": t.task.case_count,
                    "est_duration": t.task.est_duration,
                    "status": t.status,
                    "executions": t.executions,
                }
                for tid, t in self.tasks.items()
            },
            executions=self.executions,
            leases=self.leases,
            plans=self.plans,
            service_timeline=self.timeline,
            first_arrival=first,
            end_time=last_active,
            disjointness_checks=self.checks,
        )
        result.metrics = compute_metrics(result.to_dict())
        return result

    def _on_arrive(self, pid: str) -> None:
        self._send("RequestTesting", f"cs:{pid}", alloc.manager_id_for(pid), {"product_id": pid})

    def _on_deliver(self, msg: dict) -> None:
        getattr(self, f"_msg_{msg['kind']}")(msg)

    # service manager side

    def _msg_RequestTesting(self, msg):
        self._negotiate(msg["body"]["product_id"])

    def _negotiate(self, pid: str) -> None:
        m = self.managers[pid]
        try:
            proposals = alloc.form_clouds(self.registry, m.request)
        except TechniqueUnavailable as exc:
            self._reject(pid, str(exc), event="no_cloud")
            return
        except NoCapacity:
            m.phase = "waiting"
            if pid not in self.waiting:
                self.waiting.append(pid)
            return
        m.phase = "negotiating"
        m.round += 1
        m.proposals = proposals
        m.replies = {}
        for p in proposals:
            self._send(
                "ProposeCloud",
                alloc.manager_id_for(pid),
                f"cloud:{p.candidate_cloud_id}",
                {"product_id": pid, "round": m.round, **p.to_dict()},
            )

    def _reject(self, pid: str, detail: str, event: str = "no_capacity") -> None:
        kind = classify(RuntimeEvent(event, pid, self.now))
        action = decide_recovery(kind, RecoveryContext(), self.scenario.max_retries)
        self.managers[pid].phase = "rejected"
        self.rejected[pid] = self._fault(kind, pid, action, product_id=pid, detail=detail)

    def _msg_ProposeCloud(self, msg):
        body = msg["body"]
        cid = body["candidate_cloud_id"]
        cloud = self.registry.cloud(cid)
        ok = self.registry.holder(cid) is None and bool(cloud.free_services())
        self._send(
            "AcceptProposal" if ok else "RejectProposal",
            f"cloud:{cid}",
            msg["src"],
            {"product_id": body["product_id"], "round": body["round"], "cloud_id": cid},
        )

    def _msg_AcceptProposal(self, msg):
        self._on_reply(msg, True)

    def _msg_RejectProposal(self, msg):
        self._on_reply(msg, False)

    def _on_reply(self, msg, accepted: bool) -> None:
        body = msg["body"]
        m = self.managers[body["product_id"]]
        if m.phase != "negotiating" or body["round"] != m.round:
            return
        m.replies[body["cloud_id"]] = accepted
        if len(m.replies) < len(m.proposals):
            return
        pid = body["product_id"]
        rejected = sorted(c for c, ok in m.replies.items() if not ok)
        if rejected:
            kind = classify(RuntimeEvent("proposal_rejected", pid, self.now))
            action = decide_recovery(kind, RecoveryContext(attempts=m.round), self.scenario.max_retries)
            self._fault(kind, pid, action, m.round, pid, rejected[0], detail="proposal rejected")
            self._negotiate(pid)
            return
        try:
            lease = alloc.allocate(self.registry, m.proposals, at=self.now)
        except (AllocationConflict, StaleProposal) as exc:
            event = "lease_race" if isinstance(exc, AllocationConflict) else "stale_proposal"
            kind = classify(RuntimeEvent(event, pid, self.now))
            action = decide_recovery(kind, RecoveryContext(attempts=m.round), self.scenario.max_retries)
            self._fault(kind, pid, action, m.round, pid, exc.cloud_id, detail=str(exc))
            self._negotiate(pid)
            return
        self._start_run(pid, lease)

    def _spawn_clone(self, cloud_id: str):
        n = self.clone_counter.get(cloud_id, 0)
        self.clone_counter[cloud_id] = n + 1
        clone = alloc.spawn_clone(self.registry, cloud_id, f"{cloud_id}~clone{n}")
        self.workers[clone.service_id] = _Worker()
        self.timeline.append({"time": self.now, "service_id": clone.service_id, "event": "spawn"})
        return clone

    def _start_run(self, pid: str, lease: alloc.Lease) -> None:
        m = self.managers[pid]
        m.phase = "running"
        m.lease = lease
        product = m.request.product
        self.leases.append(
            {
                "product_id": pid,
                "manager_id": lease.allocation.manager_id,
                "cloud_ids": list(lease.allocation.cloud_ids),
                "service_ids": sorted(alloc.allocation_services(self.registry, lease.allocation)),
                "granted_at": self.now,
                "released_at": None,
            }
        )
        for cid in lease.allocation.cloud_ids:
            cloud = self.registry.cloud(cid)
            spec = m.request.spec(cloud.technique_id)
            estimate = estimate_workload(product, spec)
            decision = decide_clone_count(estimate, m.request.deadline, cloud)
            live = sorted(
                (s for s in cloud.services if s.state is ServiceState.LEASED), key=lambda s: s.service_id.encode()
            )
            spawned = []
            while len(live) + len(spawned) < decision.count and len(cloud.services) < cloud.max_services:
                spawned.append(self._spawn_clone(cid))
            used = (live + spawned)[: decision.count]
            tasks = make_tasks(product, estimate, m.request.deadline)
            assignment = partition_load(tasks, [(s.service_id, s.capacity) for s in used], m.mode)
            self.registry.loads[cid] = float(sum(t.est_duration for t in tasks))
            self.runs[cid] = _CloudRun(cid, pid, cloud.technique_id, self.now, [t.task_id for t in tasks], {t.task_id for t in tasks})
            for sid, assigned in assignment.lists.items():
                for t in assigned:
                    self.tasks[t.task_id] = _Task(t, cid, sid)
            self.plans.append(
                {
                    "at": self.now,
                    "product_id": pid,
                    "cloud_id": cid,
                    "estimate": estimate.to_dict(),
                    "clone_count": decision.count,
                    "feasible": decision.feasible,
                    "warning": None if decision.feasible else "deadline infeasible at max_services",
                    "spawned": [s.service_id for s in spawned],
                    "services": [s.service_id for s in used],
                    "assignment": assignment.to_dict(),
                }
            )
            for sid, assigned in assignment.lists.items():
                if assigned:
                    self._send(
                        "AssignTask",
                        alloc.manager_id_for(pid),
                        sid,
                        {"cloud_id": cid, "task_ids": [t.task_id for t in assigned]},
                    )

    def _msg_ETRMsg(self, msg):
        body = msg["body"]
        m = self.managers[body["product_id"]]
        m.cloud_reports[body["cloud_id"]] = body
        if len(m.cloud_reports) == len(m.lease.allocation.cloud_ids):
            self._finalize(body["product_id"])

    def _finalize(self, pid: str) -> None:
        m = self.managers[pid]
        cloud_ids = m.lease.allocation.cloud_ids
        etrs = [self.runs[c].etr for c in cloud_ids if self.runs[c].etr is not None]
        elapsed = max((e.elapsed for e in etrs), default=0)
        if elapsed > m.request.deadline:
            kind = classify(RuntimeEvent("deadline_exceeded", pid, self.now))
            self._fault(
                kind, pid, decide_recovery(kind, RecoveryContext()), product_id=pid,
                detail=f"elapsed {elapsed} > deadline {m.request.deadline}",
            )
        report = integrate_etrs(
            pid,
            etrs,
            m.request.deadline,
            self.faults.for_product(pid),
            {c: self.runs[c].task_ids for c in cloud_ids},
        )
        self.reports[pid] = report
        m.phase = "done"
        alloc.release(self.registry, m.lease)
        for entry in self.leases:
            if entry["product_id"] == pid:
                entry["released_at"] = self.now
        for cid in cloud_ids:
            cloud = self.registry.cloud(cid)
            for s in [s for s in cloud.services if s.clone]:
                alloc.retire_service(self.registry, s.service_id)
                del self.workers[s.service_id]
                self.timeline.append({"time": self.now, "service_id": s.service_id, "event": "retire"})
            del self.runs[cid]
            self._send("ReleaseLease", alloc.manager_id_for(pid), f"cloud:{cid}", {"product_id": pid})
        self._retry_waiting()

    def _retry_waiting(self) -> None:
        pending = sorted(self.waiting, key=lambda p: (self.managers[p].arrival, p.encode()))
        self.waiting.clear()
        for pid in pending:
            self._negotiate(pid)

    def _msg_ReleaseLease(self, msg):
        pass  # the registry was updated when the lease was released

    def _msg_FailureNotice(self, msg):
        pass  # informational; recovery already ran at detection time

    # cloud / service side

    def _msg_AssignTask(self, msg):
        sid = msg["dst"]
        tids = [t for t in msg["body"]["task_ids"] if self.tasks[t].status == "pending" and self.tasks[t].owner == sid]
        if not tids:
            return
        worker = self.workers.get(sid)
        cloud, service = self.registry.find_service(sid)
        if worker is None or service.state is not ServiceState.LEASED:
            self._rehome(self.runs[cloud.cloud_id], tids, sid)
            self._check_done(self.runs.get(cloud.cloud_id))
            return
        worker.queue.extend(tids)
        self._maybe_start(sid)

    def _maybe_start(self, sid: str) -> None:
        worker = self.workers[sid]
        if worker.current is not None or not worker.queue:
            return
        tid = worker.queue.popleft()
        t = self.tasks[tid]
        _, service = self.registry.find_service(sid)
        ticks = execution_ticks(t.task, service.capacity)
        token = self._seq
        t.executions += 1
        worker.current = {"task_id": tid, "start": self.now, "token": token}
        watchdog = math.floor(self.scenario.timeout_factor * t.task.est_duration) + 1
        self._push(self.now + watchdog, "watchdog", (sid, token))
        self._push(self.now + ticks, "finish", (sid, token))

    def _end_execution(self, sid: str, outcome: str) -> dict:
        worker = self.workers[sid]
        cur = worker.current
        worker.current = None
        self.executions.append(
            {
                "service_id": sid,
                "task_id": cur["task_id"],
                "start": cur["start"],
                "end": self.now,
                "outcome": outcome,
                "attempt": self.tasks[cur["task_id"]].attempts,
            }
        )
        return cur

    def _on_finish(self, data):
        sid, token = data
        worker = self.workers.get(sid)
        if worker is None or worker.current is None or worker.current["token"] != token:
            return False
        cur = self._end_execution(sid, "completed")
        t = self.tasks[cur["task_id"]]
        _, service = self.registry.find_service(sid)
        eptr = simulated_runner(
            t.task,
            self.seed,
            self.managers[t.task.product_id].request.product.defect_density_estimate,
            service_id=sid,
            capacity=service.capacity,
            started_at=cur["start"],
            cloud_id=t.cloud_id,
        )
        t.status = "completed"
        run = self.runs[t.cloud_id]
        run.outstanding.discard(t.task.task_id)
        run.in_flight += 1
        self._send("EPTRMsg", sid, f"cloud:{t.cloud_id}", eptr.to_dict())
        self._maybe_start(sid)

    def _on_watchdog(self, data):
        sid, token = data
        worker = self.workers.get(sid)
        if worker is None or worker.current is None or worker.current["token"] != token:
            return False
        cur = self._end_execution(sid, "timeout")
        t = self.tasks[cur["task_id"]]
        kind = classify(
            RuntimeEvent("running", t.task.task_id, self.now, self.now - cur["start"], t.task.est_duration),
            self.scenario.timeout_factor,
        )
        action = decide_recovery(kind, RecoveryContext(attempts=t.attempts), self.scenario.max_retries)
        self._fault(kind, t.task.task_id, action, t.attempts, t.task.product_id, t.cloud_id, cause=sid)
        run = self.runs[t.cloud_id]
        if action is RecoveryAction.RETRY:
            t.attempts += 1
            worker.queue.appendleft(t.task.task_id)
        else:
            self._abort_task(t)
        self._maybe_start(sid)
        self._check_done(run)

    def _msg_EPTRMsg(self, msg):
        eptr = EPTR.from_dict(msg["body"])
        run = self.runs[eptr.cloud_id]
        run.eptrs.append(eptr)
        run.in_flight -= 1
        self._check_done(run)

    def _check_done(self, run: _CloudRun | None) -> None:
        if run is None or run.reported or run.outstanding or run.in_flight:
            return
        run.reported = True
        run.etr = (
            merge_eptrs(run.cloud_id, run.eptrs, self.standard, run.technique_id, run.started_at)
            if run.eptrs
            else None
        )
        self._send(
            "ETRMsg",
            f"cloud:{run.cloud_id}",
            alloc.manager_id_for(run.product_id),
            {
                "product_id": run.product_id,
                "cloud_id": run.cloud_id,
                "aborted": run.aborted,
                "etr": run.etr.to_dict() if run.etr else None,
            },
        )

    def _abort_task(self, t: _Task) -> None:
        t.status = "aborted"
        self.runs[t.cloud_id].outstanding.discard(t.task.task_id)
        worker = self.workers.get(t.owner)
        if worker is not None and t.task.task_id in worker.queue:
            worker.queue.remove(t.task.task_id)

    def _abort_cloud(self, run: _CloudRun, cause: str, subject_task: _Task | None = None) -> None:
        self._fault(
            ExceptionKind.SERVICE_FAILURE,
            run.cloud_id,
            RecoveryAction.ABORT_CLOUD,
            subject_task.attempts if subject_task else 0,
            run.product_id,
            run.cloud_id,
            cause=cause,
            detail="no live service left",
        )
        run.aborted = True
        for tid in sorted(run.outstanding):
            t = self.tasks[tid]
            worker = self.workers.get(t.owner)
            if worker is not None and worker.current and worker.current["task_id"] == tid:
                self._end_execution(t.owner, "aborted")
            self._abort_task(t)

    def _live_targets(self, run: _CloudRun, exclude: str) -> list[str]:
        cloud = self.registry.cloud(run.cloud_id)
        return [
            s.service_id
            for s in cloud.services
            if s.service_id != exclude and s.state is ServiceState.LEASED and s.leased_to == run.product_id
        ]

    def _owned_load(self, sid: str) -> float:
        return sum(t.task.est_duration for t in self.tasks.values() if t.owner == sid and t.status == "pending")

    def _pick_target(self, run: _CloudRun, exclude: str) -> str | None:
        live = self._live_targets(run, exclude)
        if not live:
            return None
        return min(live, key=lambda s: (self._owned_load(s), s.encode()))

    def _rehome(self, run: _CloudRun, tids: list[str], failed: str) -> None:
        """Move tasks that never started on ``failed`` to live services of the cloud."""
        if run.aborted:
            for tid in tids:
                self._abort_task(self.tasks[tid])
            return
        batches: dict[str, list[str]] = {}
        for tid in tids:
            target = self._pick_target(run, failed)
            if target is None:
                cloud = self.registry.cloud(run.cloud_id)
                if len(cloud.services) < cloud.max_services:
                    clone = self._spawn_clone(run.cloud_id)
                    self._fault(
                        ExceptionKind.SERVICE_FAILURE, tid, RecoveryAction.SPAWN_CLONE, self.tasks[tid].attempts,
                        run.product_id, run.cloud_id, cause=failed, detail=f"clone {clone.service_id}",
                    )
                    target = clone.service_id
                else:
                    self._abort_cloud(run, failed)
                    return
            self.tasks[tid].owner = target
            batches.setdefault(target, []).append(tid)
        for target, batch in batches.items():
            self._send("AssignTask", f"cloud:{run.cloud_id}", target, {"cloud_id": run.cloud_id, "task_ids": batch})

    def _on_inject(self, f: FailureInjection) -> None:
        cloud, service = self.registry.find_service(f.service_id)
        if f.action == "recover":
            if service.state is ServiceState.FAILED:
                alloc.recover(self.registry, f.service_id)
                self.timeline.append({"time": self.now, "service_id": f.service_id, "event": "up"})
                self._retry_waiting()
            return

        kind = classify(RuntimeEvent("crash", f.service_id, self.now))
        if service.state is ServiceState.FAILED:
            self._fault(kind, f.service_id, None, cloud_id=cloud.cloud_id, cause=f.service_id, detail="already failed")
            return
        pid = service.leased_to
        alloc.mark_failed(self.registry, f.service_id)
        self.timeline.append({"time": self.now, "service_id": f.service_id, "event": "down"})
        worker = self.workers[f.service_id]
        pending = list(worker.queue)
        worker.queue.clear()
        run = self.runs.get(cloud.cloud_id) if pid is not None else None

        if worker.current is None:
            self._fault(kind, f.service_id, None, product_id=pid, cloud_id=cloud.cloud_id, cause=f.service_id, detail="idle")
        else:
            cur = self._end_execution(f.service_id, "crashed")
            t = self.tasks[cur["task_id"]]
            siblings = self._live_targets(run, f.service_id)
            context = RecoveryContext(t.attempts, len(siblings), len(cloud.services), cloud.max_services)
            action = decide_recovery(kind, context, self.scenario.max_retries)
            if action is RecoveryAction.ABORT_CLOUD:
                self._abort_cloud(run, f.service_id, t)
            else:
                self._fault(kind, t.task.task_id, action, t.attempts, pid, cloud.cloud_id, cause=f.service_id)
                if action is RecoveryAction.ABORT_TASK:
                    self._abort_task(t)
                else:
                    t.attempts += 1
                    if action is RecoveryAction.SPAWN_CLONE:
                        target = self._spawn_clone(cloud.cloud_id).service_id
                    else:
                        target = self._pick_target(run, f.service_id)
                    t.owner = target
                    self._send(
                        "AssignTask", f"cloud:{cloud.cloud_id}", target,
                        {"cloud_id": cloud.cloud_id, "task_ids": [t.task.task_id]},
                    )
        if run is not None:
            if pending:
                self._rehome(run, pending, f.service_id)
            self._send(
                "FailureNotice", f"cloud:{cloud.cloud_id}", alloc.manager_id_for(pid), {"service_id": f.service_id}
            )
            self._check_done(run)


def run_simulation(scenario: Scenario) -> SimResult:
    return Simulation(scenario).run()
