import copy
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import GOLDEN_DIR
from scenario_factory import random_scenario
from nimbus.errors import ScenarioInvalid
from nimbus.fault import ExceptionKind, RecoveryAction
from nimbus.simnet import Scenario, compute_metrics, load_scenario, run_simulation

GOLDEN = json.loads((GOLDEN_DIR / "golden_scenario.json").read_text())


def doc(**changes):
    d = copy.deepcopy(GOLDEN)
    d.update(changes)
    return d


def single_service(capacity=1.0, max_services=1, **changes):
    d = doc(**changes)
    d["topology"]["clouds"][0].update(max_services=max_services, services=[{"service_id": "s1", "capacity": capacity}])
    return d


def run(d):
    return run_simulation(Scenario.from_dict(d))


def actions(result):
    return [(r.kind, r.action) for r in result.faults]


# golden path

def test_message_times_match_hand_derivation():
    result = run(GOLDEN)
    timeline = [(m["kind"], m["sent"], m["delivered"]) for m in result.messages]
    assert timeline == [
        ("RequestTesting", 0, 1),
        ("ProposeCloud", 1, 2),
        ("AcceptProposal", 2, 3),
        ("AssignTask", 3, 4),
        ("AssignTask", 3, 4),
        ("EPTRMsg", 34, 35),
        ("EPTRMsg", 34, 35),
        ("EPTRMsg", 64, 65),
        ("EPTRMsg", 64, 65),
        ("ETRMsg", 65, 66),
        ("ReleaseLease", 66, 67),
    ]
    report = result.reports["P1"]
    assert (report.total_cases, report.elapsed, report.deadline_met) == (40, 61, True)
    assert result.metrics["makespan"] == 64
    assert result.metrics["availability"] == {"s1": 1.0, "s2": 1.0}
    assert result.metrics["utilization"]["s1"] == pytest.approx(60 / 67)


def test_golden_trace_is_stable():
    assert run(GOLDEN).to_json() == (GOLDEN_DIR / "golden_trace.json").read_text()


def test_load_scenario_from_file():
    assert load_scenario(GOLDEN_DIR / "golden_scenario.json") == Scenario.from_dict(GOLDEN)


def test_scenario_round_trip():
    scenario = Scenario.from_dict(GOLDEN)
    assert Scenario.from_dict(scenario.to_dict()) == scenario


def test_same_seed_same_bytes_other_seed_other_draws():
    scenario = Scenario.from_dict(GOLDEN)
    a, b = run_simulation(scenario), run_simulation(scenario)
    assert a.to_json() == b.to_json()
    c = run_simulation(scenario.with_seed(8))
    assert [m["sent"] for m in c.messages] == [m["sent"] for m in a.messages]


def test_missed_deadline_is_recorded_not_fatal():
    result = run(doc(requests=[{**GOLDEN["requests"][0], "deadline": 60}]))
    report = result.reports["P1"]
    assert not report.deadline_met
    assert actions(result) == [(ExceptionKind.DEADLINE_EXCEEDED, RecoveryAction.CONTINUE)]
    assert report.total_cases == 40


# failures

def test_failure_with_live_sibling_reassigns():
    result = run(doc(failure_injections=[{"time": 5, "service_id": "s1", "action": "fail"}]))
    assert all(t["status"] == "completed" for t in result.tasks.values())
    assert actions(result).count((ExceptionKind.SERVICE_FAILURE, RecoveryAction.REASSIGN)) == 1
    assert [r for r in result.faults if r.kind is ExceptionKind.SERVICE_FAILURE][0].cause == "s1"
    assert result.reports["P1"].total_cases == 40
    assert result.metrics["availability"]["s1"] < 1.0


def test_failure_without_room_aborts_cloud():
    result = run(single_service(failure_injections=[{"time": 10, "service_id": "s1", "action": "fail"}]))
    assert (ExceptionKind.SERVICE_FAILURE, RecoveryAction.ABORT_CLOUD) in actions(result)
    assert result.aborted_clouds == ["C1"]
    assert result.reports["P1"].aborted_clouds == ("C1",)
    assert all(t["status"] == "aborted" for t in result.tasks.values())


def test_failure_with_room_spawns_clone():
    d = single_service(max_services=2, failure_injections=[{"time": 10, "service_id": "s1", "action": "fail"}])
    d["requests"][0]["deadline"] = 400
    result = run(d)
    assert (ExceptionKind.SERVICE_FAILURE, RecoveryAction.SPAWN_CLONE) in actions(result)
    assert all(t["status"] == "completed" for t in result.tasks.values())
    clones = [e for e in result.service_timeline if "~clone" in e["service_id"]]
    assert [e["event"] for e in clones] == ["spawn", "retire"]


def test_slow_service_times_out_then_aborts_task():
    d = single_service(capacity=0.4)
    d["requests"][0]["product"]["modules"] = [{"module_id": "m1", "size_kloc": 1.0}]
    result = run(d)
    task = result.tasks["P1/unit/m1"]
    assert task == {**task, "status": "aborted", "executions": 3}
    assert [a for k, a in actions(result) if k is ExceptionKind.TASK_TIMEOUT] == [
        RecoveryAction.RETRY,
        RecoveryAction.RETRY,
        RecoveryAction.ABORT_TASK,
    ]
    starts = [e["start"] for e in result.executions]
    assert [b - a for a, b in zip(starts, starts[1:])] == [61, 61]
    assert result.reports["P1"].total_cases == 0


def test_recovered_service_rejoins():
    injections = [
        {"time": 5, "service_id": "s1", "action": "fail"},
        {"time": 6, "service_id": "s1", "action": "recover"},
    ]
    result = run(doc(failure_injections=injections))
    assert [e["event"] for e in result.service_timeline if e["service_id"] == "s1"] == ["spawn", "down", "up"]
    assert result.metrics["availability"]["s1"] == pytest.approx(66 / 67, abs=0.02)


# negotiation

def test_unserved_technique_is_rejected():
    d = doc()
    d["catalog"].append({"technique_id": "perf", "test_case_density": 1, "avg_case_time": 1})
    d["requests"][0]["techniques"] = ["perf"]
    result = run(d)
    assert result.reports == {}
    rejected = result.rejected["P1"]
    assert (rejected.kind, rejected.action) == (ExceptionKind.TECHNIQUE_UNAVAILABLE, RecoveryAction.ABORT_TASK)


def test_second_product_waits_for_the_cloud():
    second = copy.deepcopy(GOLDEN["requests"][0])
    second["product"]["product_id"] = "P2"
    second["arrival_time"] = 2
    result = run(doc(requests=[GOLDEN["requests"][0], second]))
    assert set(result.reports) == {"P1", "P2"}
    first, later = result.leases
    assert later["granted_at"] >= first["released_at"]


def test_rejected_at_quiescence_when_capacity_never_returns():
    second = copy.deepcopy(GOLDEN["requests"][0])
    second["product"]["product_id"] = "P2"
    injections = [{"time": 0, "service_id": "s1", "action": "fail"}, {"time": 0, "service_id": "s2", "action": "fail"}]
    result = run(doc(requests=[GOLDEN["requests"][0], second], failure_injections=injections))
    assert result.rejected["P2"].detail == "no capacity at quiescence"
    assert set(result.rejected) == {"P1", "P2"}


# scenario validation

@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda d: d.update(version="v9"), "unsupported version"),
        (lambda d: d.update(latency=-1), "latency"),
        (lambda d: d["failure_injections"].append({"time": 1, "service_id": "ghost"}), "unknown service id 'ghost'"),
        (lambda d: d["topology"]["clouds"].append(copy.deepcopy(d["topology"]["clouds"][0])), "duplicate cloud id"),
        (lambda d: d["topology"]["clouds"][0].update(max_services=1), "max_services"),
        (lambda d: d["requests"][0].update(deadline=0), "deadline"),
        (lambda d: d["requests"][0].update(techniques=["nope"]), "nope"),
        (lambda d: d["requests"][0].pop("product"), "malformed"),
        (lambda d: d["catalog"][0].update(avg_case_time=-3), "avg_case_time"),
    ],
)
def test_invalid_scenarios(mutate, message):
    d = doc()
    mutate(d)
    with pytest.raises(ScenarioInvalid, match=message):
        Scenario.from_dict(d)


# metrics

def test_metrics_of_empty_trace():
    assert compute_metrics({}) == {"makespan": 0, "availability": {}, "utilization": {}}


def test_metrics_with_downtime():
    trace = {
        "first_arrival": 0,
        "end_time": 100,
        "service_timeline": [
            {"time": 0, "service_id": "s1", "event": "spawn"},
            {"time": 20, "service_id": "s1", "event": "down"},
            {"time": 40, "service_id": "s1", "event": "up"},
        ],
        "executions": [{"service_id": "s1", "start": 0, "end": 20, "outcome": "crashed"},
                       {"service_id": "s1", "start": 40, "end": 80, "outcome": "completed"}],
    }
    m = compute_metrics(trace)
    assert m == {"makespan": 80, "availability": {"s1": 0.8}, "utilization": {"s1": 0.75}}


# random scenarios

@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32), failures=st.integers(0, 4), slow=st.booleans())
def test_random_runs_are_causal_and_terminal(seed, failures, slow):
    scenario = random_scenario(random.Random(seed), failures=(failures, failures), slow_services=slow)
    result = run_simulation(scenario)
    for m in result.messages:
        assert m["delivered"] == m["sent"] + scenario.latency
    sent = [m["sent"] for m in result.messages]
    assert sent == sorted(sent)
    assert all(t["status"] in ("completed", "aborted") for t in result.tasks.values())
    assert all(t["executions"] <= scenario.max_retries + 1 for t in result.tasks.values())
    served = set(result.reports) | set(result.rejected)
    assert served == {r.request.product.product_id for r in scenario.requests}
    for sid, a in result.metrics["availability"].items():
        assert 0 <= a <= 1 and 0 <= result.metrics["utilization"][sid] <= 1
