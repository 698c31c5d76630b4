import pytest
from hypothesis import given
from hypothesis import strategies as st

from nimbus.aggregation import (
    ETR,
    FinalReport,
    OutputStandard,
    integrate_etrs,
    merge_eptrs,
    validate_output_standard,
)
from nimbus.errors import EmptyReportSet, MissingCloudReport, MixedCloud, OutputStandardViolation
from nimbus.execution import EPTR
from nimbus.fault import ExceptionKind, FaultRecord, RecoveryAction


def eptr(cases, defects, spent, finished=None, sid="s1", tid="t1", cloud="C1"):
    return EPTR(sid, tid, cases, defects, spent, spent if finished is None else finished, cloud)


def etr(cloud, tech, cases, defects, cpu=10, elapsed=10):
    return ETR(cloud, tech, cases, defects, cpu, elapsed, 1)


# output standard

def test_complete_report_conforms():
    assert validate_output_standard(eptr(10, 2, 30)) == []


def test_missing_field_is_named():
    row = {"service_id": "s1", "cases_executed": 10, "defects_found": 2}
    assert validate_output_standard(row) == ["time_spent"]


def test_null_counts_as_missing():
    row = {"cases_executed": 10, "defects_found": None, "time_spent": 3}
    assert validate_output_standard(row) == ["defects_found"]


def test_strict_standard_rejects_extras():
    row = {**eptr(1, 0, 1).to_dict(), "note": "x"}
    assert validate_output_standard(row, OutputStandard(allow_extra=False)) == ["note"]
    assert validate_output_standard(row) == []


def test_standard_needs_a_field():
    with pytest.raises(ValueError):
        OutputStandard(frozenset())


# merge

def test_merge_sums_fields():
    merged = merge_eptrs("C1", [eptr(10, 2, 30, sid="s1"), eptr(15, 1, 45, sid="s2")], technique_id="unit")
    assert (merged.total_cases, merged.total_defects, merged.cpu_time) == (25, 3, 75)
    assert merged.eptr_count == 2
    assert merged.elapsed == 45


def test_merge_elapsed_counts_from_start():
    merged = merge_eptrs("C1", [eptr(1, 0, 5, finished=20)], started_at=12)
    assert merged.elapsed == 8


def test_merge_needs_reports():
    with pytest.raises(EmptyReportSet):
        merge_eptrs("C1", [])


def test_merge_rejects_nonconforming_report():
    bad = {"service_id": "s2", "cases_executed": 1, "defects_found": 0}
    with pytest.raises(OutputStandardViolation) as err:
        merge_eptrs("C1", [eptr(1, 0, 1), bad])
    assert err.value.service_id == "s2"
    assert "time_spent" in err.value.fields


def test_merge_rejects_foreign_cloud():
    with pytest.raises(MixedCloud):
        merge_eptrs("C1", [eptr(1, 0, 1, cloud="C2")])


reports = st.lists(
    st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(0, 100)).map(
        lambda t: eptr(t[0] + t[1], t[1], t[2])
    ),
    min_size=1,
    max_size=12,
)


@given(rows=reports, data=st.data())
def test_merge_is_order_independent(rows, data):
    shuffled = data.draw(st.permutations(rows))
    assert merge_eptrs("C1", rows) == merge_eptrs("C1", shuffled)


@given(rows=st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=10), data=st.data())
def test_float_times_merge_exactly(rows, data):
    eptrs = [eptr(1, 0, t) for t in rows]
    shuffled = data.draw(st.permutations(eptrs))
    assert merge_eptrs("C1", eptrs).cpu_time == merge_eptrs("C1", shuffled).cpu_time


def test_etr_round_trip():
    e = etr("C1", "unit", 5, 1)
    assert ETR.from_dict(e.to_dict()) == e


# integration

def test_integrate_two_clouds():
    report = integrate_etrs("P1", [etr("C1", "unit", 25, 3), etr("C2", "functional", 40, 5)], deadline=100)
    assert (report.total_cases, report.total_defects) == (65, 8)
    assert report.deadline_met
    assert set(report.etrs) == {"unit", "functional"}


def test_integrate_marks_missed_deadline():
    assert not integrate_etrs("P1", [etr("C1", "unit", 1, 0, elapsed=120)], deadline=100).deadline_met


def test_aborted_cloud_is_excused():
    faults = [FaultRecord(5, ExceptionKind.SERVICE_FAILURE, "s9", RecoveryAction.ABORT_CLOUD, 0, "P1", "C2")]
    report = integrate_etrs("P1", [etr("C1", "unit", 4, 1)], 100, faults, allocated={"C1": ["a"], "C2": ["b"]})
    assert report.aborted_clouds == ("C2",)
    assert report.total_cases == 4
    assert len(report.exception_log) == 1


def test_cloud_whose_tasks_all_aborted_is_excused():
    faults = [FaultRecord(5, ExceptionKind.TASK_TIMEOUT, "b", RecoveryAction.ABORT_TASK, 2, "P1", "C2")]
    report = integrate_etrs("P1", [etr("C1", "unit", 4, 1)], 100, faults, allocated={"C1": ["a"], "C2": ["b"]})
    assert report.aborted_clouds == ("C2",)


def test_missing_cloud_report():
    with pytest.raises(MissingCloudReport) as err:
        integrate_etrs("P1", [etr("C1", "unit", 4, 1)], 100, allocated={"C1": ["a"], "C2": ["b"]})
    assert err.value.cloud_id == "C2"


def test_final_report_round_trip():
    faults = [FaultRecord(5, ExceptionKind.SERVICE_FAILURE, "s1", RecoveryAction.REASSIGN, 0, "P1", "C1", None, "x")]
    report = integrate_etrs("P1", [etr("C1", "unit", 25, 3)], 100, faults)
    doc = report.to_dict()
    assert doc["totals"] == {"total_cases": 25, "total_defects": 3, "cpu_time": 10, "elapsed": 10}
    assert FinalReport.from_dict(doc) == report
