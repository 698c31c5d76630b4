import json
import os

from cli_helpers import aborting_doc, golden_doc, invalid_doc, nimbus, write
from conftest import GOLDEN_DIR


def test_simulate_then_validate(tmp_path):
    out = tmp_path / "out"
    proc = nimbus("simulate", "--scenario", GOLDEN_DIR / "golden_scenario.json", "--out", out)
    assert proc.returncode == 0, proc.stderr
    assert sorted(p.name for p in out.iterdir()) == ["metrics.json", "report-P1.json", "trace.json"]
    for path in out.iterdir():
        check = nimbus("validate", path)
        assert check.returncode == 0, check.stdout
        assert check.stdout.strip().endswith("ok")
    assert (out / "trace.json").read_text() == (GOLDEN_DIR / "golden_trace.json").read_text()


def test_seed_override(tmp_path):
    proc = nimbus("simulate", "--scenario", GOLDEN_DIR / "golden_scenario.json", "--out", tmp_path, "--seed", "99")
    assert proc.returncode == 0
    assert json.loads((tmp_path / "trace.json").read_text())["seed"] == 99


def test_missing_scenario_file(tmp_path):
    proc = nimbus("simulate", "--scenario", tmp_path / "absent.json", "--out", tmp_path)
    assert proc.returncode == 1
    assert "cannot read scenario" in proc.stderr


def test_invalid_scenario(tmp_path):
    proc = nimbus("simulate", "--scenario", write(tmp_path / "s.json", invalid_doc()), "--out", tmp_path / "o")
    assert proc.returncode == 2
    assert "unknown service id 'ghost'" in proc.stderr


def test_not_json_is_invalid(tmp_path):
    (tmp_path / "s.json").write_text("{nope")
    assert nimbus("simulate", "--scenario", tmp_path / "s.json", "--out", tmp_path).returncode == 2


def test_aborted_cloud_exit_code(tmp_path):
    proc = nimbus("simulate", "--scenario", write(tmp_path / "s.json", aborting_doc()), "--out", tmp_path / "o")
    assert proc.returncode == 3
    assert "aborted clouds: C1" in proc.stderr


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    proc = nimbus("simulate", "--scenario", GOLDEN_DIR / "golden_scenario.json", "--out", blocker / "sub")
    assert proc.returncode == 1


def test_validate_flags_impossible_defect_count(tmp_path):
    eptr = {"version": "v1", "kind": "eptr", "service_id": "s1", "task_id": "t", "cases_executed": 3,
            "defects_found": -1, "time_spent": 1, "finished_at": 1}
    proc = nimbus("validate", write(tmp_path / "e.json", eptr))
    assert proc.returncode == 1
    assert "defects_found" in proc.stdout


def test_validate_flags_defects_over_cases(tmp_path):
    eptr = {"version": "v1", "kind": "eptr", "service_id": "s1", "task_id": "t", "cases_executed": 3,
            "defects_found": 4, "time_spent": 1, "finished_at": 1}
    proc = nimbus("validate", write(tmp_path / "e.json", eptr))
    assert proc.returncode == 1
    assert "exceeds cases_executed" in proc.stdout


def test_validate_flags_bad_totals(tmp_path):
    report = json.loads((GOLDEN_DIR / "golden_trace.json").read_text())["reports"]["P1"]
    report = {"version": "v1", "kind": "report", **report}
    report["totals"]["total_cases"] += 1
    proc = nimbus("validate", write(tmp_path / "r.json", report))
    assert proc.returncode == 1
    assert "totals.total_cases" in proc.stdout


def test_validate_unsupported_version(tmp_path):
    proc = nimbus("validate", write(tmp_path / "x.json", {"version": "v2", "kind": "report"}))
    assert proc.returncode == 1
    assert "unsupported version" in proc.stdout


def test_validate_unknown_kind(tmp_path):
    proc = nimbus("validate", write(tmp_path / "x.json", {"version": "v1", "kind": "poem"}))
    assert proc.returncode == 1
    assert "unknown document kind" in proc.stdout


def test_validate_missing_file(tmp_path):
    assert nimbus("validate", tmp_path / "absent.json").returncode == 1


def test_report_formats():
    trace = GOLDEN_DIR / "golden_trace.json"
    text = nimbus("report", "--trace", trace)
    assert text.returncode == 0
    assert "P1: 40 cases" in text.stdout and "deadline 100 met" in text.stdout
    structured = nimbus("report", "--trace", trace, "--format", "structured")
    assert structured.returncode == 0
    summary = json.loads(structured.stdout)
    assert summary["kind"] == "summary"
    assert summary["reports"]["P1"]["totals"]["total_cases"] == 40


def test_log_level_from_environment(tmp_path):
    env = {**os.environ, "NIMBUS_LOG": "debug"}
    proc = nimbus("simulate", "--scenario", GOLDEN_DIR / "golden_scenario.json", "--out", tmp_path, env=env)
    assert proc.returncode == 0


def test_catalog_and_product_files_validate(tmp_path):
    d = golden_doc()
    catalog = {"version": "v1", "kind": "catalog", "techniques": d["catalog"]}
    product = {"version": "v1", "kind": "product", **d["requests"][0]["product"]}
    assert nimbus("validate", write(tmp_path / "c.json", catalog)).returncode == 0
    assert nimbus("validate", write(tmp_path / "p.json", product)).returncode == 0
