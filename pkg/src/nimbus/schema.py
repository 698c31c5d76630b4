"""Versioned JSON file formats and their validation.

Every file carries ``"version": "v1"`` and a ``kind`` naming its type:
scenario, catalog, product, report, etr, trace or metrics. Structure is
checked with JSON Schema; invariants that span fields (totals equal sums,
defects never exceed cases) are checked in code.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from nimbus.errors import ScenarioInvalid
from nimbus.fault import ExceptionKind, RecoveryAction
from nimbus.model import SCHEMA_VERSION, ProductSpec, TechniqueSpec

_count = {"type": "integer", "minimum": 0}
_number = {"type": "number"}
_nonneg = {"type": "number", "minimum": 0}

_TECHNIQUE = {
    "type": "object",
    "required": ["technique_id", "test_case_density", "avg_case_time"],
    "properties": {
        "technique_id": {"type": "string", "minLength": 1},
        "test_case_density": {"type": "number", "exclusiveMinimum": 0},
        "avg_case_time": {"type": "number", "exclusiveMinimum": 0},
        "avg_case_size": {"type": "number", "exclusiveMinimum": 0},
    },
}

_PRODUCT = {
    "type": "object",
    "required": ["product_id", "modules"],
    "properties": {
        "product_id": {"type": "string", "minLength": 1},
        "defect_density_estimate": _nonneg,
        "modules": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["module_id", "size_kloc"],
                "properties": {
                    "module_id": {"type": "string", "minLength": 1},
                    "size_kloc": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
    },
}

_ETR = {
    "type": "object",
    "required": ["cloud_id", "technique_id", "total_cases", "total_defects", "cpu_time", "elapsed", "eptr_count"],
    "properties": {
        "cloud_id": {"type": "string"},
        "technique_id": {"type": "string"},
        "total_cases": _count,
        "total_defects": _count,
        "cpu_time": _nonneg,
        "elapsed": _number,
        "eptr_count": {"type": "integer", "minimum": 1},
    },
}

_FAULT = {
    "type": "object",
    "required": ["time", "kind", "subject", "action", "attempt"],
    "properties": {
        "time": _number,
        "kind": {"enum": [k.value for k in ExceptionKind]},
        "subject": {"type": "string"},
        "action": {"enum": [a.value for a in RecoveryAction] + [None]},
        "attempt": _count,
    },
}

_REPORT = {
    "type": "object",
    "required": ["product_id", "etrs", "totals", "deadline", "deadline_met", "exception_log"],
    "properties": {
        "product_id": {"type": "string", "minLength": 1},
        "etrs": {"type": "object", "additionalProperties": _ETR},
        "totals": {
            "type": "object",
            "required": ["total_cases", "total_defects", "cpu_time"],
            "properties": {"total_cases": _count, "total_defects": _count, "cpu_time": _nonneg},
        },
        "deadline": {"type": "number", "exclusiveMinimum": 0},
        "deadline_met": {"type": "boolean"},
        "aborted_clouds": {"type": "array", "items": {"type": "string"}},
        "exception_log": {"type": "array", "items": _FAULT},
    },
}

_EPTR = {
    "type": "object",
    "required": ["service_id", "task_id", "cases_executed", "defects_found", "time_spent", "finished_at"],
    "properties": {
        "service_id": {"type": "string"},
        "task_id": {"type": "string"},
        "cases_executed": _count,
        "defects_found": _count,
        "time_spent": _nonneg,
        "finished_at": _number,
    },
}

_METRICS = {
    "type": "object",
    "required": ["makespan", "availability", "utilization"],
    "properties": {
        "makespan": _nonneg,
        "availability": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "utilization": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
    },
}

_TRACE = {
    "type": "object",
    "required": ["seed", "messages", "faults", "reports", "tasks", "executions", "metrics"],
    "properties": {
        "messages": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["seq", "kind", "src", "dst", "sent", "delivered"],
            },
        },
        "faults": {"type": "array", "items": _FAULT},
        "reports": {"type": "object", "additionalProperties": _REPORT},
        "tasks": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["status", "case_count", "executions"],
                "properties": {"status": {"enum": ["completed", "aborted"]}},
            },
        },
        "metrics": _METRICS,
    },
}

SCHEMAS = {
    "catalog": {
        "type": "object",
        "required": ["techniques"],
        "properties": {"techniques": {"type": "array", "minItems": 1, "items": _TECHNIQUE}},
    },
    "product": _PRODUCT,
    "etr": _ETR,
    "eptr": _EPTR,
    "report": _REPORT,
    "metrics": _METRICS,
    "trace": _TRACE,
}

KINDS = sorted([*SCHEMAS, "scenario"])


def _where(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def _schema_errors(doc: Any, schema: dict) -> list[str]:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    return [f"{_where(e.absolute_path)}: {e.message}" for e in errors]


def _check_etr(etr: Mapping, where: str) -> list[str]:
    out = []
    if etr["total_defects"] > etr["total_cases"]:
        out.append(f"{where}: total_defects exceeds total_cases (invariant: defects_found <= cases_executed)")
    return out


def _check_report(report: Mapping, where: str = "") -> list[str]:
    prefix = f"{where}." if where else ""
    out = []
    etrs = report["etrs"].values()
    for tech, etr in report["etrs"].items():
        out += _check_etr(etr, f"{prefix}etrs.{tech}")
    totals = report["totals"]
    for name, etr_name in (("total_cases", "total_cases"), ("total_defects", "total_defects"), ("cpu_time", "cpu_time")):
        expected = sum(e[etr_name] for e in etrs)
        if totals[name] != expected:
            out.append(f"{prefix}totals.{name}: {totals[name]} != sum over ETRs {expected} (invariant: grand totals equal sums)")
    return out


def _check_trace(doc: Mapping) -> list[str]:
    out = []
    for m in doc["messages"]:
        if m["delivered"] < m["sent"]:
            out.append(f"messages.{m['seq']}: delivered before sent (invariant: causality)")
    for pid, report in doc["reports"].items():
        out += _check_report(report, f"reports.{pid}")
    return out


def validate_document(doc: Any) -> list[str]:
    """Return human-readable diagnostics for ``doc``; empty means clean."""
    if not isinstance(doc, Mapping):
        return ["<root>: expected a JSON object"]
    version = doc.get("version")
    if version != SCHEMA_VERSION:
        return [f"version: unsupported version {version!r} (expected {SCHEMA_VERSION!r})"]
    kind = doc.get("kind")
    if kind == "scenario":
        try:
            from nimbus.simnet import Scenario

            Scenario.from_dict(doc)
        except ScenarioInvalid as exc:
            return [f"scenario: {exc}"]
        return []
    if kind not in SCHEMAS:
        return [f"kind: unknown document kind {kind!r} (expected one of {', '.join(KINDS)})"]
    errors = _schema_errors(doc, SCHEMAS[kind])
    if errors:
        return errors
    if kind == "report":
        return _check_report(doc)
    if kind == "etr":
        return _check_etr(doc, "<root>")
    if kind == "eptr" and doc["defects_found"] > doc["cases_executed"]:
        return ["defects_found: exceeds cases_executed (invariant: defects_found <= cases_executed)"]
    if kind == "trace":
        return _check_trace(doc)
    return []


def validate_file(path) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        return [f"{path}: not valid JSON ({exc})"]
    return validate_document(doc)


def versioned(kind: str, body: Mapping) -> dict:
    return {"version": SCHEMA_VERSION, "kind": kind, **body}


def dumps(doc: Mapping) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def write_atomic(path, text: str) -> Path:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _load(path, kind: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    problems = validate_document(doc)
    if doc.get("kind") != kind:
        problems.insert(0, f"kind: expected {kind!r}, got {doc.get('kind')!r}")
    if problems:
        raise ValueError(f"{path}: " + "; ".join(problems))
    return doc


def load_catalog(path) -> list[TechniqueSpec]:
    return [TechniqueSpec.from_dict(t) for t in _load(path, "catalog")["techniques"]]


def load_product(path) -> ProductSpec:
    return ProductSpec.from_dict(_load(path, "product"))
