from __future__ import annotations

import json
import random

import pytest

from toolweave import schema as sch

from conftest import load_support_pool


@pytest.fixture(scope="module")
def pool():
    return load_support_pool()


def test_parse_update_escalation_status(pool):
    tool = pool.get("update_escalation_status")
    assert tool.name == "update_escalation_status"
    assert tool.required == {"status", "ticket_escalation_id"}
    assert set(tool.param_map()) == {"status", "ticket_escalation_id"}


def test_parse_empty_parameters_is_valid():
    tool = sch.parse_tool_spec({"name": "noop", "description": "does nothing", "parameters": {}, "results": {}})
    assert tool.required == frozenset()
    assert tool.parameters == ()


def test_parse_required_not_in_parameters_names_offender():
    doc = {
        "name": "broken",
        "parameters": {"type": "object", "properties": {"a": {"type": "string"}}, "required": ["foo"]},
    }
    with pytest.raises(sch.SchemaError, match="foo"):
        sch.parse_tool_spec(doc)


def test_parse_malformed_document():
    with pytest.raises(sch.SchemaError):
        sch.parse_tool_spec("{not json")


def test_parse_bad_tool_name():
    with pytest.raises(sch.SchemaError, match="name"):
        sch.parse_tool_spec({"name": "BadName", "parameters": {}})


def test_unknown_top_level_fields_preserved():
    doc = {"name": "extra", "parameters": {}, "results": {}, "vendor": "acme"}
    tool = sch.parse_tool_spec(doc)
    assert dict(tool.metadata) == {"vendor": "acme"}
    assert sch.tool_to_document(tool)["vendor"] == "acme"


def test_validate_ok_call(pool):
    tool = pool.get("update_escalation_status")
    report = sch.validate_call_args(tool, {"status": "in_progress", "ticket_escalation_id": "esc987654321"})
    assert report.ok


def test_validate_enum_violation(pool):
    tool = pool.get("update_escalation_status")
    report = sch.validate_call_args(tool, {"status": "done", "ticket_escalation_id": "esc987654321"})
    assert not report.ok
    assert report.kinds() == {sch.ENUM_VIOLATION}
    assert report.violations[0].path == "status"


def test_validate_missing_required(pool):
    tool = pool.get("update_escalation_status")
    report = sch.validate_call_args(tool, {"status": "in_progress"})
    assert sch.MISSING_REQUIRED in report.kinds()


def test_validate_unknown_param(pool):
    tool = pool.get("get_ticket_details")
    report = sch.validate_call_args(tool, {"support_ticket_identifier": "t1", "bogus": 1})
    assert sch.UNKNOWN_PARAM in report.kinds()


def test_validate_strict_types(pool):
    tool = sch.parse_tool_spec(
        {"name": "typed", "parameters": {"type": "object", "properties": {"n": {"type": "integer"}}, "required": ["n"]}}
    )
    assert not sch.validate_call_args(tool, {"n": "5"}).ok
    assert not sch.validate_call_args(tool, {"n": True}).ok
    assert sch.validate_call_args(tool, {"n": 5}).ok


def test_validate_date_formats_pattern_only():
    tool = sch.parse_tool_spec(
        {
            "name": "dated",
            "parameters": {
                "type": "object",
                "properties": {
                    "d": {"type": "string", "format": "date"},
                    "dt": {"type": "string", "format": "date-time"},
                },
                "required": ["d", "dt"],
            },
        }
    )
    ok = sch.validate_call_args(tool, {"d": "2025-08-27", "dt": "2025-08-27T21:24:05Z"})
    assert ok.ok
    # Pattern-only: a calendar-impossible date still matches the shape.
    assert sch.validate_call_args(tool, {"d": "9999-99-99", "dt": "2025-08-27T21:24:05Z"}).ok
    assert not sch.validate_call_args(tool, {"d": "Aug 27", "dt": "2025-08-27T21:24:05Z"}).ok


def test_validate_recurses_into_arrays(pool):
    tool = pool.get("escalate_ticket_to_specialist")
    args = {
        "specialist_team": "technical",
        "support_case_id": "tkt1",
        "specialist_notes": "notes",
        "attachments": ["not an object"],
    }
    report = sch.validate_call_args(tool, args)
    assert sch.TYPE_MISMATCH in report.kinds()


def test_flatten_search_tickets(pool):
    names = sch.flatten_output_names(pool.get("search_tickets"))
    assert names == {"tickets", "ticket_id", "issue_description", "creation_date", "last_updated"}


def test_flatten_empty_results():
    tool = sch.parse_tool_spec({"name": "quiet", "parameters": {}, "results": {}})
    assert sch.flatten_output_names(tool) == set()


def test_flatten_create_support_ticket(pool):
    names = sch.flatten_output_names(pool.get("create_support_ticket"))
    assert names == {"ticket_id", "creation_date", "status"}


def test_flatten_monotone_under_added_result(pool):
    tool = pool.get("create_support_ticket")
    doc = sch.tool_to_document(tool)
    before = sch.flatten_output_names(tool)
    doc["results"]["properties"]["extra_field"] = {"type": "string"}
    after = sch.flatten_output_names(sch.parse_tool_spec(doc))
    assert before < after


def test_dedup_signature_ignores_description(pool):
    tool = pool.get("create_support_ticket")
    doc = sch.tool_to_document(tool)
    doc["description"] = "Entirely different words."
    doc["name"] = "create_ticket_clone"
    assert sch.dedup_signature(sch.parse_tool_spec(doc)) == sch.dedup_signature(tool)


def test_dedup_signature_sees_type_changes(pool):
    tool = pool.get("get_ticket_details")
    doc = sch.tool_to_document(tool)
    doc["parameters"]["properties"]["support_ticket_identifier"] = {"type": "integer"}
    assert sch.dedup_signature(sch.parse_tool_spec(doc)) != sch.dedup_signature(tool)


def test_dedup_signature_distinct_across_pool(pool):
    create = pool.get("create_support_ticket")
    get = pool.get("get_ticket_details")
    assert sch.dedup_signature(create) != sch.dedup_signature(get)


def test_roundtrip_identity_on_pool(pool):
    for tool in pool.tools:
        assert sch.parse_tool_spec(sch.tool_to_json(tool)) == tool


def _random_schema(rng: random.Random, depth: int = 0) -> dict:
    choices = ["string", "integer", "number", "boolean"]
    if depth < 2:
        choices += ["object", "array", "date", "date-time"]
    tag = rng.choice(choices)
    if tag == "object":
        return {
            "type": "object",
            "properties": {f"f{i}": _random_schema(rng, depth + 1) for i in range(rng.randint(1, 3))},
        }
    if tag == "array":
        return {"type": "array", "items": _random_schema(rng, depth + 1)}
    if tag in ("date", "date-time"):
        return {"type": "string", "format": tag}
    doc: dict = {"type": tag}
    if tag == "string" and rng.random() < 0.4:
        doc["enum"] = [f"v{i}" for i in range(rng.randint(1, 4))]
        if rng.random() < 0.5:
            doc["default"] = doc["enum"][0]
    return doc


def random_tool(rng: random.Random, name: str) -> sch.ToolSpec:
    params = {f"p{i}": _random_schema(rng) for i in range(rng.randint(0, 5))}
    required = [p for p in params if rng.random() < 0.6]
    results = {f"r{i}": _random_schema(rng) for i in range(rng.randint(0, 4))}
    return sch.parse_tool_spec(
        {
            "name": name,
            "description": "randomized tool",
            "parameters": {"type": "object", "properties": params, "required": required},
            "results": {"type": "object", "properties": results},
        }
    )


def test_generator_validator_agreement_property():
    rng = random.Random(2024)
    for case in range(200):
        tool = random_tool(rng, f"tool_{case}")
        args = sch.conformant_args(tool)
        report = sch.validate_call_args(tool, args)
        assert report.ok, f"case {case}: {report.violations}"


def test_random_value_generator_conforms():
    rng = random.Random(99)
    for case in range(200):
        tool = random_tool(rng, f"tool_{case}")
        result = sch.generate_conformant_result(tool, rng)
        pseudo = sch.ToolSpec(
            name=tool.name,
            description="",
            parameters=tool.results,
            required=frozenset(n for n, _ in tool.results),
            results=(),
        )
        assert sch.validate_call_args(pseudo, result).ok


def test_roundtrip_property_on_random_tools():
    rng = random.Random(7)
    for case in range(100):
        tool = random_tool(rng, f"rt_{case}")
        assert sch.parse_tool_spec(json.loads(sch.tool_to_json(tool))) == tool
