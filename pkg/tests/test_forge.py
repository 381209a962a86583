from __future__ import annotations

import json

import numpy as np
import pytest

from toolweave import schema as sch
from toolweave.forge import (
    Edge,
    ForgeError,
    RejectionLog,
    ToolGraph,
    construct_tool_graph,
    default_synthesis_plan,
    graph_from_records,
    graph_to_records,
    load_synthesis_plan,
    plan_from_document,
    refine_candidate,
    run_synthesis_plan,
)
from toolweave.gateway import Cassette, Gateway, GatewayConfig, HashingEmbedder
from toolweave.knowledge import load_shipped_context
from toolweave.scripted import ScriptedProvider

from conftest import json_response, load_support_pool, static_gateway


def test_plan_file_roundtrip(tmp_path):
    doc = {
        "steps": [
            {"name": "Seed Generation", "num_to_generate": 8},
            {"name": "Entity Expansion", "num_to_generate": 8},
            {"name": "Schema Enrichment", "num_to_generate": 5},
            {"name": "Connection Discovery", "num_to_generate": 8},
            {"name": "Pattern Expansion", "num_to_generate": 5},
        ]
    }
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    plan = load_synthesis_plan(path)
    assert [s.num_to_generate for s in plan.steps] == [8, 8, 5, 8, 5]
    assert plan == default_synthesis_plan()


def test_plan_rejects_unknown_stage():
    with pytest.raises(ForgeError):
        plan_from_document({"steps": [{"name": "Mystery Stage", "num_to_generate": 3}]})


def _tool_doc(name, params=None, required=None, results=None, description="A tool."):
    return {
        "name": name,
        "description": description,
        "parameters": {"type": "object", "properties": params or {}, "required": required or []},
        "results": {"type": "object", "properties": results or {}},
    }


def test_full_curriculum_scripted(scripted_gateway):
    ctx = load_shipped_context("customer_support")
    pool, rejections = run_synthesis_plan(ctx, default_synthesis_plan(), scripted_gateway)
    assert 1 <= len(pool.tools) <= 34
    assert len(set(pool.names())) == len(pool.tools)
    for _name, _stage, reason in rejections.entries:
        assert reason in ("lexical_dup", "structural_dup", "semantic_dup", "parse_fail", "invariant_fail", "llm_reject")


def test_single_seed_step_single_tool():
    doc = _tool_doc("ping_service", results={"pong_id": {"type": "string"}})
    gw = static_gateway([json_response([doc]), json_response(doc)])
    ctx = load_shipped_context("customer_support")
    plan = plan_from_document({"steps": [{"name": "Seed Generation", "num_to_generate": 1}]})
    pool, rejections = run_synthesis_plan(ctx, plan, gw)
    assert pool.names() == ["ping_service"]
    assert rejections.entries == []


def test_structural_duplicate_forced():
    # Same parameter/result structure under two names: second one is rejected.
    first = _tool_doc("alpha_fetch", params={"record_id": {"type": "string"}}, required=["record_id"],
                      results={"payload": {"type": "string"}})
    second = _tool_doc("beta_fetch", params={"record_id": {"type": "string"}}, required=["record_id"],
                       results={"payload": {"type": "string"}}, description="Different words entirely.")
    gw = static_gateway([json_response([first, second]), json_response(first)])
    ctx = load_shipped_context("customer_support")
    plan = plan_from_document({"steps": [{"name": "Seed Generation", "num_to_generate": 2}]})
    pool, rejections = run_synthesis_plan(ctx, plan, gw)
    assert pool.names() == ["alpha_fetch"]
    assert ("beta_fetch", "Seed Generation", "structural_dup") in rejections.entries


def test_lexical_duplicate(support_pool, scripted_gateway):
    candidate = support_pool.get("create_support_ticket")
    refined, reason = refine_candidate(candidate, support_pool, scripted_gateway)
    assert refined is None
    assert reason == "lexical_dup"


def test_semantic_duplicate_above_threshold(scripted_gateway):
    base_doc = _tool_doc(
        "create_invoice_record",
        params={"amount": {"type": "number"}},
        required=["amount"],
        results={"invoice_id": {"type": "string"}},
        description="Creates a new invoice record for a customer account in the billing system.",
    )
    near_doc = _tool_doc(
        "create_invoice_records",
        params={"amount": {"type": "number"}, "note": {"type": "string"}},
        required=["amount"],
        results={"invoice_id": {"type": "string"}},
        description="Creates a new invoice record for a customer account in the billing system.",
    )
    base = sch.parse_tool_spec(base_doc)
    near = sch.parse_tool_spec(near_doc)
    embedder = HashingEmbedder()
    va, vb = embedder.embed([f"{base.name}: {base.description}", f"{near.name}: {near.description}"])
    sim = float(np.dot(va, vb))
    assert sim >= 0.92, f"fixture pair must clear the threshold, got {sim}"

    pool = sch.ToolPool("billing", (base,))
    refined, reason = refine_candidate(near, pool, scripted_gateway)
    assert refined is None
    assert reason == "semantic_dup"


def test_echo_outputs_removed(scripted_gateway):
    candidate = sch.parse_tool_spec(
        _tool_doc(
            "register_request",
            params={"requester_id": {"type": "string"}},
            required=["requester_id"],
            results={"requester_id": {"type": "string"}, "request_id": {"type": "string"}},
        )
    )
    pool = sch.ToolPool("d", ())
    refined, reason = refine_candidate(candidate, pool, scripted_gateway)
    assert reason is None
    assert "requester_id" not in sch.flatten_output_names(refined)
    assert "request_id" in sch.flatten_output_names(refined)


def test_refine_idempotent_structurally(scripted_gateway):
    candidate = sch.parse_tool_spec(
        _tool_doc(
            "fetch_record",
            params={"record_id": {"type": "string"}},
            required=["record_id"],
            results={"payload": {"type": "string"}},
            description="fetches a record",
        )
    )
    empty = sch.ToolPool("d", ())
    once, reason = refine_candidate(candidate, empty, scripted_gateway)
    assert reason is None
    twice, reason = refine_candidate(once, empty, scripted_gateway)
    assert reason is None
    assert sch.dedup_signature(twice) == sch.dedup_signature(once)
    assert twice.name == once.name


def test_refinement_parse_failure_rejected(support_pool):
    candidate = sch.parse_tool_spec(_tool_doc("fresh_tool", results={"x": {"type": "string"}}))
    gw = static_gateway(["no json in sight", "still no json"])
    refined, reason = refine_candidate(candidate, sch.ToolPool("d", ()), gw)
    assert refined is None
    assert reason == "parse_fail"


def test_exact_name_edge_confirmed(scripted_gateway):
    producer = sch.parse_tool_spec(_tool_doc("make_ticket", results={"ticket_id": {"type": "string"}}))
    consumer = sch.parse_tool_spec(
        _tool_doc("close_ticket", params={"ticket_id": {"type": "string"}}, required=["ticket_id"])
    )
    pool = sch.ToolPool("d", (producer, consumer))
    graph = construct_tool_graph(pool, scripted_gateway, semantic_mode=False)
    assert graph.has_edge("make_ticket", "close_ticket")
    edge = graph.edges_between("make_ticket", "close_ticket")[0]
    assert (edge.output_name, edge.input_name, edge.validation) == ("ticket_id", "ticket_id", "exact_name")


def test_support_pool_exact_name_mode_links_create_to_update(support_pool, scripted_gateway):
    graph = construct_tool_graph(support_pool, scripted_gateway, semantic_mode=False)
    edges = graph.edges_between("create_support_ticket", "update_escalation_status")
    assert any(e.output_name == "status" and e.input_name == "status" for e in edges)
    for edge in graph.edges:
        assert edge.from_tool != edge.to_tool
        assert edge.output_name in sch.flatten_output_names(support_pool.get(edge.from_tool))
        assert edge.input_name in support_pool.get(edge.to_tool).param_map()


def test_validator_rejection_logged(support_pool):
    producer = sch.parse_tool_spec(_tool_doc("make_thing", results={"shared_name": {"type": "string"}}))
    consumer = sch.parse_tool_spec(
        _tool_doc("use_thing", params={"shared_name": {"type": "string"}}, required=["shared_name"])
    )
    pool = sch.ToolPool("d", (producer, consumer))
    log = RejectionLog()
    gw = static_gateway([json_response([False])])
    graph = construct_tool_graph(pool, gw, semantic_mode=False, rejection_log=log)
    assert graph.edges == ()
    assert ("make_thing.shared_name->use_thing.shared_name", "graph", "llm_reject") in log.entries


def test_graph_invariants_rejected_on_bad_edges(support_pool):
    with pytest.raises(ForgeError):
        ToolGraph(nodes=support_pool, edges=(Edge("create_support_ticket", "nope", "get_ticket_details", "support_ticket_identifier"),))
    with pytest.raises(ForgeError):
        ToolGraph(nodes=support_pool, edges=(Edge("create_support_ticket", "status", "create_support_ticket", "category"),))


def test_graph_record_roundtrip(support_pool, scripted_gateway):
    graph = construct_tool_graph(support_pool, scripted_gateway, semantic_mode=False)
    records = graph_to_records(graph)
    rebuilt = graph_from_records(support_pool, records)
    assert rebuilt.edges == graph.edges


def test_pipeline_determinism_record_then_replay(tmp_path):
    ctx = load_shipped_context("logistics")
    plan = plan_from_document(
        {"steps": [{"name": "Seed Generation", "num_to_generate": 4}, {"name": "Connection Discovery", "num_to_generate": 3}]}
    )
    cassette_path = tmp_path / "cassette.jsonl"
    recorder = Gateway(ScriptedProvider(seed=21), GatewayConfig(mode="record", cassette_path=str(cassette_path)))
    pool_a, _ = run_synthesis_plan(ctx, plan, recorder)
    graph_a = construct_tool_graph(pool_a, recorder)

    replayer = Gateway(None, GatewayConfig(mode="replay", cassette_path=str(cassette_path)))
    pool_b, _ = run_synthesis_plan(ctx, plan, replayer)
    graph_b = construct_tool_graph(pool_b, replayer)

    assert [sch.tool_to_json(t) for t in pool_a.tools] == [sch.tool_to_json(t) for t in pool_b.tools]
    assert graph_to_records(graph_a) == graph_to_records(graph_b)


def test_generation_retries_malformed_response_with_correction():
    doc = _tool_doc("retry_me", results={"out_id": {"type": "string"}})
    gw = static_gateway(["definitely not json", json_response([doc]), json_response(doc)])
    ctx = load_shipped_context("customer_support")
    plan = plan_from_document({"steps": [{"name": "Seed Generation", "num_to_generate": 1}]})
    pool, rejections = run_synthesis_plan(ctx, plan, gw)
    assert pool.names() == ["retry_me"]


def test_all_steps_empty_is_hard_error():
    gw = static_gateway(["no json"] * 3)
    ctx = load_shipped_context("customer_support")
    plan = plan_from_document({"steps": [{"name": "Seed Generation", "num_to_generate": 1}]})
    with pytest.raises(ForgeError):
        run_synthesis_plan(ctx, plan, gw)


def test_single_pair_validation_mode(support_pool, scripted_gateway):
    # batch_size=1 exercises the single-pair debugging mode.
    graph = construct_tool_graph(support_pool, scripted_gateway, semantic_mode=False, batch_size=1)
    edges = graph.edges_between("create_support_ticket", "update_escalation_status")
    assert any(e.output_name == "status" for e in edges)


def test_enrichment_replaces_by_name(scripted_gateway):
    ctx = load_shipped_context("retail")
    plan = plan_from_document(
        {"steps": [{"name": "Seed Generation", "num_to_generate": 3}, {"name": "Schema Enrichment", "num_to_generate": 2}]}
    )
    pool, _ = run_synthesis_plan(ctx, plan, scripted_gateway)
    # Enrichment emits replacements keyed by name, so the pool does not grow
    # beyond the seed count and enriched tools gain a nested object parameter.
    assert len(pool.tools) == 3
    enriched = [t for t in pool.tools if "routing_options" in t.param_map()]
    assert len(enriched) == 2
    assert all(t.param_map()["routing_options"].type_tag == "object" for t in enriched)
