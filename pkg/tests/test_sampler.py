from __future__ import annotations

import itertools
import random

import numpy as np
import pytest

from toolweave import schema as sch
from toolweave.forge import Edge, ToolGraph
from toolweave.sampler import (
    CONDITIONAL,
    FAN,
    LINEAR,
    DataflowScorer,
    GoalRecord,
    WorkflowSample,
    find_conditional_patterns,
    find_fan_patterns,
    find_linear_paths,
    mmr_select,
    score_goal,
    select_diverse,
    synthesize_goal,
)

from conftest import build_ecommerce_graph, json_response, static_gateway


def _tool(name, inputs, outputs):
    return sch.parse_tool_spec(
        {
            "name": name,
            "description": f"{name} op.",
            "parameters": {"type": "object", "properties": {k: {"type": "string"} for k in inputs}, "required": list(inputs)},
            "results": {"type": "object", "properties": {k: {"type": "string"} for k in outputs}},
        }
    )


def chain_graph() -> ToolGraph:
    pool = sch.ToolPool(
        "chain",
        (
            _tool("tool_a", [], ["token_ab"]),
            _tool("tool_b", ["token_ab"], ["token_bc"]),
            _tool("tool_c", ["token_bc"], []),
        ),
    )
    edges = (
        Edge("tool_a", "token_ab", "tool_b", "token_ab"),
        Edge("tool_b", "token_bc", "tool_c", "token_bc"),
    )
    return ToolGraph(nodes=pool, edges=edges)


def test_beam_finds_full_chain(scripted_gateway):
    graph = chain_graph()
    scorer = DataflowScorer(graph, scripted_gateway)
    samples = find_linear_paths(graph, beam_width=1, max_depth=3, scorer=scorer)
    paths = {s.tool_path for s in samples}
    assert ("tool_a", "tool_b", "tool_c") in paths


def test_beam_depth_cap(scripted_gateway):
    graph = chain_graph()
    scorer = DataflowScorer(graph, scripted_gateway)
    samples = find_linear_paths(graph, beam_width=1, max_depth=2, scorer=scorer)
    paths = {s.tool_path for s in samples}
    assert paths == {("tool_a", "tool_b"), ("tool_b", "tool_c")}


def test_beam_on_ecommerce_graph(scripted_gateway):
    graph = build_ecommerce_graph()
    scorer = DataflowScorer(graph, scripted_gateway)
    stats: dict = {}
    samples = find_linear_paths(graph, beam_width=6, max_depth=4, scorer=scorer, stats=stats)
    paths = {s.tool_path for s in samples}
    assert ("get_order", "set_mode", "ship_local", "save_track") in paths
    assert stats["max_path_len"] <= 4
    assert stats["max_frontier"] <= 6
    for sample in samples:
        sample.check(graph)


def test_beam_never_repeats_nodes(scripted_gateway):
    graph = build_ecommerce_graph()
    scorer = DataflowScorer(graph, scripted_gateway)
    for sample in find_linear_paths(graph, beam_width=8, max_depth=4, scorer=scorer):
        assert len(set(sample.tool_path)) == len(sample.tool_path)


def test_fan_patterns_on_ecommerce(scripted_gateway):
    graph = build_ecommerce_graph()
    samples = find_fan_patterns(graph)
    wanted = ("get_order", ("calc_risk", "check_stock"), "sync_status")
    assert any(s.fan_branches == wanted for s in samples)
    for sample in samples:
        sample.check(graph)


def test_fan_empty_when_no_common_children():
    pool = sch.ToolPool(
        "star",
        (_tool("hub", [], ["x", "y"]), _tool("leaf_one", ["x"], []), _tool("leaf_two", ["y"], [])),
    )
    graph = ToolGraph(
        nodes=pool,
        edges=(Edge("hub", "x", "leaf_one", "x"), Edge("hub", "y", "leaf_two", "y")),
    )
    assert find_fan_patterns(graph) == []


def test_fan_emits_all_combination_sizes():
    # Brute-force oracle on a 5-node fixture: three successors all feed one merge.
    pool = sch.ToolPool(
        "wide",
        (
            _tool("start", [], ["a", "b", "c"]),
            _tool("mid_a", ["a"], ["z1"]),
            _tool("mid_b", ["b"], ["z2"]),
            _tool("mid_c", ["c"], ["z3"]),
            _tool("merge", ["z1", "z2", "z3"], []),
        ),
    )
    edges = (
        Edge("start", "a", "mid_a", "a"),
        Edge("start", "b", "mid_b", "b"),
        Edge("start", "c", "mid_c", "c"),
        Edge("mid_a", "z1", "merge", "z1"),
        Edge("mid_b", "z2", "merge", "z2"),
        Edge("mid_c", "z3", "merge", "z3"),
    )
    graph = ToolGraph(nodes=pool, edges=edges)
    samples = find_fan_patterns(graph)
    got = {s.fan_branches for s in samples}

    mids = ["mid_a", "mid_b", "mid_c"]
    expected = set()
    for size in (2, 3):
        for combo in itertools.combinations(mids, size):
            expected.add(("start", tuple(sorted(combo)), "merge"))
    assert got == expected


def test_conditional_on_ecommerce(scripted_gateway):
    graph = build_ecommerce_graph()
    samples = [s for s in find_conditional_patterns(graph) if s.decision and s.decision[0] == "set_mode"]
    assert samples
    branch_maps = {tuple(sorted(s.branch_map().items())) for s in samples}
    assert (("intl", "ship_intl"), ("local", "ship_local")) in branch_maps
    chosen = {(s.meta()["decision_value"], s.tool_path[1]) for s in samples}
    assert ("local", "ship_local") in chosen
    assert ("intl", "ship_intl") in chosen
    for sample in samples:
        sample.check(graph)


def test_conditional_filters_id_like_outputs():
    producer = sch.parse_tool_spec(
        {
            "name": "make_batch",
            "parameters": {"type": "object", "properties": {}},
            "results": {
                "type": "object",
                "properties": {"batch_id": {"type": "string", "enum": ["x", "y"]}},
            },
        }
    )
    pool = sch.ToolPool("d", (producer, _tool("next_one", ["batch_id"], []), _tool("next_two", ["batch_id"], [])))
    graph = ToolGraph(
        nodes=pool,
        edges=(Edge("make_batch", "batch_id", "next_one", "batch_id"), Edge("make_batch", "batch_id", "next_two", "batch_id")),
    )
    assert find_conditional_patterns(graph) == []


def test_conditional_needs_two_branches():
    producer = sch.parse_tool_spec(
        {
            "name": "probe",
            "parameters": {"type": "object", "properties": {}},
            "results": {"type": "object", "properties": {"flag": {"type": "boolean"}, "next_in": {"type": "string"}}},
        }
    )
    pool = sch.ToolPool("d", (producer, _tool("only_branch", ["next_in"], [])))
    graph = ToolGraph(nodes=pool, edges=(Edge("probe", "next_in", "only_branch", "next_in"),))
    assert find_conditional_patterns(graph) == []


def test_score_goal_formula(scripted_gateway):
    graph = chain_graph()
    scorer = DataflowScorer(graph, scripted_gateway)
    workflow = WorkflowSample(pattern_type=LINEAR, tool_path=("tool_a", "tool_b"))
    gw = static_gateway([json_response({"coherence": 2, "relevance": 2})])
    record = score_goal(workflow, "link the tokens", gw, scorer, max_depth=4)
    assert record is not None
    assert (record.coherence, record.relevance) == (2, 2)
    expected = 0.5 * 4 + 0.8 * record.dataflow_score + 0.3 * record.length_bonus
    assert record.final_score == pytest.approx(expected, abs=1e-12)
    assert record.length_bonus == pytest.approx(0.0)
    assert record.recompose_score() == pytest.approx(record.final_score, abs=1e-9)


def test_score_goal_zero_components(scripted_gateway):
    pool = sch.ToolPool("d", (_tool("lone_a", [], []), _tool("lone_b", ["k"], [])))
    graph = ToolGraph(nodes=pool, edges=())
    scorer = DataflowScorer(graph, scripted_gateway)
    workflow = WorkflowSample(pattern_type=LINEAR, tool_path=("lone_a", "lone_b"))
    gw = static_gateway([json_response({"coherence": 0, "relevance": 0})])
    record = score_goal(workflow, "noop goal", gw, scorer, max_depth=2)
    assert record.final_score == 0.0


def test_example_arithmetic_three_point_one():
    record = GoalRecord(
        workflow=WorkflowSample(pattern_type=LINEAR, tool_path=("a", "b")),
        goal_text="g",
        coherence=2,
        relevance=2,
        dataflow_score=1.0,
        length_bonus=1.0,
        final_score=3.1,
        metadata=(("weights", (0.5, 0.8, 0.3)),),
    )
    assert record.recompose_score() == pytest.approx(3.1, abs=1e-9)


def test_score_goal_rejects_out_of_range_after_retry(scripted_gateway):
    graph = chain_graph()
    scorer = DataflowScorer(graph, scripted_gateway)
    workflow = WorkflowSample(pattern_type=LINEAR, tool_path=("tool_a", "tool_b"))
    gw = static_gateway([json_response({"coherence": 7, "relevance": 0}), json_response({"coherence": -9, "relevance": 1})])
    assert score_goal(workflow, "bad judge", gw, scorer) is None


def _record(text: str, score: float, pattern: str = LINEAR, idx: int = 0) -> GoalRecord:
    return GoalRecord(
        workflow=WorkflowSample(pattern_type=pattern, tool_path=(f"t{idx}_a", f"t{idx}_b")),
        goal_text=text,
        coherence=1,
        relevance=1,
        dataflow_score=0.0,
        length_bonus=0.0,
        final_score=score,
        metadata=(("weights", (0.5, 0.8, 0.3)),),
    )


def test_mmr_k1_singleton_top_score(scripted_gateway):
    records = [_record("first goal", 1.0), _record("second goal", 5.0), _record("third goal", 3.0)]
    out = mmr_select(records, k=1, lam=0.7, gateway=scripted_gateway)
    assert [r.goal_text for r in out] == ["second goal"]


def test_mmr_lambda_one_equals_topk(scripted_gateway):
    rng = random.Random(4)
    records = [_record(f"goal about topic {i} {rng.random()}", rng.uniform(0, 5), idx=i) for i in range(8)]
    out = mmr_select(records, k=4, lam=1.0, gateway=scripted_gateway)
    expected = sorted(records, key=lambda r: -r.final_score)[:4]
    assert [r.goal_text for r in out] == [r.goal_text for r in expected]


def test_mmr_duplicate_selected_last_at_lambda_zero(scripted_gateway):
    records = [
        _record("alpha beta gamma delta", 5.0, idx=0),
        _record("alpha beta gamma delta", 4.9, idx=1),
        _record("completely unrelated wording here", 0.5, idx=2),
    ]
    out = mmr_select(records, k=3, lam=0.0, gateway=scripted_gateway)
    assert [r.final_score for r in out] == [5.0, 0.5, 4.9]


def _naive_mmr(records, k, lam, gateway):
    """Independent greedy reimplementation used as the oracle."""
    vectors = np.asarray([v.values for v in gateway.embed_texts([r.goal_text for r in records])])
    vectors = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    scores = np.asarray([r.final_score for r in records])
    span = scores.max() - scores.min()
    norm = np.ones_like(scores) if span == 0 else (scores - scores.min()) / span
    chosen: list[int] = []
    rest = list(range(len(records)))
    best = max(rest, key=lambda i: (scores[i], -i))
    chosen.append(best)
    rest.remove(best)
    while rest and len(chosen) < k:
        def value(i):
            sim = max(float(vectors[i] @ vectors[j]) for j in chosen)
            return lam * float(norm[i]) - (1 - lam) * sim
        pick = max(rest, key=lambda i: (value(i), -i))
        chosen.append(pick)
        rest.remove(pick)
    return [records[i] for i in chosen]


def test_mmr_matches_bruteforce_oracle_on_small_sets(scripted_gateway):
    rng = random.Random(12)
    vocabulary = ["order", "ticket", "refund", "search", "escalate", "close", "open", "status"]
    for trial in range(30):
        n = rng.randint(1, 8)
        records = [
            _record(" ".join(rng.choice(vocabulary) for _ in range(4)), rng.uniform(0, 5), idx=i)
            for i in range(n)
        ]
        k = rng.randint(1, n)
        lam = rng.choice([0.0, 0.3, 0.7, 1.0])
        fast = mmr_select(records, k, lam, scripted_gateway)
        slow = _naive_mmr(records, k, lam, scripted_gateway)
        assert [r.goal_text for r in fast] == [r.goal_text for r in slow], f"trial {trial}"
        assert len(fast) == min(k, n)
        assert len({id(r) for r in fast}) == len(fast)


def test_select_diverse_fan_conditional_bypass(scripted_gateway):
    records = [
        _record("linear goal one", 4.0, idx=0),
        _record("linear goal two", 3.0, idx=1),
        _record("fan goal", 0.1, pattern=FAN, idx=2),
        _record("conditional goal", 0.2, pattern=CONDITIONAL, idx=3),
    ]
    out = select_diverse(records, k=1, lam=0.7, gateway=scripted_gateway)
    texts = [r.goal_text for r in out]
    assert texts[0] == "linear goal one"
    assert "fan goal" in texts and "conditional goal" in texts
    assert "linear goal two" not in texts


def test_synthesize_goal_deterministic_and_mentions_branches(scripted_gateway):
    graph = build_ecommerce_graph()
    conditionals = [s for s in find_conditional_patterns(graph) if s.decision and s.decision[0] == "set_mode"]
    workflow = conditionals[0]
    text_one = synthesize_goal(workflow, graph.nodes, scripted_gateway)
    text_two = synthesize_goal(workflow, graph.nodes, scripted_gateway)
    assert text_one == text_two
    assert "ship local" in text_one and "ship intl" in text_one


def test_select_diverse_with_no_linear_records(scripted_gateway):
    records = [
        _record("fan goal only", 0.5, pattern=FAN, idx=0),
        _record("conditional goal only", 0.7, pattern=CONDITIONAL, idx=1),
    ]
    out = select_diverse(records, k=3, lam=0.7, gateway=scripted_gateway)
    assert [r.goal_text for r in out] == ["fan goal only", "conditional goal only"]


def test_fan_branch_cap_respected():
    hub_outputs = {f"o{i}": {"type": "string"} for i in range(6)}
    tools = [_tool("hub6", [], list(hub_outputs))]
    edges = []
    for i in range(6):
        tools.append(_tool(f"leaf6_{i}", [f"o{i}"], [f"z{i}"]))
        edges.append(Edge("hub6", f"o{i}", f"leaf6_{i}", f"o{i}"))
    merge_inputs = [f"z{i}" for i in range(6)]
    tools.append(_tool("merge6", merge_inputs, []))
    for i in range(6):
        edges.append(Edge(f"leaf6_{i}", f"z{i}", "merge6", f"z{i}"))
    pool = sch.ToolPool("wide6", tuple(tools))
    graph = ToolGraph(nodes=pool, edges=tuple(edges))
    samples = find_fan_patterns(graph)
    assert samples
    assert max(len(s.fan_branches[1]) for s in samples) <= 4
