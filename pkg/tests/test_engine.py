from __future__ import annotations

import json
import re

import pytest

from toolweave import schema as sch
from toolweave.engine import (
    ASSISTANT_TEXT,
    ASSISTANT_TOOL_CALL,
    SYSTEM,
    TOOL_RESPONSE,
    USER,
    DialogueTranscript,
    EngineError,
    EngineRejected,
    MemoryState,
    Turn,
    simulate_tool_response,
    synthesize_dialogue,
    transcript_from_record,
    transcript_to_record,
    update_memory,
)
from toolweave.gateway import Gateway, GatewayConfig
from toolweave.planner import (
    ASSISTANT_RESPONSE_TOOL,
    CALL_TOOL,
    USER_UTTERANCE,
    DialoguePlan,
    PlanStep,
    derived_marker,
    parse_marker,
    user_marker,
)
from toolweave.sampler import LINEAR, GoalRecord, WorkflowSample
from toolweave.scripted import ScriptedProvider

from conftest import build_support_plan, json_response, load_support_pool, static_gateway, support_goal


@pytest.fixture(scope="module")
def pool():
    return load_support_pool()


def _recorded_transcript(tmp_path, pool, plan, seed=11):
    cassette = tmp_path / "engine_cassette.jsonl"
    recorder = Gateway(ScriptedProvider(seed=seed), GatewayConfig(mode="record", cassette_path=str(cassette)))
    recorded = synthesize_dialogue(plan, pool, recorder)
    replayer = Gateway(None, GatewayConfig(mode="replay", cassette_path=str(cassette)))
    replayed = synthesize_dialogue(plan, pool, replayer)
    return recorded, replayed


def test_support_plan_replay_five_calls(tmp_path, pool, support_plan):
    recorded, replayed = _recorded_transcript(tmp_path, pool, support_plan)
    assert transcript_to_record(replayed) == transcript_to_record(recorded)
    calls = replayed.tool_calls()
    assert [c.tool_name for c in calls] == [
        "create_support_ticket",
        "get_ticket_details",
        "search_tickets",
        "escalate_ticket_to_specialist",
        "update_escalation_status",
    ]


def test_marker_arguments_byte_equal_memory(tmp_path, pool, support_plan):
    _, transcript = _recorded_transcript(tmp_path, pool, support_plan)
    responses: dict[str, dict] = {}
    steps = {s.step_idx: s for s in support_plan.steps}
    for turn in transcript.turns:
        if turn.kind == TOOL_RESPONSE:
            responses[turn.tool_name] = turn.result_map()
        if turn.kind == ASSISTANT_TOOL_CALL:
            step = steps[turn.plan_step_idx]
            args = turn.arg_map()
            for dotted, marker in step.params:
                param = dotted.split(".", 1)[1]
                kind, src_tool, fld = parse_marker(marker)
                if kind == "derived":
                    expected = responses[src_tool][fld]
                    assert args[param] == expected
                    assert json.dumps(args[param]) == json.dumps(expected)


def test_get_args_carry_created_ticket_id(tmp_path, pool, support_plan):
    _, transcript = _recorded_transcript(tmp_path, pool, support_plan)
    calls = transcript.tool_calls()
    create_response = next(
        t for t in transcript.turns if t.kind == TOOL_RESPONSE and t.tool_name == "create_support_ticket"
    )
    get_call = next(c for c in calls if c.tool_name == "get_ticket_details")
    assert get_call.arg_map()["support_ticket_identifier"] == create_response.result_map()["ticket_id"]


def test_plan_without_calls_has_no_tool_turns(pool, scripted_gateway):
    goal = support_goal()
    workflow = WorkflowSample(pattern_type=LINEAR, tool_path=("create_support_ticket",))
    goal = GoalRecord(
        workflow=workflow, goal_text=goal.goal_text, coherence=1, relevance=1,
        dataflow_score=0.0, length_bonus=0.0, final_score=1.0, metadata=goal.metadata,
    )
    plan = DialoguePlan(
        goal=goal,
        partitions=(("create_support_ticket",),),
        steps=(
            PlanStep(1, USER_UTTERANCE, subgoal="Just chat, no tools."),
            PlanStep(2, ASSISTANT_RESPONSE_TOOL, tools=("create_support_ticket",), outputs=()),
        ),
        p_clar=0.0,
        seed=1,
    )
    transcript = synthesize_dialogue(plan, pool, scripted_gateway)
    assert transcript.tool_calls() == []


def test_system_time_turn_first_and_seeded(pool, support_plan, scripted_gateway):
    transcript = synthesize_dialogue(support_plan, pool, scripted_gateway)
    first = transcript.turns[0]
    assert first.kind == SYSTEM
    assert re.fullmatch(r"Current time: \d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2}\.", first.content)
    again = synthesize_dialogue(support_plan, pool, scripted_gateway)
    assert again.turns[0].content == first.content
    other_seed = synthesize_dialogue(support_plan, pool, scripted_gateway, seed=999)
    assert other_seed.turns[0].content != first.content


def test_every_plan_step_covered(pool, support_plan, scripted_gateway):
    transcript = synthesize_dialogue(support_plan, pool, scripted_gateway)
    covered = {t.plan_step_idx for t in transcript.turns if t.kind != SYSTEM}
    assert covered == {s.step_idx for s in support_plan.steps}
    indices = [t.plan_step_idx for t in transcript.turns]
    assert indices == sorted(indices)


def test_transcript_record_roundtrip(pool, support_plan, scripted_gateway):
    transcript = synthesize_dialogue(support_plan, pool, scripted_gateway)
    record = transcript_to_record(transcript)
    rebuilt = transcript_from_record(json.loads(json.dumps(record)))
    assert transcript_to_record(rebuilt) == record


# -- simulate_tool_response -----------------------------------------------------


def test_simulated_result_keys_exact(pool, scripted_gateway):
    tool = pool.get("create_support_ticket")
    result = simulate_tool_response(
        tool, {"issue_description": "broken login", "requester_id": "cust1"}, MemoryState(), scripted_gateway
    )
    assert set(result) == {"ticket_id", "creation_date", "status"}


def test_simulated_result_empty_schema(scripted_gateway):
    tool = sch.parse_tool_spec({"name": "fire_and_forget", "parameters": {}, "results": {}})
    result = simulate_tool_response(tool, {}, MemoryState(), scripted_gateway)
    assert result == {}


def test_simulated_result_regenerates_on_schema_violation(pool):
    tool = pool.get("update_escalation_status")
    bad = json_response({"last_updated": "not a datetime"})
    good = json_response({"last_updated": "2025-08-27T21:24:05Z"})
    gw = static_gateway([bad, good])
    result = simulate_tool_response(tool, {"status": "pending", "ticket_escalation_id": "esc1"}, MemoryState(), gw)
    assert result == {"last_updated": "2025-08-27T21:24:05Z"}


def test_simulated_result_two_violations_reject(pool):
    tool = pool.get("update_escalation_status")
    bad = json_response({"last_updated": "nope"})
    gw = static_gateway([bad, bad])
    with pytest.raises(EngineRejected):
        simulate_tool_response(tool, {"status": "pending", "ticket_escalation_id": "esc1"}, MemoryState(), gw)


def test_simulate_requires_valid_args(pool, scripted_gateway):
    tool = pool.get("update_escalation_status")
    with pytest.raises(EngineError):
        simulate_tool_response(tool, {"status": "nope"}, MemoryState(), scripted_gateway)


# -- memory ----------------------------------------------------------------------


def test_memory_records_tool_outputs(pool):
    memory = MemoryState()
    step = PlanStep(4, CALL_TOOL, tools=("create_support_ticket",))
    result = {"ticket_id": "tkt42", "creation_date": "2025-01-01T00:00:00Z", "status": "open"}
    turn = Turn(
        kind=TOOL_RESPONSE, content=json.dumps(result), plan_step_idx=4,
        tool_name="create_support_ticket", result=tuple(result.items()),
    )
    update_memory(memory, step, turn)
    assert memory.tool_outputs["create_support_ticket.ticket_id"] == "tkt42"
    assert memory.archive == []


def test_memory_user_turn_without_params_only_adds_fact():
    memory = MemoryState()
    step = PlanStep(1, USER_UTTERANCE)
    turn = Turn(kind=USER, content="hello there", plan_step_idx=1)
    update_memory(memory, step, turn, values={})
    assert memory.resolved_params == {}
    assert memory.tool_outputs == {}
    assert memory.facts == ["hello there"]


def test_memory_recall_archives_previous_outputs():
    memory = MemoryState()
    step = PlanStep(2, CALL_TOOL, tools=("probe_tool",))
    first = {"token": "one"}
    second = {"token": "two"}
    update_memory(memory, step, Turn(TOOL_RESPONSE, json.dumps(first), 2, "probe_tool", None, tuple(first.items())))
    update_memory(memory, step, Turn(TOOL_RESPONSE, json.dumps(second), 2, "probe_tool", None, tuple(second.items())))
    assert memory.tool_outputs["probe_tool.token"] == "two"
    assert ("probe_tool.token", "one") in memory.archive


def test_memory_binds_nested_and_array_fields():
    memory = MemoryState()
    step = PlanStep(8, CALL_TOOL, tools=("search_tickets",))
    result = {"tickets": [{"ticket_id": "tkt9", "issue_description": "x"}]}
    update_memory(memory, step, Turn(TOOL_RESPONSE, json.dumps(result), 8, "search_tickets", None, tuple(result.items())))
    assert memory.tool_outputs["search_tickets.tickets"] == result["tickets"]
    assert memory.tool_outputs["search_tickets.ticket_id"] == "tkt9"


def test_repeated_tool_plan_archives_previous_outputs(pool, scripted_gateway):
    # A plan that calls the same tool in two segments: the engine overwrites
    # memory bindings while archiving the superseded values.
    from toolweave.planner import user_marker

    c = "create_support_ticket"
    workflow = WorkflowSample(pattern_type=LINEAR, tool_path=(c, c))
    goal = GoalRecord(
        workflow=workflow, goal_text="open two tickets", coherence=1, relevance=1,
        dataflow_score=0.0, length_bonus=0.0, final_score=1.0, metadata=(("weights", (0.5, 0.8, 0.3)),),
    )
    call_params = (
        (f"{c}.issue_description", user_marker(c, "issue_description")),
        (f"{c}.requester_id", user_marker(c, "requester_id")),
    )
    steps = (
        PlanStep(1, USER_UTTERANCE, subgoal="first ticket", params=call_params),
        PlanStep(2, CALL_TOOL, tools=(c,), params=call_params),
        PlanStep(3, ASSISTANT_RESPONSE_TOOL, tools=(c,), outputs=(f"{c}.ticket_id",)),
        PlanStep(4, USER_UTTERANCE, subgoal="now a second identical ticket"),
        PlanStep(5, CALL_TOOL, tools=(c,), params=call_params),
        PlanStep(6, ASSISTANT_RESPONSE_TOOL, tools=(c,), outputs=(f"{c}.ticket_id",)),
    )
    plan = DialoguePlan(goal=goal, partitions=((c,), (c,)), steps=steps, p_clar=0.0, seed=6)
    transcript = synthesize_dialogue(plan, pool, scripted_gateway)
    responses = [t for t in transcript.turns if t.kind == TOOL_RESPONSE]
    assert len(responses) == 2
    # Rebuild memory over the transcript to observe the archive.
    memory = MemoryState()
    for step, turn in ((plan.steps[1], responses[0]), (plan.steps[4], responses[1])):
        update_memory(memory, step, turn)
    assert memory.tool_outputs[f"{c}.ticket_id"] == responses[1].result_map()["ticket_id"]
    archived = dict(memory.archive)
    assert archived[f"{c}.ticket_id"] == responses[0].result_map()["ticket_id"]


def test_unresolved_marker_is_contract_breach(pool, scripted_gateway):
    goal = support_goal()
    workflow = WorkflowSample(pattern_type=LINEAR, tool_path=("get_ticket_details",))
    goal = GoalRecord(
        workflow=workflow, goal_text="details only", coherence=1, relevance=1,
        dataflow_score=0.0, length_bonus=0.0, final_score=1.0, metadata=goal.metadata,
    )
    # Marker points at a tool this plan never calls: validate_plan already
    # rejects it, which the engine surfaces as a contract breach.
    plan = DialoguePlan(
        goal=goal,
        partitions=(("get_ticket_details",),),
        steps=(
            PlanStep(1, USER_UTTERANCE, subgoal="fetch it"),
            PlanStep(2, CALL_TOOL, tools=("get_ticket_details",),
                     params=(("get_ticket_details.support_ticket_identifier",
                              derived_marker("create_support_ticket", "ticket_id")),)),
            PlanStep(3, ASSISTANT_RESPONSE_TOOL, tools=("get_ticket_details",), outputs=()),
        ),
        p_clar=0.0,
        seed=1,
    )
    with pytest.raises(EngineError):
        synthesize_dialogue(plan, pool, scripted_gateway)


def test_transcript_invariants():
    with pytest.raises(EngineError):
        DialogueTranscript(turns=(), plan_ref="p", seed=0)
    with pytest.raises(EngineError):
        DialogueTranscript(
            turns=(Turn(ASSISTANT_TEXT, "hi", 1),), plan_ref="p", seed=0
        )
    with pytest.raises(EngineError):
        DialogueTranscript(
            turns=(
                Turn(USER, "hi", 1),
                Turn(TOOL_RESPONSE, "{}", 1, "tool_x", None, ()),
            ),
            plan_ref="p",
            seed=0,
        )


def test_user_agent_failure_twice_rejects_dialogue(pool):
    plan = build_support_plan()
    gw = static_gateway(["no structure here at all", "still not structured"])
    with pytest.raises(EngineRejected):
        synthesize_dialogue(plan, pool, gw)


def test_user_agent_invalid_values_regenerated(pool, support_plan):
    # First response misses the requester_id value; the engine retries once.
    bad = json_response({"utterance": "hello", "values": {}})
    import toolweave.scripted as scripted_mod
    from toolweave.gateway import ChatResponse

    class HybridProvider(scripted_mod.ScriptedProvider):
        def __init__(self):
            super().__init__(seed=11)
            self.injected = False

        def chat(self, req):
            prompt = req.messages[-1][1]
            if "tag=user_utterance" in prompt and not self.injected:
                self.injected = True
                return ChatResponse(content=bad, finish_reason="stop")
            return super().chat(req)

    from toolweave.gateway import Gateway, GatewayConfig

    gw = Gateway(HybridProvider(), GatewayConfig(mode="live"))
    transcript = synthesize_dialogue(support_plan, pool, gw)
    assert len(transcript.tool_calls()) == 5
