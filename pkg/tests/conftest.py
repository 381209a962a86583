from __future__ import annotations

import json
from importlib import resources

import pytest

from toolweave import planner
from toolweave import schema as sch
from toolweave.forge import Edge, ToolGraph
from toolweave.gateway import ChatResponse, Gateway, GatewayConfig, HashingEmbedder
from toolweave.planner import (
    ASSISTANT_CLARIFICATION,
    ASSISTANT_RESPONSE_TOOL,
    CALL_TOOL,
    USER_RESPONSE_TO_CLARIFICATION,
    USER_UTTERANCE,
    DialoguePlan,
    PlanStep,
    derived_marker,
    user_marker,
)
from toolweave.sampler import GoalRecord, WorkflowSample
from toolweave.scripted import ScriptedProvider


class StaticProvider:
    """Canned chat responses for tests; embeddings via the hash embedder."""

    embed_model_id = HashingEmbedder.model_id

    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0
        self._embedder = HashingEmbedder()

    def chat(self, req):
        if not self.responses:
            raise AssertionError("StaticProvider exhausted")
        content = self.responses.pop(0)
        self.calls += 1
        return ChatResponse(content=content, finish_reason="stop")

    def embed(self, texts, model_id=None):
        return self._embedder.embed(texts, model_id)


def static_gateway(responses) -> Gateway:
    return Gateway(provider=StaticProvider(responses), config=GatewayConfig(mode="live"))


@pytest.fixture
def scripted_gateway() -> Gateway:
    return Gateway(provider=ScriptedProvider(seed=11), config=GatewayConfig(mode="live"))


def load_support_pool() -> sch.ToolPool:
    ref = resources.files("toolweave").joinpath("fixtures/pools/support_ticket_pool.jsonl")
    tools = tuple(sch.parse_tool_spec(line) for line in ref.read_text(encoding="utf-8").splitlines() if line)
    return sch.ToolPool(domain="Customer Support", tools=tools)


@pytest.fixture
def support_pool() -> sch.ToolPool:
    return load_support_pool()


SUPPORT_PATH = (
    "create_support_ticket",
    "get_ticket_details",
    "search_tickets",
    "escalate_ticket_to_specialist",
    "update_escalation_status",
)

SUPPORT_PARTITIONS = (
    ("create_support_ticket", "get_ticket_details"),
    ("search_tickets",),
    ("escalate_ticket_to_specialist", "update_escalation_status"),
)


def support_goal() -> GoalRecord:
    workflow = WorkflowSample(pattern_type="linear", tool_path=SUPPORT_PATH)
    return GoalRecord(
        workflow=workflow,
        goal_text="Open a support ticket, review its details, and escalate it to a specialist team.",
        coherence=2,
        relevance=2,
        dataflow_score=0.5,
        length_bonus=1.0,
        final_score=0.5 * 4 + 0.8 * 0.5 + 0.3 * 1.0,
        metadata=(("weights", (0.5, 0.8, 0.3)),),
    )


def build_support_plan(p_clar: float = 0.35, seed: int = 101) -> DialoguePlan:
    """Hand-built 15-step plan over the support-ticket pool.

    Mirrors the canonical three-segment structure: create+get, search, and
    escalate+update, with one clarification pair in the first and last
    segments.
    """
    c = "create_support_ticket"
    g = "get_ticket_details"
    s = "search_tickets"
    e = "escalate_ticket_to_specialist"
    u = "update_escalation_status"
    steps = (
        PlanStep(1, USER_UTTERANCE, subgoal="I need to open a support ticket and pull up its full details.",
                 params=(((f"{c}.requester_id"), user_marker(c, "requester_id")),)),
        PlanStep(2, ASSISTANT_CLARIFICATION,
                 params=((f"{c}.issue_description", user_marker(c, "issue_description")),)),
        PlanStep(3, USER_RESPONSE_TO_CLARIFICATION,
                 params=((f"{c}.issue_description", user_marker(c, "issue_description")),)),
        PlanStep(4, CALL_TOOL, tools=(c,), params=(
            (f"{c}.issue_description", user_marker(c, "issue_description")),
            (f"{c}.requester_id", user_marker(c, "requester_id")),
        )),
        PlanStep(5, CALL_TOOL, tools=(g,), params=(
            (f"{g}.support_ticket_identifier", derived_marker(c, "ticket_id")),
        )),
        PlanStep(6, ASSISTANT_RESPONSE_TOOL, tools=(c, g), outputs=(
            f"{c}.ticket_id", f"{c}.creation_date", f"{c}.status",
            f"{g}.customer_id", f"{g}.issue_description", f"{g}.priority", f"{g}.category",
            f"{g}.status", f"{g}.creation_date", f"{g}.last_updated",
        )),
        PlanStep(7, USER_UTTERANCE, subgoal="Now search for the ticket that was just created."),
        PlanStep(8, CALL_TOOL, tools=(s,), params=(
            (f"{s}.user_account_id", derived_marker(g, "customer_id")),
            (f"{s}.issue_type", derived_marker(g, "category")),
            (f"{s}.ticket_state", derived_marker(c, "status")),
        )),
        PlanStep(9, ASSISTANT_RESPONSE_TOOL, tools=(s,), outputs=(
            f"{s}.tickets[].ticket_id", f"{s}.tickets[].issue_description",
            f"{s}.tickets[].creation_date", f"{s}.tickets[].last_updated",
        )),
        PlanStep(10, USER_UTTERANCE,
                 subgoal="Escalate this ticket to a specialist team for urgent resolution and update the escalation status.",
                 params=((f"{e}.specialist_team", user_marker(e, "specialist_team")),)),
        PlanStep(11, ASSISTANT_CLARIFICATION, params=(
            (f"{e}.specialist_notes", user_marker(e, "specialist_notes")),
            (f"{u}.status", user_marker(u, "status")),
        )),
        PlanStep(12, USER_RESPONSE_TO_CLARIFICATION, params=(
            (f"{e}.specialist_notes", user_marker(e, "specialist_notes")),
            (f"{u}.status", user_marker(u, "status")),
        )),
        PlanStep(13, CALL_TOOL, tools=(e,), params=(
            (f"{e}.specialist_team", user_marker(e, "specialist_team")),
            (f"{e}.support_case_id", derived_marker(c, "ticket_id")),
            (f"{e}.specialist_notes", user_marker(e, "specialist_notes")),
        )),
        PlanStep(14, CALL_TOOL, tools=(u,), params=(
            (f"{u}.status", user_marker(u, "status")),
            (f"{u}.ticket_escalation_id", derived_marker(e, "escalation_id")),
        )),
        PlanStep(15, ASSISTANT_RESPONSE_TOOL, tools=(e, u), outputs=(
            f"{e}.escalation_id", f"{e}.escalation_date", f"{e}.status", f"{u}.last_updated",
        )),
    )
    return DialoguePlan(
        goal=support_goal(),
        partitions=SUPPORT_PARTITIONS,
        steps=steps,
        p_clar=p_clar,
        seed=seed,
    )


@pytest.fixture
def support_plan() -> DialoguePlan:
    return build_support_plan()


def _simple_tool(name: str, inputs: dict[str, dict], outputs: dict[str, dict], required=None) -> sch.ToolSpec:
    return sch.parse_tool_spec(
        {
            "name": name,
            "description": f"{name.replace('_', ' ')} operation.",
            "parameters": {"type": "object", "properties": inputs, "required": required or list(inputs)},
            "results": {"type": "object", "properties": outputs},
        }
    )


S = {"type": "string"}


def build_ecommerce_graph() -> ToolGraph:
    """Order-shipping fixture graph with linear, fan, and conditional shapes."""
    tools = (
        _simple_tool("get_order", {"order_id": S},
                     {"order_ref": S, "region_code": S, "stock_query": S, "risk_query": S}),
        _simple_tool("get_geo_rules", {"region_code": S}, {"zone_policy": S}),
        _simple_tool("set_mode", {"order_ref": S, "zone_policy": S},
                     {"mode": {"type": "string", "enum": ["local", "intl"]}, "mode_ref": S}),
        _simple_tool("ship_local", {"mode_ref": S}, {"shipment_id": S}),
        _simple_tool("ship_intl", {"mode_ref": S}, {"shipment_id": S}),
        _simple_tool("save_track", {"shipment_id": S}, {"tracking_code": S}),
        _simple_tool("check_stock", {"stock_query": S}, {"stock_level": {"type": "integer"}}),
        _simple_tool("calc_risk", {"risk_query": S}, {"risk_score": {"type": "number"}}),
        _simple_tool("sync_status", {"stock_level": {"type": "integer"}, "risk_score": {"type": "number"}},
                     {"sync_ok": {"type": "boolean"}}),
    )
    pool = sch.ToolPool(domain="E-commerce", tools=tools)
    edges = tuple(
        Edge(*spec)
        for spec in (
            ("get_order", "order_ref", "set_mode", "order_ref"),
            ("get_order", "region_code", "get_geo_rules", "region_code"),
            ("get_geo_rules", "zone_policy", "set_mode", "zone_policy"),
            ("set_mode", "mode_ref", "ship_local", "mode_ref"),
            ("set_mode", "mode_ref", "ship_intl", "mode_ref"),
            ("ship_local", "shipment_id", "save_track", "shipment_id"),
            ("ship_intl", "shipment_id", "save_track", "shipment_id"),
            ("get_order", "stock_query", "check_stock", "stock_query"),
            ("get_order", "risk_query", "calc_risk", "risk_query"),
            ("check_stock", "stock_level", "sync_status", "stock_level"),
            ("calc_risk", "risk_score", "sync_status", "risk_score"),
        )
    )
    return ToolGraph(nodes=pool, edges=edges)


@pytest.fixture
def ecommerce_graph() -> ToolGraph:
    return build_ecommerce_graph()


def support_graph(pool: sch.ToolPool) -> ToolGraph:
    """Dataflow edges over the support pool matching its canonical workflow."""
    edges = (
        Edge("create_support_ticket", "ticket_id", "get_ticket_details", "support_ticket_identifier", "llm_validated"),
        Edge("get_ticket_details", "customer_id", "search_tickets", "user_account_id", "llm_validated"),
        Edge("get_ticket_details", "category", "search_tickets", "issue_type", "llm_validated"),
        Edge("create_support_ticket", "status", "search_tickets", "ticket_state", "llm_validated"),
        Edge("create_support_ticket", "ticket_id", "escalate_ticket_to_specialist", "support_case_id", "llm_validated"),
        Edge("escalate_ticket_to_specialist", "escalation_id", "update_escalation_status", "ticket_escalation_id", "llm_validated"),
        Edge("create_support_ticket", "status", "update_escalation_status", "status", "exact_name"),
    )
    return ToolGraph(nodes=pool, edges=edges)


def json_response(value) -> str:
    return f"```json\n{json.dumps(value)}\n```"


def random_chain_pool(rng, n: int) -> tuple[sch.ToolPool, ToolGraph]:
    """Chain of n tools where tool i+1 requires tool i's output token."""
    tools = []
    edges = []
    for i in range(n):
        params: dict = {}
        required = []
        if i > 0:
            params[f"token_{i - 1}"] = {"type": "string", "description": f"link {i - 1}"}
            required.append(f"token_{i - 1}")
        if rng.random() < 0.7:
            params[f"user_field_{i}"] = {"type": "string", "description": "user supplied"}
            required.append(f"user_field_{i}")
        if rng.random() < 0.3:
            params[f"opt_{i}"] = {"type": "string", "description": "optional", "default": "dflt"}
        results = {f"token_{i}": {"type": "string", "description": f"link {i}"}}
        tools.append(
            sch.parse_tool_spec(
                {
                    "name": f"step_{i}_tool",
                    "description": f"Stage {i} of the chain.",
                    "parameters": {"type": "object", "properties": params, "required": required},
                    "results": {"type": "object", "properties": results},
                }
            )
        )
        if i > 0:
            edges.append(Edge(f"step_{i - 1}_tool", f"token_{i - 1}", f"step_{i}_tool", f"token_{i - 1}"))
    pool = sch.ToolPool("random-chain", tuple(tools))
    return pool, ToolGraph(nodes=pool, edges=tuple(edges))
