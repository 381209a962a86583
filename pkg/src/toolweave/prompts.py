"""Prompt builders for every model-facing stage.

Each prompt carries a tagged, fenced JSON task block. Live models read it as
context; the offline scripted provider parses the same block to produce a
deterministic response, so prompts double as a stable machine interface.
"""

from __future__ import annotations

import json

from .gateway import ChatRequest

TASK_MARKER = "### TASK DATA (tag={tag}) ###"

SYSTEM_SYNTH = (
    "You are an API designer for enterprise software. You write precise JSON tool "
    "definitions with name, description, parameters (JSON-schema object with "
    "properties and required) and results (object with properties). Respond only "
    "with the requested JSON."
)

SYSTEM_DIALOGUE = (
    "You are one agent inside a conversation simulator for tool-calling assistants. "
    "Play exactly the role requested, ground every statement in the supplied data, "
    "and respond in the requested format with nothing extra."
)


def _task_block(tag: str, payload: dict) -> str:
    marker = TASK_MARKER.format(tag=tag)
    return f"{marker}\n```json\n{json.dumps(payload, sort_keys=True, ensure_ascii=False)}\n```"


def _request(system: str, body: str, tag: str, payload: dict, temperature: float, max_tokens: int = 2048) -> ChatRequest:
    return ChatRequest(
        messages=(("system", system), ("user", f"{body}\n\n{_task_block(tag, payload)}")),
        temperature=temperature,
        max_tokens=max_tokens,
    )


STEP_GUIDANCE = {
    "Seed Generation": (
        "Generate a small batch of fundamental entry-point tools for the domain: the core "
        "create/read/search/update operations a practitioner reaches for first."
    ),
    "Entity Expansion": (
        "Generate tools covering additional domain entities drawn from the supplied facts, "
        "broadening coverage beyond the seed operations."
    ),
    "Schema Enrichment": (
        "Take the supplied existing tools and emit enriched replacements with the same names: "
        "add nested objects, enums, default values, and required flags that mirror "
        "enterprise-grade schemas."
    ),
    "Connection Discovery": (
        "Generate new tools that consume, as input parameters with IDENTICAL names, output "
        "parameters of the existing tools listed below, creating explicit data-flow links."
    ),
    "Pattern Expansion": (
        "Generate parallel variations of the existing tools (alternate search/filter/report "
        "styles) to diversify the pool."
    ),
}


def tool_generation(domain, step_name, num_to_generate, context_summary, facts, existing) -> ChatRequest:
    body = (
        f"Domain: {domain}\n"
        f"Stage: {step_name}. {STEP_GUIDANCE.get(step_name, '')}\n"
        f"Produce a JSON array of exactly {num_to_generate} tool definitions. Tool names are "
        "snake_case, unique, and must not repeat existing names (except in the Schema Enrichment "
        "stage, which replaces tools by name). Give tools realistic parameters with types from "
        "{string, integer, number, boolean, object, array} plus date/date-time string formats, "
        "enums and defaults where natural, and a results object describing outputs."
    )
    payload = {
        "domain": domain,
        "step": step_name,
        "num_to_generate": num_to_generate,
        "context": {"summary": context_summary, "facts": facts},
        "existing": existing,
    }
    return _request(SYSTEM_SYNTH, body, "tool_generation", payload, temperature=0.8, max_tokens=4096)


def tool_refinement(tool_doc) -> ChatRequest:
    body = (
        "Refine this tool definition: normalize the snake_case name, infer missing enums, "
        "defaults and required flags where obvious, and paraphrase the description for style. "
        "Do not add or remove parameters or results. Respond with the single refined JSON object."
    )
    return _request(SYSTEM_SYNTH, body, "tool_refinement", {"tool": tool_doc}, temperature=0.3, max_tokens=2048)


def edge_validation(pairs) -> ChatRequest:
    body = (
        "For each candidate data-flow link below, judge whether the output parameter of the "
        "first tool genuinely supplies the input parameter of the second tool (same real-world "
        "quantity, not a name coincidence). Respond with a JSON array of booleans, one per pair, "
        "in order."
    )
    return _request(SYSTEM_SYNTH, body, "edge_validation", {"pairs": pairs}, temperature=0.0)


def goal_synthesis(pattern_type, tools, extra) -> ChatRequest:
    shape_hint = {
        "linear": "The tools run as a sequential chain; describe one task that needs each step.",
        "fan": "One tool fans out to parallel lookups whose results merge into a final action.",
        "conditional": "A decision output selects between branch tools; mention both outcomes.",
    }[pattern_type]
    body = (
        "Write one concise natural-language user goal for this workflow. "
        f"{shape_hint} Respond with the goal sentence only."
    )
    payload = {"pattern_type": pattern_type, "tools": tools, **extra}
    return _request(SYSTEM_DIALOGUE, body, "goal_synthesis", payload, temperature=0.9, max_tokens=256)


def goal_scoring(goal_text, tool_names, pattern_type) -> ChatRequest:
    body = (
        "Rate this (workflow, goal) pair. coherence: does the tool sequence form a sensible "
        "procedure? relevance: does the goal genuinely require these tools? Use integers from "
        '-2 (poor) to 2 (excellent). Respond with JSON {"coherence": n, "relevance": n}.'
    )
    payload = {"goal_text": goal_text, "tools": tool_names, "pattern_type": pattern_type}
    return _request(SYSTEM_DIALOGUE, body, "goal_scoring", payload, temperature=0.0, max_tokens=128)


def path_partition(goal_text, tool_path, tool_summaries) -> ChatRequest:
    body = (
        "Split this ordered tool path into contiguous segments, each a coherent sub-goal of the "
        "overall goal. Keep the original order, cover every tool exactly once, and prefer "
        "segments of two or more tools when the dataflow warrants it. Respond with a JSON array "
        "of arrays of tool names."
    )
    payload = {"goal_text": goal_text, "tool_path": tool_path, "tools": tool_summaries}
    return _request(SYSTEM_DIALOGUE, body, "path_partition", payload, temperature=0.2, max_tokens=512)


def subgoal_synthesis(goal_text, tools, prior_subgoals) -> ChatRequest:
    body = (
        "Write a concise, user-friendly subgoal for this segment of the conversation: what the "
        "user wants from these tools, phrased naturally and distinct from the prior subgoals. "
        "Respond with the subgoal sentence only."
    )
    payload = {"goal_text": goal_text, "tools": tools, "prior_subgoals": prior_subgoals}
    return _request(SYSTEM_DIALOGUE, body, "subgoal", payload, temperature=0.7, max_tokens=128)


def user_utterance(kind, subgoal, params, asked=None) -> ChatRequest:
    if kind == "opening":
        body = (
            "Play the user opening a new request. Express the subgoal in your own words and "
            "provide a realistic concrete value for every parameter listed, each appearing "
            "verbatim in the utterance. Respond with JSON "
            '{"utterance": "...", "values": {"<tool.param>": <value>}}.'
        )
    else:
        body = (
            "Play the user answering the assistant's clarification question. Provide a realistic "
            "concrete value for every requested parameter, each appearing verbatim in the "
            'utterance. Respond with JSON {"utterance": "...", "values": {"<tool.param>": <value>}}.'
        )
    payload = {"kind": kind, "subgoal": subgoal, "params": params}
    if asked:
        payload["asked"] = asked
    return _request(SYSTEM_DIALOGUE, body, "user_utterance", payload, temperature=0.9, max_tokens=512)


def clarification_question(params) -> ChatRequest:
    body = (
        "Play the assistant. Ask the user one natural question requesting the listed missing "
        "parameters. Respond with the question only."
    )
    return _request(SYSTEM_DIALOGUE, body, "clarification_question", {"params": params}, temperature=0.6, max_tokens=256)


def tool_response_sim(tool_doc, args) -> ChatRequest:
    body = (
        "Play the tool backend. Produce one realistic JSON result that exactly matches the "
        "tool's results schema: every declared property present, enum values in range, date "
        "formats respected, identifiers fresh and plausible. Echo argument values where the "
        "result schema repeats an input field. Respond with the JSON object only."
    )
    return _request(SYSTEM_DIALOGUE, body, "tool_response_sim", {"tool": tool_doc, "args": args}, temperature=0.4, max_tokens=1024)


def assistant_summary(tools, outputs) -> ChatRequest:
    body = (
        "Play the assistant summarizing what the tools just returned. Report only values "
        "present in the outputs below. Respond with the summary text only."
    )
    return _request(SYSTEM_DIALOGUE, body, "assistant_summary", {"tools": tools, "outputs": outputs}, temperature=0.5, max_tokens=512)


def paraphrase_utterance(utterance, must_keep) -> ChatRequest:
    body = (
        "Rewrite this user utterance with different wording but identical meaning. Every string "
        "listed under must_keep has to appear verbatim in your rewrite. Respond with the rewrite only."
    )
    return _request(SYSTEM_DIALOGUE, body, "paraphrase", {"utterance": utterance, "must_keep": must_keep}, temperature=0.9, max_tokens=512)
