"""Realize a dialogue plan as a multi-turn transcript via role-specialized agents.

The engine walks plan steps in order, keeps a persistent memory of resolved
parameter values and tool outputs, substitutes provenance markers mechanically
into tool-call arguments, and asks the gateway for every utterance and
simulated tool result.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta

from . import planner, prompts
from . import schema as sch
from .gateway import Gateway, GatewayError, extract_structured

SYSTEM = "system"
USER = "user"
ASSISTANT_TEXT = "assistant_text"
ASSISTANT_TOOL_CALL = "assistant_tool_call"
TOOL_RESPONSE = "tool_response"

TIME_FORMAT = "%Y-%m-%d %H:%M:%S"


class EngineError(RuntimeError):
    """Plan/engine contract breach, e.g. an unresolved marker at call time."""


class EngineRejected(RuntimeError):
    """The dialogue could not be realized within the allowed regenerations."""


@dataclass(frozen=True)
class Turn:
    kind: str
    content: str
    plan_step_idx: int
    tool_name: str | None = None
    args: tuple[tuple[str, object], ...] | None = None
    result: tuple[tuple[str, object], ...] | None = None

    def __post_init__(self):
        if self.kind == ASSISTANT_TOOL_CALL and (self.tool_name is None or self.args is None):
            raise EngineError("tool-call turn needs tool_name and args")
        if self.kind == TOOL_RESPONSE and self.result is None:
            raise EngineError("tool-response turn needs a result")

    def arg_map(self) -> dict:
        return dict(self.args or ())

    def result_map(self) -> dict:
        return dict(self.result or ())


@dataclass
class MemoryState:
    """Persistent store keeping a synthesized dialogue self-consistent."""

    resolved_params: dict[str, object] = field(default_factory=dict)
    tool_outputs: dict[str, object] = field(default_factory=dict)
    facts: list[str] = field(default_factory=list)
    archive: list[tuple[str, object]] = field(default_factory=list)

    def bind_user_values(self, values: dict[str, object], step: planner.PlanStep) -> None:
        for dotted, marker in step.params:
            if dotted not in values:
                raise EngineError(f"user agent did not provide a value for {dotted}")
            self.resolved_params[marker] = values[dotted]

    def bind_tool_outputs(self, tool_name: str, result: dict) -> None:
        def bind(key: str, value) -> None:
            if key in self.tool_outputs:
                self.archive.append((key, self.tool_outputs[key]))
            self.tool_outputs[key] = value

        for name, value in result.items():
            bind(f"{tool_name}.{name}", value)
        # Nested and first-array-element fields become bare-name bindings for
        # downstream markers, without clobbering top-level outputs.
        def descend(value) -> None:
            if isinstance(value, dict):
                for sub_name, sub_value in value.items():
                    key = f"{tool_name}.{sub_name}"
                    if key not in self.tool_outputs:
                        bind(key, sub_value)
                    descend(sub_value)
            elif isinstance(value, list) and value:
                descend(value[0])

        for value in list(result.values()):
            descend(value)


def update_memory(memory: MemoryState, step: planner.PlanStep, turn: Turn, values: dict | None = None) -> MemoryState:
    """Fold one realized turn into memory; returns the same (mutated) state."""
    if turn.kind == USER:
        if values:
            memory.bind_user_values(values, step)
        memory.facts.append(turn.content)
    elif turn.kind == TOOL_RESPONSE:
        memory.bind_tool_outputs(turn.tool_name or "", turn.result_map())
    elif turn.kind == ASSISTANT_TEXT:
        memory.facts.append(turn.content)
    return memory


@dataclass(frozen=True)
class DialogueTranscript:
    turns: tuple[Turn, ...]
    plan_ref: str
    seed: int
    modified: bool = False
    tools: tuple[str, ...] = ()
    metadata: tuple[tuple[str, object], ...] = ()

    def __post_init__(self):
        if not self.turns:
            raise EngineError("transcript needs at least one turn")
        non_system = [t for t in self.turns if t.kind != SYSTEM]
        if non_system and non_system[0].kind != USER:
            raise EngineError("first non-system turn must be a user turn")
        last_idx = 0
        for pos, turn in enumerate(self.turns):
            if turn.plan_step_idx < last_idx:
                raise EngineError("plan_step_idx must be non-decreasing")
            last_idx = turn.plan_step_idx
            if turn.kind == TOOL_RESPONSE:
                prior = self.turns[pos - 1] if pos > 0 else None
                if prior is None or prior.kind != ASSISTANT_TOOL_CALL or prior.tool_name != turn.tool_name:
                    raise EngineError("tool response must immediately follow its call")

    def meta(self) -> dict:
        return dict(self.metadata)

    def tool_calls(self) -> list[Turn]:
        return [t for t in self.turns if t.kind == ASSISTANT_TOOL_CALL]


def _param_payload(pool: sch.ToolPool, step: planner.PlanStep) -> dict:
    payload = {}
    for dotted, _marker in step.params:
        tool_name, param = dotted.split(".", 1)
        schema = pool.get(tool_name).param_map()[param]
        info: dict = {"type": schema.type_tag, "description": schema.description}
        if schema.enum_values:
            info["enum"] = list(schema.enum_values)
        payload[dotted] = info
    return payload


def _validate_user_values(pool: sch.ToolPool, step: planner.PlanStep, values: dict) -> bool:
    for dotted, _marker in step.params:
        if dotted not in values:
            return False
        tool_name, param = dotted.split(".", 1)
        schema = pool.get(tool_name).param_map()[param]
        probe = sch.ToolSpec(
            name="probe", description="", parameters=((param, schema),), required=frozenset(), results=()
        )
        if not sch.validate_call_args(probe, {param: values[dotted]}).ok:
            return False
    return True


def _user_turn(pool, step, gateway, kind: str) -> tuple[Turn, dict]:
    payload = _param_payload(pool, step)
    asked = sorted(payload) if kind == "clarification_response" else None
    request = prompts.user_utterance(kind, step.subgoal or "", payload, asked)
    last_error = "unusable response"
    for attempt in range(2):
        response = gateway.complete_chat(request)
        try:
            parsed = extract_structured(response.content, expected=["utterance", "values"])
        except GatewayError as exc:
            last_error = str(exc)
            continue
        utterance, values = parsed["utterance"], parsed["values"]
        if isinstance(utterance, str) and utterance and _validate_user_values(pool, step, values):
            return Turn(kind=USER, content=utterance, plan_step_idx=step.step_idx), values
        last_error = "values missing or schema-invalid"
    raise EngineRejected(f"user agent failed twice at step {step.step_idx}: {last_error}")


def result_schema_report(tool: sch.ToolSpec, result: dict) -> sch.ValidationReport:
    """Validate a simulated result against the tool's results schema.

    Every declared result property must be present and conformant, and no
    undeclared keys may appear.
    """
    pseudo = sch.ToolSpec(
        name=tool.name,
        description="",
        parameters=tool.results,
        required=frozenset(name for name, _ in tool.results),
        results=(),
    )
    return sch.validate_call_args(pseudo, result)


def simulate_tool_response(tool: sch.ToolSpec, args: dict, memory: MemoryState, gateway: Gateway) -> dict:
    """Tool agent: produce a schema-consistent result without a live endpoint."""
    report = sch.validate_call_args(tool, args)
    if not report.ok:
        raise EngineError(f"simulate_tool_response called with invalid args: {report.violations[0].message}")
    request = prompts.tool_response_sim(sch.tool_to_document(tool), args)
    messages = request.messages
    for attempt in range(2):
        response = gateway.complete_chat(
            request if attempt == 0 else _corrective(request, messages, "The result violated the schema. "
                                                     "Respond again with one JSON object matching the results schema exactly.")
        )
        try:
            result = extract_structured(response.content)
        except GatewayError:
            messages = messages + (("assistant", response.content),)
            continue
        if isinstance(result, dict) and result_schema_report(tool, result).ok:
            return result
        messages = messages + (("assistant", response.content),)
    raise EngineRejected(f"tool agent produced two schema-violating results for {tool.name}")


def _corrective(request, messages, note):
    from .gateway import ChatRequest

    return ChatRequest(
        messages=messages + (("user", note),),
        temperature=request.temperature,
        max_tokens=request.max_tokens,
        model_id=request.model_id,
    )


def _assemble_args(tool: sch.ToolSpec, step: planner.PlanStep, memory: MemoryState) -> dict:
    args: dict = {}
    for dotted, marker in step.params:
        param = dotted.split(".", 1)[1]
        kind, src_tool, fld = planner.parse_marker(marker)
        if kind == "user":
            if marker not in memory.resolved_params:
                raise EngineError(f"unresolved user marker {marker} at step {step.step_idx}")
            args[param] = memory.resolved_params[marker]
        else:
            key = f"{src_tool}.{fld}"
            if key not in memory.tool_outputs:
                raise EngineError(f"unresolved output marker {marker} at step {step.step_idx}")
            args[param] = memory.tool_outputs[key]
    for name, schema in tool.parameters:
        if name not in args and name not in tool.required and schema.has_default:
            args[name] = schema.default_value
    return args


def _resolve_dotted_output(memory: MemoryState, dotted: str):
    tool_name, _, rest = dotted.partition(".")
    if not rest:
        return None
    direct = memory.tool_outputs.get(dotted)
    if direct is not None:
        return direct
    leaf = rest.split(".")[-1].replace("[]", "")
    return memory.tool_outputs.get(f"{tool_name}.{leaf}")


def synthesize_dialogue(
    plan: planner.DialoguePlan,
    schemas: sch.ToolPool,
    gateway: Gateway,
    seed: int | None = None,
) -> DialogueTranscript:
    """Walk the plan step by step, generating turns and updating memory.

    Marker-tagged call arguments are substituted mechanically from memory, so
    a "$A.x" argument is byte-equal to the stored output of A.
    """
    report = planner.validate_plan(plan, schemas)
    if not report.ok:
        raise EngineError(f"plan invalid: {report.violations[0].message}")
    seed = plan.seed if seed is None else seed
    rng = random.Random(seed)
    memory = MemoryState()
    turns: list[Turn] = []

    start_time = datetime(2025, 1, 1) + timedelta(seconds=rng.randrange(365 * 24 * 3600))
    turns.append(Turn(kind=SYSTEM, content=f"Current time: {start_time.strftime(TIME_FORMAT)}.", plan_step_idx=0))

    for step in plan.steps:
        if step.role == planner.USER_UTTERANCE:
            turn, values = _user_turn(schemas, step, gateway, "opening")
            turns.append(turn)
            update_memory(memory, step, turn, values)
        elif step.role == planner.USER_RESPONSE_TO_CLARIFICATION:
            turn, values = _user_turn(schemas, step, gateway, "clarification_response")
            turns.append(turn)
            update_memory(memory, step, turn, values)
        elif step.role == planner.ASSISTANT_CLARIFICATION:
            request = prompts.clarification_question(sorted(dotted for dotted, _ in step.params))
            response = gateway.complete_chat(request)
            turn = Turn(kind=ASSISTANT_TEXT, content=response.content.strip(), plan_step_idx=step.step_idx)
            turns.append(turn)
            update_memory(memory, step, turn)
        elif step.role == planner.CALL_TOOL:
            tool = schemas.get(step.tools[0])
            args = _assemble_args(tool, step, memory)
            report = sch.validate_call_args(tool, args)
            if not report.ok:
                # One bounded repair pass: regenerate non-marker fills only.
                marker_params = {dotted.split(".", 1)[1] for dotted, _ in step.params}
                for violation in report.violations:
                    root = violation.path.split(".")[0].split("[")[0]
                    if root in marker_params:
                        raise EngineRejected(f"marker-bound arg invalid for {tool.name}: {violation.message}")
                    args.pop(root, None)
                if not sch.validate_call_args(tool, args).ok:
                    raise EngineRejected(f"cannot assemble valid args for {tool.name}")
            call_turn = Turn(
                kind=ASSISTANT_TOOL_CALL,
                content=f"{tool.name}({json.dumps(args, ensure_ascii=False)})",
                plan_step_idx=step.step_idx,
                tool_name=tool.name,
                args=tuple(args.items()),
            )
            turns.append(call_turn)
            result = simulate_tool_response(tool, args, memory, gateway)
            response_turn = Turn(
                kind=TOOL_RESPONSE,
                content=json.dumps(result, ensure_ascii=False),
                plan_step_idx=step.step_idx,
                tool_name=tool.name,
                result=tuple(result.items()),
            )
            turns.append(response_turn)
            update_memory(memory, step, response_turn)
        elif step.role == planner.ASSISTANT_RESPONSE_TOOL:
            outputs = {}
            for dotted in step.outputs or ():
                value = _resolve_dotted_output(memory, dotted)
                if value is not None:
                    outputs[dotted] = value
            request = prompts.assistant_summary(list(step.tools), outputs)
            response = gateway.complete_chat(request)
            turn = Turn(kind=ASSISTANT_TEXT, content=response.content.strip(), plan_step_idx=step.step_idx)
            turns.append(turn)
            update_memory(memory, step, turn)
        else:
            raise EngineError(f"unknown plan role {step.role!r}")

    provided: list[str] = []
    for name in plan.goal.workflow.tool_path:
        if name not in provided:
            provided.append(name)
    return DialogueTranscript(
        turns=tuple(turns),
        plan_ref=plan.plan_id(),
        seed=seed,
        modified=False,
        tools=tuple(provided),
    )


# -- record (de)serialization: the dialogues.jsonl shape --------------------


def turn_to_conversation_item(turn: Turn) -> dict:
    if turn.kind == SYSTEM:
        item = {"role": "system", "content": turn.content}
    elif turn.kind == USER:
        item = {"role": "user", "content": turn.content}
    elif turn.kind == ASSISTANT_TEXT:
        item = {"role": "assistant", "content": turn.content}
    elif turn.kind == ASSISTANT_TOOL_CALL:
        item = {
            "role": "assistant",
            "content": turn.content,
            "tool_name": turn.tool_name,
            "args": turn.arg_map(),
        }
    else:
        item = {"role": "tool", "content": turn.content, "tool_name": turn.tool_name}
    item["step_idx"] = turn.plan_step_idx
    return item


def conversation_item_to_turn(item: dict) -> Turn:
    role = item["role"]
    idx = item.get("step_idx", 0)
    if role == "system":
        return Turn(kind=SYSTEM, content=item["content"], plan_step_idx=idx)
    if role == "user":
        return Turn(kind=USER, content=item["content"], plan_step_idx=idx)
    if role == "tool":
        result = json.loads(item["content"])
        return Turn(
            kind=TOOL_RESPONSE,
            content=item["content"],
            plan_step_idx=idx,
            tool_name=item.get("tool_name"),
            result=tuple(result.items()),
        )
    if "tool_name" in item:
        return Turn(
            kind=ASSISTANT_TOOL_CALL,
            content=item["content"],
            plan_step_idx=idx,
            tool_name=item["tool_name"],
            args=tuple(item.get("args", {}).items()),
        )
    return Turn(kind=ASSISTANT_TEXT, content=item["content"], plan_step_idx=idx)


def transcript_to_record(transcript: DialogueTranscript) -> dict:
    record = {
        "conversations": [turn_to_conversation_item(t) for t in transcript.turns],
        "tools": list(transcript.tools),
        "plan_ref": transcript.plan_ref,
        "seed": transcript.seed,
        "modified": transcript.modified,
    }
    record.update(transcript.meta())
    return record


def transcript_from_record(record: dict) -> DialogueTranscript:
    known = {"conversations", "tools", "plan_ref", "seed", "modified"}
    metadata = tuple(sorted((k, v) for k, v in record.items() if k not in known))
    return DialogueTranscript(
        turns=tuple(conversation_item_to_turn(item) for item in record["conversations"]),
        plan_ref=record.get("plan_ref", ""),
        seed=record.get("seed", 0),
        modified=record.get("modified", False),
        tools=tuple(record.get("tools", ())),
        metadata=metadata,
    )
