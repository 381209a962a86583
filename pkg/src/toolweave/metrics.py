"""Quality lab: API metrics, dialogue structure statistics, hallucination checks, judge.

All deterministic computations are pure; only the judge and the optional
assistant-text check go through the gateway.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

from . import planner
from . import schema as sch
from .engine import ASSISTANT_TEXT, ASSISTANT_TOOL_CALL, SYSTEM, TOOL_RESPONSE, USER, DialogueTranscript, Turn
from .forge import ToolGraph
from .gateway import ChatRequest, Gateway

LONGEST_CHAIN_DEPTH_CAP = 32


class MetricsError(RuntimeError):
    pass


# -- API metrics -------------------------------------------------------------


@dataclass(frozen=True)
class ApiMetricsReport:
    apis_per_domain: float
    params_per_api: float
    cau: float
    rpr: float
    ic: float
    longest_chain: int
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "apis_per_domain": self.apis_per_domain,
            "params_per_api": self.params_per_api,
            "cau": self.cau,
            "rpr": self.rpr,
            "ic": self.ic,
            "longest_chain": self.longest_chain,
            "notes": list(self.notes),
        }


def longest_chain(graph: ToolGraph, depth_cap: int = LONGEST_CHAIN_DEPTH_CAP) -> int:
    """Longest simple path (node count) by exhaustive DFS with a visited set."""
    if not graph.nodes.tools:
        return 0
    adjacency = {name: sorted(set(graph.successors(name))) for name in graph.nodes.names()}
    best = 1

    def dfs(node: str, visited: set[str], length: int) -> None:
        nonlocal best
        best = max(best, length)
        if length >= depth_cap:
            return
        for succ in adjacency[node]:
            if succ not in visited:
                visited.add(succ)
                dfs(succ, visited, length + 1)
                visited.remove(succ)

    for start in adjacency:
        dfs(start, {start}, 1)
    return best


def api_metrics(pool: sch.ToolPool, graph: ToolGraph) -> ApiMetricsReport:
    """Interconnectivity, complex-use, required-ratio, and chain-length metrics.

    IC counts, per tool, input parameters whose names appear in the union of
    every tool's flattened output names. CAU counts input parameters only.
    Tools with zero parameters contribute an RPR of 1.0 (vacuously required).
    """
    if not pool.tools:
        raise MetricsError("api_metrics requires a nonempty pool")
    n = len(pool.tools)
    all_outputs: set[str] = set()
    for tool in pool.tools:
        all_outputs |= sch.flatten_output_names(tool)

    ic_total = 0
    cau_hits = 0
    rpr_total = 0.0
    param_total = 0
    for tool in pool.tools:
        params = tool.param_map()
        param_total += len(params)
        ic_total += len(set(params) & all_outputs)
        if any(p.type_tag in ("object", "array") for p in params.values()):
            cau_hits += 1
        rpr_total += (len(tool.required) / len(params)) if params else 1.0

    return ApiMetricsReport(
        apis_per_domain=float(n),
        params_per_api=param_total / n,
        cau=cau_hits / n,
        rpr=rpr_total / n,
        ic=ic_total / n,
        longest_chain=longest_chain(graph),
        notes=("zero-parameter tools contribute RPR 1.0", "CAU counts input parameters only"),
    )


# -- dialogue structure statistics -------------------------------------------


@dataclass(frozen=True)
class DialogueStatsReport:
    min_turns: int
    max_turns: int
    avg_turns: float
    min_tool_calls: int
    max_tool_calls: int
    avg_tool_calls: float
    pct_multi_step: float
    pct_true_multi_step: float

    def __post_init__(self):
        if not (self.min_turns <= self.avg_turns <= self.max_turns):
            raise MetricsError("turn aggregates out of order")
        if not (self.min_tool_calls <= self.avg_tool_calls <= self.max_tool_calls):
            raise MetricsError("tool-call aggregates out of order")
        if self.pct_true_multi_step > self.pct_multi_step:
            raise MetricsError("true multi-step fraction cannot exceed multi-step fraction")

    def to_dict(self) -> dict:
        return {
            "min_turns": self.min_turns,
            "max_turns": self.max_turns,
            "avg_turns": self.avg_turns,
            "min_tool_calls": self.min_tool_calls,
            "max_tool_calls": self.max_tool_calls,
            "avg_tool_calls": self.avg_tool_calls,
            "pct_multi_step": self.pct_multi_step,
            "pct_true_multi_step": self.pct_true_multi_step,
        }


def segment_turns(transcript: DialogueTranscript, plan: planner.DialoguePlan | None = None) -> list[list[Turn]]:
    """Split a transcript into conversational turns.

    A segment opens at a user request; user turns answering a clarification
    question fold into the current segment. Plan roles decide when available,
    otherwise a question-mark heuristic on the preceding assistant turn.
    """
    roles: dict[int, str] = {}
    if plan is not None:
        roles = {step.step_idx: step.role for step in plan.steps}
    segments: list[list[Turn]] = []
    previous: Turn | None = None
    for turn in transcript.turns:
        if turn.kind == SYSTEM:
            continue
        opens = False
        if turn.kind == USER:
            role = roles.get(turn.plan_step_idx)
            if role == planner.USER_UTTERANCE:
                opens = True
            elif role is None:
                asked = previous is not None and previous.kind == ASSISTANT_TEXT and previous.content.rstrip().endswith("?")
                opens = not asked
        if opens or not segments:
            segments.append([])
        segments[-1].append(turn)
        previous = turn
    return segments


def _segment_flags(segment: list[Turn], plan: planner.DialoguePlan | None, method: str) -> tuple[bool, bool]:
    calls = [t for t in segment if t.kind == ASSISTANT_TOOL_CALL]
    if len(calls) < 2:
        return False, False
    if method == "marker":
        if plan is None:
            raise MetricsError("marker tracing requires the plan")
        steps = {step.step_idx: step for step in plan.steps}
        called_before: set[str] = set()
        for call in calls:
            step = steps.get(call.plan_step_idx)
            if step is not None and step.role == planner.CALL_TOOL:
                for _dotted, marker in step.params:
                    kind, src_tool, _fld = planner.parse_marker(marker)
                    if kind == "derived" and src_tool in called_before:
                        return True, True
            called_before.add(call.tool_name)
        return True, False
    # Value-equality tracing: a later call consumes an earlier same-turn output.
    responses_by_pos: list[tuple[int, Turn]] = []
    position = {id(t): i for i, t in enumerate(segment)}
    for turn in segment:
        if turn.kind == TOOL_RESPONSE:
            responses_by_pos.append((position[id(turn)], turn))
    for call in calls:
        call_pos = position[id(call)]
        earlier_values = {
            _render_value(v)
            for pos, response in responses_by_pos
            if pos < call_pos
            for v in _flatten_leaf_values(response.result_map())
        }
        if any(_render_value(v) in earlier_values for v in call.arg_map().values()):
            return True, True
    return True, False


def _render_value(value) -> str:
    return value if isinstance(value, str) else json.dumps(value)


def _flatten_leaf_values(value) -> list:
    out = []
    if isinstance(value, dict):
        for sub in value.values():
            out.extend(_flatten_leaf_values(sub))
    elif isinstance(value, list):
        for sub in value:
            out.extend(_flatten_leaf_values(sub))
    else:
        out.append(value)
    return out


def dialogue_flags(
    transcript: DialogueTranscript, plan: planner.DialoguePlan | None = None, method: str = "value"
) -> list[tuple[bool, bool]]:
    """(multi_step, true_multi_step) per conversational turn."""
    segments = segment_turns(transcript, plan)
    return [_segment_flags(segment, plan, method) for segment in segments]


def dialogue_stats(
    dialogues: list[DialogueTranscript],
    plans: dict[str, planner.DialoguePlan] | None = None,
    method: str = "value",
) -> DialogueStatsReport:
    """Corpus-level structure statistics over conversational turns."""
    if not dialogues:
        raise MetricsError("dialogue_stats requires at least one dialogue")
    turns_counts: list[int] = []
    call_counts: list[int] = []
    total_segments = 0
    multi = 0
    true_multi = 0
    for transcript in dialogues:
        plan = (plans or {}).get(transcript.plan_ref)
        flags = dialogue_flags(transcript, plan, method=method if plan or method == "value" else "value")
        turns_counts.append(len(flags))
        call_counts.append(len(transcript.tool_calls()))
        total_segments += len(flags)
        multi += sum(1 for m, _ in flags if m)
        true_multi += sum(1 for _, t in flags if t)
    return DialogueStatsReport(
        min_turns=min(turns_counts),
        max_turns=max(turns_counts),
        avg_turns=sum(turns_counts) / len(turns_counts),
        min_tool_calls=min(call_counts),
        max_tool_calls=max(call_counts),
        avg_tool_calls=sum(call_counts) / len(call_counts),
        pct_multi_step=multi / total_segments if total_segments else 0.0,
        pct_true_multi_step=true_multi / total_segments if total_segments else 0.0,
    )


# -- hallucination detection --------------------------------------------------


@dataclass(frozen=True)
class HallucinationReport:
    tool_name: bool
    param_name: bool
    param_value: bool
    assistant_text: bool
    details: tuple[str, ...] = ()

    @property
    def clean(self) -> bool:
        return not (self.tool_name or self.param_name or self.param_value or self.assistant_text)

    def to_dict(self) -> dict:
        return {
            "tool_name": self.tool_name,
            "param_name": self.param_name,
            "param_value": self.param_value,
            "assistant_text": self.assistant_text,
            "clean": self.clean,
            "details": list(self.details),
        }


_CURRENCY_RE = re.compile(r"[$€£]")
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d{3}\b)")


def normalize_for_trace(text: str) -> str:
    """Case-fold and strip currency symbols and thousands separators.

    Decimal points survive, so 20140 still fails to match "201.40".
    """
    text = text.casefold()
    text = _CURRENCY_RE.sub("", text)
    text = _THOUSANDS_RE.sub("", text)
    return text


def detect_hallucinations(
    transcript: DialogueTranscript,
    tools: sch.ToolPool,
    gateway: Gateway | None = None,
    check_assistant_text: bool = False,
) -> HallucinationReport:
    """Deterministic provenance checks per call, plus an optional LLM text check.

    A required argument value must normalized-match a prior user turn, a prior
    tool output, the schema default, or the declared enum list; otherwise it
    is flagged as a value hallucination.
    """
    details: list[str] = []
    flag_tool = False
    flag_param = False
    flag_value = False

    provided = set(transcript.tools)
    prior_user_text = ""
    prior_output_values: set[str] = set()

    for turn in transcript.turns:
        if turn.kind == USER:
            prior_user_text += "\n" + normalize_for_trace(turn.content)
        elif turn.kind == TOOL_RESPONSE:
            for value in _flatten_leaf_values(turn.result_map()):
                prior_output_values.add(normalize_for_trace(_render_value(value)))
        elif turn.kind == ASSISTANT_TOOL_CALL:
            name = turn.tool_name or ""
            if name not in provided:
                flag_tool = True
                details.append(f"call to undeclared tool {name!r}")
            try:
                tool = tools.get(name)
            except KeyError:
                continue
            params = tool.param_map()
            for arg_name, value in turn.arg_map().items():
                if arg_name not in params:
                    flag_param = True
                    details.append(f"{name}: unknown parameter {arg_name!r}")
                    continue
                if arg_name not in tool.required:
                    continue
                schema = params[arg_name]
                if _value_traceable(value, schema, prior_user_text, prior_output_values):
                    continue
                flag_value = True
                details.append(f"{name}.{arg_name}: value {value!r} has no provenance")

    flag_text = False
    if check_assistant_text and gateway is not None:
        flag_text = _assistant_text_check(transcript, gateway)

    return HallucinationReport(
        tool_name=flag_tool,
        param_name=flag_param,
        param_value=flag_value,
        assistant_text=flag_text,
        details=tuple(details),
    )


def _value_traceable(value, schema: sch.ParamSchema, user_text: str, output_values: set[str]) -> bool:
    if isinstance(value, dict):
        return all(
            _value_traceable(v, schema.child_map().get(k, schema), user_text, output_values)
            for k, v in value.items()
        ) if value else True
    if isinstance(value, list):
        item = schema.item_schema or schema
        return all(_value_traceable(v, item, user_text, output_values) for v in value)
    rendered = normalize_for_trace(_render_value(value))
    if schema.has_default and value == schema.default_value:
        return True
    if schema.enum_values is not None and value in schema.enum_values:
        return True
    if rendered and rendered in user_text:
        return True
    if rendered in output_values:
        return True
    # Booleans render as JSON literals but users often write them bare.
    if isinstance(value, bool) and rendered.strip('"') in user_text:
        return True
    return False


def _assistant_text_check(transcript: DialogueTranscript, gateway: Gateway) -> bool:
    lines = [f"{t.kind}: {t.content}" for t in transcript.turns]
    payload = {"dialogue": lines}
    body = (
        "Does any assistant message in this dialogue claim concrete tool results (IDs, records, "
        'statuses) that no preceding tool call produced? Respond with JSON {"fabricated": true/false}.'
    )
    from .prompts import SYSTEM_DIALOGUE, _request

    request = _request(SYSTEM_DIALOGUE, body, "assistant_claim_check", payload, temperature=0.0)
    from .gateway import extract_structured

    try:
        response = gateway.complete_chat(request)
        verdict = extract_structured(response.content, expected=["fabricated"])
        return bool(verdict["fabricated"])
    except Exception:
        return False


# -- LLM-as-judge --------------------------------------------------------------

JUDGE_PROMPT = """You are asked to evaluate some synthetic dialogue data. These synthetic dialogue occur between the user, the AI assistant, and the tool. Please evaluate the data based on the following criteria, assigning a score from 1 to 5 for each category. Use the detailed descriptions below to guide your assessment:

- Naturalness (1-5 points): Only evaluate whether the user's request and response is natural and realistic. Focus more on the natural flow of the conversation and less on the choice of words. For example, pay attention to whether users will ask similar questions in real scenarios. And assess whether user behavior is natural. For example, real users rarely ask similar questions consecutively or ask longer questions.

- Coherence (1-5 points): Evaluate the overall flow and logical connection between the turns in the conversation. Focus on checking whether the user's previous and subsequent rounds of requests are relevant. Also, ensure that meaningful order of agent interactions is maintained. For example, the agent should not provide information before the user requests it. Similarly, the relevant tools must be invoked only after the assistant calls the tool with the relevant parameters. Such discrepancies should be heavily penalized.

- Helpfulness (1-5 points): Determine the effectiveness and value of the AI assistant's responses in addressing the user's needs.

- Accuracy (1-5 points): Check for the accuracy and consistency of the information provided. Everything returned by the tool is assumed to be accurate. However, at the same time, if the assistant hallucinates or makes up information, it should be heavily penalized.

Below are some examples that are rated poorly in each category:

1. Naturalness:
- User: "Can you tell me about the weather?"
- Assistant: "The weather is nice."
- User: "What about tomorrow?"
- Assistant: "Tomorrow will be nice too."

2. Coherence:
- User: "What's the capital of France?"
- Assistant: "The capital of France is Paris."
- User: "And the capital of Germany?"
- Assistant: "The capital of Germany is Berlin."

3. Helpfulness:
- User: "I need help with my homework."
- Assistant: "What subject is it?"
- User: "Math."
- Assistant: "Okay."

4. Accuracy:
- User: "What's the capital of Italy?"
- Assistant: "The capital of Italy is Rome."
- User: "What's the capital of Spain?"
- Assistant: "The capital of Spain is Barcelona."

Some more examples specifically catered to tool usage:
1. Coherence: (Tool simulated before assistant provides tool to be called along with its input parameters)
- User: "Can you raise a ticket for my internet issue?"
- Tool: {"ticket_id": "12345"}

2. Coherence: (Assistant goes on rambling trying to correct erroneous tool output but never calls the tool)
- User: "Please book a flight for me."
- Assistant: "Sure, I can help you with that. Can you please provide me with the details of your flight?"
- User: "I need a flight from New York to San Francisco on March 10th."
- Assistant: book_flight({"from": "New York", "to": "San Francisco", "date": "March 10th"})
- Tool: "Flight ID not found."
- Assistant: "I apologize for the inconvenience. It seems that there was an error with the flight ID. Let me try again."
- Tool: "Flight ID not found."

3. Coherence: (Assistant talks about calling tool but does not use the required tool-calling format)
- User: "Can you check the weather for me?"
- Assistant: "Sure, I can help you with that. Let me check the weather for you."
- Tool: {"temperature": "72°F", "condition": "Sunny"}
- Assistant: "The weather is 72°F and sunny."

4. Accuracy: (Assistant hallucinates information)
- User: "Can you reserve a table for two at an Italian restaurant in New York City for tomorrow night?"
- Assistant: "Sure, I have reserved a table for two at 'Luigi's Italian Bistro' in New York City for tomorrow night at 7 PM."

All such examples must be heavily penalized, and the scores they receive should be 1 or 2.

Please use a more **CRITICAL** and **STRICT** evaluation method. After scoring, please provide brief comments or feedback for each category to explain your ratings.

Please provide your evaluation in the following format:

Evaluation of Synthetic Dialogue Data

1. Naturalness: [Score] / 5
- Comments: [Brief comments or feedback]

2. Coherence: [Score] / 5
- Comments: [Brief comments or feedback]

3. Helpfulness: [Score] / 5
- Comments: [Brief comments or feedback]

4. Accuracy: [Score] / 5
- Comments: [Brief comments or feedback]"""

JUDGE_DIMENSIONS = ("Naturalness", "Coherence", "Helpfulness", "Accuracy")

_SCORE_RE = re.compile(
    r"^\s*\d\.\s*(Naturalness|Coherence|Helpfulness|Accuracy)\s*:\s*\[?(\d+)\]?\s*/\s*5\s*$"
    r"(?:\n\s*-\s*Comments?\s*:\s*(.*))?",
    re.MULTILINE,
)


class JudgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class JudgeScores:
    naturalness: int
    coherence: int
    helpfulness: int
    accuracy: int
    comments: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        for value in (self.naturalness, self.coherence, self.helpfulness, self.accuracy):
            if not 1 <= value <= 5:
                raise JudgeError(f"judge score out of range: {value}")

    def to_dict(self) -> dict:
        return {
            "naturalness": self.naturalness,
            "coherence": self.coherence,
            "helpfulness": self.helpfulness,
            "accuracy": self.accuracy,
            "comments": dict(self.comments),
        }


def render_transcript(transcript: DialogueTranscript) -> str:
    role_names = {
        SYSTEM: "System",
        USER: "User",
        ASSISTANT_TEXT: "Assistant",
        ASSISTANT_TOOL_CALL: "Assistant",
        TOOL_RESPONSE: "Tool",
    }
    return "\n".join(f"{role_names[t.kind]}: {t.content}" for t in transcript.turns)


def parse_judge_response(content: str) -> JudgeScores:
    found: dict[str, int] = {}
    comments: dict[str, str] = {}
    for match in _SCORE_RE.finditer(content):
        dimension, score, comment = match.group(1), int(match.group(2)), match.group(3)
        found[dimension] = score
        if comment:
            comments[dimension] = comment.strip()
    missing = [d for d in JUDGE_DIMENSIONS if d not in found]
    if missing:
        raise JudgeError(f"judge response missing dimensions: {missing}")
    return JudgeScores(
        naturalness=found["Naturalness"],
        coherence=found["Coherence"],
        helpfulness=found["Helpfulness"],
        accuracy=found["Accuracy"],
        comments=tuple(sorted(comments.items())),
    )


def judge_dialogue(transcript: DialogueTranscript, gateway: Gateway) -> JudgeScores:
    """Single deterministic judging call; one retry on an unparseable response."""
    prompt = f"{JUDGE_PROMPT}\n\nDialogue to evaluate:\n{render_transcript(transcript)}"
    request = ChatRequest(messages=(("user", prompt),), temperature=0.0, max_tokens=1024)
    last_error: Exception | None = None
    for _ in range(2):
        response = gateway.complete_chat(request)
        try:
            return parse_judge_response(response.content)
        except JudgeError as exc:
            last_error = exc
    raise JudgeError(f"unparseable judge response after retry: {last_error}")


# -- table rendering -----------------------------------------------------------


def render_api_table(report: ApiMetricsReport) -> str:
    rows = [
        ("APIs / Domain", f"{report.apis_per_domain:.2f}"),
        ("Params / API", f"{report.params_per_api:.2f}"),
        ("Complex API Use (CAU)", f"{report.cau * 100:.1f}%"),
        ("Required Param Ratio (RPR)", f"{report.rpr * 100:.1f}%"),
        ("Interconnectivity (IC)", f"{report.ic:.2f}"),
        ("Longest Chain", str(report.longest_chain)),
    ]
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{label:<{width}}  {value}" for label, value in rows)


def render_stats_table(report: DialogueStatsReport) -> str:
    rows = [
        ("Min/Max/Avg Turns", f"{report.min_turns}/{report.max_turns}/{report.avg_turns:.2f}"),
        ("Min/Max/Avg Tool Calls", f"{report.min_tool_calls}/{report.max_tool_calls}/{report.avg_tool_calls:.2f}"),
        ("% Multi-step Turns", f"{report.pct_multi_step * 100:.2f}"),
        ("% True Multi-step Turns", f"{report.pct_true_multi_step * 100:.2f}"),
    ]
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{label:<{width}}  {value}" for label, value in rows)


def render_hallucination_table(reports: list[HallucinationReport]) -> str:
    total = len(reports) or 1
    rows = [
        ("Tool name hallucination", sum(r.tool_name for r in reports)),
        ("Parameter name hallucination", sum(r.param_name for r in reports)),
        ("Parameter value hallucination", sum(r.param_value for r in reports)),
        ("Assistant text output hallucination", sum(r.assistant_text for r in reports)),
        ("No hallucination (clean)", sum(r.clean for r in reports)),
    ]
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{label:<{width}}  {count / total * 100:.1f}%" for label, count in rows)
