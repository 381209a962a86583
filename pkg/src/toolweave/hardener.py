"""Post-processing hardeners: recoverable failure injection, paraphrase, masking.

Every injector returns a modified copy and leaves the original untouched;
augmented sets always retain the originals. Failure variants end in a full
recovery, so the final occurrence of each original call is unchanged.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass

from . import prompts
from . import schema as sch
from .engine import (
    ASSISTANT_TEXT,
    ASSISTANT_TOOL_CALL,
    TOOL_RESPONSE,
    USER,
    DialogueTranscript,
    Turn,
)
from .gateway import Gateway, cosine
from .similarity import lexical_similarity

CASCADING = "cascading"
OUT_OF_ORDER = "out_of_order"
WRONG_TOOL = "wrong_tool"
SCHEMA_VIOLATION = "schema_violation"
MISSING_FUNCTION = "missing_function"
ALL_MODES = frozenset({CASCADING, OUT_OF_ORDER, WRONG_TOOL, SCHEMA_VIOLATION, MISSING_FUNCTION})

COMPLEX_SHARE_DEFAULT = 0.3
EMBEDDING_WEIGHT_DEFAULT = 0.7
WRONG_TOOL_THRESHOLD = 0.6

PREREQUISITE_ERROR = "Prerequisite step not completed/Missing input"
MISSING_PARAM_TOKEN = "MISSING_PARAM"
TYPE_MISMATCH_TOKEN = "TYPE_MISMATCH"
INVALID_ENUM_TOKEN = "INVALID_ENUM"


@dataclass(frozen=True)
class InjectionConfig:
    p_inject: float
    complex_share: float = COMPLEX_SHARE_DEFAULT
    seed: int = 0
    enabled_modes: frozenset[str] = ALL_MODES

    def __post_init__(self):
        if not 0.0 <= self.p_inject <= 1.0 or not 0.0 <= self.complex_share <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        unknown = set(self.enabled_modes) - ALL_MODES
        if unknown:
            raise ValueError(f"unknown injection modes: {sorted(unknown)}")


@dataclass(frozen=True)
class SimilarityScore:
    embedding_sim: float
    lexical_sim: float
    combined: float


class HybridMatcher:
    """Tool confusability: embedding similarity blended with edit similarity."""

    def __init__(self, gateway: Gateway, alpha: float = EMBEDDING_WEIGHT_DEFAULT):
        self.gateway = gateway
        self.alpha = alpha
        self._cache: dict[str, object] = {}

    def _vector(self, text: str):
        if text not in self._cache:
            self._cache[text] = self.gateway.embed_texts([text])[0]
        return self._cache[text]

    def score(self, a: sch.ToolSpec, b: sch.ToolSpec) -> SimilarityScore:
        emb = cosine(self._vector(f"{a.name}: {a.description}"), self._vector(f"{b.name}: {b.description}"))
        lex = lexical_similarity(a.name, b.name)
        return SimilarityScore(emb, lex, self.alpha * emb + (1 - self.alpha) * lex)


@dataclass(frozen=True)
class _CallUnit:
    position: int  # index of the call turn within transcript.turns
    call: Turn
    response: Turn


def _call_units(transcript: DialogueTranscript) -> list[_CallUnit]:
    units = []
    turns = transcript.turns
    for pos, turn in enumerate(turns):
        if turn.kind == ASSISTANT_TOOL_CALL and pos + 1 < len(turns) and turns[pos + 1].kind == TOOL_RESPONSE:
            units.append(_CallUnit(pos, turn, turns[pos + 1]))
    return units


def _call_runs(transcript: DialogueTranscript) -> list[list[_CallUnit]]:
    """Maximal runs of back-to-back call/response pairs (one plan partition's calls)."""
    runs: list[list[_CallUnit]] = []
    current: list[_CallUnit] = []
    for unit in _call_units(transcript):
        if current and unit.position == current[-1].position + 2:
            current.append(unit)
        else:
            if len(current) > 1:
                runs.append(current)
            current = [unit]
    if len(current) > 1:
        runs.append(current)
    return runs


def _render(value) -> str:
    return value if isinstance(value, str) else json.dumps(value)


def _dependent_param(later_call: Turn, earlier: _CallUnit) -> str | None:
    """Argument of the later call whose value equals an output of the earlier unit."""
    outputs = {_render(v) for v in _flatten_values(earlier.response.result_map())}
    for name, value in later_call.arg_map().items():
        if _render(value) in outputs:
            return name
    return None


def _flatten_values(value) -> list:
    out = []
    if isinstance(value, dict):
        for sub in value.values():
            out.extend(_flatten_values(sub))
    elif isinstance(value, list):
        for sub in value:
            out.extend(_flatten_values(sub))
    else:
        out.append(value)
    return out


def _rebuild(transcript: DialogueTranscript, turns: list[Turn], mode: str, extra_meta: dict | None = None) -> DialogueTranscript:
    meta = transcript.meta()
    meta["injection_mode"] = mode
    meta.update(extra_meta or {})
    return DialogueTranscript(
        turns=tuple(turns),
        plan_ref=transcript.plan_ref,
        seed=transcript.seed,
        modified=True,
        tools=transcript.tools,
        metadata=tuple(sorted(meta.items())),
    )


def _failing_call(unit: _CallUnit, drop_param: str | None, error_text: str) -> list[Turn]:
    args = unit.call.arg_map()
    if drop_param is not None:
        args.pop(drop_param, None)
    idx = unit.call.plan_step_idx
    name = unit.call.tool_name
    call = Turn(
        kind=ASSISTANT_TOOL_CALL,
        content=f"{name}({json.dumps(args, ensure_ascii=False)})",
        plan_step_idx=idx,
        tool_name=name,
        args=tuple(args.items()),
    )
    error = {"error": error_text}
    response = Turn(
        kind=TOOL_RESPONSE,
        content=json.dumps(error, ensure_ascii=False),
        plan_step_idx=idx,
        tool_name=name,
        result=tuple(error.items()),
    )
    return [call, response]


def inject_cascading_failure(
    transcript: DialogueTranscript, schemas: sch.ToolPool, rng: random.Random | None = None
) -> tuple[DialogueTranscript, bool]:
    """Reverse-order execution of a dependent sequence, then the full recovery.

    Needs a run of at least three consecutive calls; emits len(run) - 1
    failing (call, error) pairs ahead of the untouched original sequence.
    """
    rng = rng or random.Random(0)
    runs = [run for run in _call_runs(transcript) if len(run) >= 3]
    if not runs:
        return transcript, False
    run = runs[rng.randrange(len(runs))]

    failure_turns: list[Turn] = []
    for i in range(len(run) - 1, 0, -1):
        current, previous = run[i], run[i - 1]
        dep = _dependent_param(current.call, previous) or _first_droppable(current.call, schemas)
        message = f"{PREREQUISITE_ERROR}: {dep}" if dep else PREREQUISITE_ERROR
        failure_turns.extend(_failing_call(current, dep, message))
    # Injected turns inherit the step index where the sequence starts.
    start_idx = run[0].call.plan_step_idx
    failure_turns = [
        Turn(t.kind, t.content, start_idx, t.tool_name, t.args, t.result) for t in failure_turns
    ]

    insert_at = run[0].position
    turns = list(transcript.turns)
    new_turns = turns[:insert_at] + failure_turns + turns[insert_at:]
    return _rebuild(transcript, new_turns, CASCADING), True


def _first_droppable(call: Turn, schemas: sch.ToolPool) -> str | None:
    try:
        tool = schemas.get(call.tool_name)
    except KeyError:
        tool = None
    args = call.arg_map()
    if tool is not None:
        for name in sorted(tool.required):
            if name in args:
                return name
    return next(iter(args), None)


def inject_out_of_order(
    transcript: DialogueTranscript, schemas: sch.ToolPool, rng: random.Random | None = None
) -> tuple[DialogueTranscript, bool]:
    """Premature call to a dependent tool before its prerequisite has run."""
    rng = rng or random.Random(0)
    units = _call_units(transcript)
    pairs = []
    for i, earlier in enumerate(units):
        for later in units[i + 1 :]:
            dep = _dependent_param(later.call, earlier)
            if dep is not None:
                pairs.append((earlier, later, dep))
    if not pairs:
        return transcript, False
    earlier, later, dep = pairs[rng.randrange(len(pairs))]

    injected = _failing_call(later, dep, f"Missing dependency: required input {dep!r} is not available yet")
    idx = earlier.call.plan_step_idx
    injected = [Turn(t.kind, t.content, idx, t.tool_name, t.args, t.result) for t in injected]
    turns = list(transcript.turns)
    new_turns = turns[: earlier.position] + injected + turns[earlier.position :]
    return _rebuild(transcript, new_turns, OUT_OF_ORDER), True


def inject_wrong_tool(
    transcript: DialogueTranscript,
    schemas: sch.ToolPool,
    matcher: HybridMatcher,
    rng: random.Random | None = None,
    threshold: float = WRONG_TOOL_THRESHOLD,
) -> tuple[DialogueTranscript, bool]:
    """Call a semantically confusable tool first, get nothing useful, self-correct."""
    rng = rng or random.Random(0)
    units = _call_units(transcript)
    if not units or len(schemas.tools) < 2:
        return transcript, False
    candidates_pool = [name for name in transcript.tools if name in schemas] or schemas.names()

    options: list[tuple[_CallUnit, str, float]] = []
    for unit in units:
        try:
            called = schemas.get(unit.call.tool_name)
        except KeyError:
            continue
        for other_name in candidates_pool:
            if other_name == called.name:
                continue
            score = matcher.score(called, schemas.get(other_name))
            if score.combined > threshold:
                options.append((unit, other_name, score.combined))
    if not options:
        return transcript, False
    options.sort(key=lambda item: (-item[2], item[1]))
    unit, confusable_name, _ = options[0]

    confusable = schemas.get(confusable_name)
    args = {}
    for name, value in unit.call.arg_map().items():
        if name in confusable.param_map():
            probe = sch.ToolSpec(
                "probe", "", ((name, confusable.param_map()[name]),), frozenset(), ()
            )
            if sch.validate_call_args(probe, {name: value}).ok:
                args[name] = value
    for name, value in sch.conformant_args(confusable).items():
        args.setdefault(name, value)

    idx = unit.call.plan_step_idx
    wrong_call = Turn(
        kind=ASSISTANT_TOOL_CALL,
        content=f"{confusable_name}({json.dumps(args, ensure_ascii=False)})",
        plan_step_idx=idx,
        tool_name=confusable_name,
        args=tuple(args.items()),
    )
    unhelpful = {"message": "No relevant records found for this request."}
    wrong_response = Turn(
        kind=TOOL_RESPONSE,
        content=json.dumps(unhelpful, ensure_ascii=False),
        plan_step_idx=idx,
        tool_name=confusable_name,
        result=tuple(unhelpful.items()),
    )
    turns = list(transcript.turns)
    new_turns = turns[: unit.position] + [wrong_call, wrong_response] + turns[unit.position :]
    return _rebuild(transcript, new_turns, WRONG_TOOL, {"confusable_tool": confusable_name}), True


def inject_schema_violation(
    transcript: DialogueTranscript, schemas: sch.ToolPool, seed: int = 0
) -> tuple[DialogueTranscript, bool]:
    """Mutate one call to violate its schema, then retry with the correct call."""
    rng = random.Random(seed)
    units = _call_units(transcript)
    rng.shuffle(units)
    for unit in units:
        try:
            tool = schemas.get(unit.call.tool_name)
        except KeyError:
            continue
        args = unit.call.arg_map()
        params = tool.param_map()
        mutations: list[tuple[str, str, dict]] = []

        droppable = [n for n in sorted(tool.required) if n in args]
        if droppable:
            name = droppable[0]
            mutated = dict(args)
            mutated.pop(name)
            mutations.append((MISSING_PARAM_TOKEN, name, mutated))
        for name in sorted(args):
            schema = params.get(name)
            if schema is None:
                continue
            if schema.type_tag == "integer":
                mutated = dict(args)
                mutated[name] = str(args[name])
                mutations.append((TYPE_MISMATCH_TOKEN, name, mutated))
                break
            if schema.type_tag == "string" and schema.enum_values is None:
                mutated = dict(args)
                mutated[name] = 12345
                mutations.append((TYPE_MISMATCH_TOKEN, name, mutated))
                break
        for name in sorted(args):
            schema = params.get(name)
            if schema is not None and schema.enum_values:
                mutated = dict(args)
                mutated[name] = "definitely_not_a_valid_choice"
                mutations.append((INVALID_ENUM_TOKEN, name, mutated))
                break
        if not mutations:
            continue

        token, target, mutated_args = mutations[rng.randrange(len(mutations))]
        idx = unit.call.plan_step_idx
        bad_call = Turn(
            kind=ASSISTANT_TOOL_CALL,
            content=f"{tool.name}({json.dumps(mutated_args, ensure_ascii=False)})",
            plan_step_idx=idx,
            tool_name=tool.name,
            args=tuple(mutated_args.items()),
        )
        error = {"error": f"{token}: parameter {target!r} violates the tool schema"}
        error_turn = Turn(
            kind=TOOL_RESPONSE,
            content=json.dumps(error, ensure_ascii=False),
            plan_step_idx=idx,
            tool_name=tool.name,
            result=tuple(error.items()),
        )
        turns = list(transcript.turns)
        new_turns = turns[: unit.position] + [bad_call, error_turn] + turns[unit.position :]
        return _rebuild(transcript, new_turns, SCHEMA_VIOLATION, {"violation_kind": token}), True
    return transcript, False


def inject_missing_function(
    transcript: DialogueTranscript, schemas: sch.ToolPool, rng: random.Random | None = None
) -> tuple[DialogueTranscript, bool]:
    """Hide a scheduled tool, refuse, then proceed once the user supplies its schema."""
    rng = rng or random.Random(0)
    units = _call_units(transcript)
    units = [u for u in units if u.call.tool_name in schemas]
    if not units:
        return transcript, False
    unit = units[rng.randrange(len(units))]
    tool = schemas.get(unit.call.tool_name)
    idx = unit.call.plan_step_idx

    refusal = Turn(
        kind=ASSISTANT_TEXT,
        content=(
            f"I'm sorry, but I don't have a tool called {tool.name} available right now, "
            "so I can't complete that step."
        ),
        plan_step_idx=idx,
    )
    supply = Turn(
        kind=USER,
        content=(
            "Here is the tool definition you need, please use it: "
            + json.dumps(sch.tool_to_document(tool), ensure_ascii=False)
        ),
        plan_step_idx=idx,
    )
    tools_at_refusal = [name for name in transcript.tools if name != tool.name]
    turns = list(transcript.turns)
    new_turns = turns[: unit.position] + [refusal, supply] + turns[unit.position :]
    return (
        _rebuild(
            transcript,
            new_turns,
            MISSING_FUNCTION,
            {"hidden_tool": tool.name, "tools_at_refusal": tools_at_refusal},
        ),
        True,
    )


def inject_errors(
    dialogues: list[DialogueTranscript],
    schemas: sch.ToolPool,
    cfg: InjectionConfig,
    matcher: HybridMatcher | None = None,
) -> list[DialogueTranscript]:
    """Augment a dialogue set with at most one error variant per original.

    Originals are always retained. A per-dialogue draw decides whether to
    inject; complex modes (cascading, then out-of-order, then wrong-tool) are
    attempted with probability complex_share, falling through to a schema
    violation otherwise.
    """
    augmented: list[DialogueTranscript] = []
    for index, dialogue in enumerate(dialogues):
        augmented.append(dialogue)
        rng = random.Random(f"{cfg.seed}:{index}")
        if rng.random() >= cfg.p_inject:
            continue
        variant = None
        if rng.random() < cfg.complex_share:
            if variant is None and CASCADING in cfg.enabled_modes:
                candidate, ok = inject_cascading_failure(dialogue, schemas, rng)
                variant = candidate if ok else None
            if variant is None and OUT_OF_ORDER in cfg.enabled_modes:
                candidate, ok = inject_out_of_order(dialogue, schemas, rng)
                variant = candidate if ok else None
            if variant is None and WRONG_TOOL in cfg.enabled_modes and matcher is not None:
                candidate, ok = inject_wrong_tool(dialogue, schemas, matcher, rng)
                variant = candidate if ok else None
            if variant is None and MISSING_FUNCTION in cfg.enabled_modes:
                candidate, ok = inject_missing_function(dialogue, schemas, rng)
                variant = candidate if ok else None
        if variant is None and SCHEMA_VIOLATION in cfg.enabled_modes:
            candidate, ok = inject_schema_violation(dialogue, schemas, seed=rng.randrange(2**31))
            variant = candidate if ok else None
        if variant is not None:
            augmented.append(variant)
    return augmented


def paraphrase_user_turns(transcript: DialogueTranscript, gateway: Gateway) -> DialogueTranscript:
    """Rewrite user turns while keeping every memory-bound concrete value verbatim."""
    values: list[str] = []
    for unit in _call_units(transcript):
        for value in _flatten_values(unit.call.arg_map()):
            rendered = _render(value)
            if rendered and rendered not in values:
                values.append(rendered)

    new_turns: list[Turn] = []
    changed = False
    for turn in transcript.turns:
        if turn.kind != USER:
            new_turns.append(turn)
            continue
        must_keep = [v for v in values if v in turn.content]
        response = gateway.complete_chat(prompts.paraphrase_utterance(turn.content, must_keep))
        rewrite = response.content.strip()
        if rewrite and all(v in rewrite for v in must_keep):
            new_turns.append(Turn(USER, rewrite, turn.plan_step_idx))
            changed = True
        else:
            new_turns.append(turn)
    if not changed:
        return transcript
    meta = transcript.meta()
    meta["paraphrased"] = True
    return DialogueTranscript(
        turns=tuple(new_turns),
        plan_ref=transcript.plan_ref,
        seed=transcript.seed,
        modified=True,
        tools=transcript.tools,
        metadata=tuple(sorted(meta.items())),
    )


def mask_schema_names(transcript: DialogueTranscript, schemas: sch.ToolPool, seed: int = 0) -> DialogueTranscript:
    """Replace tool names with func_NN identifiers, consistently across the dialogue."""
    rng = random.Random(seed)
    order = sorted(transcript.tools)
    rng.shuffle(order)
    mapping = {name: f"func_{i + 1:02d}" for i, name in enumerate(order)}

    def mask_text(text: str) -> str:
        for name, alias in mapping.items():
            text = re.sub(rf"\b{re.escape(name)}\b", alias, text)
        return text

    new_turns = [
        Turn(
            kind=t.kind,
            content=mask_text(t.content),
            plan_step_idx=t.plan_step_idx,
            tool_name=mapping.get(t.tool_name, t.tool_name) if t.tool_name else None,
            args=t.args,
            result=t.result,
        )
        for t in transcript.turns
    ]
    meta = transcript.meta()
    meta["mask_map"] = mapping
    return DialogueTranscript(
        turns=tuple(new_turns),
        plan_ref=transcript.plan_ref,
        seed=transcript.seed,
        modified=True,
        tools=tuple(mapping[name] for name in transcript.tools),
        metadata=tuple(sorted(meta.items())),
    )


def unmask_schema_names(transcript: DialogueTranscript) -> DialogueTranscript:
    """Invert mask_schema_names using the stored bijection."""
    mapping = transcript.meta().get("mask_map")
    if not mapping:
        return transcript
    inverse = {alias: name for name, alias in mapping.items()}

    def unmask_text(text: str) -> str:
        for alias, name in inverse.items():
            text = re.sub(rf"\b{re.escape(alias)}\b", name, text)
        return text

    new_turns = [
        Turn(
            kind=t.kind,
            content=unmask_text(t.content),
            plan_step_idx=t.plan_step_idx,
            tool_name=inverse.get(t.tool_name, t.tool_name) if t.tool_name else None,
            args=t.args,
            result=t.result,
        )
        for t in transcript.turns
    ]
    meta = transcript.meta()
    meta.pop("mask_map", None)
    return DialogueTranscript(
        turns=tuple(new_turns),
        plan_ref=transcript.plan_ref,
        seed=transcript.seed,
        modified=transcript.modified,
        tools=tuple(inverse.get(name, name) for name in transcript.tools),
        metadata=tuple(sorted(meta.items())),
    )
