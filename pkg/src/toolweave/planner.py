"""Compile a (goal, workflow) pair into an ordered dialogue plan.

Every tool-call parameter in the plan carries a provenance marker: either
"$user_provided_$<tool>.<param>" for values the user must supply, or
"$<tool>.<output>" for values flowing from an earlier call. Plans are the
contract the dialogue engine executes verbatim.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field

from . import prompts
from . import schema as sch
from .forge import ToolGraph
from .gateway import Gateway, GatewayError, extract_structured
from .sampler import CONDITIONAL, FAN, GoalRecord, WorkflowSample

log = logging.getLogger(__name__)

USER_UTTERANCE = "USER_UTTERANCE"
ASSISTANT_CLARIFICATION = "ASSISTANT_CLARIFICATION"
USER_RESPONSE_TO_CLARIFICATION = "USER_RESPONSE_TO_CLARIFICATION"
CALL_TOOL = "CALL_TOOL"
ASSISTANT_RESPONSE_TOOL = "ASSISTANT_RESPONSE_TOOL"

ROLES = (
    USER_UTTERANCE,
    ASSISTANT_CLARIFICATION,
    USER_RESPONSE_TO_CLARIFICATION,
    CALL_TOOL,
    ASSISTANT_RESPONSE_TOOL,
)

DEFAULT_P_CLAR = 0.35

_USER_MARKER_RE = re.compile(r"^\$user_provided_\$([a-z][a-z0-9_]*)\.(.+)$")
_DERIVED_MARKER_RE = re.compile(r"^\$([a-z][a-z0-9_]*)\.(.+)$")

# Plan-level violation kinds.
PARTITION_COVERAGE = "partition_coverage"
STEP_ORDER = "step_order"
CALL_TOOL_ARITY = "call_tool_arity"
MARKER_SYNTAX = "marker_syntax"
FORWARD_REFERENCE = "forward_reference"
UNKNOWN_OUTPUT = "unknown_output"
MISSING_PARAM_MARKER = "missing_param_marker"
CLARIFICATION_PAIRING = "clarification_pairing"
UNKNOWN_TOOL = "unknown_tool"
UNKNOWN_PARAM = "unknown_param"


class PlanError(RuntimeError):
    pass


class PlanRejected(PlanError):
    """Subgoal synthesis failed; the (goal, workflow) pair is dropped."""


def user_marker(tool: str, param: str) -> str:
    return f"$user_provided_${tool}.{param}"


def derived_marker(tool: str, output: str) -> str:
    return f"${tool}.{output}"


def parse_marker(marker: str) -> tuple[str, str, str]:
    """Classify a provenance marker: ("user"|"derived", tool, field)."""
    match = _USER_MARKER_RE.match(marker)
    if match:
        return "user", match.group(1), match.group(2)
    match = _DERIVED_MARKER_RE.match(marker)
    if match:
        return "derived", match.group(1), match.group(2)
    raise PlanError(f"malformed provenance marker {marker!r}")


@dataclass(frozen=True)
class PlanStep:
    step_idx: int
    role: str
    subgoal: str | None = None
    tools: tuple[str, ...] = ()
    params: tuple[tuple[str, str], ...] = ()
    outputs: tuple[str, ...] | None = None
    metadata: tuple[tuple[str, object], ...] = ()

    def param_map(self) -> dict[str, str]:
        return dict(self.params)

    def meta(self) -> dict:
        return dict(self.metadata)


@dataclass(frozen=True)
class DialoguePlan:
    goal: GoalRecord
    partitions: tuple[tuple[str, ...], ...]
    steps: tuple[PlanStep, ...]
    p_clar: float
    seed: int

    def call_steps(self) -> list[PlanStep]:
        return [s for s in self.steps if s.role == CALL_TOOL]

    def plan_id(self) -> str:
        import hashlib

        basis = f"{self.goal.goal_text}|{self.goal.workflow.tool_path}|{self.seed}|{self.p_clar}"
        return "plan-" + hashlib.sha256(basis.encode()).hexdigest()[:12]


def partition_tool_path(
    workflow: WorkflowSample,
    goal_text: str,
    pool: sch.ToolPool,
    gateway: Gateway,
    rng: random.Random,
) -> list[list[str]]:
    """Split the workflow's tool path into contiguous sub-goal segments.

    Linear paths are partitioned by the model (validated, two attempts, then
    singleton fallback); fan and conditional paths use deterministic rules.
    """
    path = list(workflow.tool_path)
    if workflow.pattern_type == CONDITIONAL:
        # Decision tool plus the chosen branch stay together in one segment.
        return [path]
    if workflow.pattern_type == FAN:
        start, parallel, merge = workflow.fan_branches
        ordered = [name for name in path if name in parallel]
        split = rng.randint(0, len(ordered))
        first = [start] + ordered[:split]
        second = ordered[split:] + [merge]
        return [first, second]

    summaries = [{"name": n, "description": pool.get(n).description} for n in path]
    request = prompts.path_partition(goal_text, path, summaries)
    for _ in range(2):
        response = gateway.complete_chat(request)
        try:
            proposal = extract_structured(response.content, expected="list")
        except GatewayError:
            continue
        if _valid_partitioning(proposal, path):
            return [list(group) for group in proposal]
    log.warning("partitioner failed twice on %s; falling back to singletons", path)
    return [[name] for name in path]


def _valid_partitioning(proposal, path: list[str]) -> bool:
    if not isinstance(proposal, list) or not proposal:
        return False
    flat: list[str] = []
    for group in proposal:
        if not isinstance(group, list) or not group:
            return False
        flat.extend(group)
    return flat == path


def resolve_param_plan(
    partitions: list[list[str]],
    graph: ToolGraph,
    schemas: sch.ToolPool,
) -> dict[str, str]:
    """Assign a provenance marker to every resolvable tool parameter.

    A parameter is derivable when a graph edge, or an exact-name match against
    a flattened upstream output, supplies it from a tool earlier in the
    concatenated path; the nearest preceding supplier wins. Required
    parameters with no supplier become user-provided; optional ones are left
    to their defaults and omitted from the map.
    """
    path = [name for group in partitions for name in group]
    for name in path:
        if name not in schemas:
            raise PlanError(f"partition tool {name!r} missing from schemas")
    plan: dict[str, str] = {}
    for idx, tool_name in enumerate(path):
        tool = schemas.get(tool_name)
        upstream = path[:idx]
        for param in tool.param_names():
            dotted = f"{tool_name}.{param}"
            suppliers: list[tuple[int, str]] = []
            for up_idx in range(len(upstream) - 1, -1, -1):
                up_name = upstream[up_idx]
                for edge in graph.edges_between(up_name, tool_name):
                    if edge.input_name == param:
                        suppliers.append((up_idx, derived_marker(up_name, edge.output_name)))
                        break
                else:
                    if param in sch.flatten_output_names(schemas.get(up_name)):
                        suppliers.append((up_idx, derived_marker(up_name, param)))
            if suppliers:
                if len(suppliers) > 1:
                    log.debug("%s derivable from %d upstream tools; nearest wins", dotted, len(suppliers))
                plan[dotted] = suppliers[0][1]
            elif param in tool.required:
                plan[dotted] = user_marker(tool_name, param)
            # Optional parameters without a supplier default; recorded as omitted.
    return plan


def weave_plan(
    goal: GoalRecord,
    partitions: list[list[str]],
    param_plan: dict[str, str],
    p_clar: float,
    seed: int,
    pool: sch.ToolPool,
    gateway: Gateway,
) -> DialoguePlan:
    """Emit the ordered step sequence for every partition.

    Per partition: a user utterance carrying the upfront parameters, an
    optional clarification pair for the parameters the seeded Bernoulli draw
    held back, one CALL_TOOL per tool, and a closing tool-response summary.
    """
    if not 0.0 <= p_clar <= 1.0:
        raise PlanError("p_clar must lie in [0, 1]")
    rng = random.Random(seed)
    steps: list[PlanStep] = []
    prior_subgoals: list[str] = []
    idx = 1

    for partition in partitions:
        subgoal = _synthesize_subgoal(goal.goal_text, partition, pool, prior_subgoals, gateway)
        prior_subgoals.append(subgoal)

        upfront: list[tuple[str, str]] = []
        clarified: list[tuple[str, str]] = []
        for tool_name in partition:
            tool = pool.get(tool_name)
            for param in sorted(tool.param_map()):
                dotted = f"{tool_name}.{param}"
                marker = param_plan.get(dotted)
                if marker is None or parse_marker(marker)[0] != "user":
                    continue
                if rng.random() < p_clar:
                    clarified.append((dotted, marker))
                else:
                    upfront.append((dotted, marker))

        meta: tuple = ()
        if goal.workflow.pattern_type == CONDITIONAL and goal.workflow.decision is not None:
            decision_tool, output_name, branch_map = goal.workflow.decision
            meta = (
                ("decision_tool", decision_tool),
                ("decision_output", output_name),
                ("decision_value", goal.workflow.meta().get("decision_value")),
                ("branches", dict(branch_map)),
            )

        steps.append(PlanStep(idx, USER_UTTERANCE, subgoal=subgoal, params=tuple(upfront), metadata=meta))
        idx += 1
        if clarified:
            steps.append(PlanStep(idx, ASSISTANT_CLARIFICATION, params=tuple(clarified)))
            idx += 1
            steps.append(PlanStep(idx, USER_RESPONSE_TO_CLARIFICATION, params=tuple(clarified)))
            idx += 1
        for tool_name in partition:
            tool = pool.get(tool_name)
            call_params = tuple(
                (f"{tool_name}.{param}", param_plan[f"{tool_name}.{param}"])
                for param in tool.param_names()
                if f"{tool_name}.{param}" in param_plan
            )
            omitted = tuple(
                param for param in tool.param_names() if f"{tool_name}.{param}" not in param_plan
            )
            steps.append(
                PlanStep(
                    idx,
                    CALL_TOOL,
                    tools=(tool_name,),
                    params=call_params,
                    metadata=(("omitted_optional", omitted),) if omitted else (),
                )
            )
            idx += 1
        outputs = tuple(
            dotted for tool_name in partition for dotted in sch.dotted_output_names(pool.get(tool_name))
        )
        steps.append(PlanStep(idx, ASSISTANT_RESPONSE_TOOL, tools=tuple(partition), outputs=outputs))
        idx += 1

    return DialoguePlan(
        goal=goal,
        partitions=tuple(tuple(group) for group in partitions),
        steps=tuple(steps),
        p_clar=p_clar,
        seed=seed,
    )


def _synthesize_subgoal(goal_text, partition, pool, prior_subgoals, gateway) -> str:
    tools = [{"name": n, "description": pool.get(n).description} for n in partition]
    request = prompts.subgoal_synthesis(goal_text, tools, prior_subgoals)
    for _ in range(2):
        response = gateway.complete_chat(request)
        text = response.content.strip()
        if text:
            return text
    raise PlanRejected(f"empty subgoal for partition {partition}")


def validate_plan(plan: DialoguePlan, schemas: sch.ToolPool) -> sch.ValidationReport:
    """Check every plan invariant; returns a report rather than raising."""
    violations: list[sch.Violation] = []

    flat = [name for group in plan.partitions for name in group]
    if tuple(flat) != tuple(plan.goal.workflow.tool_path):
        violations.append(
            sch.Violation("partitions", PARTITION_COVERAGE, "partitions do not concatenate to the workflow tool path")
        )

    last_idx = 0
    for step in plan.steps:
        if step.step_idx <= last_idx:
            violations.append(
                sch.Violation(f"step[{step.step_idx}]", STEP_ORDER, "step_idx must be strictly increasing")
            )
        last_idx = step.step_idx
        if step.role not in ROLES:
            violations.append(sch.Violation(f"step[{step.step_idx}]", STEP_ORDER, f"unknown role {step.role!r}"))

    call_position: dict[str, int] = {}
    for step in plan.steps:
        if step.role == CALL_TOOL:
            if len(step.tools) != 1:
                violations.append(
                    sch.Violation(f"step[{step.step_idx}]", CALL_TOOL_ARITY, "CALL_TOOL must name exactly one tool")
                )
                continue
            call_position.setdefault(step.tools[0], step.step_idx)

    for step in plan.steps:
        for dotted, marker in step.params:
            try:
                kind, src_tool, fld = parse_marker(marker)
            except PlanError:
                violations.append(sch.Violation(dotted, MARKER_SYNTAX, f"malformed marker {marker!r}"))
                continue
            if kind == "derived":
                if src_tool not in schemas:
                    violations.append(sch.Violation(dotted, UNKNOWN_TOOL, f"marker references unknown tool {src_tool!r}"))
                    continue
                if fld not in sch.flatten_output_names(schemas.get(src_tool)):
                    violations.append(
                        sch.Violation(dotted, UNKNOWN_OUTPUT, f"{src_tool} has no output {fld!r}")
                    )
                produced_at = call_position.get(src_tool)
                if produced_at is None or produced_at >= step.step_idx:
                    violations.append(
                        sch.Violation(
                            dotted,
                            FORWARD_REFERENCE,
                            f"marker {marker!r} consumed at step {step.step_idx} before {src_tool} is called",
                        )
                    )

    for step in plan.steps:
        if step.role != CALL_TOOL or len(step.tools) != 1:
            continue
        tool_name = step.tools[0]
        if tool_name not in schemas:
            violations.append(sch.Violation(f"step[{step.step_idx}]", UNKNOWN_TOOL, f"unknown tool {tool_name!r}"))
            continue
        tool = schemas.get(tool_name)
        params = step.param_map()
        for required in sorted(tool.required):
            if f"{tool_name}.{required}" not in params:
                violations.append(
                    sch.Violation(
                        f"{tool_name}.{required}",
                        MISSING_PARAM_MARKER,
                        f"required parameter {required!r} has no provenance marker",
                    )
                )
        for dotted in params:
            param_name = dotted.split(".", 1)[1] if dotted.startswith(f"{tool_name}.") else dotted
            if param_name not in tool.param_map():
                violations.append(
                    sch.Violation(dotted, UNKNOWN_PARAM, f"{tool_name} has no parameter {param_name!r}")
                )

    steps = list(plan.steps)
    for pos, step in enumerate(steps):
        if step.role == ASSISTANT_CLARIFICATION:
            follower = steps[pos + 1] if pos + 1 < len(steps) else None
            if follower is None or follower.role != USER_RESPONSE_TO_CLARIFICATION:
                violations.append(
                    sch.Violation(
                        f"step[{step.step_idx}]",
                        CLARIFICATION_PAIRING,
                        "clarification question not immediately followed by the user's response",
                    )
                )
            elif set(follower.param_map()) != set(step.param_map()):
                violations.append(
                    sch.Violation(
                        f"step[{step.step_idx}]",
                        CLARIFICATION_PAIRING,
                        "clarification pair lists different parameter sets",
                    )
                )
        if step.role == USER_RESPONSE_TO_CLARIFICATION:
            prior = steps[pos - 1] if pos > 0 else None
            if prior is None or prior.role != ASSISTANT_CLARIFICATION:
                violations.append(
                    sch.Violation(
                        f"step[{step.step_idx}]",
                        CLARIFICATION_PAIRING,
                        "clarification response without a preceding question",
                    )
                )

    return sch.ValidationReport(tuple(violations))


# -- serialization ---------------------------------------------------------


def step_to_record(step: PlanStep) -> dict:
    record: dict = {"step_idx": step.step_idx, "role": step.role}
    if step.subgoal is not None:
        record["subgoal"] = step.subgoal
    if step.tools:
        record["tools"] = list(step.tools)
    if step.params:
        record["params"] = {dotted: marker for dotted, marker in step.params}
    if step.outputs is not None:
        record["outputs"] = list(step.outputs)
    if step.metadata:
        record["metadata"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in step.metadata}
    return record


def step_from_record(record: dict) -> PlanStep:
    return PlanStep(
        step_idx=record["step_idx"],
        role=record["role"],
        subgoal=record.get("subgoal"),
        tools=tuple(record.get("tools", ())),
        params=tuple(record.get("params", {}).items()),
        outputs=tuple(record["outputs"]) if "outputs" in record else None,
        metadata=tuple(record.get("metadata", {}).items()),
    )


def workflow_to_record(workflow: WorkflowSample) -> dict:
    record: dict = {"pattern_type": workflow.pattern_type, "tool_path": list(workflow.tool_path)}
    if workflow.fan_branches is not None:
        start, parallel, merge = workflow.fan_branches
        record["fan_branches"] = {"start": start, "parallel": list(parallel), "merge": merge}
    if workflow.decision is not None:
        tool, output_name, branch_map = workflow.decision
        record["decision"] = {"tool": tool, "output_name": output_name, "branches": dict(branch_map)}
    if workflow.metadata:
        record["metadata"] = {k: v for k, v in workflow.metadata}
    return record


def workflow_from_record(record: dict) -> WorkflowSample:
    fan = None
    if "fan_branches" in record:
        fb = record["fan_branches"]
        fan = (fb["start"], tuple(fb["parallel"]), fb["merge"])
    decision = None
    if "decision" in record:
        d = record["decision"]
        decision = (d["tool"], d["output_name"], tuple(sorted(d["branches"].items())))
    return WorkflowSample(
        pattern_type=record["pattern_type"],
        tool_path=tuple(record["tool_path"]),
        fan_branches=fan,
        decision=decision,
        metadata=tuple(record.get("metadata", {}).items()),
    )


def goal_to_record(goal: GoalRecord) -> dict:
    meta = goal.meta()
    if "weights" in meta:
        meta["weights"] = list(meta["weights"])
    return {
        "workflow": workflow_to_record(goal.workflow),
        "goal_text": goal.goal_text,
        "coherence": goal.coherence,
        "relevance": goal.relevance,
        "dataflow_score": goal.dataflow_score,
        "length_bonus": goal.length_bonus,
        "final_score": goal.final_score,
        "metadata": meta,
    }


def goal_from_record(record: dict) -> GoalRecord:
    meta = dict(record.get("metadata", {}))
    if "weights" in meta:
        meta["weights"] = tuple(meta["weights"])
    return GoalRecord(
        workflow=workflow_from_record(record["workflow"]),
        goal_text=record["goal_text"],
        coherence=record["coherence"],
        relevance=record["relevance"],
        dataflow_score=record["dataflow_score"],
        length_bonus=record["length_bonus"],
        final_score=record["final_score"],
        metadata=tuple(meta.items()),
    )


def plan_to_record(plan: DialoguePlan) -> dict:
    return {
        "plan_id": plan.plan_id(),
        "goal": goal_to_record(plan.goal),
        "partitions": [list(group) for group in plan.partitions],
        "steps": [step_to_record(s) for s in plan.steps],
        "p_clar": plan.p_clar,
        "seed": plan.seed,
    }


def plan_from_record(record: dict) -> DialoguePlan:
    return DialoguePlan(
        goal=goal_from_record(record["goal"]),
        partitions=tuple(tuple(group) for group in record["partitions"]),
        steps=tuple(step_from_record(s) for s in record["steps"]),
        p_clar=record["p_clar"],
        seed=record["seed"],
    )
