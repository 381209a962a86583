"""Workflow motif sampling over the tool graph, goal synthesis, and diverse selection.

Linear chains come from a bounded beam search ranked by semantic dataflow;
fan-in/fan-out patterns from common-children analysis; conditional patterns
from predicate-typed outputs. Scored (workflow, goal) pairs are pruned with
maximal marginal relevance on the linear subset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import prompts
from . import schema as sch
from .forge import ToolGraph
from .gateway import Gateway, GatewayError, extract_structured
from .similarity import lexical_similarity


def _unit_rows(vectors) -> np.ndarray:
    matrix = np.asarray([v.values for v in vectors], dtype=float)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return matrix / norms

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = (0.5, 0.8, 0.3)  # (w_l, w_d, w_b)
DEFAULT_MMR_LAMBDA = 0.7
ID_LIKE_SUFFIXES = ("_id", "_identifier", "_date", "_time")

LINEAR = "linear"
FAN = "fan"
CONDITIONAL = "conditional"


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorkflowSample:
    pattern_type: str
    tool_path: tuple[str, ...]
    fan_branches: tuple[str, tuple[str, ...], str] | None = None
    decision: tuple[str, str, tuple[tuple[str, str], ...]] | None = None
    metadata: tuple[tuple[str, object], ...] = ()

    def meta(self) -> dict:
        return dict(self.metadata)

    def branch_map(self) -> dict[str, str]:
        if self.decision is None:
            return {}
        return dict(self.decision[2])

    def check(self, graph: ToolGraph) -> None:
        """Raise when the sample violates its pattern invariant on the graph."""
        if self.pattern_type == LINEAR:
            if len(self.tool_path) < 2:
                raise SamplerError("linear path must have length >= 2")
            for a, b in zip(self.tool_path, self.tool_path[1:]):
                if not graph.has_edge(a, b):
                    raise SamplerError(f"missing edge {a} -> {b}")
        elif self.pattern_type == FAN:
            start, parallel, merge = self.fan_branches
            for member in parallel:
                if not graph.has_edge(start, member):
                    raise SamplerError(f"{member} is not a successor of {start}")
                if not graph.has_edge(member, merge):
                    raise SamplerError(f"{member} is not a predecessor of {merge}")
        elif self.pattern_type == CONDITIONAL:
            tool, output_name, _ = self.decision
            schema = dict(sch.flatten_output_fields(graph.nodes.get(tool))).get(output_name)
            if schema is None or not (schema.type_tag == "boolean" or schema.enum_values):
                raise SamplerError(f"{tool}.{output_name} is not a boolean/enum predicate")
            for branch in self.branch_map().values():
                if not graph.has_edge(tool, branch):
                    raise SamplerError(f"branch {branch} is not a successor of {tool}")
        else:
            raise SamplerError(f"unknown pattern type {self.pattern_type!r}")


class DataflowScorer:
    """Semantic dataflow between tools: max cosine over output/input field embeddings."""

    def __init__(self, graph: ToolGraph, gateway: Gateway):
        self.graph = graph
        self._pair_cache: dict[tuple[str, str], float] = {}
        texts: list[str] = []
        spans: list[tuple[str, str, int, int]] = []
        for tool in graph.nodes.tools:
            out_fields = sch.flatten_output_fields(tool)
            spans.append((tool.name, "out", len(texts), len(texts) + len(out_fields)))
            texts.extend(f"{name}: {schema.description}" for name, schema in out_fields)
            spans.append((tool.name, "in", len(texts), len(texts) + len(tool.parameters)))
            texts.extend(f"{name}: {schema.description}" for name, schema in tool.parameters)
        matrix = _unit_rows(gateway.embed_texts(texts)) if texts else np.zeros((0, 1))
        self._out_mat: dict[str, np.ndarray] = {}
        self._in_mat: dict[str, np.ndarray] = {}
        for tool_name, side, start, stop in spans:
            target = self._out_mat if side == "out" else self._in_mat
            target[tool_name] = matrix[start:stop]

    def pairwise(self, from_tool: str, to_tool: str) -> float:
        key = (from_tool, to_tool)
        if key not in self._pair_cache:
            outs = self._out_mat.get(from_tool)
            ins = self._in_mat.get(to_tool)
            if outs is None or ins is None or outs.size == 0 or ins.size == 0:
                self._pair_cache[key] = 0.0
            else:
                self._pair_cache[key] = float((outs @ ins.T).max())
        return self._pair_cache[key]

    def path_score(self, path: tuple[str, ...]) -> float:
        pairs = list(zip(path, path[1:]))
        if not pairs:
            return 0.0
        return sum(self.pairwise(a, b) for a, b in pairs) / len(pairs)


def find_linear_paths(
    graph: ToolGraph,
    beam_width: int,
    max_depth: int,
    scorer: DataflowScorer,
    stats: dict | None = None,
) -> list[WorkflowSample]:
    """Bounded beam search for linear chains of length 2..max_depth.

    Each start node keeps at most beam_width frontier candidates per depth,
    ranked by accumulated dataflow score; paths never repeat a node.
    """
    if beam_width < 1 or max_depth < 2:
        raise SamplerError("beam_width must be >= 1 and max_depth >= 2")
    samples: list[WorkflowSample] = []
    max_frontier = 0
    for start in graph.nodes.names():
        frontier: list[tuple[str, ...]] = [(start,)]
        for _depth in range(2, max_depth + 1):
            extensions: list[tuple[str, ...]] = []
            for path in frontier:
                for succ in graph.successors(path[-1]):
                    if succ not in path:
                        extensions.append(path + (succ,))
            if not extensions:
                break
            extensions.sort(key=lambda p: (-scorer.path_score(p), p))
            frontier = extensions[:beam_width]
            max_frontier = max(max_frontier, len(frontier))
            samples.extend(WorkflowSample(pattern_type=LINEAR, tool_path=p) for p in frontier)
    if stats is not None:
        stats["max_frontier"] = max_frontier
        stats["max_path_len"] = max((len(s.tool_path) for s in samples), default=0)
    return samples


MAX_FAN_BRANCHES = 4


def find_fan_patterns(graph: ToolGraph, max_branches: int = MAX_FAN_BRANCHES) -> list[WorkflowSample]:
    """Fan-out/fan-in motifs: a start node, >= 2 parallel successors, and each common child.

    Branch-set size is capped to keep dense graphs from exploding
    combinatorially.
    """
    samples: list[WorkflowSample] = []
    for start in graph.nodes.names():
        successors = sorted(graph.successors(start))
        for size in range(2, min(len(successors), max_branches) + 1):
            for combo in combinations(successors, size):
                common = None
                for member in combo:
                    children = set(graph.successors(member))
                    common = children if common is None else common & children
                common = (common or set()) - {start} - set(combo)
                for merge in sorted(common):
                    samples.append(
                        WorkflowSample(
                            pattern_type=FAN,
                            tool_path=(start, *combo, merge),
                            fan_branches=(start, combo, merge),
                        )
                    )
    return samples


def _is_predicate_output(name: str, schema: sch.ParamSchema) -> bool:
    if any(name.endswith(suffix) for suffix in ID_LIKE_SUFFIXES):
        return False
    return schema.type_tag == "boolean" or bool(schema.enum_values)


def find_conditional_patterns(graph: ToolGraph) -> list[WorkflowSample]:
    """Conditional motifs: a boolean/enum output selects among >= 2 successor branches.

    Predicate values are paired to branch tools by lexical affinity, so an
    enum value like "local" lands on the branch named closest to it.
    """
    samples: list[WorkflowSample] = []
    for tool in graph.nodes.tools:
        successors = sorted(graph.successors(tool.name))
        if len(successors) < 2:
            continue
        for out_name, out_schema in sch.flatten_output_fields(tool):
            if not _is_predicate_output(out_name, out_schema):
                continue
            values = ["true", "false"] if out_schema.type_tag == "boolean" else [str(v) for v in out_schema.enum_values]
            count = min(len(values), len(successors))
            if count < 2:
                continue
            remaining = list(successors)
            assignment: list[tuple[str, str]] = []
            for value in values[:count]:
                best = max(remaining, key=lambda name: (lexical_similarity(value, name), name))
                assignment.append((value, best))
                remaining.remove(best)
            branch_map = tuple(assignment)
            for value, branch in assignment:
                samples.append(
                    WorkflowSample(
                        pattern_type=CONDITIONAL,
                        tool_path=(tool.name, branch),
                        decision=(tool.name, out_name, branch_map),
                        metadata=(("decision_value", value),),
                    )
                )
    return samples


@dataclass(frozen=True)
class GoalRecord:
    workflow: WorkflowSample
    goal_text: str
    coherence: int
    relevance: int
    dataflow_score: float
    length_bonus: float
    final_score: float
    metadata: tuple[tuple[str, object], ...] = ()

    def meta(self) -> dict:
        return dict(self.metadata)

    def recompose_score(self) -> float:
        w_l, w_d, w_b = self.meta().get("weights", DEFAULT_WEIGHTS)
        return w_l * (self.coherence + self.relevance) + w_d * self.dataflow_score + w_b * self.length_bonus


def synthesize_goal(workflow: WorkflowSample, pool: sch.ToolPool, gateway: Gateway) -> str | None:
    """One natural-language goal per workflow; None when generation stays empty."""
    tools = [{"name": name, "description": pool.get(name).description} for name in workflow.tool_path]
    extra: dict = {}
    if workflow.pattern_type == CONDITIONAL:
        extra["branches"] = sorted(workflow.branch_map().values())
        extra["decision_output"] = workflow.decision[1]
    if workflow.pattern_type == FAN:
        start, parallel, merge = workflow.fan_branches
        extra["fan"] = {"start": start, "parallel": list(parallel), "merge": merge}
    request = prompts.goal_synthesis(workflow.pattern_type, tools, extra)
    for _ in range(2):
        response = gateway.complete_chat(request)
        text = response.content.strip()
        if text:
            return text
    return None


def score_goal(
    workflow: WorkflowSample,
    goal_text: str,
    gateway: Gateway,
    scorer: DataflowScorer,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
    max_depth: int = 6,
) -> GoalRecord | None:
    """Assemble the hybrid score: LLM coherence/relevance, dataflow, length bonus."""
    if not goal_text:
        raise SamplerError("goal_text must be nonempty")
    request = prompts.goal_scoring(goal_text, list(workflow.tool_path), workflow.pattern_type)
    ratings = None
    for _ in range(2):
        response = gateway.complete_chat(request)
        try:
            parsed = extract_structured(response.content, expected=["coherence", "relevance"])
        except GatewayError:
            continue
        coherence, relevance = parsed["coherence"], parsed["relevance"]
        if isinstance(coherence, int) and isinstance(relevance, int) and -2 <= coherence <= 2 and -2 <= relevance <= 2:
            ratings = (coherence, relevance)
            break
    if ratings is None:
        log.warning("judge returned out-of-range ratings for %s; pair rejected", workflow.tool_path)
        return None
    coherence, relevance = ratings
    dataflow = scorer.path_score(workflow.tool_path)
    bonus = 0.0
    if max_depth > 2:
        bonus = (len(workflow.tool_path) - 2) / (max_depth - 2)
    w_l, w_d, w_b = weights
    final = w_l * (coherence + relevance) + w_d * dataflow + w_b * bonus
    return GoalRecord(
        workflow=workflow,
        goal_text=goal_text,
        coherence=coherence,
        relevance=relevance,
        dataflow_score=dataflow,
        length_bonus=bonus,
        final_score=final,
        metadata=(("weights", tuple(weights)),),
    )


def mmr_select(records: list[GoalRecord], k: int, lam: float, gateway: Gateway) -> list[GoalRecord]:
    """Greedy maximal marginal relevance over goal-text embeddings.

    Scores are min-max normalized before mixing; the first pick is the top
    final_score, every next pick maximizes lam * score - (1 - lam) * max
    similarity to the already-selected set.
    """
    if k < 1:
        raise SamplerError("k must be >= 1")
    if not records:
        return []
    matrix = _unit_rows(gateway.embed_texts([r.goal_text for r in records]))
    similarity = matrix @ matrix.T
    scores = [r.final_score for r in records]
    low, high = min(scores), max(scores)
    span = high - low
    normalized = [1.0 if span == 0 else (s - low) / span for s in scores]

    selected: list[int] = []
    remaining = list(range(len(records)))
    first = max(remaining, key=lambda i: (scores[i], -i))
    selected.append(first)
    remaining.remove(first)
    while remaining and len(selected) < k:
        def mmr_value(i: int) -> float:
            redundancy = max(float(similarity[i, j]) for j in selected)
            return lam * normalized[i] - (1 - lam) * redundancy

        pick = max(remaining, key=lambda i: (mmr_value(i), -i))
        selected.append(pick)
        remaining.remove(pick)
    return [records[i] for i in selected]


def select_diverse(records: list[GoalRecord], k: int, lam: float, gateway: Gateway) -> list[GoalRecord]:
    """MMR-prune linear records; fan and conditional records all pass through."""
    linear = [r for r in records if r.workflow.pattern_type == LINEAR]
    passthrough = [r for r in records if r.workflow.pattern_type != LINEAR]
    chosen = mmr_select(linear, k, lam, gateway) if linear else []
    return chosen + passthrough
