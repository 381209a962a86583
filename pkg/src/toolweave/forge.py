"""Tool pool synthesis and tool graph construction.

Runs the five-stage generation curriculum against the gateway, refines and
deduplicates candidates, then wires validated output -> input dataflow edges
into a directed tool graph.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import prompts
from . import schema as sch
from .gateway import Gateway, cosine, extract_structured, GatewayError
from .knowledge import DomainContext

log = logging.getLogger(__name__)

CURRICULUM_STAGES = (
    "Seed Generation",
    "Entity Expansion",
    "Schema Enrichment",
    "Connection Discovery",
    "Pattern Expansion",
)

SEMANTIC_DUP_THRESHOLD = 0.92
SEMANTIC_EDGE_THRESHOLD = 0.80
EDGE_BATCH_SIZE = 20
GENERATION_RETRIES = 2

EXACT_NAME = "exact_name"
LLM_VALIDATED = "llm_validated"

REJECTION_REASONS = ("lexical_dup", "structural_dup", "semantic_dup", "parse_fail", "invariant_fail", "llm_reject")


class ForgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlanStepSpec:
    name: str
    num_to_generate: int
    prompt_template_id: str = ""

    def __post_init__(self):
        if self.name not in CURRICULUM_STAGES:
            raise ForgeError(f"unknown curriculum stage {self.name!r}")
        if self.num_to_generate < 1:
            raise ForgeError("num_to_generate must be positive")


@dataclass(frozen=True)
class SynthesisPlan:
    steps: tuple[PlanStepSpec, ...]

    def __post_init__(self):
        if not self.steps:
            raise ForgeError("synthesis plan needs at least one step")


def load_synthesis_plan(path) -> SynthesisPlan:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return plan_from_document(doc)


def plan_from_document(doc: dict) -> SynthesisPlan:
    steps = tuple(
        PlanStepSpec(
            name=step["name"],
            num_to_generate=int(step["num_to_generate"]),
            prompt_template_id=step.get("prompt_template_id", ""),
        )
        for step in doc["steps"]
    )
    return SynthesisPlan(steps=steps)


def default_synthesis_plan() -> SynthesisPlan:
    """The stock five-stage curriculum with 8/8/5/8/5 generation targets."""
    targets = {"Seed Generation": 8, "Entity Expansion": 8, "Schema Enrichment": 5, "Connection Discovery": 8, "Pattern Expansion": 5}
    return SynthesisPlan(steps=tuple(PlanStepSpec(name, targets[name]) for name in CURRICULUM_STAGES))


@dataclass(frozen=True)
class Edge:
    from_tool: str
    output_name: str
    to_tool: str
    input_name: str
    validation: str = EXACT_NAME


@dataclass(frozen=True)
class ToolGraph:
    nodes: sch.ToolPool
    edges: tuple[Edge, ...]

    def __post_init__(self):
        names = set(self.nodes.names())
        for edge in self.edges:
            if edge.from_tool == edge.to_tool:
                raise ForgeError(f"self-loop edge on {edge.from_tool}")
            if edge.from_tool not in names or edge.to_tool not in names:
                raise ForgeError(f"edge endpoint missing from pool: {edge}")
            if edge.output_name not in sch.flatten_output_names(self.nodes.get(edge.from_tool)):
                raise ForgeError(f"{edge.from_tool} has no output {edge.output_name!r}")
            if edge.input_name not in self.nodes.get(edge.to_tool).param_map():
                raise ForgeError(f"{edge.to_tool} has no parameter {edge.input_name!r}")

    def successors(self, tool_name: str) -> list[str]:
        seen: list[str] = []
        for edge in self.edges:
            if edge.from_tool == tool_name and edge.to_tool not in seen:
                seen.append(edge.to_tool)
        return seen

    def edges_between(self, from_tool: str, to_tool: str) -> list[Edge]:
        return [e for e in self.edges if e.from_tool == from_tool and e.to_tool == to_tool]

    def has_edge(self, from_tool: str, to_tool: str) -> bool:
        return any(e.from_tool == from_tool and e.to_tool == to_tool for e in self.edges)


@dataclass
class RejectionLog:
    entries: list[tuple[str, str, str]] = field(default_factory=list)

    def add(self, candidate_name: str, stage: str, reason: str) -> None:
        assert reason in REJECTION_REASONS, reason
        self.entries.append((candidate_name, stage, reason))

    def reasons_for(self, candidate_name: str) -> list[str]:
        return [reason for name, _, reason in self.entries if name == candidate_name]


def _tool_text(tool: sch.ToolSpec) -> str:
    return f"{tool.name}: {tool.description}"


def _embed_many(gateway: Gateway, texts: list[str]):
    return gateway.embed_texts(texts) if texts else []


def refine_candidate(
    candidate: sch.ToolSpec,
    pool: sch.ToolPool,
    gateway: Gateway,
    semantic_threshold: float = SEMANTIC_DUP_THRESHOLD,
    allow_replacement: bool = False,
) -> tuple[sch.ToolSpec | None, str | None]:
    """Deduplicate and refine one candidate against the current pool.

    Returns (tool, None) on success or (None, reason) on rejection. Echo
    result properties (outputs named like an input parameter) are stripped
    before the single LLM refinement call.
    """
    replacing = allow_replacement and candidate.name in pool
    if not replacing:
        if candidate.name in pool:
            return None, "lexical_dup"
        signature = sch.dedup_signature(candidate)
        if any(sch.dedup_signature(tool) == signature for tool in pool.tools):
            return None, "structural_dup"
        if pool.tools:
            texts = [_tool_text(candidate)] + [_tool_text(t) for t in pool.tools]
            vectors = _embed_many(gateway, texts)
            cand_vec, pool_vecs = vectors[0], vectors[1:]
            if any(cosine(cand_vec, v) >= semantic_threshold for v in pool_vecs):
                return None, "semantic_dup"

    candidate = _strip_echo_outputs(candidate)
    response = gateway.complete_chat(prompts.tool_refinement(sch.tool_to_document(candidate)))
    try:
        refined_doc = extract_structured(response.content, expected=["name", "parameters"])
        refined = sch.parse_tool_spec(refined_doc)
    except (GatewayError, sch.SchemaError):
        return None, "parse_fail"
    refined = _strip_echo_outputs(refined)
    if not replacing and refined.name != candidate.name and refined.name in pool:
        return None, "lexical_dup"
    return refined, None


def _strip_echo_outputs(tool: sch.ToolSpec) -> sch.ToolSpec:
    param_names = set(tool.param_map())
    kept = tuple((name, schema) for name, schema in tool.results if name not in param_names)
    if len(kept) == len(tool.results):
        return tool
    return sch.ToolSpec(
        name=tool.name,
        description=tool.description,
        parameters=tool.parameters,
        required=tool.required,
        results=kept,
        metadata=tool.metadata,
    )


def _existing_payload(pool: sch.ToolPool) -> list[dict]:
    return [
        {
            "name": tool.name,
            "description": tool.description,
            "inputs": tool.param_names(),
            "outputs": sorted(sch.flatten_output_names(tool)),
            "document": sch.tool_to_document(tool),
        }
        for tool in pool.tools
    ]


def run_synthesis_plan(
    ctx: DomainContext,
    plan: SynthesisPlan,
    gateway: Gateway,
    semantic_threshold: float = SEMANTIC_DUP_THRESHOLD,
) -> tuple[sch.ToolPool, RejectionLog]:
    """Execute the curriculum: generate, parse, refine, and accumulate tools.

    Later stages are conditioned on the pool built so far, which lets the
    connection-discovery stage target existing outputs by exact name.
    """
    pool = sch.ToolPool(domain=ctx.domain, tools=())
    rejections = RejectionLog()
    facts = [[relation, value] for relation, value in ctx.facts]

    for step in plan.steps:
        candidates = _generate_candidates(ctx, step, pool, gateway, facts, rejections)
        survivors = 0
        for candidate in candidates:
            is_enrichment = step.name == "Schema Enrichment"
            refined, reason = refine_candidate(
                candidate, pool, gateway, semantic_threshold, allow_replacement=is_enrichment
            )
            if refined is None:
                rejections.add(candidate.name, step.name, reason)
                continue
            if is_enrichment and refined.name in pool:
                tools = tuple(refined if t.name == refined.name else t for t in pool.tools)
                pool = sch.ToolPool(pool.domain, tools)
            else:
                pool = pool.with_tool(refined)
            survivors += 1
        if survivors == 0:
            log.warning("synthesis step %s produced no surviving tools", step.name)

    if not pool.tools:
        raise ForgeError("synthesis plan produced an empty tool pool")
    return pool, rejections


def _generate_candidates(ctx, step, pool, gateway, facts, rejections) -> list[sch.ToolSpec]:
    request = prompts.tool_generation(
        ctx.domain, step.name, step.num_to_generate, ctx.wiki_summary, facts, _existing_payload(pool)
    )
    messages = request.messages
    candidates: list[sch.ToolSpec] = []
    for attempt in range(1 + GENERATION_RETRIES):
        response = gateway.complete_chat(
            request if attempt == 0 else _with_correction(request, messages)
        )
        try:
            docs = extract_structured(response.content, expected="list")
        except GatewayError:
            messages = messages + (
                ("assistant", response.content),
                ("user", "That response was not a JSON array of tool definitions. Respond with only the JSON array."),
            )
            continue
        for doc in docs[: step.num_to_generate]:
            try:
                candidates.append(sch.parse_tool_spec(doc))
            except sch.SchemaError as exc:
                name = doc.get("name", "<unnamed>") if isinstance(doc, dict) else "<unnamed>"
                kind = "invariant_fail" if "required" in str(exc) or "name" in str(exc) else "parse_fail"
                rejections.add(str(name), step.name, kind)
        break
    return candidates


def _with_correction(request, messages):
    from .gateway import ChatRequest

    return ChatRequest(
        messages=messages,
        temperature=request.temperature,
        max_tokens=request.max_tokens,
        model_id=request.model_id,
    )


def construct_tool_graph(
    pool: sch.ToolPool,
    gateway: Gateway,
    exact_mode: bool = True,
    semantic_mode: bool = True,
    semantic_threshold: float = SEMANTIC_EDGE_THRESHOLD,
    batch_size: int = EDGE_BATCH_SIZE,
    rejection_log: RejectionLog | None = None,
) -> ToolGraph:
    """Discover and validate output -> input dataflow edges over the pool.

    Candidates come from exact name matches and, when semantic mode is on,
    embedding similarity over "name: description" texts. Every candidate is
    confirmed or rejected by a batched LLM validation call; confirmed edges
    keep the tag of the mode that discovered them.
    """
    if not pool.tools:
        raise ForgeError("cannot build a graph over an empty pool")
    out_fields = {tool.name: sch.flatten_output_fields(tool) for tool in pool.tools}
    in_fields = {tool.name: list(tool.parameters) for tool in pool.tools}

    out_mats: dict[str, np.ndarray] = {}
    in_mats: dict[str, np.ndarray] = {}
    if semantic_mode:
        texts: list[str] = []
        spans: list[tuple[str, str, int, int]] = []
        for tool in pool.tools:
            for side, fields in (("out", out_fields[tool.name]), ("in", in_fields[tool.name])):
                spans.append((tool.name, side, len(texts), len(texts) + len(fields)))
                texts.extend(f"{name}: {field_schema.description}" for name, field_schema in fields)
        if texts:
            matrix = np.asarray([v.values for v in gateway.embed_texts(texts)], dtype=float)
            norms = np.linalg.norm(matrix, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            matrix = matrix / norms
            for tool_name, side, start, stop in spans:
                (out_mats if side == "out" else in_mats)[tool_name] = matrix[start:stop]

    candidates: list[tuple[Edge, dict]] = []
    seen: set[tuple[str, str, str, str]] = set()

    def add_candidate(src, dst, out_name, out_schema, in_name, in_schema, tag):
        key = (src.name, out_name, dst.name, in_name)
        if key in seen:
            return
        seen.add(key)
        edge = Edge(src.name, out_name, dst.name, in_name, validation=tag)
        payload = {
            "from_tool": src.name,
            "output_name": out_name,
            "output_type": out_schema.type_tag,
            "output_desc": out_schema.description,
            "to_tool": dst.name,
            "input_name": in_name,
            "input_type": in_schema.type_tag,
            "input_desc": in_schema.description,
        }
        candidates.append((edge, payload))

    for src in pool.tools:
        for dst in pool.tools:
            if src.name == dst.name:
                continue
            outs = out_fields[src.name]
            ins = in_fields[dst.name]
            if exact_mode:
                in_by_name = dict(ins)
                for out_name, out_schema in outs:
                    if out_name in in_by_name:
                        add_candidate(src, dst, out_name, out_schema, out_name, in_by_name[out_name], EXACT_NAME)
            if semantic_mode and outs and ins:
                sims = out_mats[src.name] @ in_mats[dst.name].T
                for i, j in zip(*np.nonzero(sims >= semantic_threshold)):
                    out_name, out_schema = outs[i]
                    in_name, in_schema = ins[j]
                    add_candidate(src, dst, out_name, out_schema, in_name, in_schema, LLM_VALIDATED)

    confirmed: list[Edge] = []
    for start in range(0, len(candidates), batch_size):
        batch = candidates[start : start + batch_size]
        response = gateway.complete_chat(prompts.edge_validation([payload for _, payload in batch]))
        verdicts = extract_structured(response.content, expected="list")
        if len(verdicts) != len(batch):
            raise ForgeError(f"edge validator returned {len(verdicts)} verdicts for {len(batch)} pairs")
        for (edge, _), verdict in zip(batch, verdicts):
            if bool(verdict):
                confirmed.append(edge)
            elif rejection_log is not None:
                rejection_log.add(
                    f"{edge.from_tool}.{edge.output_name}->{edge.to_tool}.{edge.input_name}",
                    "graph",
                    "llm_reject",
                )
    return ToolGraph(nodes=pool, edges=tuple(confirmed))


def graph_to_records(graph: ToolGraph) -> list[dict]:
    return [
        {
            "from_tool": e.from_tool,
            "output_name": e.output_name,
            "to_tool": e.to_tool,
            "input_name": e.input_name,
            "validation": e.validation,
        }
        for e in graph.edges
    ]


def graph_from_records(pool: sch.ToolPool, records: list[dict]) -> ToolGraph:
    edges = tuple(
        Edge(r["from_tool"], r["output_name"], r["to_tool"], r["input_name"], r.get("validation", EXACT_NAME))
        for r in records
    )
    return ToolGraph(nodes=pool, edges=edges)
