"""Post-process a transcript: inject recoverable failures and mask tool names.

Each injector inserts a realistic error episode followed by the untouched
original calls, so every variant still ends in a successful recovery.
"""

import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from demo_graphs import order_shipping_graph

from toolweave.engine import synthesize_dialogue
from toolweave.gateway import Gateway, GatewayConfig
from toolweave.hardener import (
    InjectionConfig,
    inject_errors,
    inject_out_of_order,
    inject_schema_violation,
    mask_schema_names,
    unmask_schema_names,
)
from toolweave.metrics import render_transcript
from toolweave.planner import partition_tool_path, resolve_param_plan, weave_plan
from toolweave.sampler import LINEAR, GoalRecord, WorkflowSample
from toolweave.scripted import ScriptedProvider


def build_transcript(gateway, graph):
    workflow = WorkflowSample(
        pattern_type=LINEAR,
        tool_path=("get_order", "set_mode", "ship_local", "save_track"),
    )
    goal = GoalRecord(
        workflow=workflow, goal_text="Ship my order locally.", coherence=2, relevance=2,
        dataflow_score=0.9, length_bonus=1.0, final_score=3.02,
        metadata=(("weights", (0.5, 0.8, 0.3)),),
    )
    partitions = partition_tool_path(workflow, goal.goal_text, graph.nodes, gateway, random.Random(1))
    param_plan = resolve_param_plan(partitions, graph, graph.nodes)
    plan = weave_plan(goal, partitions, param_plan, p_clar=0.0, seed=11, pool=graph.nodes, gateway=gateway)
    return synthesize_dialogue(plan, graph.nodes, gateway)


def main():
    gateway = Gateway(ScriptedProvider(seed=3), GatewayConfig(mode="live"))
    graph = order_shipping_graph()
    transcript = build_transcript(gateway, graph)
    print(f"original: {len(transcript.tool_calls())} calls, {len(transcript.turns)} turns\n")

    variant, ok = inject_out_of_order(transcript, graph.nodes, random.Random(2))
    print(f"out-of-order injection applied: {ok}")
    if ok:
        premature = variant.tool_calls()[0]
        print(f"  premature call: {premature.content}")
        print(f"  error response: {variant.turns[[i for i, t in enumerate(variant.turns) if t is premature][0] + 1].content}\n")

    variant, ok = inject_schema_violation(transcript, graph.nodes, seed=4)
    print(f"schema violation injection applied: {ok}")
    if ok:
        error = next(t for t in variant.turns if t.kind == "tool_response" and "error" in t.result_map())
        print(f"  standardized error: {error.content}\n")

    cfg = InjectionConfig(p_inject=1.0, complex_share=0.3, seed=9)
    augmented = inject_errors([transcript] * 4, graph.nodes, cfg)
    modes = [d.meta().get("injection_mode") for d in augmented if d.modified]
    print(f"augmented set: {len(augmented)} dialogues (originals retained), variant modes: {modes}\n")

    masked = mask_schema_names(transcript, graph.nodes, seed=1)
    print("masked tool list:", list(masked.tools))
    call_line = next(t for t in masked.turns if t.kind == "assistant_tool_call")
    print("masked call:", call_line.content)
    restored = unmask_schema_names(masked)
    print("unmask round-trip intact:", [t.content for t in restored.turns] == [t.content for t in transcript.turns])


if __name__ == "__main__":
    main()
