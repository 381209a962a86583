"""Realize a dialogue plan as a full multi-turn transcript.

The engine walks the plan with a persistent memory: user agents invent
concrete values for user-provided markers, tool agents simulate
schema-conformant results, and marker-tagged arguments are substituted
byte-for-byte from memory.
"""

import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from demo_graphs import order_shipping_graph

from toolweave.engine import synthesize_dialogue
from toolweave.gateway import Gateway, GatewayConfig
from toolweave.metrics import detect_hallucinations, render_transcript
from toolweave.planner import partition_tool_path, resolve_param_plan, weave_plan
from toolweave.sampler import LINEAR, GoalRecord, WorkflowSample
from toolweave.scripted import ScriptedProvider


def main():
    gateway = Gateway(ScriptedProvider(seed=3), GatewayConfig(mode="live"))
    graph = order_shipping_graph()
    workflow = WorkflowSample(
        pattern_type=LINEAR,
        tool_path=("get_order", "set_mode", "ship_local", "save_track"),
    )
    goal = GoalRecord(
        workflow=workflow,
        goal_text="Ship my order locally and give me the tracking code.",
        coherence=2, relevance=2, dataflow_score=0.9, length_bonus=1.0,
        final_score=3.02, metadata=(("weights", (0.5, 0.8, 0.3)),),
    )
    partitions = partition_tool_path(workflow, goal.goal_text, graph.nodes, gateway, random.Random(1))
    param_plan = resolve_param_plan(partitions, graph, graph.nodes)
    plan = weave_plan(goal, partitions, param_plan, p_clar=0.5, seed=11, pool=graph.nodes, gateway=gateway)

    transcript = synthesize_dialogue(plan, graph.nodes, gateway)
    print(render_transcript(transcript))
    print()
    print(f"tool calls: {len(transcript.tool_calls())}")
    report = detect_hallucinations(transcript, graph.nodes)
    print(f"hallucination-free: {report.clean}")


if __name__ == "__main__":
    main()
