"""Compile a goal into a fine-grained dialogue plan with parameter provenance.

Every tool-call parameter ends up tagged either "$user_provided_$tool.param"
(the user must say it) or "$tool.output" (it flows from an earlier call), and
a seeded Bernoulli draw decides which user parameters are withheld until the
assistant asks.
"""

import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from demo_graphs import order_shipping_graph

from toolweave.gateway import Gateway, GatewayConfig
from toolweave.planner import partition_tool_path, resolve_param_plan, validate_plan, weave_plan
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
        goal_text="Look up my order, pick the right shipping mode, ship it locally, and save the tracking code.",
        coherence=2, relevance=2, dataflow_score=0.9, length_bonus=1.0,
        final_score=0.5 * 4 + 0.8 * 0.9 + 0.3 * 1.0,
        metadata=(("weights", (0.5, 0.8, 0.3)),),
    )

    partitions = partition_tool_path(workflow, goal.goal_text, graph.nodes, gateway, random.Random(1))
    print("partitions:", partitions, "\n")

    param_plan = resolve_param_plan(partitions, graph, graph.nodes)
    print("parameter provenance:")
    for dotted, marker in param_plan.items():
        print(f"  {dotted:28s} <- {marker}")
    print()

    plan = weave_plan(goal, partitions, param_plan, p_clar=0.35, seed=11, pool=graph.nodes, gateway=gateway)
    report = validate_plan(plan, graph.nodes)
    print(f"plan: {len(plan.steps)} steps, valid={report.ok}")
    for step in plan.steps:
        extra = ""
        if step.role == "CALL_TOOL":
            extra = f" {step.tools[0]}"
        elif step.subgoal:
            extra = f" {step.subgoal!r}"
        elif step.params:
            extra = f" asks {sorted(dict(step.params))}"
        print(f"  {step.step_idx:>2}. {step.role}{extra}")


if __name__ == "__main__":
    main()
