"""Sample workflow motifs from a tool graph, synthesize goals, score, and diversify.

Shows all three motif families on a hand-wired order-shipping graph: linear
chains from beam search, fan-out/fan-in from common-children analysis, and
conditional branches from predicate-typed outputs, followed by the hybrid
scoring formula and MMR selection.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from demo_graphs import order_shipping_graph

from toolweave.gateway import Gateway, GatewayConfig
from toolweave.sampler import (
    DataflowScorer,
    find_conditional_patterns,
    find_fan_patterns,
    find_linear_paths,
    score_goal,
    select_diverse,
    synthesize_goal,
)
from toolweave.scripted import ScriptedProvider


def main():
    gateway = Gateway(ScriptedProvider(seed=3), GatewayConfig(mode="live"))
    graph = order_shipping_graph()
    scorer = DataflowScorer(graph, gateway)

    linear = find_linear_paths(graph, beam_width=4, max_depth=4, scorer=scorer)
    fans = find_fan_patterns(graph)
    conditionals = find_conditional_patterns(graph)
    print(f"motifs: {len(linear)} linear, {len(fans)} fan, {len(conditionals)} conditional")
    print("longest linear:", " -> ".join(max(linear, key=lambda s: len(s.tool_path)).tool_path))
    if fans:
        start, parallel, merge = fans[0].fan_branches
        print(f"fan example: {start} -> {{{', '.join(parallel)}}} -> {merge}")
    if conditionals:
        sample = conditionals[0]
        print(f"conditional example: {sample.decision[0]}.{sample.decision[1]} selects {sample.branch_map()}")
    print()

    records = []
    for workflow in (linear + fans + conditionals)[:12]:
        goal_text = synthesize_goal(workflow, graph.nodes, gateway)
        record = score_goal(workflow, goal_text, gateway, scorer, max_depth=4)
        if record is not None and record.coherence + record.relevance >= 0:
            records.append(record)
    print(f"scored {len(records)} (workflow, goal) pairs; example:")
    best = max(records, key=lambda r: r.final_score)
    print(f"  goal: {best.goal_text}")
    print(f"  coherence={best.coherence} relevance={best.relevance} "
          f"dataflow={best.dataflow_score:.3f} bonus={best.length_bonus:.2f} final={best.final_score:.3f}\n")

    selected = select_diverse(records, k=3, lam=0.7, gateway=gateway)
    print(f"after MMR (linear pruned to 3, fan/conditional kept): {len(selected)} goals")
    for record in selected:
        print(f"  [{record.workflow.pattern_type:11s}] {record.goal_text}")


if __name__ == "__main__":
    main()
