"""Forge a tool pool and dataflow graph for one domain, fully offline.

The scripted provider stands in for a live model, so the curriculum runs
deterministically: seed tools, entity expansion, schema enrichment,
connection discovery, pattern expansion, then validated edge construction.
"""

from collections import Counter

from toolweave.forge import construct_tool_graph, default_synthesis_plan, run_synthesis_plan
from toolweave.gateway import Gateway, GatewayConfig
from toolweave.knowledge import load_shipped_context
from toolweave.metrics import api_metrics, render_api_table
from toolweave.scripted import ScriptedProvider


def main():
    gateway = Gateway(ScriptedProvider(seed=7), GatewayConfig(mode="live"))
    ctx = load_shipped_context("logistics")
    print(f"domain: {ctx.domain}")
    print(f"summary: {ctx.wiki_summary[:120]}...")
    print(f"facts: {len(ctx.facts)} triples\n")

    plan = default_synthesis_plan()
    print("curriculum:", " -> ".join(f"{s.name}({s.num_to_generate})" for s in plan.steps), "\n")

    pool, rejections = run_synthesis_plan(ctx, plan, gateway)
    print(f"pool: {len(pool.tools)} tools survived")
    reasons = Counter(reason for _, _, reason in rejections.entries)
    print(f"rejections: {dict(reasons) or 'none'}\n")

    graph = construct_tool_graph(pool, gateway)
    tags = Counter(e.validation for e in graph.edges)
    print(f"graph: {len(graph.edges)} validated edges ({dict(tags)})")
    for edge in graph.edges[:5]:
        print(f"  {edge.from_tool}.{edge.output_name} -> {edge.to_tool}.{edge.input_name}")
    print()

    print(render_api_table(api_metrics(pool, graph)))


if __name__ == "__main__":
    main()
