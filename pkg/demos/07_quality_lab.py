"""Run the quality lab end to end on a freshly generated mini-corpus.

Covers the API metrics table, dialogue structure statistics with true
multi-step detection, deterministic hallucination checks, and the
LLM-as-judge protocol (scripted judge here; point the gateway at a live
endpoint for real scores).
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from toolweave.metrics import (
    api_metrics,
    detect_hallucinations,
    dialogue_stats,
    judge_dialogue,
    render_api_table,
    render_hallucination_table,
    render_stats_table,
)
from toolweave.pipeline import PipelineConfig, build_gateway, run_all, _read_jsonl, _stage_dir
from toolweave import engine, planner
from toolweave import schema as sch
from toolweave.forge import graph_from_records


def main(tmp="demo_out"):
    cfg = PipelineConfig(
        domains=["Customer Support"],
        output_dir=tmp,
        master_seed=42,
        beam_width=2,
        max_depth=3,
        top_k=4,
        dialogues_per_domain=5,
        provider="scripted",
        gateway_mode="live",
    )
    summary = run_all(cfg, force=True)
    print(f"pipeline produced {summary['count']} dialogues\n")

    domain = cfg.domains[0]
    forge_dir = _stage_dir(cfg, domain, "forge")
    pool = sch.load_pool_jsonl(forge_dir / "tools.jsonl", domain)
    graph = graph_from_records(pool, _read_jsonl(forge_dir / "graph.jsonl"))
    print(render_api_table(api_metrics(pool, graph)), "\n")

    records = _read_jsonl(Path(summary["dialogues"]))
    transcripts = [engine.transcript_from_record(r) for r in records]
    plans = {}
    for record in _read_jsonl(_stage_dir(cfg, domain, "plan") / "plans.jsonl"):
        plan = planner.plan_from_record(record)
        plans[plan.plan_id()] = plan
    originals = [t for t in transcripts if not t.modified]
    print(render_stats_table(dialogue_stats(originals, plans)), "\n")

    reports = [detect_hallucinations(t, pool) for t in originals]
    print(render_hallucination_table(reports), "\n")

    gateway = build_gateway(cfg)
    scores = judge_dialogue(originals[0], gateway)
    print("judge:", scores.to_dict())


if __name__ == "__main__":
    main()
