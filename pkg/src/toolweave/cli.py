"""Command-line entry point: run pipeline stages, full runs, analysis, and export."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import engine, metrics, pipeline
from . import schema as sch

log = logging.getLogger("toolweave")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON pipeline config file")
    parser.add_argument("--domain", action="append", dest="domains", help="domain name (repeatable)")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--force", action="store_true", help="re-run stages even when manifests match")
    parser.add_argument("--output-dir", type=Path, help="artifact output directory")
    parser.add_argument("--provider", choices=["scripted", "http"], help="model provider")
    parser.add_argument("--mode", choices=["live", "record", "replay"], dest="gateway_mode", help="gateway mode")
    parser.add_argument("--cassette", type=Path, help="cassette path for record/replay")
    parser.add_argument("--context", choices=["fixture", "live"], dest="context_mode", help="domain grounding source")


def _add_sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--beam-width", type=int)
    parser.add_argument("--max-depth", type=int)
    parser.add_argument("--top-k", type=int)
    parser.add_argument("--mmr-lambda", type=float)
    parser.add_argument("--weights", type=float, nargs=3, metavar=("W_L", "W_D", "W_B"))


def _add_planner_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--p-clar", type=float)


def _add_hardener_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--p-inject", type=float)
    parser.add_argument("--complex-share", type=float)
    parser.add_argument("--modes", help="comma-separated injection modes")
    parser.add_argument("--mask", action="store_true", default=None)
    parser.add_argument("--paraphrase", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolweave", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in pipeline.STAGES:
        stage_parser = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_common(stage_parser)
        if stage == "sample":
            _add_sampler_flags(stage_parser)
        if stage == "plan":
            _add_planner_flags(stage_parser)
        if stage == "harden":
            _add_hardener_flags(stage_parser)

    run_all_parser = sub.add_parser("run-all", help="run every stage for every domain")
    _add_common(run_all_parser)
    _add_sampler_flags(run_all_parser)
    _add_planner_flags(run_all_parser)
    _add_hardener_flags(run_all_parser)

    export_parser = sub.add_parser("export", help="export finetune.jsonl from dialogue records")
    _add_common(export_parser)
    export_parser.add_argument("--dialogues", type=Path, help="dialogues.jsonl to export (defaults to run output)")
    export_parser.add_argument("--out", type=Path, help="output path (defaults to <output-dir>/dataset/finetune.jsonl)")

    analyze_file = sub.add_parser("analyze-file", help="analyze an arbitrary dialogues.jsonl")
    analyze_file.add_argument("dialogues", type=Path)
    analyze_file.add_argument("--tools", type=Path, required=True, help="tools.jsonl with the schemas")
    analyze_file.add_argument("--graph", type=Path, help="graph.jsonl (optional, for chain metrics)")
    return parser


def _config_from_args(args: argparse.Namespace) -> pipeline.PipelineConfig:
    if getattr(args, "config", None):
        cfg = pipeline.PipelineConfig.load(args.config)
    else:
        cfg = pipeline.PipelineConfig()
    overrides = {
        "domains": getattr(args, "domains", None),
        "master_seed": getattr(args, "seed", None),
        "output_dir": str(args.output_dir) if getattr(args, "output_dir", None) else None,
        "provider": getattr(args, "provider", None),
        "gateway_mode": getattr(args, "gateway_mode", None),
        "cassette_path": str(args.cassette) if getattr(args, "cassette", None) else None,
        "context_mode": getattr(args, "context_mode", None),
        "beam_width": getattr(args, "beam_width", None),
        "max_depth": getattr(args, "max_depth", None),
        "top_k": getattr(args, "top_k", None),
        "mmr_lambda": getattr(args, "mmr_lambda", None),
        "weights": tuple(args.weights) if getattr(args, "weights", None) else None,
        "p_clar": getattr(args, "p_clar", None),
        "p_inject": getattr(args, "p_inject", None),
        "complex_share": getattr(args, "complex_share", None),
        "mask": getattr(args, "mask", None),
        "paraphrase": getattr(args, "paraphrase", None),
    }
    modes = getattr(args, "modes", None)
    if modes:
        overrides["injection_modes"] = tuple(m.strip() for m in modes.split(",") if m.strip())
    for name, value in overrides.items():
        if value is not None:
            setattr(cfg, name, value)
    cfg.__post_init__()
    return cfg


def _cmd_stage(stage: str, args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    gateway = pipeline.build_gateway(cfg)
    failures = 0
    for domain in cfg.domains:
        try:
            out_dir = pipeline.run_stage(stage, cfg, domain, gateway, force=args.force)
            print(f"{stage}({domain}) -> {out_dir}")
        except Exception as exc:
            log.error("%s(%s) failed: %s", stage, domain, exc)
            failures += 1
    if failures == len(cfg.domains):
        return 2
    return 1 if failures else 0


def _cmd_run_all(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    try:
        summary = pipeline.run_all(cfg, force=args.force)
    except pipeline.PipelineError as exc:
        log.error("run-all failed: %s", exc)
        return 2
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if all(v == "ok" for v in summary["statuses"].values()) else 1


def _cmd_export(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    dialogues_path = args.dialogues or Path(cfg.output_dir) / "dataset" / "dialogues.jsonl"
    out_path = args.out or Path(cfg.output_dir) / "dataset" / "finetune.jsonl"
    if not dialogues_path.exists():
        log.error("missing dialogues file: %s", dialogues_path)
        return 2
    records = pipeline._read_jsonl(dialogues_path)
    pools = {}
    plans: dict[str, dict] = {}
    for domain in cfg.domains:
        tools_path = pipeline._stage_dir(cfg, domain, "forge") / "tools.jsonl"
        if tools_path.exists():
            pools[domain] = sch.load_pool_jsonl(tools_path, domain)
        plans_path = pipeline._stage_dir(cfg, domain, "plan") / "plans.jsonl"
        if plans_path.exists():
            for record in pipeline._read_jsonl(plans_path):
                plans[record["plan_id"]] = record
    count = pipeline.export_finetune(records, pools, out_path, plans)
    print(f"exported {count} records -> {out_path}")
    return 0


def _cmd_analyze_file(args: argparse.Namespace) -> int:
    from . import forge as forge_mod

    pool = sch.load_pool_jsonl(args.tools)
    graph_records = pipeline._read_jsonl(args.graph) if args.graph else []
    graph = forge_mod.graph_from_records(pool, graph_records)
    records = pipeline._read_jsonl(args.dialogues)
    transcripts = [engine.transcript_from_record(r) for r in records]
    print(metrics.render_api_table(metrics.api_metrics(pool, graph)))
    print()
    print(metrics.render_stats_table(metrics.dialogue_stats(transcripts)))
    print()
    reports = [metrics.detect_hallucinations(t, pool) for t in transcripts]
    print(metrics.render_hallucination_table(reports))
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in pipeline.STAGES:
        return _cmd_stage(args.command, args)
    if args.command == "run-all":
        return _cmd_run_all(args)
    if args.command == "export":
        return _cmd_export(args)
    if args.command == "analyze-file":
        return _cmd_analyze_file(args)
    parser.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
