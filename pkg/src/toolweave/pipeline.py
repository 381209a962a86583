"""Pipeline orchestration: staged, resumable, reproducible runs plus export.

Each stage reads its upstream JSONL artifacts, writes its own, and records a
manifest of input hashes and config so identical re-runs are no-ops. Seeds are
derived per (stage, domain) from one master seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import engine, forge, hardener, knowledge, metrics, planner, sampler
from . import schema as sch
from .gateway import Gateway, GatewayConfig, HttpProvider
from .scripted import ScriptedProvider

log = logging.getLogger(__name__)

STAGES = ("forge", "sample", "plan", "synthesize", "harden", "analyze")


class PipelineError(RuntimeError):
    pass


class MissingArtifact(PipelineError):
    pass


class ManifestMismatch(PipelineError):
    pass


@dataclass
class PipelineConfig:
    domains: list[str] = field(default_factory=lambda: ["Customer Support"])
    output_dir: str = "out"
    master_seed: int = 7
    synthesis_plan_path: str | None = None
    context_mode: str = "fixture"  # fixture | live
    # Sampling knobs.
    beam_width: int = 3
    max_depth: int = 4
    top_k: int = 6
    mmr_lambda: float = sampler.DEFAULT_MMR_LAMBDA
    weights: tuple[float, float, float] = sampler.DEFAULT_WEIGHTS
    quality_threshold: int = 0
    # Planning knobs.
    p_clar: float = planner.DEFAULT_P_CLAR
    dialogues_per_domain: int | None = None
    # Hardening knobs.
    p_inject: float = 0.5
    complex_share: float = hardener.COMPLEX_SHARE_DEFAULT
    injection_modes: tuple[str, ...] = tuple(sorted(hardener.ALL_MODES))
    mask: bool = False
    paraphrase: bool = False
    # Gateway.
    provider: str = "scripted"  # scripted | http
    gateway_mode: str = "live"  # live | record | replay
    cassette_path: str | None = None
    semantic_edges: bool = True
    parallelism: int = 1  # concurrent domains; artifacts stay per-domain single-writer

    def __post_init__(self):
        for name, value in (("p_clar", self.p_clar), ("p_inject", self.p_inject), ("complex_share", self.complex_share)):
            if not 0.0 <= value <= 1.0:
                raise PipelineError(f"{name} must lie in [0, 1]")
        if self.gateway_mode not in ("live", "record", "replay"):
            raise PipelineError(f"unknown gateway mode {self.gateway_mode!r}")
        if self.provider not in ("scripted", "http"):
            raise PipelineError(f"unknown provider {self.provider!r}")
        if not self.domains:
            raise PipelineError("config needs at least one domain")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["weights"] = list(self.weights)
        data["injection_modes"] = list(self.injection_modes)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        if "weights" in data:
            data["weights"] = tuple(data["weights"])
        if "injection_modes" in data:
            data["injection_modes"] = tuple(data["injection_modes"])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def stage_seed(master_seed: int, stage: str, domain: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{stage}:{domain}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def domain_slug(domain: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", domain.lower()).strip("_")


def build_gateway(cfg: PipelineConfig) -> Gateway:
    cassette_path = cfg.cassette_path or str(Path(cfg.output_dir) / "cassette.jsonl")
    gw_config = GatewayConfig(mode=cfg.gateway_mode, cassette_path=cassette_path)
    if cfg.gateway_mode == "replay":
        return Gateway(provider=None, config=gw_config)
    if cfg.provider == "scripted":
        provider = ScriptedProvider(seed=cfg.master_seed)
        gw_config.embed_model = ScriptedProvider.embed_model_id
    else:
        provider = HttpProvider()
    return Gateway(provider=provider, config=gw_config)


# -- artifact IO -------------------------------------------------------------


def _write_jsonl(path: Path, records: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        raise MissingArtifact(f"missing upstream artifact: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _hash_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_hash(cfg: PipelineConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def _stage_dir(cfg: PipelineConfig, domain: str, stage: str) -> Path:
    return Path(cfg.output_dir) / domain_slug(domain) / stage


def _manifest_path(stage_dir: Path) -> Path:
    return stage_dir / "manifest.json"


def _load_manifest(stage_dir: Path) -> dict | None:
    path = _manifest_path(stage_dir)
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_manifest(stage_dir: Path, stage: str, domain: str, cfg: PipelineConfig, inputs: list[Path], outputs: list[str], seed: int) -> None:
    manifest = {
        "stage": stage,
        "domain": domain,
        "config_hash": _config_hash(cfg),
        "config": cfg.to_dict(),
        "seed": seed,
        "input_hashes": {str(p): _hash_file(p) for p in inputs},
        "outputs": outputs,
    }
    with open(_manifest_path(stage_dir), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _stage_is_current(stage_dir: Path, cfg: PipelineConfig, inputs: list[Path], force: bool) -> bool:
    """True when the previous run's manifest matches inputs and config exactly."""
    if force:
        return False
    manifest = _load_manifest(stage_dir)
    if manifest is None:
        return False
    current = {str(p): _hash_file(p) for p in inputs if p.exists()}
    matches = manifest.get("config_hash") == _config_hash(cfg) and manifest.get("input_hashes") == current
    if matches:
        outputs_exist = all((stage_dir / name).exists() for name in manifest.get("outputs", []))
        return outputs_exist
    raise ManifestMismatch(
        f"{stage_dir} was produced with different inputs or config; re-run with force to overwrite"
    )


# -- stages ------------------------------------------------------------------


def stage_forge(cfg: PipelineConfig, domain: str, gateway: Gateway, force: bool = False) -> Path:
    stage_dir = _stage_dir(cfg, domain, "forge")
    inputs: list[Path] = []
    if cfg.synthesis_plan_path:
        inputs.append(Path(cfg.synthesis_plan_path))
    if _stage_is_current(stage_dir, cfg, inputs, force):
        log.info("forge(%s): up to date, skipping", domain)
        return stage_dir

    if cfg.context_mode == "fixture":
        ctx = knowledge.load_shipped_context(domain)
    else:
        ctx = knowledge.build_domain_context(domain)
    plan = forge.load_synthesis_plan(cfg.synthesis_plan_path) if cfg.synthesis_plan_path else forge.default_synthesis_plan()
    pool, rejections = forge.run_synthesis_plan(ctx, plan, gateway)
    graph = forge.construct_tool_graph(
        pool, gateway, semantic_mode=cfg.semantic_edges, rejection_log=rejections
    )

    stage_dir.mkdir(parents=True, exist_ok=True)
    sch.dump_pool_jsonl(pool, stage_dir / "tools.jsonl")
    _write_jsonl(stage_dir / "graph.jsonl", forge.graph_to_records(graph))
    _write_jsonl(
        stage_dir / "rejections.jsonl",
        [{"candidate": name, "stage": stage, "reason": reason} for name, stage, reason in rejections.entries],
    )
    _write_manifest(stage_dir, "forge", domain, cfg, inputs, ["tools.jsonl", "graph.jsonl", "rejections.jsonl"], stage_seed(cfg.master_seed, "forge", domain))
    return stage_dir


def _load_pool_and_graph(cfg: PipelineConfig, domain: str) -> tuple[sch.ToolPool, forge.ToolGraph]:
    forge_dir = _stage_dir(cfg, domain, "forge")
    tools_path = forge_dir / "tools.jsonl"
    graph_path = forge_dir / "graph.jsonl"
    if not tools_path.exists():
        raise MissingArtifact(f"missing upstream artifact: {tools_path}")
    pool = sch.load_pool_jsonl(tools_path, domain=domain)
    graph = forge.graph_from_records(pool, _read_jsonl(graph_path))
    return pool, graph


def stage_sample(cfg: PipelineConfig, domain: str, gateway: Gateway, force: bool = False) -> Path:
    stage_dir = _stage_dir(cfg, domain, "sample")
    forge_dir = _stage_dir(cfg, domain, "forge")
    inputs = [forge_dir / "tools.jsonl", forge_dir / "graph.jsonl"]
    pool, graph = _load_pool_and_graph(cfg, domain)
    if _stage_is_current(stage_dir, cfg, inputs, force):
        log.info("sample(%s): up to date, skipping", domain)
        return stage_dir

    scorer = sampler.DataflowScorer(graph, gateway)
    workflows = find_all_workflows(graph, cfg.beam_width, cfg.max_depth, scorer)
    records: list[sampler.GoalRecord] = []
    for workflow in workflows:
        goal_text = sampler.synthesize_goal(workflow, pool, gateway)
        if goal_text is None:
            continue
        record = sampler.score_goal(workflow, goal_text, gateway, scorer, cfg.weights, cfg.max_depth)
        if record is None:
            continue
        if record.coherence + record.relevance < cfg.quality_threshold:
            continue
        records.append(record)
    selected = sampler.select_diverse(records, cfg.top_k, cfg.mmr_lambda, gateway)

    _write_jsonl(stage_dir / "goals.jsonl", [planner.goal_to_record(r) for r in selected])
    _write_manifest(stage_dir, "sample", domain, cfg, inputs, ["goals.jsonl"], stage_seed(cfg.master_seed, "sample", domain))
    return stage_dir


def find_all_workflows(graph, beam_width, max_depth, scorer) -> list[sampler.WorkflowSample]:
    linear = sampler.find_linear_paths(graph, beam_width, max_depth, scorer)
    fans = sampler.find_fan_patterns(graph)
    conditionals = sampler.find_conditional_patterns(graph)
    return linear + fans + conditionals


def stage_plan(cfg: PipelineConfig, domain: str, gateway: Gateway, force: bool = False) -> Path:
    stage_dir = _stage_dir(cfg, domain, "plan")
    sample_dir = _stage_dir(cfg, domain, "sample")
    forge_dir = _stage_dir(cfg, domain, "forge")
    inputs = [sample_dir / "goals.jsonl", forge_dir / "tools.jsonl", forge_dir / "graph.jsonl"]
    goal_records = [planner.goal_from_record(r) for r in _read_jsonl(sample_dir / "goals.jsonl")]
    pool, graph = _load_pool_and_graph(cfg, domain)
    if _stage_is_current(stage_dir, cfg, inputs, force):
        log.info("plan(%s): up to date, skipping", domain)
        return stage_dir

    seed = stage_seed(cfg.master_seed, "plan", domain)
    quota = cfg.dialogues_per_domain or len(goal_records)
    plans: list[dict] = []
    for index, goal in enumerate(goal_records[:quota]):
        rng = random.Random(f"{seed}:{index}")
        try:
            partitions = planner.partition_tool_path(goal.workflow, goal.goal_text, pool, gateway, rng)
            param_plan = planner.resolve_param_plan(partitions, graph, pool)
            plan = planner.weave_plan(goal, partitions, param_plan, cfg.p_clar, seed + index, pool, gateway)
        except planner.PlanError as exc:
            log.warning("plan(%s): goal %d rejected: %s", domain, index, exc)
            continue
        report = planner.validate_plan(plan, pool)
        if not report.ok:
            log.warning("plan(%s): goal %d failed validation: %s", domain, index, report.violations[0].message)
            continue
        plans.append(planner.plan_to_record(plan))

    _write_jsonl(stage_dir / "plans.jsonl", plans)
    _write_manifest(stage_dir, "plan", domain, cfg, inputs, ["plans.jsonl"], seed)
    return stage_dir


def stage_synthesize(cfg: PipelineConfig, domain: str, gateway: Gateway, force: bool = False) -> Path:
    stage_dir = _stage_dir(cfg, domain, "synthesize")
    plan_dir = _stage_dir(cfg, domain, "plan")
    forge_dir = _stage_dir(cfg, domain, "forge")
    inputs = [plan_dir / "plans.jsonl", forge_dir / "tools.jsonl"]
    plan_records = _read_jsonl(plan_dir / "plans.jsonl")
    pool, _ = _load_pool_and_graph(cfg, domain)
    if _stage_is_current(stage_dir, cfg, inputs, force):
        log.info("synthesize(%s): up to date, skipping", domain)
        return stage_dir

    records: list[dict] = []
    for record in plan_records:
        plan = planner.plan_from_record(record)
        try:
            transcript = engine.synthesize_dialogue(plan, pool, gateway)
        except engine.EngineRejected as exc:
            log.warning("synthesize(%s): dialogue rejected: %s", domain, exc)
            continue
        out = engine.transcript_to_record(transcript)
        out["domain"] = domain
        records.append(out)

    _write_jsonl(stage_dir / "dialogues.jsonl", records)
    _write_manifest(stage_dir, "synthesize", domain, cfg, inputs, ["dialogues.jsonl"], stage_seed(cfg.master_seed, "synthesize", domain))
    return stage_dir


def stage_harden(cfg: PipelineConfig, domain: str, gateway: Gateway, force: bool = False) -> Path:
    stage_dir = _stage_dir(cfg, domain, "harden")
    synth_dir = _stage_dir(cfg, domain, "synthesize")
    forge_dir = _stage_dir(cfg, domain, "forge")
    inputs = [synth_dir / "dialogues.jsonl", forge_dir / "tools.jsonl"]
    dialogue_records = _read_jsonl(synth_dir / "dialogues.jsonl")
    pool, _ = _load_pool_and_graph(cfg, domain)
    if _stage_is_current(stage_dir, cfg, inputs, force):
        log.info("harden(%s): up to date, skipping", domain)
        return stage_dir

    seed = stage_seed(cfg.master_seed, "harden", domain)
    transcripts = [engine.transcript_from_record(r) for r in dialogue_records]
    if cfg.paraphrase:
        transcripts = [hardener.paraphrase_user_turns(t, gateway) for t in transcripts]
    injection = hardener.InjectionConfig(
        p_inject=cfg.p_inject,
        complex_share=cfg.complex_share,
        seed=seed,
        enabled_modes=frozenset(cfg.injection_modes),
    )
    matcher = hardener.HybridMatcher(gateway)
    augmented = hardener.inject_errors(transcripts, pool, injection, matcher)
    if cfg.mask:
        augmented = [hardener.mask_schema_names(t, pool, seed=seed + i) for i, t in enumerate(augmented)]

    records = []
    for transcript in augmented:
        record = engine.transcript_to_record(transcript)
        record["domain"] = domain
        record.setdefault("injection_mode", None)
        records.append(record)
    _write_jsonl(stage_dir / "dialogues.jsonl", records)
    _write_manifest(stage_dir, "harden", domain, cfg, inputs, ["dialogues.jsonl"], seed)
    return stage_dir


def stage_analyze(cfg: PipelineConfig, domain: str, gateway: Gateway, force: bool = False) -> Path:
    stage_dir = _stage_dir(cfg, domain, "analyze")
    harden_dir = _stage_dir(cfg, domain, "harden")
    synth_dir = _stage_dir(cfg, domain, "synthesize")
    source_dir = harden_dir if (harden_dir / "dialogues.jsonl").exists() else synth_dir
    forge_dir = _stage_dir(cfg, domain, "forge")
    plan_dir = _stage_dir(cfg, domain, "plan")
    inputs = [source_dir / "dialogues.jsonl", forge_dir / "tools.jsonl", forge_dir / "graph.jsonl"]
    dialogue_records = _read_jsonl(source_dir / "dialogues.jsonl")
    pool, graph = _load_pool_and_graph(cfg, domain)
    if _stage_is_current(stage_dir, cfg, inputs, force):
        log.info("analyze(%s): up to date, skipping", domain)
        return stage_dir

    transcripts = [engine.transcript_from_record(r) for r in dialogue_records]
    plans = {}
    plans_path = plan_dir / "plans.jsonl"
    if plans_path.exists():
        for record in _read_jsonl(plans_path):
            plan = planner.plan_from_record(record)
            plans[plan.plan_id()] = plan

    api_report = metrics.api_metrics(pool, graph)
    originals = [t for t in transcripts if not t.modified]
    stats_report = metrics.dialogue_stats(originals or transcripts, plans)
    hallucination_reports = [metrics.detect_hallucinations(t, pool) for t in originals]

    stage_dir.mkdir(parents=True, exist_ok=True)
    with open(stage_dir / "api_metrics.json", "w", encoding="utf-8") as fh:
        json.dump(api_report.to_dict(), fh, indent=2, sort_keys=True)
    with open(stage_dir / "dialogue_stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats_report.to_dict(), fh, indent=2, sort_keys=True)
    with open(stage_dir / "hallucinations.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in hallucination_reports], fh, indent=2, sort_keys=True)
    with open(stage_dir / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(metrics.render_api_table(api_report) + "\n\n")
        fh.write(metrics.render_stats_table(stats_report) + "\n\n")
        fh.write(metrics.render_hallucination_table(hallucination_reports) + "\n")
    _write_manifest(
        stage_dir, "analyze", domain, cfg, inputs,
        ["api_metrics.json", "dialogue_stats.json", "hallucinations.json", "report.txt"],
        stage_seed(cfg.master_seed, "analyze", domain),
    )
    return stage_dir


_STAGE_FUNCS = {
    "forge": stage_forge,
    "sample": stage_sample,
    "plan": stage_plan,
    "synthesize": stage_synthesize,
    "harden": stage_harden,
    "analyze": stage_analyze,
}


def run_stage(stage: str, cfg: PipelineConfig, domain: str, gateway: Gateway | None = None, force: bool = False) -> Path:
    if stage not in _STAGE_FUNCS:
        raise PipelineError(f"unknown stage {stage!r}")
    gateway = gateway or build_gateway(cfg)
    return _STAGE_FUNCS[stage](cfg, domain, gateway, force=force)


def run_all(cfg: PipelineConfig, force: bool = False) -> dict:
    """Run every stage for every domain; per-domain failures are isolated.

    Returns a summary with per-domain status and the final dataset paths.
    """
    gateway = build_gateway(cfg)
    statuses: dict[str, str] = {}

    def run_domain(domain: str) -> tuple[str, str]:
        try:
            for stage in STAGES:
                run_stage(stage, cfg, domain, gateway, force=force)
            return domain, "ok"
        except Exception as exc:
            log.error("domain %s failed: %s", domain, exc)
            return domain, f"failed: {exc}"

    if cfg.parallelism > 1 and len(cfg.domains) > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as executor:
            for domain, status in executor.map(run_domain, cfg.domains):
                statuses[domain] = status
    else:
        for domain in cfg.domains:
            domain, status = run_domain(domain)
            statuses[domain] = status

    succeeded = [d for d, status in statuses.items() if status == "ok"]
    if not succeeded:
        raise PipelineError(f"all domains failed: {statuses}")

    dataset_dir = Path(cfg.output_dir) / "dataset"
    dataset_dir.mkdir(parents=True, exist_ok=True)
    all_records: list[dict] = []
    for domain in succeeded:
        all_records.extend(_read_jsonl(_stage_dir(cfg, domain, "harden") / "dialogues.jsonl"))
    _write_jsonl(dataset_dir / "dialogues.jsonl", all_records)

    pools = {domain: sch.load_pool_jsonl(_stage_dir(cfg, domain, "forge") / "tools.jsonl", domain) for domain in succeeded}
    plan_records: dict[str, dict] = {}
    for domain in succeeded:
        plans_path = _stage_dir(cfg, domain, "plan") / "plans.jsonl"
        if plans_path.exists():
            for record in _read_jsonl(plans_path):
                plan_records[record["plan_id"]] = record
    finetune_records = export_finetune_records(all_records, pools, plan_records)
    _write_jsonl(dataset_dir / "finetune.jsonl", finetune_records)
    return {
        "statuses": statuses,
        "dialogues": str(dataset_dir / "dialogues.jsonl"),
        "finetune": str(dataset_dir / "finetune.jsonl"),
        "count": len(all_records),
    }


# -- finetune export -----------------------------------------------------------


def _mask_json_names(value, mapping: dict[str, str]):
    text = json.dumps(value)
    for name, alias in mapping.items():
        text = re.sub(rf"\b{re.escape(name)}\b", alias, text)
    return json.loads(text)


def _passes_final_gate(transcript, pool: sch.ToolPool | None, plan_record: dict | None) -> bool:
    """Final gate before export: plan validity and recovered-call validity.

    Error variants legitimately contain failing calls, so the gate checks the
    FINAL occurrence of each called tool (the recovery) against its schema.
    """
    if pool is None:
        return True
    mask_map = transcript.meta().get("mask_map") or {}
    inverse = {alias: name for name, alias in mask_map.items()}
    final_calls: dict[str, dict] = {}
    for turn in transcript.tool_calls():
        final_calls[turn.tool_name] = turn.arg_map()
    for name, args in final_calls.items():
        source = inverse.get(name, name)
        if source not in pool:
            return False
        if not sch.validate_call_args(pool.get(source), args).ok:
            return False
    if plan_record is not None:
        plan = planner.plan_from_record(plan_record)
        if not planner.validate_plan(plan, pool).ok:
            return False
    return True


def export_finetune_records(
    dialogue_records: list[dict],
    pools: dict[str, sch.ToolPool],
    plans: dict[str, dict] | None = None,
) -> list[dict]:
    """One training record per dialogue: conversations, tool documents, plan.

    Masked variants export masked tool documents and plan references. Records
    with an illegal conversation alternation, an invalid plan, or a final call
    that fails schema validation are skipped with a log line.
    """
    out: list[dict] = []
    for record in dialogue_records:
        domain = record.get("domain", "")
        pool = pools.get(domain)
        if pool is None and len(pools) == 1:
            pool = next(iter(pools.values()))
        try:
            transcript = engine.transcript_from_record(record)
        except engine.EngineError as exc:
            log.warning("export: skipping record with illegal alternation: %s", exc)
            continue
        if not _passes_final_gate(transcript, pool, (plans or {}).get(record.get("plan_ref", ""))):
            log.warning("export: skipping record failing the final validation gate (%s)", record.get("plan_ref"))
            continue
        mask_map = transcript.meta().get("mask_map") or {}
        inverse = {alias: name for name, alias in mask_map.items()}
        documents = []
        for name in transcript.tools:
            source_name = inverse.get(name, name)
            if pool is None or source_name not in pool:
                continue
            doc = sch.tool_to_document(pool.get(source_name))
            if mask_map:
                doc = _mask_json_names(doc, mask_map)
            documents.append(doc)
        plan_payload = (plans or {}).get(record.get("plan_ref", ""))
        if plan_payload is not None and mask_map:
            plan_payload = _mask_json_names(plan_payload, mask_map)
        conversations = [
            {"role": item["role"], "content": item["content"]}
            for item in record["conversations"]
        ]
        out.append(
            {
                "conversations": conversations,
                "tools": documents,
                "plan": plan_payload,
                "domain": domain,
                "modified": record.get("modified", False),
            }
        )
    return out


def export_finetune(
    dialogue_records: list[dict],
    pools: dict[str, sch.ToolPool],
    path,
    plans: dict[str, dict] | None = None,
) -> int:
    records = export_finetune_records(dialogue_records, pools, plans)
    _write_jsonl(Path(path), records)
    return len(records)
