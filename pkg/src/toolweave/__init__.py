"""toolweave: synthesize multi-turn, multi-step tool-calling dialogues.

Pipeline stages: tool graph synthesis -> workflow sampling -> fine-grained
planning -> multi-agent dialogue realization, plus post-processing hardeners
and a quality lab for corpus metrics.
"""

from .schema import (
    ParamSchema,
    ToolPool,
    ToolSpec,
    ValidationReport,
    dedup_signature,
    flatten_output_names,
    parse_tool_spec,
    tool_to_document,
    validate_call_args,
)
from .gateway import ChatRequest, ChatResponse, EmbeddingVector, Gateway, GatewayConfig
from .forge import SynthesisPlan, ToolGraph, construct_tool_graph, run_synthesis_plan
from .sampler import (
    GoalRecord,
    WorkflowSample,
    find_conditional_patterns,
    find_fan_patterns,
    find_linear_paths,
    select_diverse,
)
from .planner import DialoguePlan, PlanStep, partition_tool_path, resolve_param_plan, validate_plan, weave_plan
from .engine import DialogueTranscript, MemoryState, Turn, synthesize_dialogue
from .hardener import InjectionConfig, inject_errors, mask_schema_names, paraphrase_user_turns
from .metrics import api_metrics, detect_hallucinations, dialogue_stats, judge_dialogue
from .pipeline import PipelineConfig, run_all, run_stage

__version__ = "0.1.0"
