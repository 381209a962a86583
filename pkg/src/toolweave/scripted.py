"""Deterministic local provider for offline pipeline runs.

Parses the tagged task block out of each prompt and synthesizes a plausible,
schema-correct response with a RNG derived from the request fingerprint, so
identical requests always yield identical responses. Useful for tests, demos,
and recording cassettes without a live endpoint.
"""

from __future__ import annotations

import hashlib
import json
import random
import re

from . import schema as sch
from .gateway import (
    ChatRequest,
    ChatResponse,
    HashingEmbedder,
    extract_structured,
)
from .similarity import lexical_similarity

_TAG_RE = re.compile(r"### TASK DATA \(tag=(\w+)\) ###")

_VERBS = ["create", "get", "search", "update", "schedule", "register", "cancel", "list"]
_STATUS_ENUM = ["open", "in_progress", "resolved", "closed"]
_PRIORITY_ENUM = ["low", "medium", "high"]


def _humanize(name: str) -> str:
    return name.replace("_", " ")


def _snake(text: str) -> str:
    cleaned = re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")
    cleaned = re.sub(r"_+", "_", cleaned)
    if not cleaned or not cleaned[0].isalpha():
        cleaned = "x" + cleaned
    return cleaned


def _render_value(value) -> str:
    return value if isinstance(value, str) else json.dumps(value)


class ScriptedProvider:
    """Chat + embedding provider with fully deterministic behavior."""

    embed_model_id = HashingEmbedder.model_id

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._embedder = HashingEmbedder()

    def embed(self, texts, model_id=None):
        return self._embedder.embed(texts, model_id)

    def chat(self, req: ChatRequest) -> ChatResponse:
        prompt = req.messages[-1][1]
        match = _TAG_RE.search(prompt)
        if match is None:
            if "Evaluation of Synthetic Dialogue Data" in prompt:
                return self._do_judge(prompt, self._rng(req))
            return self._respond("Understood.")
        tag = match.group(1)
        payload = extract_structured(prompt[match.end():])
        rng = self._rng(req)
        handler = getattr(self, f"_do_{tag}", None)
        if handler is None:
            return self._respond("Understood.")
        return handler(payload, rng)

    def _rng(self, req: ChatRequest) -> random.Random:
        digest = hashlib.sha256()
        digest.update(str(self.seed).encode())
        for role, content in req.messages:
            digest.update(role.encode())
            digest.update(content.encode())
        return random.Random(int.from_bytes(digest.digest()[:8], "big"))

    @staticmethod
    def _respond(content: str) -> ChatResponse:
        return ChatResponse(content=content, finish_reason="stop", prompt_tokens=0, completion_tokens=len(content) // 4)

    @staticmethod
    def _respond_json(value) -> ChatResponse:
        text = json.dumps(value, sort_keys=True, ensure_ascii=False)
        return ScriptedProvider._respond(f"```json\n{text}\n```")

    # -- tool synthesis ---------------------------------------------------

    def _entity_stock(self, payload, rng) -> list[str]:
        domain = payload.get("domain", "generic")
        stock = [_snake(domain)]
        for relation, value in payload.get("context", {}).get("facts", [])[:12]:
            word = _snake(str(value).split(",")[0])[:24]
            if word and word not in stock:
                stock.append(word)
        base = _snake(domain).split("_")[-1]
        for extra in ("record", "request", "report", "account", "order", "case", "plan", "item"):
            stock.append(f"{base}_{extra}")
        return stock

    def _make_tool(self, verb: str, entity: str, rng: random.Random, link_inputs=None) -> dict:
        noun = _humanize(entity)
        params: dict[str, dict] = {}
        required: list[str] = []
        results: dict[str, dict] = {}
        ident = f"{entity}_id"
        if verb in ("get", "update", "cancel"):
            params[ident] = {"type": "string", "description": f"Identifier of the {noun}."}
            required.append(ident)
        if verb in ("create", "register", "schedule"):
            params["description"] = {"type": "string", "description": f"Details of the {noun}."}
            required.append("description")
            params["priority"] = {
                "type": "string",
                "enum": list(_PRIORITY_ENUM),
                "default": "medium",
                "description": "Processing priority.",
            }
        if verb in ("search", "list"):
            params["query"] = {"type": "string", "description": f"Free-text filter over {noun} records."}
            required.append("query")
            params["limit"] = {"type": "integer", "description": "Maximum records to return.", "default": 10}
        for name, desc in link_inputs or []:
            if name not in params:
                params[name] = {"type": "string", "description": desc}
                required.append(name)
        if verb in ("create", "register", "schedule"):
            results[ident] = {"type": "string", "description": f"Identifier of the new {noun}."}
            results["created_at"] = {"type": "string", "format": "date-time"}
            results["status"] = {"type": "string", "enum": list(_STATUS_ENUM)}
        elif verb in ("get",):
            results["details"] = {"type": "string", "description": f"Full description of the {noun}."}
            results["status"] = {"type": "string", "enum": list(_STATUS_ENUM)}
            results["last_updated"] = {"type": "string", "format": "date-time"}
        elif verb in ("update", "cancel"):
            results["status"] = {"type": "string", "enum": list(_STATUS_ENUM)}
            results["last_updated"] = {"type": "string", "format": "date-time"}
        else:
            results["matches"] = {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        ident: {"type": "string"},
                        "summary": {"type": "string"},
                    },
                },
            }
            results["total_count"] = {"type": "integer"}
        return {
            "name": f"{verb}_{entity}",
            "description": f"{verb.capitalize()} {noun} records in the system.",
            "parameters": {"type": "object", "properties": params, "required": required},
            "results": {"type": "object", "properties": results},
        }

    def _do_tool_generation(self, payload, rng) -> ChatResponse:
        step = payload.get("step", "Seed Generation")
        count = int(payload.get("num_to_generate", 1))
        existing = payload.get("existing", [])
        existing_names = {e["name"] for e in existing}
        stock = self._entity_stock(payload, rng)
        tools: list[dict] = []

        if step == "Schema Enrichment" and existing:
            for entry in existing[:count]:
                doc = json.loads(json.dumps(entry["document"]))
                props = doc.setdefault("parameters", {}).setdefault("properties", {})
                if "routing_options" not in props:
                    props["routing_options"] = {
                        "type": "object",
                        "description": "Advanced routing configuration.",
                        "properties": {
                            "channel": {"type": "string", "enum": ["email", "phone", "portal"], "default": "portal"},
                            "notify": {"type": "boolean", "default": True},
                        },
                    }
                tools.append(doc)
            return self._respond_json(tools)

        if step == "Connection Discovery" and existing:
            candidates = [
                (entry["name"], out)
                for entry in existing
                for out in entry.get("outputs", [])
                if out.endswith("_id") or out.endswith("_identifier")
            ]
            rng.shuffle(candidates)
            verbs = ["annotate", "escalate", "archive", "audit", "route", "approve", "flag", "merge"]
            for idx in range(count):
                if not candidates:
                    break
                upstream, out_name = candidates[idx % len(candidates)]
                entity = stock[idx % len(stock)]
                name = f"{verbs[idx % len(verbs)]}_{entity}"
                if name in existing_names:
                    name = f"{name}_{idx}"
                doc = self._make_tool(
                    "update", entity, rng, link_inputs=[(out_name, f"Value produced by {upstream}.")]
                )
                doc["name"] = name
                tools.append(doc)
            return self._respond_json(tools)

        verb_offset = {"Seed Generation": 0, "Entity Expansion": 2, "Pattern Expansion": 5}.get(step, 0)
        idx = 0
        while len(tools) < count and idx < count * 4:
            verb = _VERBS[(idx + verb_offset) % len(_VERBS)]
            entity = stock[(idx // len(_VERBS) + idx) % len(stock)]
            name = f"{verb}_{entity}"
            idx += 1
            if name in existing_names or any(t["name"] == name for t in tools):
                continue
            tools.append(self._make_tool(verb, entity, rng))
        return self._respond_json(tools)

    def _do_tool_refinement(self, payload, rng) -> ChatResponse:
        doc = json.loads(json.dumps(payload["tool"]))
        doc["name"] = _snake(doc.get("name", "tool"))
        desc = doc.get("description", "").strip()
        if desc and not desc.endswith("."):
            desc += "."
        doc["description"] = desc[:1].upper() + desc[1:] if desc else f"Operate on {_humanize(doc['name'])}."
        return self._respond_json(doc)

    def _do_edge_validation(self, payload, rng) -> ChatResponse:
        verdicts = []
        for pair in payload["pairs"]:
            same_type = pair.get("output_type") == pair.get("input_type")
            names_equal = pair["output_name"] == pair["input_name"]
            lexical = lexical_similarity(pair["output_name"], pair["input_name"])
            verdicts.append(bool(same_type and (names_equal or lexical >= 0.6)))
        return self._respond_json(verdicts)

    # -- sampling ----------------------------------------------------------

    def _do_goal_synthesis(self, payload, rng) -> ChatResponse:
        names = [t["name"] for t in payload["tools"]]
        pattern = payload["pattern_type"]
        if pattern == "conditional":
            branches = payload.get("branches", names[1:])
            text = (
                f"I want to {_humanize(names[0])}, and depending on the outcome, "
                f"either {_humanize(branches[0])} or {_humanize(branches[-1])}."
            )
        elif pattern == "fan":
            start, merge = names[0], names[-1]
            middle = ", ".join(_humanize(n) for n in names[1:-1])
            text = f"After I {_humanize(start)}, {middle} in parallel, then {_humanize(merge)}."
        else:
            chain = ", then ".join(_humanize(n) for n in names)
            text = f"Please {chain} for me."
        return self._respond(text)

    def _do_goal_scoring(self, payload, rng) -> ChatResponse:
        basis = payload["goal_text"] + "|".join(payload["tools"])
        h = int(hashlib.sha256(basis.encode()).hexdigest(), 16)
        return self._respond_json({"coherence": 1 + h % 2, "relevance": (h >> 8) % 3})

    def _do_path_partition(self, payload, rng) -> ChatResponse:
        path = payload["tool_path"]
        parts = [path[i : i + 2] for i in range(0, len(path), 2)]
        return self._respond_json(parts)

    def _do_subgoal(self, payload, rng) -> ChatResponse:
        names = [t["name"] for t in payload["tools"]]
        joined = " and ".join(_humanize(n) for n in names)
        return self._respond(f"I'd like to {joined}.")

    # -- dialogue agents ----------------------------------------------------

    def _do_user_utterance(self, payload, rng) -> ChatResponse:
        values: dict[str, object] = {}
        sentences: list[str] = []
        if payload["kind"] == "opening":
            sentences.append(payload.get("subgoal") or "Here's what I need next.")
        else:
            sentences.append("Sure, here you go.")
        for dotted, info in sorted(payload.get("params", {}).items()):
            param_schema = sch.ParamSchema(
                type_tag=info.get("type", "string"),
                enum_values=tuple(info["enum"]) if info.get("enum") else None,
            )
            short = dotted.split(".")[-1]
            value = sch.generate_conformant_value(param_schema, rng, short)
            values[dotted] = value
            sentences.append(f"The {_humanize(short)} is {_render_value(value)}.")
        return self._respond_json({"utterance": " ".join(sentences), "values": values})

    def _do_clarification_question(self, payload, rng) -> ChatResponse:
        shorts = [_humanize(p.split(".")[-1]) for p in payload["params"]]
        return self._respond(f"Could you provide the {' and the '.join(shorts)}?")

    def _do_tool_response_sim(self, payload, rng) -> ChatResponse:
        tool = sch.parse_tool_spec(payload["tool"])
        args = payload.get("args", {})
        result = sch.generate_conformant_result(tool, rng)
        # Echo argument values into same-named result fields when type-compatible.
        result_map = tool.result_map()
        for name, value in args.items():
            if name in result_map and sch.validate_call_args(
                sch.ToolSpec(
                    name="probe",
                    description="",
                    parameters=((name, result_map[name]),),
                    required=frozenset(),
                    results=(),
                ),
                {name: value},
            ).ok:
                result[name] = value
        return self._respond_json(result)

    def _do_assistant_summary(self, payload, rng) -> ChatResponse:
        bits = []
        for dotted, value in sorted(payload.get("outputs", {}).items()):
            short = dotted.split(".", 1)[-1]
            bits.append(f"{_humanize(short)} {_render_value(value)}")
        tools = " and ".join(_humanize(t) for t in payload["tools"])
        if bits:
            return self._respond(f"Done with {tools}: " + "; ".join(bits) + ".")
        return self._respond(f"Done with {tools}.")

    def _do_paraphrase(self, payload, rng) -> ChatResponse:
        text = payload["utterance"]
        prefix = rng.choice(["Alright - ", "Okay: ", "To put it another way, "])
        reworded = text.replace("I need to", "I'd like to").replace("Please", "Could you")
        return self._respond(prefix + reworded)

    def _do_assistant_claim_check(self, payload, rng) -> ChatResponse:
        return self._respond_json({"fabricated": False})

    def _do_judge(self, prompt: str, rng) -> ChatResponse:
        scores = {dim: 3 + rng.randrange(3) for dim in ("Naturalness", "Coherence", "Helpfulness", "Accuracy")}
        lines = ["Evaluation of Synthetic Dialogue Data", ""]
        for i, (dim, score) in enumerate(scores.items(), start=1):
            lines.append(f"{i}. {dim}: {score} / 5")
            lines.append(f"- Comments: {dim} looks consistent with the transcript.")
            lines.append("")
        return self._respond("\n".join(lines))
