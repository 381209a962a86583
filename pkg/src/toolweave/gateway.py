"""Model gateway: chat completion and text embedding behind record/replay.

The gateway speaks a chat-completions-compatible HTTP dialect in live mode and
keeps an append-only cassette of fingerprinted request/response pairs so every
pipeline stage can run deterministically offline.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import time
import zlib
from dataclasses import dataclass, field

import requests

DEFAULT_EMBED_MODEL = "all-MiniLM-L6-v2"
HASH_EMBED_MODEL = "hash-trigram-256"
HASH_EMBED_DIM = 256


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    """Network or server failure; retried with exponential backoff."""


class ReplayMissError(GatewayError):
    """Fingerprint absent from the cassette; signals nondeterministic prompts."""


class NoStructuredDocument(GatewayError):
    pass


class ShapeMismatch(GatewayError):
    def __init__(self, missing: list[str]):
        super().__init__(f"structured document missing fields: {missing}")
        self.missing = missing


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 2048
    model_id: str = "default"
    response_shape: str | None = None

    def __post_init__(self):
        if not self.messages:
            raise GatewayError("messages must be nonempty")
        if self.messages[0][0] not in ("system", "user"):
            raise GatewayError("first message role must be system or user")
        if self.temperature < 0:
            raise GatewayError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise GatewayError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    content: str
    finish_reason: str = "stop"
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if self.finish_reason == "stop" and not self.content:
            raise GatewayError("stop response with empty content")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model_id: str

    def __post_init__(self):
        if not any(v != 0.0 for v in self.values):
            raise GatewayError("embedding norm must be > 0")


def cosine(a: EmbeddingVector | tuple | list, b: EmbeddingVector | tuple | list) -> float:
    va = a.values if isinstance(a, EmbeddingVector) else a
    vb = b.values if isinstance(b, EmbeddingVector) else b
    dot = sum(x * y for x, y in zip(va, vb))
    na = math.sqrt(sum(x * x for x in va))
    nb = math.sqrt(sum(y * y for y in vb))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


_WS_RUN = re.compile(r"\s+")


def normalize_request(req: ChatRequest) -> dict:
    """Canonical form used for fingerprinting; whitespace-only differences vanish."""
    return {
        "model_id": req.model_id,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
        "messages": [[role, _WS_RUN.sub(" ", content).strip()] for role, content in req.messages],
    }


def fingerprint_chat(req: ChatRequest) -> str:
    payload = json.dumps(normalize_request(req), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def fingerprint_embedding(texts: list[str], model_id: str) -> str:
    payload = json.dumps({"model_id": model_id, "texts": list(texts)}, sort_keys=True, ensure_ascii=False)
    return "emb-" + hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Cassette:
    """Append-only fingerprint -> response log; one JSON record per line."""

    def __init__(self, path=None):
        self.path = path
        self._entries: dict[str, dict] = {}
        self._requests: dict[str, str] = {}
        self._lock = threading.Lock()
        if path is not None and os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    self._entries[record["fingerprint"]] = record
                    self._requests[record["fingerprint"]] = record.get("request", "")

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, fingerprint: str) -> dict | None:
        return self._entries.get(fingerprint)

    def record(self, fingerprint: str, request_repr: str, response: dict) -> None:
        with self._lock:
            existing = self._entries.get(fingerprint)
            if existing is not None:
                if self._requests.get(fingerprint) != request_repr:
                    raise GatewayError(f"fingerprint collision on {fingerprint}")
                return
            record = {"fingerprint": fingerprint, "request": request_repr, "response": response}
            self._entries[fingerprint] = record
            self._requests[fingerprint] = request_repr
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


class HashingEmbedder:
    """Deterministic local embedder: hashed character trigrams plus word tokens.

    Stands in for a sentence-embedding service when running offline; identical
    texts map to identical unit vectors and related identifiers land close.
    """

    model_id = HASH_EMBED_MODEL

    def embed(self, texts: list[str], model_id: str | None = None) -> list[list[float]]:
        return [self._embed_one(t) for t in texts]

    @staticmethod
    def _embed_one(text: str) -> list[float]:
        vec = [0.0] * HASH_EMBED_DIM
        padded = f" {text.lower()} "
        features = [padded[i : i + 3] for i in range(len(padded) - 2)]
        features += re.findall(r"[a-z0-9]+", text.lower())
        for feat in features:
            slot = zlib.crc32(feat.encode("utf-8"))
            vec[slot % HASH_EMBED_DIM] += 1.0 if (slot >> 16) % 2 == 0 else -1.0
        norm = math.sqrt(sum(v * v for v in vec))
        if norm == 0:
            vec[0] = 1.0
            norm = 1.0
        return [v / norm for v in vec]


class HttpProvider:
    """Chat-completions-compatible HTTP provider with a companion embeddings endpoint."""

    def __init__(self, base_url=None, api_key=None, chat_model=None, embed_model=None, timeout=60.0):
        self.base_url = (base_url or os.environ.get("TOOLWEAVE_BASE_URL", "")).rstrip("/")
        self.api_key = api_key or os.environ.get("TOOLWEAVE_API_KEY", "")
        self.chat_model = chat_model or os.environ.get("TOOLWEAVE_CHAT_MODEL", "default")
        self.embed_model = embed_model or os.environ.get("TOOLWEAVE_EMBED_MODEL", DEFAULT_EMBED_MODEL)
        self.timeout = timeout
        if not self.base_url:
            raise GatewayError("no endpoint base URL configured (TOOLWEAVE_BASE_URL)")

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def chat(self, req: ChatRequest) -> ChatResponse:
        body = {
            "model": req.model_id if req.model_id != "default" else self.chat_model,
            "messages": [{"role": r, "content": c} for r, c in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions", json=body, headers=self._headers(), timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"chat transport failure: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"server error {resp.status_code}")
        if resp.status_code != 200:
            raise GatewayError(f"chat request rejected: {resp.status_code} {resp.text[:200]}")
        data = resp.json()
        choice = data["choices"][0]
        usage = data.get("usage", {})
        return ChatResponse(
            content=choice["message"]["content"],
            finish_reason=choice.get("finish_reason", "stop"),
            prompt_tokens=usage.get("prompt_tokens", 0),
            completion_tokens=usage.get("completion_tokens", 0),
        )

    def embed(self, texts: list[str], model_id: str | None = None) -> list[list[float]]:
        body = {"model": model_id or self.embed_model, "input": list(texts)}
        try:
            resp = requests.post(
                f"{self.base_url}/embeddings", json=body, headers=self._headers(), timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"embedding transport failure: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"server error {resp.status_code}")
        if resp.status_code != 200:
            raise GatewayError(f"embedding request rejected: {resp.status_code}")
        data = resp.json()
        return [item["embedding"] for item in data["data"]]


@dataclass
class GatewayConfig:
    mode: str = "live"  # live | record | replay
    cassette_path: str | None = None
    max_attempts: int = 3
    backoff_base: float = 0.2
    max_in_flight: int = 8
    embed_model: str = DEFAULT_EMBED_MODEL


class Gateway:
    """Front door for all model calls; safe for concurrent callers."""

    def __init__(self, provider=None, config: GatewayConfig | None = None, cassette: Cassette | None = None):
        self.config = config or GatewayConfig()
        if self.config.mode not in ("live", "record", "replay"):
            raise GatewayError(f"unknown gateway mode {self.config.mode!r}")
        self.provider = provider
        if self.config.mode in ("live", "record") and provider is None:
            raise GatewayError(f"{self.config.mode} mode requires a provider")
        if cassette is not None:
            self.cassette = cassette
        elif self.config.mode in ("record", "replay"):
            self.cassette = Cassette(self.config.cassette_path)
        else:
            self.cassette = None
        self.attempt_count = 0
        self._sem = threading.Semaphore(self.config.max_in_flight)
        self._counter_lock = threading.Lock()

    def _call_with_retry(self, fn):
        delay = self.config.backoff_base
        last_exc: Exception | None = None
        for attempt in range(self.config.max_attempts):
            with self._counter_lock:
                self.attempt_count += 1
            try:
                with self._sem:
                    return fn()
            except TransportError as exc:
                last_exc = exc
                if attempt + 1 < self.config.max_attempts:
                    time.sleep(delay)
                    delay *= 2
        raise TransportError(f"transport failure after {self.config.max_attempts} attempts: {last_exc}")

    def complete_chat(self, req: ChatRequest) -> ChatResponse:
        fp = fingerprint_chat(req)
        request_repr = json.dumps(normalize_request(req), sort_keys=True, ensure_ascii=False)
        if self.config.mode == "replay":
            entry = self.cassette.lookup(fp)
            if entry is None:
                raise ReplayMissError(f"no cassette entry for chat fingerprint {fp}")
            return ChatResponse(**entry["response"])
        if self.config.mode == "record":
            entry = self.cassette.lookup(fp)
            if entry is not None:
                return ChatResponse(**entry["response"])
        response = self._call_with_retry(lambda: self.provider.chat(req))
        if self.config.mode == "record":
            self.cassette.record(
                fp,
                request_repr,
                {
                    "content": response.content,
                    "finish_reason": response.finish_reason,
                    "prompt_tokens": response.prompt_tokens,
                    "completion_tokens": response.completion_tokens,
                },
            )
        return response

    EMBED_MODEL_KEY = "__embed_model__"

    def _default_embed_model(self) -> str:
        provider_model = getattr(self.provider, "embed_model_id", None)
        if provider_model:
            return provider_model
        if self.cassette is not None:
            entry = self.cassette.lookup(self.EMBED_MODEL_KEY)
            if entry is not None:
                return entry["response"]["model"]
        return self.config.embed_model

    def embed_texts(self, texts: list[str], model_id: str | None = None) -> list[EmbeddingVector]:
        if not texts:
            raise GatewayError("embed_texts requires nonempty input")
        model = model_id or self._default_embed_model()
        fp = fingerprint_embedding(texts, model)
        if self.config.mode == "replay":
            entry = self.cassette.lookup(fp)
            if entry is None:
                raise ReplayMissError(f"no cassette entry for embedding fingerprint {fp}")
            vectors = entry["response"]["vectors"]
        else:
            entry = self.cassette.lookup(fp) if self.config.mode == "record" else None
            if entry is not None:
                vectors = entry["response"]["vectors"]
            else:
                vectors = self._call_with_retry(lambda: self.provider.embed(texts, model))
                if self.config.mode == "record":
                    request_repr = json.dumps({"model_id": model, "texts": list(texts)}, sort_keys=True)
                    self.cassette.record(fp, request_repr, {"vectors": [list(v) for v in vectors]})
                    if model_id is None:
                        self.cassette.record(self.EMBED_MODEL_KEY, "default embed model", {"model": model})
        dims = {len(v) for v in vectors}
        if len(dims) > 1:
            raise GatewayError(f"embedding dimension mismatch within batch: {sorted(dims)}")
        return [EmbeddingVector(values=tuple(v), model_id=model) for v in vectors]


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)
_TRAILING_COMMA_RE = re.compile(r",(\s*[}\]])")


def _balanced_block(text: str) -> str | None:
    starts = [(pos, ch) for ch in "{[" if (pos := text.find(ch)) != -1]
    if not starts:
        return None
    start, opener = min(starts)
    closer = "}" if opener == "{" else "]"
    depth = 0
    in_string = False
    escape = False
    for idx in range(start, len(text)):
        ch = text[idx]
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == opener:
            depth += 1
        elif ch == closer:
            depth -= 1
            if depth == 0:
                return text[start : idx + 1]
    return None


def extract_structured(content: str, expected: list[str] | str | None = None):
    """Extract the first structured document from model output.

    Tolerates code fences and prose preamble; repair is limited to fence
    stripping and trailing-comma removal. ``expected`` may be a list of
    required top-level field names or "list" for a JSON array.
    """
    candidates = []
    for match in _FENCE_RE.finditer(content):
        candidates.append(match.group(1))
    block = _balanced_block(content)
    if block is not None:
        candidates.append(block)
    parsed = None
    for candidate in candidates:
        inner = _balanced_block(candidate) or candidate
        for attempt in (inner, _TRAILING_COMMA_RE.sub(r"\1", inner)):
            try:
                parsed = json.loads(attempt)
                break
            except json.JSONDecodeError:
                continue
        if parsed is not None:
            break
    if parsed is None:
        raise NoStructuredDocument("no structured document found in model output")
    if expected == "list":
        if not isinstance(parsed, list):
            raise ShapeMismatch(["<list>"])
    elif isinstance(expected, list):
        if not isinstance(parsed, dict):
            raise ShapeMismatch(list(expected))
        missing = [name for name in expected if name not in parsed]
        if missing:
            raise ShapeMismatch(missing)
    return parsed
