"""Tool schema model: parsing, validation, name flattening, and structural signatures.

Tool documents are JSON objects with ``name``, ``description``, ``parameters``
(an object schema with ``properties`` and ``required``) and ``results`` (an
object schema with ``properties``). A pool of tools persists as one document
per line in a JSONL file.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

SCALAR_TYPES = {"string", "integer", "number", "boolean"}
TYPE_TAGS = SCALAR_TYPES | {"object", "array", "date", "date-time"}

TOOL_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")
DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")
DATETIME_RE = re.compile(r"^\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:\d{2})?$")

# ValidationReport violation kinds for call arguments.
MISSING_REQUIRED = "missing_required"
UNKNOWN_PARAM = "unknown_param"
TYPE_MISMATCH = "type_mismatch"
ENUM_VIOLATION = "enum_violation"


class SchemaError(ValueError):
    """Raised when a tool document is malformed or breaks an invariant."""


@dataclass(frozen=True)
class ParamSchema:
    """Schema of a single parameter or result property."""

    type_tag: str
    description: str = ""
    enum_values: tuple | None = None
    default_value: object = None
    has_default: bool = False
    format_hint: str | None = None
    children: tuple[tuple[str, "ParamSchema"], ...] | None = None
    item_schema: "ParamSchema | None" = None

    def child_map(self) -> dict[str, "ParamSchema"]:
        return dict(self.children or ())


@dataclass(frozen=True)
class ToolSpec:
    """One tool: input parameter schemas, required names, and result schemas."""

    name: str
    description: str
    parameters: tuple[tuple[str, ParamSchema], ...]
    required: frozenset[str]
    results: tuple[tuple[str, ParamSchema], ...]
    metadata: tuple[tuple[str, object], ...] = ()

    def param_map(self) -> dict[str, ParamSchema]:
        return dict(self.parameters)

    def result_map(self) -> dict[str, ParamSchema]:
        return dict(self.results)

    def param_names(self) -> list[str]:
        return [name for name, _ in self.parameters]


@dataclass(frozen=True)
class ToolPool:
    """Ordered collection of tools for one domain; names are pairwise distinct."""

    domain: str
    tools: tuple[ToolSpec, ...]

    def __post_init__(self):
        names = [t.name for t in self.tools]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate tool names in pool: {dupes}")

    def get(self, name: str) -> ToolSpec:
        for tool in self.tools:
            if tool.name == name:
                return tool
        raise KeyError(name)

    def names(self) -> list[str]:
        return [t.name for t in self.tools]

    def __contains__(self, name: str) -> bool:
        return any(t.name == name for t in self.tools)

    def with_tool(self, tool: ToolSpec) -> "ToolPool":
        return ToolPool(self.domain, self.tools + (tool,))


@dataclass(frozen=True)
class Violation:
    path: str
    kind: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def _parse_param_schema(doc: dict, path: str) -> ParamSchema:
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: schema must be an object")
    type_tag = doc.get("type")
    fmt = doc.get("format")
    if type_tag == "string" and fmt in ("date", "date-time"):
        type_tag = fmt
    if type_tag not in TYPE_TAGS:
        raise SchemaError(f"{path}: unknown type {type_tag!r}")

    enum_values = doc.get("enum")
    if enum_values is not None:
        if not isinstance(enum_values, list) or not enum_values:
            raise SchemaError(f"{path}: enum must be a nonempty list")
        enum_values = tuple(enum_values)

    children = None
    if type_tag == "object":
        props = doc.get("properties", {})
        if not isinstance(props, dict):
            raise SchemaError(f"{path}: properties must be an object")
        children = tuple(
            (name, _parse_param_schema(sub, f"{path}.{name}")) for name, sub in props.items()
        )
    elif "properties" in doc:
        raise SchemaError(f"{path}: properties only allowed on object type")

    item_schema = None
    if type_tag == "array":
        if "items" in doc:
            item_schema = _parse_param_schema(doc["items"], f"{path}[]")
        else:
            item_schema = ParamSchema(type_tag="string")
    elif "items" in doc:
        raise SchemaError(f"{path}: items only allowed on array type")

    schema = ParamSchema(
        type_tag=type_tag,
        description=doc.get("description", ""),
        enum_values=enum_values,
        default_value=doc.get("default"),
        has_default="default" in doc,
        format_hint=fmt,
        children=children,
        item_schema=item_schema,
    )
    if schema.has_default:
        problem = _check_value(schema.default_value, schema, path)
        if problem is not None:
            raise SchemaError(f"{path}: default does not satisfy schema: {problem.message}")
    return schema


def _parse_object_block(doc: dict, path: str) -> tuple[tuple[tuple[str, ParamSchema], ...], list[str]]:
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: must be an object schema")
    props = doc.get("properties", {})
    if not isinstance(props, dict):
        raise SchemaError(f"{path}.properties: must be an object")
    parsed = tuple((name, _parse_param_schema(sub, f"{path}.{name}")) for name, sub in props.items())
    required = doc.get("required", [])
    if not isinstance(required, list):
        raise SchemaError(f"{path}.required: must be a list")
    return parsed, list(required)


def parse_tool_spec(text: str | dict) -> ToolSpec:
    """Parse a serialized tool document into a ToolSpec, checking all invariants.

    Unknown top-level fields are preserved in a metadata side-channel and
    survive re-serialization.
    """
    if isinstance(text, str):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"malformed tool document: {exc}") from exc
    else:
        doc = text
    if not isinstance(doc, dict):
        raise SchemaError("tool document must be a JSON object")

    name = doc.get("name")
    if not isinstance(name, str) or not TOOL_NAME_RE.match(name):
        raise SchemaError(f"name: invalid tool name {name!r}")

    parameters, required = _parse_object_block(doc.get("parameters", {}), "parameters")
    param_names = {p for p, _ in parameters}
    for req in required:
        if req not in param_names:
            raise SchemaError(f"required: {req!r} is not among parameters")

    results, _ = _parse_object_block(doc.get("results", {}), "results")

    known = {"name", "description", "parameters", "required", "results"}
    metadata = tuple((k, v) for k, v in doc.items() if k not in known)

    return ToolSpec(
        name=name,
        description=doc.get("description", ""),
        parameters=parameters,
        required=frozenset(required),
        results=results,
        metadata=metadata,
    )


def _schema_to_doc(schema: ParamSchema) -> dict:
    doc: dict = {}
    if schema.type_tag in ("date", "date-time"):
        doc["type"] = "string"
        doc["format"] = schema.type_tag
    else:
        doc["type"] = schema.type_tag
        if schema.format_hint:
            doc["format"] = schema.format_hint
    if schema.description:
        doc["description"] = schema.description
    if schema.enum_values is not None:
        doc["enum"] = list(schema.enum_values)
    if schema.has_default:
        doc["default"] = schema.default_value
    if schema.children is not None:
        doc["properties"] = {name: _schema_to_doc(sub) for name, sub in schema.children}
    if schema.type_tag == "array" and schema.item_schema is not None:
        doc["items"] = _schema_to_doc(schema.item_schema)
    return doc


def tool_to_document(tool: ToolSpec) -> dict:
    """Inverse of parse_tool_spec; parse(tool_to_document(t)) == t."""
    doc = {
        "name": tool.name,
        "description": tool.description,
        "parameters": {
            "type": "object",
            "properties": {name: _schema_to_doc(sub) for name, sub in tool.parameters},
            "required": sorted(tool.required),
        },
        "results": {
            "type": "object",
            "properties": {name: _schema_to_doc(sub) for name, sub in tool.results},
        },
    }
    doc.update({k: v for k, v in tool.metadata})
    return doc


def tool_to_json(tool: ToolSpec) -> str:
    # Insertion order is semantic (parameter declaration order survives round-trips).
    return json.dumps(tool_to_document(tool), ensure_ascii=False)


def load_pool_jsonl(path, domain: str = "") -> ToolPool:
    tools = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                tools.append(parse_tool_spec(line))
    return ToolPool(domain=domain, tools=tuple(tools))


def dump_pool_jsonl(pool: ToolPool, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tool in pool.tools:
            fh.write(tool_to_json(tool) + "\n")


def _type_ok(value, type_tag: str) -> bool:
    if type_tag == "string":
        return isinstance(value, str)
    if type_tag == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if type_tag == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if type_tag == "boolean":
        return isinstance(value, bool)
    if type_tag == "object":
        return isinstance(value, dict)
    if type_tag == "array":
        return isinstance(value, list)
    if type_tag == "date":
        return isinstance(value, str) and bool(DATE_RE.match(value))
    if type_tag == "date-time":
        return isinstance(value, str) and bool(DATETIME_RE.match(value))
    return False


def _check_value(value, schema: ParamSchema, path: str) -> Violation | None:
    # Type coercion is strict: "5" never passes for integer 5.
    if not _type_ok(value, schema.type_tag):
        return Violation(path, TYPE_MISMATCH, f"{path}: expected {schema.type_tag}, got {type(value).__name__}")
    if schema.enum_values is not None and value not in schema.enum_values:
        return Violation(path, ENUM_VIOLATION, f"{path}: {value!r} not in enum {list(schema.enum_values)}")
    return None


def _check_recursive(value, schema: ParamSchema, path: str, out: list[Violation]) -> None:
    problem = _check_value(value, schema, path)
    if problem is not None:
        out.append(problem)
        return
    if schema.type_tag == "object":
        children = schema.child_map()
        for key, sub_value in value.items():
            if key not in children:
                out.append(Violation(f"{path}.{key}", UNKNOWN_PARAM, f"{path}.{key}: unknown property"))
            else:
                _check_recursive(sub_value, children[key], f"{path}.{key}", out)
    elif schema.type_tag == "array" and schema.item_schema is not None:
        for idx, item in enumerate(value):
            _check_recursive(item, schema.item_schema, f"{path}[{idx}]", out)


def validate_call_args(tool: ToolSpec, args: dict) -> ValidationReport:
    """Check a call's arguments against the tool schema.

    ok iff every required parameter is present, every provided name is known,
    and every value is type- and enum-conformant, recursing into objects and
    arrays.
    """
    violations: list[Violation] = []
    params = tool.param_map()
    for req in sorted(tool.required):
        if req not in args:
            violations.append(Violation(req, MISSING_REQUIRED, f"{req}: required parameter missing"))
    for name, value in args.items():
        if name not in params:
            violations.append(Violation(name, UNKNOWN_PARAM, f"{name}: unknown parameter"))
            continue
        _check_recursive(value, params[name], name, violations)
    return ValidationReport(tuple(violations))


def _flatten_schema_names(name: str, schema: ParamSchema, out: set[str]) -> None:
    out.add(name)
    if schema.children is not None:
        for sub_name, sub in schema.children:
            _flatten_schema_names(sub_name, sub, out)
    if schema.item_schema is not None and schema.item_schema.children is not None:
        for sub_name, sub in schema.item_schema.children:
            _flatten_schema_names(sub_name, sub, out)


def flatten_output_names(tool: ToolSpec) -> set[str]:
    """All property names appearing anywhere in the tool's results, as bare names.

    Nested object properties and array item properties count under their bare
    name: a ticket_id nested inside a tickets[] array is reported as ticket_id.
    """
    names: set[str] = set()
    for name, schema in tool.results:
        _flatten_schema_names(name, schema, names)
    return names


def flatten_output_fields(tool: ToolSpec) -> list[tuple[str, ParamSchema]]:
    """Bare output names paired with their schemas, nested fields included."""

    def walk(name: str, schema: ParamSchema, out: list[tuple[str, ParamSchema]]) -> None:
        out.append((name, schema))
        for sub_name, sub in schema.children or ():
            walk(sub_name, sub, out)
        item = schema.item_schema
        if item is not None and item.children is not None:
            for sub_name, sub in item.children:
                walk(sub_name, sub, out)

    fields: list[tuple[str, ParamSchema]] = []
    for name, schema in tool.results:
        walk(name, schema, fields)
    return fields


def dotted_output_names(tool: ToolSpec) -> list[str]:
    """Leaf-oriented dotted output names, e.g. tool.arr[].field for array items."""

    def walk(prefix: str, schema: ParamSchema, out: list[str]) -> None:
        if schema.type_tag == "object" and schema.children:
            for sub_name, sub in schema.children:
                walk(f"{prefix}.{sub_name}", sub, out)
        elif schema.type_tag == "array" and schema.item_schema is not None and schema.item_schema.children:
            for sub_name, sub in schema.item_schema.children:
                walk(f"{prefix}[].{sub_name}", sub, out)
        else:
            out.append(prefix)

    out: list[str] = []
    for name, schema in tool.results:
        walk(f"{tool.name}.{name}", schema, out)
    return out


def _signature_of(schema: ParamSchema) -> str:
    parts = [schema.type_tag]
    if schema.children is not None:
        inner = ",".join(f"{n}:{_signature_of(s)}" for n, s in sorted(schema.children))
        parts.append("{" + inner + "}")
    if schema.item_schema is not None:
        parts.append("[" + _signature_of(schema.item_schema) + "]")
    return "".join(parts)


def dedup_signature(tool: ToolSpec) -> str:
    """Canonical structural signature: sorted parameter and result names+types.

    Descriptions, enums, defaults, field order, and the tool name itself are
    all excluded, so structurally identical tools collide.
    """
    params = ";".join(f"{n}={_signature_of(s)}" for n, s in sorted(tool.parameters))
    results = ";".join(f"{n}={_signature_of(s)}" for n, s in sorted(tool.results))
    return f"in({params})|out({results})"


_CANONICAL = {
    "string": "value",
    "integer": 1,
    "number": 1.0,
    "boolean": True,
    "date": "2025-01-01",
    "date-time": "2025-01-01T00:00:00Z",
}


def conformant_args(tool: ToolSpec) -> dict:
    """Arguments for the required parameters drawn default-first, then enum-first.

    The result always passes validate_call_args (generator/validator agreement).
    """

    def value_for(schema: ParamSchema):
        if schema.has_default:
            return schema.default_value
        if schema.enum_values:
            return schema.enum_values[0]
        if schema.type_tag == "object":
            return {name: value_for(sub) for name, sub in (schema.children or ())}
        if schema.type_tag == "array":
            return []
        return _CANONICAL[schema.type_tag]

    params = tool.param_map()
    return {name: value_for(params[name]) for name in sorted(tool.required)}


_ID_SUFFIXES = ("_id", "_identifier", "identifier", "_code", "_ref")


def generate_conformant_value(schema: ParamSchema, rng, name: str = ""):
    """Draw a random value conforming to schema; identifier-like names get fresh tokens."""
    if schema.enum_values:
        return rng.choice(list(schema.enum_values))
    tag = schema.type_tag
    if tag == "string":
        lowered = name.lower()
        if any(lowered.endswith(sfx) for sfx in _ID_SUFFIXES) or lowered == "id":
            prefix = re.sub(r"[^a-z]", "", lowered.split("_")[0])[:4] or "ref"
            return f"{prefix}{rng.randrange(10**8, 10**9)}"
        words = ["alpha", "delta", "omega", "prime", "nova", "vertex", "apex", "zenith"]
        return " ".join(rng.choice(words) for _ in range(rng.randint(1, 3)))
    if tag == "integer":
        return rng.randint(1, 1000)
    if tag == "number":
        return round(rng.uniform(1.0, 1000.0), 2)
    if tag == "boolean":
        return rng.random() < 0.5
    if tag == "date":
        return f"2025-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"
    if tag == "date-time":
        return (
            f"2025-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"
            f"T{rng.randint(0, 23):02d}:{rng.randint(0, 59):02d}:{rng.randint(0, 59):02d}Z"
        )
    if tag == "object":
        return {n: generate_conformant_value(sub, rng, n) for n, sub in (schema.children or ())}
    if tag == "array":
        item = schema.item_schema or ParamSchema(type_tag="string")
        return [generate_conformant_value(item, rng, name.rstrip("s"))]
    raise SchemaError(f"cannot generate value for type {tag!r}")


def generate_conformant_result(tool: ToolSpec, rng) -> dict:
    """Schema-conformant result map for every declared result property."""
    return {name: generate_conformant_value(schema, rng, name) for name, schema in tool.results}
