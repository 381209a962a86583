"""Domain grounding: encyclopedia summary plus structured facts per domain.

Live mode resolves a domain name against public Wikipedia/Wikidata endpoints;
offline mode loads one of the shipped fixture contexts. Either way the result
is a compact DomainContext that conditions tool synthesis prompts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import requests

SUMMARY_BUDGET = 2000
FACT_BUDGET = 50

WIKIPEDIA_SUMMARY_URL = "https://en.wikipedia.org/api/rest_v1/page/summary/{title}"
WIKIDATA_SEARCH_URL = "https://www.wikidata.org/w/api.php"
WIKIDATA_ENTITY_URL = "https://www.wikidata.org/wiki/Special:EntityData/{qid}.json"


class KnowledgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class DomainContext:
    domain: str
    entity_id: str
    wiki_summary: str
    facts: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not self.wiki_summary and not self.facts:
            raise KnowledgeError(f"context for {self.domain!r} carries no grounding")

    def to_document(self) -> dict:
        return {
            "domain": self.domain,
            "entity_id": self.entity_id,
            "wiki_summary": self.wiki_summary,
            "facts": [[relation, value] for relation, value in self.facts],
        }


def context_from_document(doc: dict) -> DomainContext:
    if not isinstance(doc, dict) or "domain" not in doc:
        raise KnowledgeError("context document must be an object with a domain field")
    facts = tuple((str(r), str(v)) for r, v in doc.get("facts", []))
    return DomainContext(
        domain=doc["domain"],
        entity_id=doc.get("entity_id", ""),
        wiki_summary=doc.get("wiki_summary", "")[:SUMMARY_BUDGET],
        facts=facts[:FACT_BUDGET],
    )


def load_fixture_context(path) -> DomainContext:
    """Parse a DomainContext from a fixture file."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise KnowledgeError(f"cannot parse context fixture {path}: {exc}") from exc
    return context_from_document(doc)


def shipped_domains() -> list[str]:
    """Names of the domain fixtures bundled with the package."""
    root = resources.files("toolweave").joinpath("fixtures/domains")
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def load_shipped_context(domain: str) -> DomainContext:
    slug = domain.lower().replace(" ", "_").replace("-", "_")
    ref = resources.files("toolweave").joinpath(f"fixtures/domains/{slug}.json")
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise KnowledgeError(f"no shipped fixture for domain {domain!r}") from exc
    return context_from_document(json.loads(text))


def _default_resolve_entity(domain: str) -> str | None:
    resp = requests.get(
        WIKIDATA_SEARCH_URL,
        params={"action": "wbsearchentities", "search": domain, "language": "en", "format": "json", "limit": 1},
        timeout=20,
    )
    resp.raise_for_status()
    hits = resp.json().get("search", [])
    return hits[0]["id"] if hits else None


def _default_fetch_summary(domain: str) -> str:
    title = domain.replace(" ", "_")
    resp = requests.get(WIKIPEDIA_SUMMARY_URL.format(title=title), timeout=20)
    if resp.status_code != 200:
        return ""
    return resp.json().get("extract", "")


def _default_fetch_facts(entity_id: str) -> list[tuple[str, str]]:
    resp = requests.get(WIKIDATA_ENTITY_URL.format(qid=entity_id), timeout=20)
    resp.raise_for_status()
    entity = resp.json()["entities"][entity_id]
    facts: list[tuple[str, str]] = []
    labels = entity.get("labels", {})
    if "en" in labels:
        facts.append(("label", labels["en"]["value"]))
    descriptions = entity.get("descriptions", {})
    if "en" in descriptions:
        facts.append(("description", descriptions["en"]["value"]))
    claims = entity.get("claims", {})
    # P31 instance-of, P279 subclass-of, P527 has-part: one hop only.
    for prop, relation in (("P31", "instance_of"), ("P279", "subclass_of"), ("P527", "has_part")):
        for claim in claims.get(prop, []):
            value = claim.get("mainsnak", {}).get("datavalue", {}).get("value", {})
            if isinstance(value, dict) and "id" in value:
                facts.append((relation, value["id"]))
    return facts


def build_domain_context(
    domain: str,
    resolve_entity=_default_resolve_entity,
    fetch_summary=_default_fetch_summary,
    fetch_facts=_default_fetch_facts,
) -> DomainContext:
    """Resolve a domain to a knowledge-base entity and assemble its context.

    Degrades to a summary-only context when entity resolution or fact
    extraction fails; raises only when both sources come back empty.
    """
    entity_id = ""
    facts: list[tuple[str, str]] = []
    try:
        resolved = resolve_entity(domain)
        if resolved:
            entity_id = resolved
            facts = list(fetch_facts(entity_id))[:FACT_BUDGET]
    except Exception:
        entity_id = ""
        facts = []
    try:
        summary = fetch_summary(domain)[:SUMMARY_BUDGET]
    except Exception:
        summary = ""
    if not summary and not facts:
        raise KnowledgeError(f"could not ground domain {domain!r} from any source")
    return DomainContext(domain=domain, entity_id=entity_id, wiki_summary=summary, facts=tuple(facts))
