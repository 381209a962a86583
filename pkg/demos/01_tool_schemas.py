"""Walk through the tool schema layer: parsing, validation, flattening, signatures.

Runs entirely offline against the bundled support-ticket pool.
"""

from importlib import resources

from toolweave import schema as sch


def main():
    ref = resources.files("toolweave").joinpath("fixtures/pools/support_ticket_pool.jsonl")
    tools = [sch.parse_tool_spec(line) for line in ref.read_text().splitlines() if line]
    pool = sch.ToolPool(domain="Customer Support", tools=tuple(tools))

    print(f"Loaded {len(pool.tools)} tools: {', '.join(pool.names())}\n")

    update = pool.get("update_escalation_status")
    print(f"{update.name}: required={sorted(update.required)}")

    good = {"status": "in_progress", "ticket_escalation_id": "esc987654321"}
    print(f"valid call {good} -> ok={sch.validate_call_args(update, good).ok}")

    bad = {"status": "done", "ticket_escalation_id": "esc987654321"}
    report = sch.validate_call_args(update, bad)
    print(f"enum violation {bad['status']!r} -> {report.violations[0].message}\n")

    search = pool.get("search_tickets")
    print(f"flattened outputs of {search.name}: {sorted(sch.flatten_output_names(search))}")
    print("  (nested array-item fields count under their bare names)\n")

    create = pool.get("create_support_ticket")
    clone_doc = sch.tool_to_document(create)
    clone_doc["name"] = "open_ticket"
    clone_doc["description"] = "Totally different wording."
    clone = sch.parse_tool_spec(clone_doc)
    print("structural signatures ignore names and descriptions:")
    print(f"  create == renamed clone: {sch.dedup_signature(create) == sch.dedup_signature(clone)}")

    print("\nconformant required-args draw (default-first, then enum-first):")
    print(f"  {sch.conformant_args(create)}")


if __name__ == "__main__":
    main()
