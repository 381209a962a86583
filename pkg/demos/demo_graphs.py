"""Hand-wired order-shipping graph shared by the demo scripts."""

from toolweave import schema as sch
from toolweave.forge import Edge, ToolGraph

S = {"type": "string"}


def _tool(name, inputs, outputs, required=None):
    return sch.parse_tool_spec(
        {
            "name": name,
            "description": f"{name.replace('_', ' ')} operation.",
            "parameters": {"type": "object", "properties": inputs, "required": required or list(inputs)},
            "results": {"type": "object", "properties": outputs},
        }
    )


def order_shipping_graph() -> ToolGraph:
    tools = (
        _tool("get_order", {"order_id": S},
              {"order_ref": S, "region_code": S, "stock_query": S, "risk_query": S}),
        _tool("get_geo_rules", {"region_code": S}, {"zone_policy": S}),
        _tool("set_mode", {"order_ref": S, "zone_policy": S},
              {"mode": {"type": "string", "enum": ["local", "intl"]}, "mode_ref": S}),
        _tool("ship_local", {"mode_ref": S}, {"shipment_id": S}),
        _tool("ship_intl", {"mode_ref": S}, {"shipment_id": S}),
        _tool("save_track", {"shipment_id": S}, {"tracking_code": S}),
        _tool("check_stock", {"stock_query": S}, {"stock_level": {"type": "integer"}}),
        _tool("calc_risk", {"risk_query": S}, {"risk_score": {"type": "number"}}),
        _tool("sync_status", {"stock_level": {"type": "integer"}, "risk_score": {"type": "number"}},
              {"sync_ok": {"type": "boolean"}}),
    )
    pool = sch.ToolPool(domain="E-commerce", tools=tools)
    edges = tuple(
        Edge(*spec)
        for spec in (
            ("get_order", "order_ref", "set_mode", "order_ref"),
            ("get_order", "region_code", "get_geo_rules", "region_code"),
            ("get_geo_rules", "zone_policy", "set_mode", "zone_policy"),
            ("set_mode", "mode_ref", "ship_local", "mode_ref"),
            ("set_mode", "mode_ref", "ship_intl", "mode_ref"),
            ("ship_local", "shipment_id", "save_track", "shipment_id"),
            ("ship_intl", "shipment_id", "save_track", "shipment_id"),
            ("get_order", "stock_query", "check_stock", "stock_query"),
            ("get_order", "risk_query", "calc_risk", "risk_query"),
            ("check_stock", "stock_level", "sync_status", "stock_level"),
            ("calc_risk", "risk_score", "sync_status", "risk_score"),
        )
    )
    return ToolGraph(nodes=pool, edges=edges)
