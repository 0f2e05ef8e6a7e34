"""Deterministic offline backends for every role.

Each handler is a pure function of the request content and the backend's
``options`` mapping, so stub runs are reproducible across hosts.
"""
from __future__ import annotations

import hashlib
import json
import re
from typing import Any, Mapping

from .deviation import ABOVE, BELOW, IN_RANGE, DeviationTable
from .gcode import extract_config_comments, parse_gcode
from .gcode.kernels import config_pair
from .labels import LABELS
from .prompts import read_section, read_sections, unnumber_lines
from .schema import CATEGORICAL_KEYS, NUMERIC_KEYS, resolve_unit

# slicer setting -> (schema key, unit of the stored value); Prusa and Bambu spellings
SLICER_KEYS: dict[str, tuple[str, str | None]] = {
    "temperature": ("nozzle_temperature", "degC"),
    "nozzle_temperature": ("nozzle_temperature", "degC"),
    "first_layer_temperature": ("first_layer_nozzle_temperature", "degC"),
    "nozzle_temperature_initial_layer": ("first_layer_nozzle_temperature", "degC"),
    "bed_temperature": ("bed_temperature", "degC"),
    "hot_plate_temp": ("bed_temperature", "degC"),
    "first_layer_bed_temperature": ("first_layer_bed_temperature", "degC"),
    "hot_plate_temp_initial_layer": ("first_layer_bed_temperature", "degC"),
    "extrusion_multiplier": ("flow_rate", "fraction"),
    "filament_flow_ratio": ("flow_rate", "fraction"),
    "layer_height": ("layer_height", "mm"),
    "first_layer_height": ("first_layer_height", "mm"),
    "initial_layer_print_height": ("first_layer_height", "mm"),
    "extrusion_width": ("line_width", "mm"),
    "line_width": ("line_width", "mm"),
    "first_layer_extrusion_width": ("first_layer_line_width", "mm"),
    "initial_layer_line_width": ("first_layer_line_width", "mm"),
    "filament_diameter": ("filament_diameter", "mm"),
    "nozzle_diameter": ("nozzle_diameter", "mm"),
    "retract_length": ("retraction_distance", "mm"),
    "retraction_length": ("retraction_distance", "mm"),
    "retract_speed": ("retraction_speed", "mm/s"),
    "retraction_speed": ("retraction_speed", "mm/s"),
    "travel_speed": ("travel_speed", "mm/s"),
    "perimeter_speed": ("print_speed", "mm/s"),
    "outer_wall_speed": ("print_speed", "mm/s"),
    "first_layer_speed": ("first_layer_speed", "mm/s"),
    "initial_layer_speed": ("first_layer_speed", "mm/s"),
    "max_fan_speed": ("fan_speed", "percent"),
    "fan_max_speed": ("fan_speed", "percent"),
    "brim_width": ("brim_width", "mm"),
    "printer_model": ("printer_model", None),
    "filament_type": ("material_type", None),
    "brim_type": ("bed_adhesion_type", None),
}

_FIRST_NUMBER = re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)")


def _first_item(value: str) -> str:
    return re.split(r"[,;]", value, maxsplit=1)[0].strip()


def extract_from_gcode(gcode: str) -> dict:
    """Flat extractor payload from config comments, then command fallbacks."""
    doc = parse_gcode(gcode)
    settings = extract_config_comments(doc)
    payload: dict[str, Any] = {k: None for k in NUMERIC_KEYS}
    payload.update({k: None for k in CATEGORICAL_KEYS})
    notes: list[str] = []

    for name, value in settings.items():
        target = SLICER_KEYS.get(name)
        if target is None:
            continue
        key, unit = target
        item = _first_item(value)
        if unit is None:
            payload[key] = item or None
            continue
        if item.endswith("%"):
            if NUMERIC_KEYS[key] != "percent":
                notes.append(f"{name} = {value} is relative; {key} left null")
                continue
            item, unit = item[:-1].strip(), "percent"
        m = _FIRST_NUMBER.match(item)
        if m is None:
            notes.append(f"{name} = {value} is not numeric")
            continue
        number = float(m.group(0))
        payload[key] = number if unit == NUMERIC_KEYS[key] else {"value": number, "unit": unit}

    travel = nozzle = bed = fan = None
    overrides = []
    for line in doc.lines:
        if line.kind != "command":
            continue
        p = line.params
        if line.code == "G0" and "F" in p:
            travel = p["F"] if travel is None else max(travel, p["F"])
        elif line.code in ("M104", "M109") and "S" in p and nozzle is None:
            nozzle = p["S"]
        elif line.code in ("M140", "M190") and "S" in p and bed is None:
            bed = p["S"]
        elif line.code == "M106" and "S" in p:
            fan = p["S"] if fan is None else max(fan, p["S"])
        elif line.code == "M221" and "S" in p:
            overrides.append(p["S"])
    if payload["travel_speed"] is None and travel is not None:
        payload["travel_speed"] = {"value": travel, "unit": "mm/min"}
    if payload["nozzle_temperature"] is None and nozzle is not None:
        payload["nozzle_temperature"] = nozzle
    if payload["bed_temperature"] is None and bed is not None:
        payload["bed_temperature"] = bed
    if payload["fan_speed"] is None and fan is not None:
        payload["fan_speed"] = {"value": fan, "unit": "duty"}

    if overrides:
        notes.append("M221 flow override(s) present: " + ", ".join(f"S{v:g}" for v in overrides))
    malformed = doc.diagnostics.get("malformed", 0)
    if malformed:
        notes.append(f"{malformed} line(s) could not be parsed as commands")
    payload["notes"] = notes
    return payload


def _extractor(req, options):
    gcode = read_section(req.user_content, "gcode")
    return extract_from_gcode(gcode if gcode is not None else req.user_content)


_RANGE_LINE = re.compile(
    r"^\s*[-*]?\s*([a-z_]+)\s*:\s*([-+]?\d+(?:\.\d+)?)"
    r"(?:\s*(?:-|–|to|\.\.)\s*([-+]?\d+(?:\.\d+)?))?\s*(\S+)?\s*$"
)
_TEXT_LINE = re.compile(r"^\s*(Warning|Tip|Interaction)\s*:\s*(.+?)\s*$", re.I)


def parse_manual(documents: list[tuple[str, str]], printer: str, material: str) -> dict:
    """Reference payload from ``key: lo - hi unit`` lines of plain-text manuals."""
    ranges: dict[str, list[float] | None] = {k: None for k in NUMERIC_KEYS}
    seen: dict[str, str] = {}
    out = {"printer": printer, "material": material, "notes": [], "warnings": [],
           "interactions": [], "source_docs": []}
    for doc_id, text in documents:
        out["source_docs"].append(doc_id)
        for row in text.splitlines():
            m = _TEXT_LINE.match(row)
            if m:
                field = {"warning": "warnings", "tip": "notes", "interaction": "interactions"}
                out[field[m.group(1).lower()]].append(m.group(2))
                continue
            m = _RANGE_LINE.match(row)
            if not m or m.group(1) not in NUMERIC_KEYS:
                continue
            key = m.group(1)
            lo = float(m.group(2))
            hi = float(m.group(3)) if m.group(3) is not None else lo
            unit = m.group(4)
            if unit is not None:
                resolved = resolve_unit(unit)
                if resolved is None or resolved[0] != NUMERIC_KEYS[key]:
                    out["warnings"].append(f"{doc_id}: {key} given in unsupported unit {unit!r}")
                    continue
                if resolved[1] is not None:
                    lo, hi = round(resolved[1](lo), 9), round(resolved[1](hi), 9)
            if ranges[key] is not None and ranges[key] != [lo, hi]:
                out["warnings"].append(
                    f"conflicting {key} ranges: {ranges[key]} in {seen[key]}, [{lo}, {hi}] in {doc_id}"
                )
                continue
            ranges[key] = [lo, hi]
            seen[key] = doc_id
    if all(v is None for v in ranges.values()):
        out["warnings"].append("documents contain no recognizable parameter ranges")
    out["ranges"] = ranges
    return out


def _reference(req, options):
    m_p = re.search(r"^Printer: (.*)$", req.user_content, re.M)
    m_m = re.search(r"^Material: (.*)$", req.user_content, re.M)
    docs = [(attrs.get("id", f"doc{i}"), body)
            for i, (attrs, body) in enumerate(read_sections(req.user_content, "document"))]
    return parse_manual(docs, m_p.group(1) if m_p else "", m_m.group(1) if m_m else "")


def judge_rules(table: DeviationTable, material: str | None = None) -> tuple[str, list[str], str]:
    """First matching rule wins; returns ``(label, keys used, rule name)``."""
    d = table.direction
    material = (material if material is not None else table.material) or ""
    is_abs = material.strip().upper() == "ABS"

    if d("flow_rate") == BELOW:
        return "UE", ["flow_rate"], "flow below range"
    if d("layer_height") == ABOVE and d("flow_rate") == IN_RANGE:
        return "UE", ["layer_height", "flow_rate"], "layer height above range at nominal flow"
    if d("flow_rate") == ABOVE:
        return "OE", ["flow_rate"], "flow above range"
    if d("first_layer_bed_temperature") == BELOW:
        return "WP", ["first_layer_bed_temperature"], "first-layer bed temperature below range"
    if d("fan_speed") == ABOVE and is_abs:
        return "WP", ["fan_speed"], "part cooling above range for ABS"
    if d("brim_width") == BELOW:
        return "WP", ["brim_width"], "brim narrower than recommended"
    if d("nozzle_temperature") == ABOVE and d("retraction_distance") == BELOW:
        return "ST", ["nozzle_temperature", "retraction_distance"], "hot nozzle with short retraction"
    if d("retraction_distance") == BELOW and d("travel_speed") == BELOW:
        return "ST", ["retraction_distance", "travel_speed"], "short retraction with slow travel"
    return "ND", [], "no rule matched"


def stub_judge_rules(table: DeviationTable, material: str | None = None) -> str:
    return judge_rules(table, material)[0]


def _cite(lines: list[str], keys: list[str]) -> list[dict]:
    wanted = {}
    for name, (key, _) in SLICER_KEYS.items():
        wanted.setdefault(key, set()).add(name)
    citations = []
    for key in keys:
        names = wanted.get(key, set())
        for i, line in enumerate(lines):
            s = line.strip()
            if not s.startswith(";"):
                continue
            pair = config_pair(s)
            if pair is not None and pair[0] in names:
                citations.append({"line": i, "quote": s})
                break
    return citations


def _judge(req, options):
    evidence = json.loads(read_section(req.user_content, "evidence") or "{}")
    table = DeviationTable.from_json(evidence.get("deviation_table", {}))
    label, used, rule = judge_rules(table, evidence.get("material"))
    body = read_section(req.user_content, "gcode")
    lines = unnumber_lines(body) if body else []
    out_of_range = [r for r in table.rows if r.direction != IN_RANGE]
    if label == "ND":
        confidence = 1.0 if not out_of_range else 0.6
        summary = "all compared parameters within range" if not out_of_range else (
            "deviations present but none matches a defect pattern")
    else:
        confidence = 0.9
        parts = []
        for key in used:
            r = table.row(key)
            parts.append(f"{key} {r.direction} ({r.value:g} vs [{r.lower:g}, {r.upper:g}])")
        summary = "; ".join(parts)
    return {
        "label": label,
        "confidence": confidence,
        "support_summary": summary,
        "deviations_used": used,
        "rationale": f"rule: {rule}",
        "evidence_citations": _cite(lines, used),
    }


def baseline_answer_key(shortened_text: str) -> str:
    """Key of a shortened program in the fixed-answer baseline's ``answers`` table."""
    return hashlib.sha256(shortened_text.rstrip("\n").encode("utf-8")).hexdigest()


def _baseline(req, options):
    digest = baseline_answer_key(read_section(req.user_content, "gcode") or "")
    answers = options.get("answers", {})
    label = answers.get(digest, options.get("default_label", "ND"))
    if label not in LABELS:
        label = str(label)
    return {"label": label, "rationale": "fixed-answer stub"}


STUB_HANDLERS = {
    "extractor": _extractor,
    "reference": _reference,
    "judge": _judge,
    "baseline": _baseline,
}
