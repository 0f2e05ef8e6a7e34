"""Synthetic sliced programs with known parameters and labels.

Two slicer dialects are emitted: a Prusa-style file for ``MK4S`` (footer
config block, ``;LAYER_CHANGE`` markers) and a Bambu-style file for ``BMP1``
(header ``CONFIG_BLOCK``, ``; layer num`` markers). Per-class parameter
settings are chosen against the bundled references so that the stub judge
rules reproduce the intended label.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

from .labels import LABELS
from .schema import NUMERIC_KEYS

PRINTERS = ("MK4S", "BMP1")
MATERIALS = ("PLA", "ABS")

_NOMINAL = {
    "PLA": dict(
        nozzle_temperature=215.0, first_layer_nozzle_temperature=215.0, bed_temperature=60.0,
        first_layer_bed_temperature=60.0, flow_rate=100.0, layer_height=0.2,
        first_layer_height=0.2, line_width=0.45, first_layer_line_width=0.5,
        filament_diameter=1.75, nozzle_diameter=0.4, retraction_distance=0.8,
        retraction_speed=35.0, print_speed=60.0, first_layer_speed=25.0, fan_speed=100.0,
        brim_width=0.0,
    ),
    "ABS": dict(
        nozzle_temperature=255.0, first_layer_nozzle_temperature=255.0, bed_temperature=105.0,
        first_layer_bed_temperature=105.0, flow_rate=100.0, layer_height=0.2,
        first_layer_height=0.2, line_width=0.45, first_layer_line_width=0.5,
        filament_diameter=1.75, nozzle_diameter=0.4, retraction_distance=0.8,
        retraction_speed=35.0, print_speed=60.0, first_layer_speed=25.0, fan_speed=15.0,
        brim_width=5.0,
    ),
}
_TRAVEL = {"MK4S": 200.0, "BMP1": 500.0}

# class -> material -> parameter overrides
_DEFECTS = {
    "ND": {"PLA": {}, "ABS": {}},
    "UE": {"PLA": {"flow_rate": 85.0}, "ABS": {"flow_rate": 88.0}},
    "OE": {"PLA": {"flow_rate": 115.0}, "ABS": {"flow_rate": 112.0}},
    "WP": {"PLA": {"first_layer_bed_temperature": 40.0}, "ABS": {"fan_speed": 60.0}},
    "ST": {
        "PLA": {"nozzle_temperature": 240.0, "retraction_distance": 0.2},
        "ABS": {"nozzle_temperature": 280.0, "retraction_distance": 0.2},
    },
}


def sample_parameters(printer: str, material: str, label: str) -> dict[str, float]:
    params = dict(_NOMINAL[material])
    params["travel_speed"] = _TRAVEL[printer]
    params.update(_DEFECTS[label][material])
    return {k: params[k] for k in NUMERIC_KEYS}


def _g(v: float) -> str:
    return f"{v:.4f}".rstrip("0").rstrip(".")


def _config_lines(printer: str, material: str, p: dict[str, float]) -> list[str]:
    brim = "outer_only" if p["brim_width"] > 0 else "no_brim"
    if printer == "MK4S":
        entries = [
            ("brim_type", brim),
            ("brim_width", _g(p["brim_width"])),
            ("bed_temperature", _g(p["bed_temperature"])),
            ("extrusion_multiplier", _g(p["flow_rate"] / 100)),
            ("extrusion_width", _g(p["line_width"])),
            ("filament_diameter", _g(p["filament_diameter"])),
            ("filament_type", material),
            ("first_layer_bed_temperature", _g(p["first_layer_bed_temperature"])),
            ("first_layer_extrusion_width", _g(p["first_layer_line_width"])),
            ("first_layer_height", _g(p["first_layer_height"])),
            ("first_layer_speed", _g(p["first_layer_speed"])),
            ("first_layer_temperature", _g(p["first_layer_nozzle_temperature"])),
            ("layer_height", _g(p["layer_height"])),
            ("max_fan_speed", _g(p["fan_speed"])),
            ("nozzle_diameter", _g(p["nozzle_diameter"])),
            ("perimeter_speed", _g(p["print_speed"])),
            ("printer_model", printer),
            ("retract_length", _g(p["retraction_distance"])),
            ("retract_speed", _g(p["retraction_speed"])),
            ("temperature", _g(p["nozzle_temperature"])),
            ("travel_speed", _g(p["travel_speed"])),
        ]
    else:
        entries = [
            ("brim_type", "auto_brim" if p["brim_width"] > 0 else "no_brim"),
            ("brim_width", _g(p["brim_width"])),
            ("fan_max_speed", _g(p["fan_speed"])),
            ("filament_diameter", _g(p["filament_diameter"])),
            ("filament_flow_ratio", _g(p["flow_rate"] / 100)),
            ("filament_type", material),
            ("hot_plate_temp", _g(p["bed_temperature"])),
            ("hot_plate_temp_initial_layer", _g(p["first_layer_bed_temperature"])),
            ("initial_layer_line_width", _g(p["first_layer_line_width"])),
            ("initial_layer_print_height", _g(p["first_layer_height"])),
            ("initial_layer_speed", _g(p["first_layer_speed"])),
            ("layer_height", _g(p["layer_height"])),
            ("line_width", _g(p["line_width"])),
            ("nozzle_diameter", _g(p["nozzle_diameter"])),
            ("nozzle_temperature", _g(p["nozzle_temperature"])),
            ("nozzle_temperature_initial_layer", _g(p["first_layer_nozzle_temperature"])),
            ("outer_wall_speed", _g(p["print_speed"])),
            ("printer_model", printer),
            ("retraction_length", _g(p["retraction_distance"])),
            ("retraction_speed", _g(p["retraction_speed"])),
            ("travel_speed", _g(p["travel_speed"])),
        ]
    return [f"; {k} = {v}" for k, v in entries]


def render_gcode(
    printer: str,
    material: str,
    params: dict[str, float],
    layers: int = 10,
    seed: int = 0,
    layer_markers: bool = True,
) -> str:
    """A small but structurally realistic sliced program."""
    rng = random.Random(seed)
    p = params
    out: list[str] = []
    config = _config_lines(printer, material, p)
    bambu = printer != "MK4S"

    if bambu:
        out += ["; HEADER_BLOCK_START", "; BambuStudio-style synthetic program",
                f"; total layer number: {layers}", "; HEADER_BLOCK_END", ""]
        out += ["; CONFIG_BLOCK_START"] + config + ["; CONFIG_BLOCK_END", ""]
    else:
        out += ["; generated by a PrusaSlicer-style synthetic writer", ""]

    out += [
        "M73 P0 R10",
        "M201 X4000 Y4000 Z200 E2500",
        "G90",
        "M83",
        f"M140 S{_g(p['first_layer_bed_temperature'])}",
        f"M104 S{_g(p['first_layer_nozzle_temperature'])}",
        "G28 ; home all axes",
        f"M190 S{_g(p['first_layer_bed_temperature'])}",
        f"M109 S{_g(p['first_layer_nozzle_temperature'])}",
        "G92 E0",
        "M107",
    ]

    travel_f = p["travel_speed"] * 60
    retract = p["retraction_distance"]
    retract_f = p["retraction_speed"] * 60
    fan_duty = round(p["fan_speed"] * 255 / 100)
    # extrusion per mm of path for the configured line
    e_per_mm = p["line_width"] * p["layer_height"] / (math.pi * (p["filament_diameter"] / 2) ** 2)
    e_per_mm *= p["flow_rate"] / 100

    z = 0.0
    for n in range(1, layers + 1):
        height = p["first_layer_height"] if n == 1 else p["layer_height"]
        z = round(z + height, 4)
        if layer_markers:
            if bambu:
                out += [f"; layer num/total_layer_count: {n}/{layers}", "; CHANGE_LAYER",
                        f"; Z_HEIGHT: {_g(z)}"]
            else:
                out += [";LAYER_CHANGE", f";Z:{_g(z)}", f";HEIGHT:{_g(height)}"]
        out.append(f"G1 Z{_g(z)} F{_g(travel_f)}")
        if n == 2:
            out += [f"M104 S{_g(p['nozzle_temperature'])}", f"M140 S{_g(p['bed_temperature'])}",
                    f"M106 S{fan_duty}"]
        speed = p["first_layer_speed"] if n == 1 else p["print_speed"]
        x0, y0 = 100 + rng.uniform(-5, 5), 100 + rng.uniform(-5, 5)
        side = 20 + rng.uniform(0, 5)
        out.append(f"G1 X{x0:.3f} Y{y0:.3f} F{_g(travel_f)}")
        out.append(f"G1 E{_g(retract)} F{_g(retract_f)}")
        corners = [(x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side), (x0, y0)]
        px, py = x0, y0
        for cx, cy in corners:
            dist = math.hypot(cx - px, cy - py)
            out.append(f"G1 X{cx:.3f} Y{cy:.3f} E{dist * e_per_mm:.5f} F{_g(speed * 60)}")
            px, py = cx, cy
        out.append(f"G1 E-{_g(retract)} F{_g(retract_f)}")

    out += ["M107", f"M104 S0", "M140 S0", "G1 X0 Y200 F3000", "M84", ""]
    if not bambu:
        out += ["; filament used [mm] = 123.45",
                "; prusaslicer_config = begin"] + config + ["; prusaslicer_config = end"]
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class SyntheticSample:
    sample_id: str
    printer: str
    material: str
    label: str
    gcode_path: Path
    truth_path: Path


def write_corpus(root: str | Path, layers: int = 10) -> list[SyntheticSample]:
    """Write the 2 x 2 x 5 corpus, ground-truth files and ``manifest.jsonl``."""
    root = Path(root)
    (root / "gcode").mkdir(parents=True, exist_ok=True)
    (root / "truth").mkdir(exist_ok=True)
    samples = []
    for i, (printer, material, label) in enumerate(
        (p, m, c) for p in PRINTERS for m in MATERIALS for c in LABELS
    ):
        sid = f"{printer}-{material}-{label}".lower()
        params = sample_parameters(printer, material, label)
        gpath = root / "gcode" / f"{sid}.gcode"
        gpath.write_text(render_gcode(printer, material, params, layers=layers + i % 3, seed=i),
                         encoding="utf-8")
        tpath = root / "truth" / f"{sid}.json"
        truth = {
            "values": params,
            "categorical": {
                "printer_model": printer,
                "material_type": material,
                "bed_adhesion_type": ("outer_only" if printer == "MK4S" else "auto_brim")
                if params["brim_width"] > 0 else "no_brim",
            },
        }
        tpath.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        samples.append(SyntheticSample(sid, printer, material, label, gpath, tpath))
    with open(root / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "sample_id": s.sample_id,
                "gcode_path": f"gcode/{s.gcode_path.name}",
                "printer": s.printer,
                "material": s.material,
                "true_label": s.label,
                "truth_path": f"truth/{s.truth_path.name}",
            }, sort_keys=True) + "\n")
    return samples
