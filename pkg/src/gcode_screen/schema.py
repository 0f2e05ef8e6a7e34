"""The fixed process-parameter schema, unit normalization and extraction scoring."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

SCHEMA_VERSION = "1.0"

# key -> canonical unit; order is the schema order used by every table
NUMERIC_KEYS: dict[str, str] = {
    "nozzle_temperature": "degC",
    "first_layer_nozzle_temperature": "degC",
    "bed_temperature": "degC",
    "first_layer_bed_temperature": "degC",
    "flow_rate": "percent",
    "layer_height": "mm",
    "first_layer_height": "mm",
    "line_width": "mm",
    "first_layer_line_width": "mm",
    "filament_diameter": "mm",
    "nozzle_diameter": "mm",
    "retraction_distance": "mm",
    "retraction_speed": "mm/s",
    "travel_speed": "mm/s",
    "print_speed": "mm/s",
    "first_layer_speed": "mm/s",
    "fan_speed": "percent",
    "brim_width": "mm",
}
CATEGORICAL_KEYS = ("printer_model", "material_type", "bed_adhesion_type")

DEFAULT_CRITICAL = frozenset({
    "nozzle_temperature",
    "bed_temperature",
    "first_layer_bed_temperature",
    "flow_rate",
    "layer_height",
    "line_width",
    "retraction_distance",
    "fan_speed",
    "brim_width",
})

# accepted unit spellings -> (canonical unit, converter)
_UNITS: dict[str, tuple[str, Any]] = {
    "degc": ("degC", None),
    "c": ("degC", None),
    "°c": ("degC", None),
    "celsius": ("degC", None),
    "k": ("degC", lambda v: v - 273.15),
    "kelvin": ("degC", lambda v: v - 273.15),
    "mm": ("mm", None),
    "um": ("mm", lambda v: v / 1000.0),
    "µm": ("mm", lambda v: v / 1000.0),
    "cm": ("mm", lambda v: v * 10.0),
    "in": ("mm", lambda v: v * 25.4),
    "mm/s": ("mm/s", None),
    "mm/min": ("mm/s", lambda v: v / 60.0),
    "percent": ("percent", None),
    "%": ("percent", None),
    "fraction": ("percent", lambda v: v * 100.0),
    "ratio": ("percent", lambda v: v * 100.0),
    "multiplier": ("percent", lambda v: v * 100.0),
    "duty": ("percent", lambda v: v * 100.0 / 255.0),
    "pwm": ("percent", lambda v: v * 100.0 / 255.0),
}


def resolve_unit(unit: str) -> tuple[str, Any] | None:
    return _UNITS.get(unit.strip().lower())


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


class SchemaValidationError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class SchemaVersionError(ValueError):
    pass


def _blank_values():
    return {k: None for k in NUMERIC_KEYS}


@dataclass
class ExtractedParameters:
    values: dict[str, float | None] = field(default_factory=_blank_values)
    categorical: dict[str, str | None] = field(
        default_factory=lambda: {k: None for k in CATEGORICAL_KEYS}
    )
    notes: list[str] = field(default_factory=list)
    source: str = ""
    unit_audit: list[str] = field(default_factory=list)
    # declared unit per numeric key; canonical after normalize_units
    units: dict[str, str] = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "source": self.source,
            "values": {k: self.values.get(k) for k in NUMERIC_KEYS},
            "categorical": {k: self.categorical.get(k) for k in CATEGORICAL_KEYS},
            "units": dict(sorted(self.units.items())),
            "notes": list(self.notes),
            "unit_audit": list(self.unit_audit),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "ExtractedParameters":
        return validate_extraction(data)


def _check_number(value, path, violations):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        violations.append(Violation(path, f"expected a number or null, got {type(value).__name__}"))
        return None
    if not math.isfinite(value):
        violations.append(Violation(path, "non-finite number"))
        return None
    return float(value)


def _flatten(candidate: Mapping) -> dict:
    """Accept the serialized artifact form as well as the flat model form."""
    if not isinstance(candidate.get("values"), Mapping):
        return dict(candidate)
    flat = {k: v for k, v in candidate.items() if k not in ("values", "categorical", "units")}
    units = candidate.get("units") or {}
    for key, value in candidate["values"].items():
        if value is not None and key in units:
            flat[key] = {"value": value, "unit": units[key]}
        else:
            flat[key] = value
    flat.update(candidate.get("categorical") or {})
    return flat


def validate_extraction(candidate: Any) -> ExtractedParameters:
    """Map a model's JSON output onto the closed schema.

    Numeric fields are a number, null, or ``{"value": x, "unit": "..."}``.
    Unknown keys are kept as notes. Raises :class:`SchemaValidationError`
    listing every violation with its path.
    """
    if not isinstance(candidate, Mapping):
        raise SchemaValidationError([Violation("$", "expected a JSON object")])
    data = _flatten(candidate)
    violations: list[Violation] = []
    out = ExtractedParameters()

    version = data.pop("schema_version", SCHEMA_VERSION)
    out.schema_version = str(version)
    out.source = str(data.pop("source", "") or "")

    notes = data.pop("notes", [])
    if notes is None:
        notes = []
    if not isinstance(notes, list) or not all(isinstance(n, str) for n in notes):
        violations.append(Violation("notes", "expected a list of strings"))
    else:
        out.notes.extend(notes)
    audit = data.pop("unit_audit", [])
    if isinstance(audit, list):
        out.unit_audit.extend(str(a) for a in audit)

    for key, value in data.items():
        if key in NUMERIC_KEYS:
            unit = None
            if isinstance(value, Mapping):
                unit = value.get("unit")
                value = value.get("value")
                if unit is not None:
                    if not isinstance(unit, str) or resolve_unit(unit) is None:
                        violations.append(Violation(f"{key}.unit", f"unknown unit {unit!r}"))
                        continue
                    if resolve_unit(unit)[0] != NUMERIC_KEYS[key]:
                        violations.append(Violation(
                            f"{key}.unit", f"unit {unit!r} incompatible with {NUMERIC_KEYS[key]}"
                        ))
                        continue
            if value is None:
                continue
            number = _check_number(value, key, violations)
            if number is not None:
                out.values[key] = number
                if unit is not None:
                    out.units[key] = unit
        elif key in CATEGORICAL_KEYS:
            if value is not None and not isinstance(value, str):
                violations.append(Violation(key, "expected a string or null"))
            else:
                out.categorical[key] = value
        else:
            out.notes.append(f"{key}: {value if isinstance(value, str) else json.dumps(value)}")

    if violations:
        raise SchemaValidationError(violations)
    return out


def _infer_unit(key: str, value: float) -> str | None:
    canonical = NUMERIC_KEYS[key]
    if key == "fan_speed":
        if 0 <= value <= 100:
            return "percent"
        if 100 < value <= 255:
            return "duty"
        return None
    if key == "flow_rate":
        if value < 0:
            return None
        return "fraction" if value <= 3 else "percent"
    if canonical == "mm/s":
        if value < 0:
            return None
        return "mm/s" if value <= 1000 else "mm/min"
    return canonical


def normalize_units(raw: ExtractedParameters) -> ExtractedParameters:
    """Convert every numeric value to its canonical unit.

    Undeclared units are inferred from magnitude where that is unambiguous
    (fan duty above 100, flow multipliers up to 3, feedrates above 1000);
    a value whose unit cannot be inferred is nulled and noted.
    """
    values = dict(raw.values)
    units = dict(raw.units)
    notes = list(raw.notes)
    audit = list(raw.unit_audit)
    for key in NUMERIC_KEYS:
        value = values.get(key)
        if value is None:
            units.pop(key, None)
            continue
        canonical = NUMERIC_KEYS[key]
        declared = units.get(key)
        inferred = False
        if declared is None:
            declared = _infer_unit(key, value)
            inferred = True
            if declared is None:
                values[key] = None
                notes.append(f"{key}: unit of value {value:g} could not be inferred; dropped")
                continue
        target, convert = resolve_unit(declared)
        if convert is not None:
            new = round(convert(value), 9)
            how = "inferred " if inferred else ""
            audit.append(f"{key}: {value:g} {how}{declared} -> {new:g} {canonical}")
            values[key] = new
        units[key] = canonical
    return replace(raw, values=values, units=units, notes=notes, unit_audit=audit)


@dataclass(frozen=True)
class Tolerance:
    relative: float
    absolute: float

    def __post_init__(self):
        if self.relative < 0 or self.absolute < 0:
            raise ValueError("tolerances must be non-negative")
        if self.relative == 0 and self.absolute == 0:
            raise ValueError("at least one tolerance component must be positive")

    def allows(self, pred: float, truth: float) -> bool:
        return abs(pred - truth) <= max(self.relative * abs(truth), self.absolute)


_DEFAULT_FLOORS = {"degC": 0.5, "mm": 0.01, "mm/s": 1.0, "percent": 1.0}


@dataclass(frozen=True)
class ToleranceSpec:
    per_key: Mapping[str, Tolerance]

    def __post_init__(self):
        missing = set(NUMERIC_KEYS) - set(self.per_key)
        if missing:
            raise ValueError(f"tolerance missing for {sorted(missing)}")

    def __getitem__(self, key: str) -> Tolerance:
        return self.per_key[key]

    @classmethod
    def default(cls, relative: float = 0.02) -> "ToleranceSpec":
        return cls({k: Tolerance(relative, _DEFAULT_FLOORS[u]) for k, u in NUMERIC_KEYS.items()})

    @classmethod
    def from_mapping(cls, data: Mapping) -> "ToleranceSpec":
        """``{"default": {...}, "keys": {key: {"relative": r, "absolute": a}}}``."""
        base = data.get("default", {})
        rel = float(base.get("relative", 0.02))
        per_key = dict(cls.default(rel).per_key)
        if "absolute" in base:
            per_key = {k: Tolerance(rel, float(base["absolute"])) for k in NUMERIC_KEYS}
        for key, entry in (data.get("keys") or {}).items():
            if key not in NUMERIC_KEYS:
                raise ValueError(f"unknown tolerance key {key!r}")
            current = per_key[key]
            per_key[key] = Tolerance(
                float(entry.get("relative", current.relative)),
                float(entry.get("absolute", current.absolute)),
            )
        return cls(per_key)

    @classmethod
    def load(cls, path: str | Path) -> "ToleranceSpec":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".toml":
            from ._compat import tomllib

            return cls.from_mapping(tomllib.loads(text))
        return cls.from_mapping(json.loads(text))


def critical_set(keys: Iterable[str] = DEFAULT_CRITICAL) -> frozenset[str]:
    keys = frozenset(keys)
    if not keys:
        raise ValueError("critical set must not be empty")
    unknown = keys - set(NUMERIC_KEYS)
    if unknown:
        raise ValueError(f"unknown critical keys {sorted(unknown)}")
    return keys


@dataclass(frozen=True)
class CellScore:
    key: str
    pred: float | None
    truth: float
    within: bool
    # absolute percentage error; None when truth is zero
    ape: float | None


@dataclass(frozen=True)
class ExtractionScore:
    overall_accuracy: float
    critical_accuracy: float
    overall_mape: float
    critical_mape: float
    n_cells: int
    n_critical_cells: int

    def to_json(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "critical_accuracy": self.critical_accuracy,
            "overall_mape": self.overall_mape,
            "critical_mape": self.critical_mape,
            "n_cells": self.n_cells,
            "n_critical_cells": self.n_critical_cells,
        }


NULL_MISMATCH_APE = 100.0


def score_cells(pred: ExtractedParameters, truth: ExtractedParameters, tol: ToleranceSpec) -> list[CellScore]:
    """Score every key for which the ground truth has a value."""
    if pred.schema_version != truth.schema_version:
        raise SchemaVersionError(
            f"schema version mismatch: {pred.schema_version} vs {truth.schema_version}"
        )
    cells = []
    for key in NUMERIC_KEYS:
        t = truth.values.get(key)
        if t is None:
            continue
        p = pred.values.get(key)
        if p is None:
            cells.append(CellScore(key, None, t, False, NULL_MISMATCH_APE if t != 0 else None))
            continue
        ape = 100.0 * abs(p - t) / abs(t) if t != 0 else None
        cells.append(CellScore(key, p, t, tol[key].allows(p, t), ape))
    return cells


def _mean(xs):
    return sum(xs) / len(xs) if xs else float("nan")


def summarize_cells(cells: list[CellScore], critical: Iterable[str]) -> ExtractionScore:
    critical = frozenset(critical)
    crit = [c for c in cells if c.key in critical]
    return ExtractionScore(
        overall_accuracy=_mean([c.within for c in cells]),
        critical_accuracy=_mean([c.within for c in crit]),
        overall_mape=_mean([c.ape for c in cells if c.ape is not None]),
        critical_mape=_mean([c.ape for c in crit if c.ape is not None]),
        n_cells=len(cells),
        n_critical_cells=len(crit),
    )


def score_extraction(
    pred: ExtractedParameters,
    truth: ExtractedParameters,
    tol: ToleranceSpec | None = None,
    critical: Iterable[str] = DEFAULT_CRITICAL,
) -> ExtractionScore:
    """Tolerance accuracy and MAPE (in percent), overall and on the critical subset."""
    return summarize_cells(score_cells(pred, truth, tol or ToleranceSpec.default()), critical)


def extraction_json_schema() -> dict:
    """JSON Schema for the extractor's output object."""
    number = {
        "anyOf": [
            {"type": "number"},
            {"type": "null"},
            {
                "type": "object",
                "properties": {"value": {"type": ["number", "null"]}, "unit": {"type": "string"}},
                "required": ["value"],
            },
        ]
    }
    props: dict[str, Any] = {}
    for key, unit in NUMERIC_KEYS.items():
        props[key] = dict(number, description=f"canonical unit: {unit}")
    for key in CATEGORICAL_KEYS:
        props[key] = {"type": ["string", "null"]}
    props["notes"] = {"type": "array", "items": {"type": "string"}}
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$id": f"gcode-screen/extraction/{SCHEMA_VERSION}",
        "title": "ExtractedParameters",
        "type": "object",
        "properties": props,
        "required": list(NUMERIC_KEYS) + list(CATEGORICAL_KEYS) + ["notes"],
    }
