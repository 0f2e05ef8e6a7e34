"""Deterministic comparison of extracted values against reference ranges."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .reference import ReferenceRanges
from .schema import (
    DEFAULT_CRITICAL,
    NUMERIC_KEYS,
    SCHEMA_VERSION,
    ExtractedParameters,
    SchemaVersionError,
)

BELOW = "below"
IN_RANGE = "in_range"
ABOVE = "above"

FLAG_NAMES = (
    "material_mismatch",
    "printer_mismatch",
    "missing_critical_parameter",
    "adhesion_mode_absent",
)


def compute_deviation(v: float, lower: float, upper: float) -> tuple[float, float | None, str]:
    """Out-of-band distance of ``v`` from the closed interval ``[lower, upper]``.

    Returns ``(deviation, normalized, direction)``; ``normalized`` is the
    deviation divided by the band width and is None for a zero-width band.
    """
    if not (math.isfinite(v) and math.isfinite(lower) and math.isfinite(upper)):
        raise ValueError("deviation inputs must be finite")
    if lower > upper:
        raise ValueError(f"inverted range [{lower}, {upper}]")
    if v < lower:
        dev, direction = lower - v, BELOW
    elif v > upper:
        dev, direction = v - upper, ABOVE
    else:
        dev, direction = 0.0, IN_RANGE
    width = upper - lower
    return dev, (dev / width if width > 0 else None), direction


@dataclass(frozen=True)
class DeviationRow:
    key: str
    value: float
    lower: float
    upper: float
    deviation: float
    normalized: float | None
    band_width: float
    direction: str

    def to_json(self) -> dict:
        return {
            "key": self.key,
            "value": self.value,
            "lower": self.lower,
            "upper": self.upper,
            "deviation": self.deviation,
            "normalized": self.normalized,
            "band_width": self.band_width,
            "direction": self.direction,
        }


@dataclass(frozen=True)
class CategoricalFlag:
    name: str
    detail: str

    def __post_init__(self):
        if self.name not in FLAG_NAMES:
            raise ValueError(f"unknown flag {self.name!r}")


@dataclass
class DeviationTable:
    rows: list[DeviationRow] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    flags: list[CategoricalFlag] = field(default_factory=list)
    printer: str = ""
    material: str = ""
    schema_version: str = SCHEMA_VERSION

    def row(self, key: str) -> DeviationRow | None:
        for r in self.rows:
            if r.key == key:
                return r
        return None

    def direction(self, key: str) -> str | None:
        r = self.row(key)
        return r.direction if r is not None else None

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "printer": self.printer,
            "material": self.material,
            "rows": [r.to_json() for r in self.rows],
            "skipped": [{"key": k, "reason": why} for k, why in self.skipped],
            "flags": [{"name": f.name, "detail": f.detail} for f in self.flags],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "DeviationTable":
        rows = []
        for r in data.get("rows", []):
            if r["key"] not in NUMERIC_KEYS:
                raise ValueError(f"unknown parameter {r['key']!r}")
            rows.append(DeviationRow(**{k: r[k] for k in DeviationRow.__dataclass_fields__}))
        return cls(
            rows=rows,
            skipped=[(s["key"], s["reason"]) for s in data.get("skipped", [])],
            flags=[CategoricalFlag(f["name"], f["detail"]) for f in data.get("flags", [])],
            printer=data.get("printer", ""),
            material=data.get("material", ""),
            schema_version=data.get("schema_version", SCHEMA_VERSION),
        )


def _same(a: str | None, b: str | None) -> bool:
    return " ".join((a or "").split()).casefold() == " ".join((b or "").split()).casefold()


def derive_flags(
    extracted: ExtractedParameters,
    reference: ReferenceRanges,
    requested_printer: str,
    requested_material: str,
    critical: Iterable[str] = DEFAULT_CRITICAL,
) -> list[CategoricalFlag]:
    flags = []
    material = extracted.categorical.get("material_type")
    if material is not None and not _same(material, requested_material):
        flags.append(CategoricalFlag(
            "material_mismatch", f"G-code material {material!r}, requested {requested_material!r}"
        ))
    printer = extracted.categorical.get("printer_model")
    if printer is not None and not _same(printer, requested_printer):
        flags.append(CategoricalFlag(
            "printer_mismatch", f"G-code printer {printer!r}, requested {requested_printer!r}"
        ))
    missing = [k for k in NUMERIC_KEYS if k in set(critical) and extracted.values.get(k) is None]
    if missing:
        flags.append(CategoricalFlag("missing_critical_parameter", ", ".join(missing)))
    if extracted.categorical.get("bed_adhesion_type") is None:
        flags.append(CategoricalFlag("adhesion_mode_absent", "no bed adhesion mode found"))
    return flags


def build_deviation_table(
    extracted: ExtractedParameters,
    reference: ReferenceRanges,
    printer: str | None = None,
    material: str | None = None,
    critical: Iterable[str] = DEFAULT_CRITICAL,
) -> DeviationTable:
    """One row per key holding both a value and a finite range, in schema order."""
    if extracted.schema_version != reference.schema_version:
        raise SchemaVersionError(
            f"schema version mismatch: {extracted.schema_version} vs {reference.schema_version}"
        )
    printer = reference.printer if printer is None else printer
    material = reference.material if material is None else material
    table = DeviationTable(printer=printer, material=material,
                           schema_version=extracted.schema_version)
    for key in NUMERIC_KEYS:
        v = extracted.values.get(key)
        rng = reference.ranges.get(key)
        if v is None or rng is None:
            reason = "both_null" if v is None and rng is None else (
                "value_null" if v is None else "range_null")
            table.skipped.append((key, reason))
            continue
        lo, hi = rng
        dev, norm, direction = compute_deviation(v, lo, hi)
        table.rows.append(DeviationRow(key, v, lo, hi, dev, norm, hi - lo, direction))
    table.flags = derive_flags(extracted, reference, printer, material, critical)
    return table
