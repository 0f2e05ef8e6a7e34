"""Recommended operating ranges per printer-material pair, and their cache."""
from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

from .schema import NUMERIC_KEYS, SCHEMA_VERSION, SchemaValidationError, Violation
from .store import write_atomic

_TEXT_FIELDS = ("notes", "warnings", "interactions", "source_docs")


@dataclass
class ReferenceRanges:
    printer: str
    material: str
    ranges: dict[str, tuple[float, float] | None] = field(
        default_factory=lambda: {k: None for k in NUMERIC_KEYS}
    )
    notes: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    interactions: list[str] = field(default_factory=list)
    source_docs: list[str] = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "printer": self.printer,
            "material": self.material,
            "ranges": {
                k: (list(self.ranges[k]) if self.ranges.get(k) is not None else None)
                for k in NUMERIC_KEYS
            },
            "notes": list(self.notes),
            "warnings": list(self.warnings),
            "interactions": list(self.interactions),
            "source_docs": list(self.source_docs),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "ReferenceRanges":
        return validate_reference(data)


@dataclass(frozen=True)
class DocBundle:
    printer: str
    material: str
    documents: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not self.documents:
            raise ValueError("a document bundle needs at least one document")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for doc_id, text in self.documents:
            h.update(json.dumps([doc_id, text]).encode("utf-8"))
        return h.hexdigest()

    @classmethod
    def from_paths(cls, printer: str, material: str, paths) -> "DocBundle":
        docs = tuple((Path(p).name, Path(p).read_text(encoding="utf-8")) for p in paths)
        return cls(printer, material, docs)


def _interval(value, path, violations, notes):
    if value is None:
        return None
    if isinstance(value, Mapping):
        value = [value.get("lower", value.get("min")), value.get("upper", value.get("max"))]
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        violations.append(Violation(path, "expected [lower, upper] or null"))
        return None
    lo, hi = value
    if lo is None or hi is None:
        if lo is None and hi is None:
            return None
        notes.append(f"{path}: one-sided range [{lo}, {hi}] not used for comparison")
        return None
    for bound, name in ((lo, "lower"), (hi, "upper")):
        if isinstance(bound, bool) or not isinstance(bound, (int, float)):
            violations.append(Violation(f"{path}.{name}", "expected a number"))
            return None
        if not math.isfinite(bound):
            violations.append(Violation(f"{path}.{name}", "non-finite bound"))
            return None
    if lo > hi:
        violations.append(Violation(path, f"inverted interval [{lo}, {hi}]"))
        return None
    return float(lo), float(hi)


def validate_reference(candidate: Any) -> ReferenceRanges:
    """Map a model's JSON output onto :class:`ReferenceRanges`.

    Ranges may sit under ``"ranges"`` or directly at top level. Unknown
    top-level keys holding text are kept as notes; anything else unknown is
    a violation.
    """
    if not isinstance(candidate, Mapping):
        raise SchemaValidationError([Violation("$", "expected a JSON object")])
    violations: list[Violation] = []
    data = dict(candidate)
    out = ReferenceRanges(printer=str(data.pop("printer", "") or ""),
                          material=str(data.pop("material", "") or ""))
    out.schema_version = str(data.pop("schema_version", SCHEMA_VERSION))

    for name in _TEXT_FIELDS:
        value = data.pop(name, None) or []
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            violations.append(Violation(name, "expected a list of strings"))
        else:
            getattr(out, name).extend(value)

    ranges = data.pop("ranges", {}) or {}
    if not isinstance(ranges, Mapping):
        violations.append(Violation("ranges", "expected an object"))
        ranges = {}
    for key, value in ranges.items():
        if key not in NUMERIC_KEYS:
            violations.append(Violation(f"ranges.{key}", "unknown parameter"))
            continue
        out.ranges[key] = _interval(value, key, violations, out.notes)

    extra = data.pop("additional_parameters", None) or {}
    if isinstance(extra, Mapping):
        for name, value in extra.items():
            out.notes.append(f"additional parameter {name}: {json.dumps(value)}")

    for key, value in data.items():
        if key in NUMERIC_KEYS:
            out.ranges[key] = _interval(value, key, violations, out.notes)
        elif isinstance(value, str):
            out.notes.append(f"{key}: {value}")
        elif isinstance(value, list) and all(isinstance(v, str) for v in value):
            out.notes.extend(f"{key}: {v}" for v in value)
        else:
            violations.append(Violation(key, "unknown key"))

    if violations:
        raise SchemaValidationError(violations)
    return out


def _norm(ident: str) -> str:
    return " ".join(ident.split()).casefold()


def cache_key(printer: str, material: str) -> str:
    """Case- and whitespace-insensitive identifier of a printer-material pair."""
    p, m = _norm(printer or ""), _norm(material or "")
    if not p or not m:
        raise ValueError("printer and material must be non-empty")
    safe = lambda s: re.sub(r"[^a-z0-9._+-]+", "-", s)  # noqa: E731
    return f"{safe(p)}__{safe(m)}"


class ReferenceCache:
    """Per-(backend, pair) reference store, optionally mirrored to disk.

    Reads are lock-free; construction for one key is serialized so the
    builder runs at most once per key.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._entries: dict[tuple[str, str], ReferenceRanges] = {}
        self._locks: dict[tuple[str, str], threading.Lock] = {}
        self._guard = threading.Lock()
        self.builds = 0

    def path_for(self, backend_id: str, key: str, fingerprint: str = "") -> Path | None:
        if self.root is None:
            return None
        name = f"{key}-{fingerprint[:16]}" if fingerprint else key
        return self.root / "references" / backend_id / f"{name}.json"

    def get_or_build(
        self,
        backend_id: str,
        printer: str,
        material: str,
        build: Callable[[], ReferenceRanges],
        fingerprint: str = "",
    ) -> ReferenceRanges:
        """``fingerprint`` identifies the source documents so edited manuals
        never hit a stale on-disk entry."""
        slot = (backend_id, cache_key(printer, material), fingerprint)
        hit = self._entries.get(slot)
        if hit is not None:
            return hit
        with self._guard:
            lock = self._locks.setdefault(slot, threading.Lock())
        with lock:
            hit = self._entries.get(slot)
            if hit is not None:
                return hit
            path = self.path_for(*slot)
            if path is not None and path.exists():
                ref = validate_reference(json.loads(path.read_text(encoding="utf-8")))
            else:
                ref = build()
                self.builds += 1
                if path is not None:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    write_atomic(path, dumps_stable(ref.to_json()).encode("utf-8"), overwrite=True)
            self._entries[slot] = ref
            return ref


def dumps_stable(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


BUNDLED_PAIRS = (("MK4S", "PLA"), ("MK4S", "ABS"), ("BMP1", "PLA"), ("BMP1", "ABS"))


def bundled_manual_path(printer: str, material: str) -> Path:
    key = cache_key(printer, material)
    return Path(str(resources.files("gcode_screen") / "data" / "manuals" / f"{key}.txt"))


def bundled_reference(printer: str, material: str) -> ReferenceRanges:
    key = cache_key(printer, material)
    path = resources.files("gcode_screen") / "data" / "references" / f"{key}.json"
    return validate_reference(json.loads(path.read_text(encoding="utf-8")))
