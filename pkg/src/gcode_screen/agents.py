"""The extractor, reference and judge roles, the single-call baseline, and
end-to-end screening of one G-code file."""
from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .config import RunConfig
from .deviation import DeviationTable, build_deviation_table
from .gateway import BackendDescriptor, Gateway, GatewayError, StructuredRequest, default_gateway
from .gcode import GcodeInputError, ShortenedGcode, parse_gcode, shorten_gcode
from .labels import LABELS
from .prompts import PromptSet, number_lines, wrap_section
from .reference import DocBundle, ReferenceCache, ReferenceRanges, validate_reference
from .schema import (
    NUMERIC_KEYS,
    ExtractedParameters,
    SchemaValidationError,
    extraction_json_schema,
    normalize_units,
    validate_extraction,
)
from .store import ArtifactStore

STAGES = ("input", "extraction", "reference", "comparison", "judgment", "persist")


class StageError(RuntimeError):
    """A screening failure tagged with the stage it came from."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.kind: str | None = None

    @classmethod
    def wrap(cls, stage: str, exc: BaseException) -> "StageError":
        err = cls(stage, str(exc))
        if hasattr(exc, "kind"):
            err.kind = exc.kind
        elif isinstance(exc, ValueError):
            err.kind = "validation"
        elif isinstance(exc, OSError):
            err.kind = "io"
        else:
            err.kind = "error"
        err.__cause__ = exc
        return err


def reference_output_schema() -> dict:
    interval = {
        "anyOf": [
            {"type": "null"},
            {"type": "array", "items": {"type": ["number", "null"]}, "minItems": 2, "maxItems": 2},
        ]
    }
    strings = {"type": "array", "items": {"type": "string"}}
    return {
        "type": "object",
        "properties": {
            "printer": {"type": "string"},
            "material": {"type": "string"},
            "ranges": {
                "type": "object",
                "properties": {k: interval for k in NUMERIC_KEYS},
                "required": list(NUMERIC_KEYS),
            },
            "notes": strings,
            "warnings": strings,
            "interactions": strings,
            "source_docs": strings,
        },
        "required": ["ranges", "notes", "warnings", "interactions", "source_docs"],
    }


def judge_output_schema() -> dict:
    return {
        "type": "object",
        "properties": {
            "label": {"enum": list(LABELS)},
            "confidence": {"type": "number", "minimum": 0, "maximum": 1},
            "support_summary": {"type": "string"},
            "deviations_used": {"type": "array", "items": {"type": "string"}},
            "rationale": {"type": "string"},
            "evidence_citations": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "line": {"type": "integer", "minimum": 0},
                        "quote": {"type": "string"},
                    },
                    "required": ["line", "quote"],
                },
            },
        },
        "required": [
            "label", "confidence", "support_summary", "deviations_used",
            "rationale", "evidence_citations",
        ],
    }


def baseline_output_schema() -> dict:
    return {
        "type": "object",
        "properties": {"label": {"enum": list(LABELS)}, "rationale": {"type": "string"}},
        "required": ["label"],
    }


@dataclass
class JudgeVerdict:
    label: str
    confidence: float
    support_summary: str = ""
    deviations_used: list[str] = field(default_factory=list)
    rationale: str = ""
    evidence_citations: list[tuple[int, str]] = field(default_factory=list)
    diagnostics: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label {self.label!r} outside {LABELS}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "confidence": self.confidence,
            "support_summary": self.support_summary,
            "deviations_used": list(self.deviations_used),
            "rationale": self.rationale,
            "evidence_citations": [{"line": i, "quote": q} for i, q in self.evidence_citations],
            "diagnostics": dict(sorted(self.diagnostics.items())),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "JudgeVerdict":
        return cls(
            label=data["label"],
            confidence=float(data["confidence"]),
            support_summary=data.get("support_summary", ""),
            deviations_used=list(data.get("deviations_used", [])),
            rationale=data.get("rationale", ""),
            evidence_citations=[(c["line"], c["quote"]) for c in data.get("evidence_citations", [])],
            diagnostics=dict(data.get("diagnostics", {})),
        )


@dataclass
class EvidenceBundle:
    extracted: ExtractedParameters
    reference: ReferenceRanges
    table: DeviationTable
    shortened: ShortenedGcode
    printer: str
    material: str
    sample_id: str = ""


@dataclass
class ScreeningResult:
    sample_id: str
    verdict: JudgeVerdict
    artifacts: dict[str, Path]
    timings: dict[str, float]
    backends: dict[str, str]
    run_id: str | None = None

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "run_id": self.run_id,
            "verdict": self.verdict.to_json(),
            "artifacts": {k: str(v) for k, v in self.artifacts.items()},
            "timings": self.timings,
            "backends": self.backends,
        }


def _gateway(gateway):
    return gateway if gateway is not None else default_gateway()


def _prompts(prompts):
    return prompts if prompts is not None else PromptSet.load()


def run_extractor(
    backend: BackendDescriptor,
    shortened: ShortenedGcode,
    gateway: Gateway | None = None,
    prompts: PromptSet | None = None,
) -> ExtractedParameters:
    """Extract, validate and unit-normalize the process parameters."""
    if not shortened.text.strip():
        raise ValueError("shortened G-code is empty")
    prompts = _prompts(prompts)
    req = StructuredRequest(
        system_prompt=prompts.render("extractor_system"),
        user_content=prompts.render(
            "extractor_user", gcode_section=wrap_section("gcode", shortened.text.rstrip("\n"))
        ),
        output_schema=extraction_json_schema(),
        role_tag="extractor",
    )
    resp = _gateway(gateway).complete_structured(backend, req)
    extracted = validate_extraction(resp.payload)
    extracted.source = backend.id
    return normalize_units(extracted)


def _reference_request(docs: DocBundle, prompts: PromptSet) -> StructuredRequest:
    sections = "\n\n".join(wrap_section("document", text.rstrip("\n"), id=doc_id)
                           for doc_id, text in docs.documents)
    return StructuredRequest(
        system_prompt=prompts.render("reference_system"),
        user_content=prompts.render(
            "reference_user", printer=docs.printer, material=docs.material, documents=sections
        ),
        output_schema=reference_output_schema(),
        role_tag="reference",
    )


def run_reference(
    backend: BackendDescriptor,
    docs: DocBundle,
    gateway: Gateway | None = None,
    prompts: PromptSet | None = None,
    cache: ReferenceCache | None = None,
) -> ReferenceRanges:
    """Reference ranges for the bundle's pair; built at most once per cache entry."""
    prompts = _prompts(prompts)

    def build():
        resp = _gateway(gateway).complete_structured(backend, _reference_request(docs, prompts))
        ref = validate_reference(resp.payload)
        ref.printer = ref.printer or docs.printer
        ref.material = ref.material or docs.material
        if not ref.source_docs:
            ref.source_docs = [doc_id for doc_id, _ in docs.documents]
        return ref

    if cache is None:
        return build()
    return cache.get_or_build(backend.id, docs.printer, docs.material, build, docs.fingerprint())


def _evidence_json(bundle: EvidenceBundle) -> str:
    return json.dumps(
        {
            "printer": bundle.printer,
            "material": bundle.material,
            "extracted": bundle.extracted.to_json(),
            "reference": bundle.reference.to_json(),
            "deviation_table": bundle.table.to_json(),
        },
        indent=1,
        sort_keys=True,
    )


def verify_citations(citations, lines: list[str]) -> tuple[list[tuple[int, str]], int]:
    """Keep citations whose quote occurs verbatim on the cited line."""
    kept, dropped = [], 0
    for line, quote in citations:
        if isinstance(line, int) and 0 <= line < len(lines) and quote and quote in lines[line]:
            kept.append((line, quote))
        else:
            dropped += 1
    return kept, dropped


def run_judge(
    backend: BackendDescriptor,
    bundle: EvidenceBundle,
    gateway: Gateway | None = None,
    prompts: PromptSet | None = None,
) -> JudgeVerdict:
    prompts = _prompts(prompts)
    lines = bundle.shortened.lines
    req = StructuredRequest(
        system_prompt=prompts.render("judge_system"),
        user_content=prompts.render(
            "judge_user",
            printer=bundle.printer,
            material=bundle.material,
            evidence_section=wrap_section("evidence", _evidence_json(bundle)),
            gcode_section=wrap_section("gcode", number_lines(lines)),
        ),
        output_schema=judge_output_schema(),
        role_tag="judge",
    )
    payload = _gateway(gateway).complete_structured(backend, req).payload
    citations, dropped = verify_citations(
        [(c.get("line"), c.get("quote", "")) for c in payload["evidence_citations"]], lines
    )
    compared = {r.key for r in bundle.table.rows}
    used = [k for k in payload["deviations_used"] if k in compared]
    return JudgeVerdict(
        label=payload["label"],
        confidence=float(payload["confidence"]),
        support_summary=payload["support_summary"],
        deviations_used=used,
        rationale=payload["rationale"],
        evidence_citations=citations,
        diagnostics={
            "dropped_citations": dropped,
            "dropped_deviation_keys": len(payload["deviations_used"]) - len(used),
        },
    )


def run_baseline(
    backend: BackendDescriptor,
    shortened: ShortenedGcode,
    prompt_family: str = "engineered",
    gateway: Gateway | None = None,
    prompts: PromptSet | None = None,
    printer: str = "",
    material: str = "",
) -> str:
    """Single-call label prediction from the shortened program alone."""
    if not shortened.text.strip():
        raise ValueError("shortened G-code is empty")
    name = {"fdm_bench_style": "baseline_fdm_bench_style",
            "engineered": "baseline_engineered"}.get(prompt_family)
    if name is None:
        raise ValueError(f"unknown prompt family {prompt_family!r}")
    prompts = _prompts(prompts)
    req = StructuredRequest(
        system_prompt=prompts.render(name),
        user_content=prompts.render(
            "baseline_user", printer=printer, material=material,
            gcode_section=wrap_section("gcode", shortened.text.rstrip("\n")),
        ),
        output_schema=baseline_output_schema(),
        role_tag="baseline",
    )
    return _gateway(gateway).complete_structured(backend, req).payload["label"]


def sample_id_for(path: str | Path) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", Path(path).stem).lstrip("._-") or "sample"


def load_shortened(path: str | Path, config: RunConfig) -> ShortenedGcode:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StageError.wrap("input", exc) from exc
    try:
        return shorten_gcode(parse_gcode(data), config.policy)
    except GcodeInputError as exc:
        raise StageError.wrap("input", exc) from exc


class Screener:
    """Runs the staged pipeline under one configuration and artifact run."""

    def __init__(
        self,
        config: RunConfig,
        gateway: Gateway | None = None,
        store: ArtifactStore | None = None,
        prompts: PromptSet | None = None,
        cache: ReferenceCache | None = None,
    ):
        self.config = config
        self.gateway = _gateway(gateway)
        self.store = store if store is not None else ArtifactStore(config.artifact_root)
        self.prompts = prompts if prompts is not None else PromptSet.load(config.prompt_dir)
        self.cache = cache if cache is not None else ReferenceCache(self.store.root)
        self.run_id: str | None = None

    def start_run(self, **extra) -> str:
        meta = {
            "config_hash": self.config.config_hash(),
            "prompt_dir": self.prompts.directory,
            "prompt_hashes": self.prompts.hashes(),
            "config": self.config.describe(),
        }
        meta.update(extra)
        self.run_id = self.store.new_run(meta)
        return self.run_id

    def finish_run(self, summary: dict | None = None) -> None:
        if self.run_id is not None:
            self.store.seal_run(self.run_id, summary)

    def _persist(self, sample_id, stage, payload, artifacts):
        if self.run_id is None:
            return
        try:
            artifacts[stage] = self.store.persist_artifact(self.run_id, sample_id, stage, payload)
        except OSError as exc:
            raise StageError.wrap("persist", exc) from exc

    def extract(self, shortened: ShortenedGcode, backend: BackendDescriptor | None = None):
        try:
            return run_extractor(backend or self.config.backend("extractor"), shortened,
                                 self.gateway, self.prompts)
        except (GatewayError, SchemaValidationError, ValueError) as exc:
            raise StageError.wrap("extraction", exc) from exc

    def reference(self, printer: str, material: str, backend: BackendDescriptor | None = None):
        try:
            docs = self.config.doc_bundle(printer, material)
            return run_reference(backend or self.config.backend("reference"), docs,
                                 self.gateway, self.prompts, self.cache)
        except (GatewayError, SchemaValidationError, ValueError, OSError) as exc:
            raise StageError.wrap("reference", exc) from exc

    def compare(self, extracted, reference, printer, material) -> DeviationTable:
        try:
            return build_deviation_table(extracted, reference, printer, material,
                                         self.config.critical)
        except ValueError as exc:
            raise StageError.wrap("comparison", exc) from exc

    def judge(self, bundle: EvidenceBundle, backend: BackendDescriptor | None = None) -> JudgeVerdict:
        try:
            return run_judge(backend or self.config.backend("judge"), bundle,
                             self.gateway, self.prompts)
        except (GatewayError, ValueError, KeyError) as exc:
            raise StageError.wrap("judgment", exc) from exc

    def screen(self, gcode_path, printer: str, material: str, sample_id: str | None = None) -> ScreeningResult:
        sample_id = sample_id or sample_id_for(gcode_path)
        timings: dict[str, float] = {}
        artifacts: dict[str, Path] = {}

        t = time.perf_counter()
        shortened = load_shortened(gcode_path, self.config)
        timings["shorten"] = time.perf_counter() - t
        self._persist(sample_id, "shortened", shortened.text, artifacts)

        t = time.perf_counter()
        extracted = self.extract(shortened)
        timings["extract"] = time.perf_counter() - t
        self._persist(sample_id, "extracted", extracted.to_json(), artifacts)

        t = time.perf_counter()
        reference = self.reference(printer, material)
        timings["reference"] = time.perf_counter() - t
        self._persist(sample_id, "reference", reference.to_json(), artifacts)

        t = time.perf_counter()
        table = self.compare(extracted, reference, printer, material)
        timings["compare"] = time.perf_counter() - t
        self._persist(sample_id, "deviation", table.to_json(), artifacts)

        t = time.perf_counter()
        bundle = EvidenceBundle(extracted, reference, table, shortened, printer, material, sample_id)
        verdict = self.judge(bundle)
        timings["judge"] = time.perf_counter() - t
        self._persist(sample_id, "verdict", verdict.to_json(), artifacts)

        return ScreeningResult(
            sample_id=sample_id,
            verdict=verdict,
            artifacts=artifacts,
            timings=timings,
            backends={r: self.config.roles[r] for r in ("extractor", "reference", "judge")},
            run_id=self.run_id,
        )

    def rejudge(self, run_id: str, sample_id: str, backend: BackendDescriptor | None = None) -> JudgeVerdict:
        """Re-run only the judge from a run's persisted upstream artifacts."""
        load = lambda stage: self.store.load_artifact(run_id, sample_id, stage)  # noqa: E731
        table = DeviationTable.from_json(load("deviation"))
        bundle = EvidenceBundle(
            extracted=validate_extraction(load("extracted")),
            reference=validate_reference(load("reference")),
            table=table,
            shortened=ShortenedGcode.from_text(load("shortened")),
            printer=table.printer,
            material=table.material,
            sample_id=sample_id,
        )
        verdict = self.judge(bundle, backend)
        self.store.persist_artifact(run_id, sample_id, "verdict", verdict.to_json())
        return verdict


def screen(
    gcode_path,
    printer: str,
    material: str,
    run_config: RunConfig | None = None,
    gateway: Gateway | None = None,
    store: ArtifactStore | None = None,
    sample_id: str | None = None,
) -> ScreeningResult:
    """Screen one file in a fresh run: shorten, extract, reference, compare, judge."""
    config = run_config or RunConfig()
    screener = Screener(config, gateway, store)
    # an unreadable input must fail before a run directory or backend call exists
    if not Path(gcode_path).is_file():
        raise StageError("input", f"cannot read {gcode_path}")
    screener.start_run()
    try:
        result = screener.screen(gcode_path, printer, material, sample_id)
    except StageError as exc:
        screener.finish_run({"failed_stage": exc.stage, "error": str(exc)})
        raise
    screener.finish_run({"samples": 1})
    return result

