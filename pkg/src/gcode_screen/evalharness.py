"""Evaluation protocol: classification metrics, the reference x judge grid,
the extraction benchmark and framework-vs-baseline comparison."""
from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .agents import EvidenceBundle, Screener, StageError, load_shortened, run_baseline
from .config import RunConfig
from .gateway import Gateway, GatewayError, default_gateway
from .labels import LABELS
from .schema import (
    DEFAULT_CRITICAL,
    ExtractionScore,
    ToleranceSpec,
    score_cells,
    summarize_cells,
    validate_extraction,
)

log = logging.getLogger(__name__)

STRATA = ("printer", "material", "printer_material")


def round_half_up(x: float, places: int = 1) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def fmt1(x: float | None) -> str:
    if x is None:
        return "-"
    return f"{round_half_up(x, 1):.1f}"


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    gcode_path: Path
    printer: str
    material: str
    true_label: str
    truth_path: Path | None = None

    def strata(self) -> dict[str, str]:
        return {
            "printer": self.printer,
            "material": self.material,
            "printer_material": f"{self.printer}/{self.material}",
        }


class ManifestError(ValueError):
    pass


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read one JSON record per line; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    entries, seen = [], set()
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid = rec["sample_id"]
            label = rec["true_label"]
            entry = ManifestEntry(
                sample_id=sid,
                gcode_path=base / rec["gcode_path"],
                printer=rec["printer"],
                material=rec["material"],
                true_label=label,
                truth_path=base / rec["truth_path"] if rec.get("truth_path") else None,
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{n}: {exc}") from exc
        if label not in LABELS:
            raise ManifestError(f"{path}:{n}: unknown label {label!r}")
        if sid in seen:
            raise ManifestError(f"{path}:{n}: duplicate sample id {sid!r}")
        seen.add(sid)
        entries.append(entry)
    return entries


# ----------------------------------------------------------------- metrics

@dataclass
class ConfusionMatrix:
    counts: list[list[int]] = field(default_factory=lambda: [[0] * len(LABELS) for _ in LABELS])
    labels: tuple[str, ...] = LABELS

    def add(self, true: str, pred: str) -> None:
        self.counts[self.labels.index(true)][self.labels.index(pred)] += 1

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def trace(self) -> int:
        return sum(self.counts[i][i] for i in range(len(self.labels)))

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "counts": [list(r) for r in self.counts]}


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_class_recall: dict[str, float | None]
    per_class_f1: dict[str, float | None]
    confusion: ConfusionMatrix
    strata: dict[str, float]
    strata_sizes: dict[str, int]
    n: int
    error_tallies: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_recall": self.per_class_recall,
            "per_class_f1": self.per_class_f1,
            "confusion": self.confusion.to_json(),
            "strata": self.strata,
            "strata_sizes": self.strata_sizes,
            "error_tallies": dict(sorted(self.error_tallies.items())),
        }


def compute_metrics(
    pairs: Sequence[tuple[str, str]],
    strata: Sequence[Mapping[str, str]] | None = None,
    labels: Sequence[str] = LABELS,
) -> EvalReport:
    """Accuracy, macro-F1, per-class recall, confusion and stratified accuracy.

    Macro-F1 averages over classes that occur among the true labels; a class
    with no predictions has precision 0.
    """
    if not pairs:
        raise ValueError("no prediction pairs to score")
    labels = tuple(labels)
    cm = ConfusionMatrix(labels=labels)
    for true, pred in pairs:
        if true not in labels or pred not in labels:
            raise ValueError(f"unknown label in pair ({true!r}, {pred!r})")
        cm.add(true, pred)
    n = len(pairs)
    recall: dict[str, float | None] = {}
    f1: dict[str, float | None] = {}
    for i, c in enumerate(labels):
        support = sum(cm.counts[i])
        predicted = sum(row[i] for row in cm.counts)
        tp = cm.counts[i][i]
        if support == 0:
            recall[c] = None
            f1[c] = None
            continue
        r = tp / support
        p = tp / predicted if predicted else 0.0
        recall[c] = r
        f1[c] = 2 * p * r / (p + r) if p + r > 0 else 0.0
    present = [v for v in f1.values() if v is not None]

    strata_acc: dict[str, float] = {}
    sizes: dict[str, int] = {}
    if strata is not None:
        if len(strata) != n:
            raise ValueError("strata must have one entry per pair")
        groups: dict[str, list[bool]] = defaultdict(list)
        for (true, pred), attrs in zip(pairs, strata):
            for dim, value in attrs.items():
                groups[f"{dim}={value}"].append(true == pred)
        for name in sorted(groups):
            hits = groups[name]
            strata_acc[name] = sum(hits) / len(hits)
            sizes[name] = len(hits)

    return EvalReport(
        accuracy=cm.trace() / n,
        macro_f1=sum(present) / len(present),
        per_class_recall=recall,
        per_class_f1=f1,
        confusion=cm,
        strata=strata_acc,
        strata_sizes=sizes,
        n=n,
    )


def accuracy_delta_points(framework: float, baseline: float) -> float:
    """Difference of two accuracies given as fractions, in percentage points."""
    return round(100.0 * framework - 100.0 * baseline, 9)


# -------------------------------------------------------------------- grid

@dataclass
class GridReport:
    reference_ids: list[str]
    judge_ids: list[str]
    # accuracy in percent, keyed by (reference_id, judge_id)
    cells: dict[tuple[str, str], float]
    reports: dict[tuple[str, str], EvalReport] = field(default_factory=dict)
    failures: dict[tuple[str, str], dict[str, int]] = field(default_factory=dict)

    def row_average(self, ref: str) -> float:
        return sum(self.cells[(ref, j)] for j in self.judge_ids) / len(self.judge_ids)

    def column_average(self, judge: str) -> float:
        return sum(self.cells[(r, judge)] for r in self.reference_ids) / len(self.reference_ids)

    def overall_average(self) -> float:
        return sum(self.cells.values()) / len(self.cells)

    @classmethod
    def from_cells(cls, reference_ids, judge_ids, values) -> "GridReport":
        """``values[i][j]`` is the accuracy of reference ``i`` with judge ``j``."""
        cells = {(r, j): float(values[a][b])
                 for a, r in enumerate(reference_ids) for b, j in enumerate(judge_ids)}
        return cls(list(reference_ids), list(judge_ids), cells)

    def to_json(self) -> dict:
        return {
            "reference_ids": self.reference_ids,
            "judge_ids": self.judge_ids,
            "cells": [[self.cells[(r, j)] for j in self.judge_ids] for r in self.reference_ids],
            "row_averages": {r: self.row_average(r) for r in self.reference_ids},
            "column_averages": {j: self.column_average(j) for j in self.judge_ids},
            "overall_average": self.overall_average(),
            "reports": {f"{r}|{j}": rep.to_json() for (r, j), rep in self.reports.items()},
            "failures": {f"{r}|{j}": f for (r, j), f in self.failures.items()},
        }

    def format_table(self) -> str:
        head = ["Reference / Judge"] + self.judge_ids + ["Row avg."]
        rows = [[r] + [fmt1(self.cells[(r, j)]) for j in self.judge_ids] + [fmt1(self.row_average(r))]
                for r in self.reference_ids]
        rows.append(["Column avg."] + [fmt1(self.column_average(j)) for j in self.judge_ids]
                    + [fmt1(self.overall_average())])
        return _table([head] + rows)


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for k, row in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                               for i, (c, w) in enumerate(zip(row, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def format_report(report: EvalReport) -> str:
    out = [f"n={report.n}  accuracy={fmt1(100 * report.accuracy)}%  "
           f"macro-F1={report.macro_f1:.3f}"]
    labels = report.confusion.labels
    rows = [["true \\ pred"] + list(labels) + ["recall"]]
    for i, c in enumerate(labels):
        rec = report.per_class_recall[c]
        rows.append([c] + [str(v) for v in report.confusion.counts[i]]
                    + ["-" if rec is None else f"{rec:.3f}"])
    out.append(_table(rows))
    if report.strata:
        out.append(_table([["stratum", "n", "accuracy"]] + [
            [k, str(report.strata_sizes[k]), fmt1(100 * v)] for k, v in report.strata.items()
        ]))
    if report.error_tallies:
        out.append("errors: " + ", ".join(f"{k}={v}" for k, v in sorted(report.error_tallies.items())))
    return "\n\n".join(out)


# ------------------------------------------------------------------ running

@dataclass
class SampleOutcome:
    entry: ManifestEntry
    predicted: str | None
    error: str | None = None
    error_kind: str | None = None
    stage: str | None = None


def _kind(exc: BaseException) -> str:
    return getattr(exc, "kind", None) or type(exc).__name__


def _report(outcomes: list[SampleOutcome]) -> tuple[EvalReport | None, dict[str, int]]:
    tallies = Counter(o.error_kind for o in outcomes if o.error is not None)
    scored = [o for o in outcomes if o.predicted is not None]
    if not scored:
        return None, dict(tallies)
    report = compute_metrics([(o.entry.true_label, o.predicted) for o in scored],
                             [o.entry.strata() for o in scored])
    report.error_tallies = dict(tallies)
    return report, dict(tallies)


def _map(fn, items, concurrency: int):
    if concurrency <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(fn, items))


@dataclass
class CorpusRun:
    outcomes: list[SampleOutcome]
    report: EvalReport | None
    run_id: str | None

    @property
    def hard_failures(self) -> int:
        return sum(o.error is not None for o in self.outcomes)


def run_corpus(
    manifest: Sequence[ManifestEntry],
    config: RunConfig,
    gateway: Gateway | None = None,
    screener: Screener | None = None,
) -> CorpusRun:
    """Screen every manifest entry under one run and score the predictions."""
    screener = screener or Screener(config, gateway)
    run_id = screener.start_run(manifest_size=len(manifest))

    def one(entry: ManifestEntry) -> SampleOutcome:
        try:
            res = screener.screen(entry.gcode_path, entry.printer, entry.material, entry.sample_id)
            return SampleOutcome(entry, res.verdict.label)
        except StageError as exc:
            log.warning("%s failed: %s", entry.sample_id, exc)
            return SampleOutcome(entry, None, str(exc), exc.kind or "error", exc.stage)

    outcomes = _map(one, manifest, config.concurrency)
    report, tallies = _report(outcomes)
    screener.finish_run({"samples": len(manifest), "errors": tallies,
                         "accuracy": report.accuracy if report else None})
    return CorpusRun(outcomes, report, run_id)


def run_grid(
    manifest: Sequence[ManifestEntry],
    reference_backends: Sequence[str],
    judge_backends: Sequence[str],
    extractor_backend: str,
    config: RunConfig,
    gateway: Gateway | None = None,
) -> GridReport:
    """Accuracy for every (reference, judge) backbone pair.

    Extraction runs once per sample and is shared by all cells; references
    are built once per (backend, printer, material).
    """
    gateway = gateway or default_gateway()
    screener = Screener(config, gateway)
    extractor = config.backends[extractor_backend]

    def prepare(entry):
        try:
            shortened = load_shortened(entry.gcode_path, config)
            return shortened, screener.extract(shortened, extractor), None
        except StageError as exc:
            return None, None, exc

    prepared = dict(zip([e.sample_id for e in manifest], _map(prepare, manifest, config.concurrency)))

    cells: dict[tuple[str, str], float] = {}
    reports: dict[tuple[str, str], EvalReport] = {}
    failures: dict[tuple[str, str], dict[str, int]] = {}
    for ref_id in reference_backends:
        for judge_id in judge_backends:
            def one(entry, ref_id=ref_id, judge_id=judge_id):
                shortened, extracted, err = prepared[entry.sample_id]
                if err is not None:
                    return SampleOutcome(entry, None, str(err), err.kind or "error", err.stage)
                try:
                    ref = screener.reference(entry.printer, entry.material, config.backends[ref_id])
                    table = screener.compare(extracted, ref, entry.printer, entry.material)
                    bundle = EvidenceBundle(extracted, ref, table, shortened,
                                            entry.printer, entry.material, entry.sample_id)
                    verdict = screener.judge(bundle, config.backends[judge_id])
                    return SampleOutcome(entry, verdict.label)
                except StageError as exc:
                    return SampleOutcome(entry, None, str(exc), exc.kind or "error", exc.stage)

            outcomes = _map(one, manifest, config.concurrency)
            report, tallies = _report(outcomes)
            # failed samples count as wrong so cells stay comparable
            correct = sum(o.predicted == o.entry.true_label for o in outcomes)
            cells[(ref_id, judge_id)] = 100.0 * correct / len(outcomes)
            if report is not None:
                reports[(ref_id, judge_id)] = report
            if tallies:
                failures[(ref_id, judge_id)] = tallies
    return GridReport(list(reference_backends), list(judge_backends), cells, reports, failures)


# ------------------------------------------------------ extraction benchmark

@dataclass
class ExtractionRow:
    backend_id: str
    score: ExtractionScore
    failures: int = 0

    def to_json(self) -> dict:
        return {"backend": self.backend_id, "failures": self.failures, **self.score.to_json()}


def format_extraction_table(rows: Sequence[ExtractionRow]) -> str:
    head = ["Backbone", "Overall acc.", "Critical acc.", "Overall MAPE", "Critical MAPE"]
    body = [[r.backend_id, f"{r.score.overall_accuracy:.3f}", f"{r.score.critical_accuracy:.3f}",
             f"{r.score.overall_mape:.2f}%", f"{r.score.critical_mape:.2f}%"] for r in rows]
    return _table([head] + body)


def load_truth(path: Path):
    return validate_extraction(json.loads(Path(path).read_text(encoding="utf-8")))


def run_extraction_benchmark(
    manifest: Sequence[ManifestEntry],
    extractor_backends: Sequence[str],
    config: RunConfig,
    tol: ToleranceSpec | None = None,
    critical: Iterable[str] = DEFAULT_CRITICAL,
    gateway: Gateway | None = None,
) -> list[ExtractionRow]:
    """Pooled tolerance accuracy and MAPE over all scored cells, per backend.

    A sample whose extraction fails scores every ground-truth cell as a null
    prediction.
    """
    missing = [e.sample_id for e in manifest if e.truth_path is None]
    if missing:
        raise ManifestError(f"no ground truth for {', '.join(missing)}")
    tol = tol or config.tolerance
    critical = frozenset(critical)
    truths = {e.sample_id: load_truth(e.truth_path) for e in manifest}
    shortened = {e.sample_id: load_shortened(e.gcode_path, config) for e in manifest}
    screener = Screener(config, gateway or default_gateway())
    rows = []
    for backend_id in extractor_backends:
        backend = config.backends[backend_id]

        def one(entry):
            truth = truths[entry.sample_id]
            try:
                pred = screener.extract(shortened[entry.sample_id], backend)
                return score_cells(pred, truth, tol), 0
            except StageError:
                blank = validate_extraction({"schema_version": truth.schema_version})
                return score_cells(blank, truth, tol), 1

        results = _map(one, manifest, config.concurrency)
        cells = [c for cs, _ in results for c in cs]
        rows.append(ExtractionRow(backend_id, summarize_cells(cells, critical),
                                  sum(f for _, f in results)))
    return rows


# ---------------------------------------------------------------- baseline

@dataclass
class ComparisonReport:
    framework: EvalReport | None
    baseline: EvalReport | None
    delta_points: float | None
    per_combination: dict[str, dict[str, float]]
    framework_errors: dict[str, int]
    baseline_errors: dict[str, int]

    def to_json(self) -> dict:
        return {
            "framework": self.framework.to_json() if self.framework else None,
            "baseline": self.baseline.to_json() if self.baseline else None,
            "delta_points": self.delta_points,
            "per_combination": self.per_combination,
            "framework_errors": self.framework_errors,
            "baseline_errors": self.baseline_errors,
        }

    def format_table(self) -> str:
        rows = [["combination", "framework", "baseline", "delta"]]
        for name, v in self.per_combination.items():
            rows.append([name, fmt1(v["framework"]), fmt1(v["baseline"]), fmt1(v["delta"])])
        if self.framework and self.baseline:
            rows.append(["overall", fmt1(100 * self.framework.accuracy),
                         fmt1(100 * self.baseline.accuracy), fmt1(self.delta_points)])
        return _table(rows)


def run_baseline_corpus(
    manifest: Sequence[ManifestEntry],
    config: RunConfig,
    prompt_family: str | None = None,
    gateway: Gateway | None = None,
) -> list[SampleOutcome]:
    gateway = gateway or default_gateway()
    screener = Screener(config, gateway)
    family = prompt_family or config.baseline_family
    backend = config.backend("baseline")

    def one(entry):
        try:
            shortened = load_shortened(entry.gcode_path, config)
            label = run_baseline(backend, shortened, family, gateway, screener.prompts,
                                 entry.printer, entry.material)
            return SampleOutcome(entry, label)
        except StageError as exc:
            return SampleOutcome(entry, None, str(exc), exc.kind or "error", exc.stage)
        except (GatewayError, ValueError) as exc:
            return SampleOutcome(entry, None, str(exc), _kind(exc), "baseline")

    return _map(one, manifest, config.concurrency)


def compare_outcomes(framework: list[SampleOutcome], baseline: list[SampleOutcome]) -> ComparisonReport:
    f_report, f_err = _report(framework)
    b_report, b_err = _report(baseline)
    per: dict[str, dict[str, float]] = {}
    groups: dict[str, list[tuple[bool, bool]]] = defaultdict(list)
    by_id = {o.entry.sample_id: o for o in baseline}
    for fo in framework:
        bo = by_id[fo.entry.sample_id]
        groups[fo.entry.strata()["printer_material"]].append(
            (fo.predicted == fo.entry.true_label, bo.predicted == bo.entry.true_label)
        )
    for name in sorted(groups):
        hits = groups[name]
        f_acc = 100.0 * sum(h[0] for h in hits) / len(hits)
        b_acc = 100.0 * sum(h[1] for h in hits) / len(hits)
        per[name] = {"framework": f_acc, "baseline": b_acc,
                     "delta": round(f_acc - b_acc, 9), "n": len(hits)}
    delta = None
    if f_report and b_report:
        delta = accuracy_delta_points(f_report.accuracy, b_report.accuracy)
    return ComparisonReport(f_report, b_report, delta, per, f_err, b_err)


def compare_framework_vs_baseline(
    manifest: Sequence[ManifestEntry],
    framework_config: RunConfig,
    baseline_config: RunConfig | None = None,
    gateway: Gateway | None = None,
    prompt_family: str | None = None,
) -> ComparisonReport:
    gateway = gateway or default_gateway()
    framework = run_corpus(manifest, framework_config, gateway).outcomes
    baseline = run_baseline_corpus(manifest, baseline_config or framework_config,
                                   prompt_family, gateway)
    return compare_outcomes(framework, baseline)
