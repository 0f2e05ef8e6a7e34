"""``gcode-screen`` command line.

Exit status: 0 on success, 1 when a pipeline stage fails (the message carries
the stage tag), 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evalharness as ev
from .agents import (
    EvidenceBundle,
    Screener,
    StageError,
    load_shortened,
    run_baseline,
)
from .config import BASELINE_FAMILIES, ConfigError, RunConfig
from .deviation import DeviationTable
from .gcode import (
    GcodeInputError,
    ShortenedGcode,
    ShorteningPolicy,
    extract_config_comments,
    parse_gcode,
    shorten_gcode,
)
from .reference import DocBundle, validate_reference
from .schema import SchemaValidationError, validate_extraction
from .store import dumps_stable


class UsageError(Exception):
    pass


def _emit(args, payload, text: str | None = None) -> None:
    if args.json or text is None:
        sys.stdout.write(dumps_stable(payload))
    else:
        sys.stdout.write(text.rstrip("\n") + "\n")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "artifact_root", None):
        cfg.artifact_root = Path(args.artifact_root)
    return cfg


def _backend(cfg: RunConfig, role: str, override: str | None):
    if override is None:
        return cfg.backend(role)
    if override not in cfg.backends:
        raise UsageError(f"unknown backend {override!r}")
    return cfg.backends[override]


def _read_json(path: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StageError.wrap("input", exc) from exc


def _policy(args, cfg: RunConfig) -> ShorteningPolicy:
    p = cfg.policy
    return ShorteningPolicy(
        head_layers=p.head_layers if args.head_layers is None else args.head_layers,
        keep_final_layer=p.keep_final_layer and not args.no_final_layer,
        keep_config=p.keep_config and not args.no_config,
        keep_init=p.keep_init and not args.no_init,
    )


def _read_gcode(path: str):
    try:
        return parse_gcode(Path(path).read_bytes())
    except OSError as exc:
        raise StageError.wrap("input", exc) from exc
    except GcodeInputError as exc:
        raise StageError.wrap("input", exc) from exc


# ----------------------------------------------------------------- commands

def cmd_parse(args) -> int:
    doc = _read_gcode(args.file)
    summary = {
        "lines": len(doc.lines),
        "layers": len(doc.layer_starts),
        "layer_source": doc.layer_source,
        "layer_starts": list(doc.layer_starts),
        "config_span": list(doc.config_span) if doc.config_span else None,
        "config_comments": extract_config_comments(doc),
        "diagnostics": doc.diagnostics,
    }
    text = (f"{args.file}: {summary['lines']} lines, {summary['layers']} layers "
            f"({doc.layer_source}), {len(summary['config_comments'])} config comments, "
            f"{doc.diagnostics.get('malformed', 0)} malformed lines")
    _emit(args, summary, text)
    return 0


def cmd_shorten(args) -> int:
    cfg = _config(args)
    short = shorten_gcode(_read_gcode(args.file), _policy(args, cfg))
    if args.output:
        out = Path(args.output)
        out.write_text(short.text, encoding="utf-8")
        sidecar = out.with_name(out.name + ".spans.json")
        sidecar.write_text(short.sidecar_json(), encoding="utf-8")
        _emit(args, short.sidecar(),
              f"wrote {out} ({short.kept_line_count}/{short.original_line_count} lines) and {sidecar}")
    elif args.json:
        _emit(args, {"text": short.text, **short.sidecar()})
    else:
        sys.stdout.write(short.text)
    return 0


def cmd_extract(args) -> int:
    cfg = _config(args)
    shortened = load_shortened(args.file, cfg)
    screener = Screener(cfg)
    extracted = screener.extract(shortened, _backend(cfg, "extractor", args.backend))
    _emit(args, extracted.to_json())
    return 0


def cmd_reference(args) -> int:
    cfg = _config(args)
    screener = Screener(cfg)
    backend = _backend(cfg, "reference", args.backend)
    if args.doc:
        from .agents import run_reference

        try:
            docs = DocBundle.from_paths(args.printer, args.material, args.doc)
        except (OSError, ValueError) as exc:
            raise StageError.wrap("input", exc) from exc
        try:
            ref = run_reference(backend, docs, screener.gateway, screener.prompts)
        except Exception as exc:  # noqa: BLE001 - reported with the stage tag
            raise StageError.wrap("reference", exc) from exc
    else:
        ref = screener.reference(args.printer, args.material, backend)
    _emit(args, ref.to_json())
    return 0


def _load_extracted(path):
    try:
        return validate_extraction(_read_json(path))
    except SchemaValidationError as exc:
        raise StageError.wrap("input", exc) from exc


def _load_reference(path):
    try:
        return validate_reference(_read_json(path))
    except SchemaValidationError as exc:
        raise StageError.wrap("input", exc) from exc


def cmd_compare(args) -> int:
    cfg = _config(args)
    extracted = _load_extracted(args.extracted)
    reference = _load_reference(args.reference)
    table = Screener(cfg).compare(extracted, reference, args.printer, args.material)
    rows = [f"{r.key:32s} {r.value:>10g}  [{r.lower:g}, {r.upper:g}]  {r.direction}" for r in table.rows]
    flags = [f"flag {f.name}: {f.detail}" for f in table.flags]
    _emit(args, table.to_json(), "\n".join(rows + flags))
    return 0


def cmd_judge(args) -> int:
    cfg = _config(args)
    screener = Screener(cfg)
    backend = _backend(cfg, "judge", args.backend)
    if args.run_id:
        if not args.sample_id:
            raise UsageError("--run-id requires --sample-id")
        try:
            verdict = screener.rejudge(args.run_id, args.sample_id, backend)
        except (OSError, ValueError) as exc:
            raise StageError.wrap("judgment", exc) from exc
    else:
        missing = [f for f in ("extracted", "reference", "deviation", "shortened")
                   if getattr(args, f) is None]
        if missing:
            raise UsageError("judge needs --run-id/--sample-id or all of "
                             + ", ".join(f"--{m}" for m in missing))
        table = DeviationTable.from_json(_read_json(args.deviation))
        try:
            shortened = ShortenedGcode.from_text(Path(args.shortened).read_text(encoding="utf-8"))
        except OSError as exc:
            raise StageError.wrap("input", exc) from exc
        bundle = EvidenceBundle(
            _load_extracted(args.extracted), _load_reference(args.reference), table, shortened,
            table.printer or "", table.material or "",
        )
        verdict = screener.judge(bundle, backend)
    _emit(args, verdict.to_json(), f"{verdict.label} ({verdict.confidence:.2f}): {verdict.support_summary}")
    return 0


def cmd_screen(args) -> int:
    from .agents import screen

    cfg = _config(args)
    result = screen(args.file, args.printer, args.material, cfg, sample_id=args.sample_id)
    v = result.verdict
    _emit(args, result.to_json(),
          f"{result.sample_id}: {v.label} ({v.confidence:.2f}) run {result.run_id}\n{v.support_summary}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _config(args)
    shortened = load_shortened(args.file, cfg)
    screener = Screener(cfg)
    try:
        label = run_baseline(_backend(cfg, "baseline", args.backend), shortened,
                             args.family or cfg.baseline_family, screener.gateway,
                             screener.prompts, args.printer or "", args.material or "")
    except Exception as exc:  # noqa: BLE001
        raise StageError.wrap("baseline", exc) from exc
    _emit(args, {"label": label}, label)
    return 0


def _manifest(path):
    try:
        return ev.load_manifest(path)
    except (OSError, ev.ManifestError) as exc:
        raise StageError.wrap("input", exc) from exc


def cmd_eval_extraction(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args.manifest)
    backends = args.backends or cfg.extractors
    for b in backends:
        _backend(cfg, "extractor", b)
    try:
        rows = ev.run_extraction_benchmark(manifest, backends, cfg)
    except ev.ManifestError as exc:
        raise StageError.wrap("input", exc) from exc
    _emit(args, {"rows": [r.to_json() for r in rows]}, ev.format_extraction_table(rows))
    return 1 if any(r.failures for r in rows) else 0


def cmd_eval_grid(args) -> int:
    cfg = _config(args)
    manifest = _manifest(args.manifest)
    refs = args.reference or cfg.grid_reference
    judges = args.judge or cfg.grid_judge
    extractor = args.extractor or cfg.roles["extractor"]
    for b in refs + judges + [extractor]:
        _backend(cfg, "judge", b)
    grid = ev.run_grid(manifest, refs, judges, extractor, cfg)
    _emit(args, grid.to_json(), grid.format_table())
    return 1 if grid.failures else 0


def cmd_eval_compare(args) -> int:
    cfg = _config(args)
    base_cfg = RunConfig.load(args.baseline_config) if args.baseline_config else cfg
    manifest = _manifest(args.manifest)
    report = ev.compare_framework_vs_baseline(manifest, cfg, base_cfg, prompt_family=args.family)
    _emit(args, report.to_json(), report.format_table())
    return 1 if report.framework_errors or report.baseline_errors else 0


def cmd_eval_screen(args) -> int:
    cfg = _config(args)
    run = ev.run_corpus(_manifest(args.manifest), cfg)
    payload = {"run_id": run.run_id, "report": run.report.to_json() if run.report else None,
               "errors": [{"sample_id": o.entry.sample_id, "stage": o.stage, "error": o.error}
                          for o in run.outcomes if o.error]}
    text = ev.format_report(run.report) if run.report else "no sample could be screened"
    _emit(args, payload, f"run {run.run_id}\n{text}")
    return 1 if run.hard_failures else 0


def cmd_synth_corpus(args) -> int:
    from .synth import write_corpus

    samples = write_corpus(args.output, layers=args.layers)
    _emit(args, {"manifest": str(Path(args.output) / "manifest.jsonl"), "samples": len(samples)},
          f"wrote {len(samples)} samples and {Path(args.output) / 'manifest.jsonl'}")
    return 0


# ------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="write machine-readable JSON to stdout")
    common.add_argument("--config", help="run configuration (TOML)")
    common.add_argument("--artifact-root", help="override the artifact root directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="gcode-screen",
                     description="Pre-print screening of sliced G-code for print defects.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=fn)
        return p

    p = add("parse", cmd_parse, "summarize a G-code file: layers, config comments, diagnostics")
    p.add_argument("file")

    p = add("shorten", cmd_shorten, "reduce a G-code file to config, init, head and final layers")
    p.add_argument("file")
    p.add_argument("-o", "--output", help="write here and put the span sidecar next to it")
    p.add_argument("--head-layers", type=int, help="number of leading layers to keep")
    p.add_argument("--no-final-layer", action="store_true")
    p.add_argument("--no-config", action="store_true")
    p.add_argument("--no-init", action="store_true")

    p = add("extract", cmd_extract, "extract process parameters from a G-code file")
    p.add_argument("file")
    p.add_argument("--backend")

    p = add("reference", cmd_reference, "build reference ranges for a printer/material pair")
    p.add_argument("--printer", required=True)
    p.add_argument("--material", required=True)
    p.add_argument("--doc", action="append", help="document file (repeatable); defaults to configured ones")
    p.add_argument("--backend")

    p = add("compare", cmd_compare, "build a deviation table from extracted values and ranges")
    p.add_argument("--extracted", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--printer")
    p.add_argument("--material")

    p = add("judge", cmd_judge, "assign a defect label from persisted or explicit evidence")
    p.add_argument("--run-id")
    p.add_argument("--sample-id")
    p.add_argument("--extracted")
    p.add_argument("--reference")
    p.add_argument("--deviation")
    p.add_argument("--shortened")
    p.add_argument("--backend")

    p = add("screen", cmd_screen, "run the full pipeline on one file and persist its artifacts")
    p.add_argument("file")
    p.add_argument("--printer", required=True)
    p.add_argument("--material", required=True)
    p.add_argument("--sample-id")

    p = add("baseline", cmd_baseline, "single-call label prediction without decomposition")
    p.add_argument("file")
    p.add_argument("--printer")
    p.add_argument("--material")
    p.add_argument("--family", choices=BASELINE_FAMILIES)
    p.add_argument("--backend")

    p = add("eval-screen", cmd_eval_screen, "screen every manifest entry and report metrics")
    p.add_argument("manifest")

    p = add("eval-extraction", cmd_eval_extraction, "score extractors against ground-truth parameters")
    p.add_argument("manifest")
    p.add_argument("--backends", nargs="+")

    p = add("eval-grid", cmd_eval_grid, "accuracy over reference x judge backend pairs")
    p.add_argument("manifest")
    p.add_argument("--reference", nargs="+")
    p.add_argument("--judge", nargs="+")
    p.add_argument("--extractor")

    p = add("eval-compare", cmd_eval_compare, "framework accuracy against the single-call baseline")
    p.add_argument("manifest")
    p.add_argument("--baseline-config")
    p.add_argument("--family", choices=BASELINE_FAMILIES)

    p = add("synth-corpus", cmd_synth_corpus, "write the synthetic 20-file corpus and manifest")
    p.add_argument("output")
    p.add_argument("--layers", type=int, default=10)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"gcode-screen: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gcode-screen: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"gcode-screen: config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"gcode-screen: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
