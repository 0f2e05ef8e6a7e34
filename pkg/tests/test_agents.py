import json
from pathlib import Path

import httpx
import pytest

from gcode_screen.agents import (
    EvidenceBundle,
    JudgeVerdict,
    Screener,
    StageError,
    run_baseline,
    run_extractor,
    run_judge,
    run_reference,
    screen,
    verify_citations,
)
from gcode_screen.config import STUB_BACKEND, RunConfig
from gcode_screen.deviation import build_deviation_table
from gcode_screen.gateway import BackendDescriptor, Gateway
from gcode_screen.gcode import ShortenedGcode, parse_gcode, shorten_gcode
from gcode_screen.prompts import PromptSet
from gcode_screen.reference import DocBundle, ReferenceCache, bundled_reference
from gcode_screen.schema import validate_extraction
from gcode_screen.store import STAGE_FILES, ArtifactStore
from gcode_screen.stubs import baseline_answer_key, judge_rules

from conftest import ten_layer_lines

# hand-read from the fixture footer and converted to canonical units
FIXTURE_VALUES = {
    "bed_temperature": 60.0, "flow_rate": 100.0, "line_width": 0.45, "filament_diameter": 1.75,
    "first_layer_height": 0.2, "layer_height": 0.2, "fan_speed": 100.0, "nozzle_diameter": 0.4,
    "retraction_distance": 0.8, "nozzle_temperature": 215.0, "travel_speed": 200.0,
}


def shortened_fixture():
    return shorten_gcode(parse_gcode(ten_layer_lines()["text"]))


def http_backend(**over):
    fields = dict(id="remote", kind="http_provider", model_name="m",
                  endpoint="https://llm.invalid/v1", credential_env_var="K")
    fields.update(over)
    return BackendDescriptor(**fields)


def mock_gateway(payload):
    def handler(request):
        return httpx.Response(200, json={"choices": [{"message": {"content": json.dumps(payload)}}]})

    return Gateway(client=httpx.Client(transport=httpx.MockTransport(handler)), env={"K": "x"})


# ------------------------------------------------------------------ extractor

def test_stub_extractor_reads_config_comments(gateway):
    ex = run_extractor(STUB_BACKEND, shortened_fixture(), gateway)
    got = {k: v for k, v in ex.values.items() if v is not None}
    assert got == FIXTURE_VALUES
    assert ex.categorical["material_type"] == "PLA"
    assert "flow_rate: 1 fraction -> 100 percent" in ex.unit_audit


def test_stub_extractor_command_fallbacks(gateway):
    text = "M104 S210\nM140 S55\nM106 S128\n;LAYER_CHANGE\nG1 Z0.2\nG0 X5 F9000\nG1 X1 E1\nM221 S90\n"
    ex = run_extractor(STUB_BACKEND, shorten_gcode(parse_gcode(text)), gateway)
    assert ex.values["nozzle_temperature"] == 210.0
    assert ex.values["bed_temperature"] == 55.0
    assert ex.values["travel_speed"] == 150.0
    assert ex.values["fan_speed"] == pytest.approx(128 * 100 / 255)
    assert any("M221" in n for n in ex.notes)


def test_relative_width_left_null(gateway):
    text = "; extrusion_width = 110%\n;LAYER_CHANGE\nG1 X1 E1\n"
    ex = run_extractor(STUB_BACKEND, shorten_gcode(parse_gcode(text)), gateway)
    assert ex.values["line_width"] is None
    assert any("extrusion_width" in n for n in ex.notes)


def test_empty_shortened_text_rejected(gateway):
    with pytest.raises(ValueError):
        run_extractor(STUB_BACKEND, ShortenedGcode.from_text(""), gateway)


def test_http_extra_key_goes_to_notes():
    payload = {k: None for k in json.loads(
        (Path(__file__).parents[1] / "src/gcode_screen/data/parameter_schema.json").read_text()
    )["required"]}
    payload.update(notes=[], nozzle_temperature=215, z_hop="0.4 mm")
    ex = run_extractor(http_backend(), shortened_fixture(), mock_gateway(payload))
    assert ex.values["nozzle_temperature"] == 215.0
    assert "z_hop: 0.4 mm" in ex.notes


# ------------------------------------------------------------------ reference

def test_stub_reference_returns_bundled_fixture(gateway, stub_config):
    docs = stub_config.doc_bundle("BMP1", "PLA")
    ref = run_reference(STUB_BACKEND, docs, gateway)
    expected = bundled_reference("BMP1", "PLA")
    assert ref.ranges == expected.ranges and ref.source_docs == expected.source_docs


def test_reference_cached_per_pair(gateway, tmp_path, stub_config):
    cache = ReferenceCache(tmp_path)
    docs = stub_config.doc_bundle("MK4S", "ABS")
    a = run_reference(STUB_BACKEND, docs, gateway, cache=cache)
    b = run_reference(STUB_BACKEND, docs, gateway, cache=cache)
    assert a is b
    assert gateway.calls[("stub", "reference")] == 1


def test_documents_without_ranges(gateway):
    ref = run_reference(STUB_BACKEND, DocBundle("X", "Y", (("empty.txt", "nothing\n"),)), gateway)
    assert all(v is None for v in ref.ranges.values())
    assert ref.warnings


# ---------------------------------------------------------------------- judge

def _bundle(**values):
    ex = validate_extraction(dict(FIXTURE_VALUES, material_type="PLA", printer_model="MK4S",
                                  bed_adhesion_type="skirt", **values))
    ref = bundled_reference("MK4S", "PLA")
    short = shortened_fixture()
    return EvidenceBundle(ex, ref, build_deviation_table(ex, ref, "MK4S", "PLA"), short, "MK4S", "PLA")


def test_stub_judge_ue_pattern(gateway):
    bundle = _bundle(flow_rate=80.0)
    verdict = run_judge(STUB_BACKEND, bundle, gateway)
    assert verdict.label == "UE" == judge_rules(bundle.table)[0]
    assert verdict.deviations_used == ["flow_rate"]
    (line, quote), = verdict.evidence_citations
    assert quote == "; extrusion_multiplier = 1"
    assert bundle.shortened.lines[line] == quote


def test_stub_judge_all_in_range(gateway):
    verdict = run_judge(STUB_BACKEND, _bundle(), gateway)
    assert (verdict.label, verdict.confidence) == ("ND", 1.0)


def test_unverifiable_citation_dropped():
    payload = {"label": "OE", "confidence": 0.7, "support_summary": "s", "rationale": "r",
               "deviations_used": ["flow_rate", "made_up_key"],
               "evidence_citations": [{"line": 2, "quote": "M83"}, {"line": 3, "quote": "G1 Z9"},
                                      {"line": 9999, "quote": "x"}]}
    verdict = run_judge(http_backend(), _bundle(), mock_gateway(payload))
    assert verdict.evidence_citations == [(2, "M83")]
    assert verdict.diagnostics == {"dropped_citations": 2, "dropped_deviation_keys": 1}
    assert verdict.deviations_used == ["flow_rate"]


def test_verify_citations_requires_verbatim_text():
    lines = ["; a = 1", "G1 X1"]
    assert verify_citations([(0, "a = 1"), (1, "G1 X2"), (1, ""), ("1", "G1")], lines) == ([(0, "a = 1")], 3)


def test_verdict_validation():
    with pytest.raises(ValueError):
        JudgeVerdict("XX", 0.5)
    with pytest.raises(ValueError):
        JudgeVerdict("ND", 1.5)
    v = JudgeVerdict("ST", 0.9, "s", ["nozzle_temperature"], "r", [(1, "q")], {"dropped_citations": 0})
    assert JudgeVerdict.from_json(json.loads(json.dumps(v.to_json()))) == v


# ------------------------------------------------------------------- baseline

def test_baseline_fixed_answer_and_single_call():
    short = shortened_fixture()
    backend = BackendDescriptor(id="fixed", kind="stub", model_name="fixed",
                                options={"answers": {baseline_answer_key(short.text): "WP"}})
    gw = Gateway(env={})
    assert run_baseline(backend, short, "engineered", gw) == "WP"
    assert sum(gw.calls.values()) == 1 and list(gw.calls) == [("fixed", "baseline")]


def test_prompt_families_differ_in_request():
    gw = Gateway(env={})
    short = shortened_fixture()
    run_baseline(STUB_BACKEND, short, "engineered", gw)
    run_baseline(STUB_BACKEND, short, "fdm_bench_style", gw)
    assert gw.request_log[0].digest != gw.request_log[1].digest


def test_baseline_preconditions(gateway):
    with pytest.raises(ValueError):
        run_baseline(STUB_BACKEND, ShortenedGcode.from_text(""), "engineered", gateway)
    with pytest.raises(ValueError):
        run_baseline(STUB_BACKEND, shortened_fixture(), "freestyle", gateway)


# -------------------------------------------------------------------- screen

def test_screen_ue_fixture(corpus, stub_config):
    result = screen(corpus / "gcode/mk4s-pla-ue.gcode", "MK4S", "PLA", stub_config)
    assert result.verdict.label == "UE"
    assert set(result.artifacts) == set(STAGE_FILES)
    sample_dir = stub_config.artifact_root / result.run_id / result.sample_id
    assert sorted(p.name for p in sample_dir.iterdir()) == sorted(STAGE_FILES.values())
    meta = ArtifactStore(stub_config.artifact_root).read_meta(result.run_id)
    assert meta["config_hash"] == stub_config.config_hash()
    assert set(meta["prompt_hashes"]) == set(PromptSet.load().templates)
    assert "finished_at" in meta


def test_unreadable_input_fails_before_any_call(tmp_path, stub_config):
    gw = Gateway(env={})
    with pytest.raises(StageError) as err:
        screen(tmp_path / "missing.gcode", "MK4S", "PLA", stub_config, gateway=gw)
    assert err.value.stage == "input"
    assert not gw.calls and not stub_config.artifact_root.exists()


def test_non_utf8_input_is_input_error(tmp_path, stub_config):
    bad = tmp_path / "bad.gcode"
    bad.write_bytes(b"G1 X1\n\xff\n")
    with pytest.raises(StageError) as err:
        screen(bad, "MK4S", "PLA", stub_config)
    assert err.value.stage == "input"


def test_screen_twice_byte_identical(corpus, tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = RunConfig(artifact_root=tmp_path / name)
        res = screen(corpus / "gcode/bmp1-abs-wp.gcode", "BMP1", "ABS", cfg)
        outs.append({k: Path(p).read_bytes() for k, p in res.artifacts.items()})
    assert outs[0] == outs[1]


def test_unknown_pair_is_reference_error(corpus, stub_config):
    with pytest.raises(StageError) as err:
        screen(corpus / "gcode/mk4s-pla-nd.gcode", "Ender", "PETG", stub_config)
    assert err.value.stage == "reference"


def test_rejudge_after_corrupting_reference(corpus, stub_config):
    gw = Gateway(env={})
    s = Screener(stub_config, gw)
    s.start_run()
    res = s.screen(corpus / "gcode/mk4s-abs-oe.gcode", "MK4S", "ABS")
    paths = res.artifacts
    extracted_before = paths["extracted"].read_bytes()
    ref = json.loads(paths["reference"].read_text())
    ref["ranges"]["flow_rate"] = [50, 150]
    paths["reference"].write_text(json.dumps(ref))
    paths["verdict"].unlink()
    calls_before = dict(gw.calls)
    s.rejudge(res.run_id, res.sample_id)
    new_calls = {k: v - calls_before.get(k, 0) for k, v in gw.calls.items()}
    assert {k: v for k, v in new_calls.items() if v} == {("stub", "judge"): 1}
    assert paths["extracted"].read_bytes() == extracted_before
    assert json.loads(paths["verdict"].read_text())["label"] == "OE"


def test_rejudge_refuses_to_overwrite(corpus, stub_config):
    s = Screener(stub_config)
    s.start_run()
    res = s.screen(corpus / "gcode/mk4s-abs-nd.gcode", "MK4S", "ABS")
    with pytest.raises(FileExistsError):
        s.rejudge(res.run_id, res.sample_id)
