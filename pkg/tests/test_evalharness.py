import json
import random
from fractions import Fraction

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import accuracy_score, confusion_matrix, f1_score

from gcode_screen import evalharness as ev
from gcode_screen.config import STUB_BACKEND, RunConfig
from gcode_screen.gateway import BackendDescriptor, Gateway
from gcode_screen.gcode import parse_gcode, shorten_gcode
from gcode_screen.labels import LABELS
from gcode_screen.prompts import read_section
from gcode_screen.stubs import baseline_answer_key, extract_from_gcode

# 25 hand-labelled pairs, five per true class
HAND_PAIRS = (
    [("ND", p) for p in ["ND", "ND", "ND", "ND", "UE"]]
    + [("UE", p) for p in ["UE", "UE", "UE", "OE", "ND"]]
    + [("OE", p) for p in ["OE"] * 5]
    + [("WP", p) for p in ["WP", "WP", "ND", "ND", "ST"]]
    + [("ST", p) for p in ["ST", "ST", "ST", "ST", "WP"]]
)
# per-class F1 = 2TP / (predicted + support):
#   ND 8/12, UE 6/9, OE 10/11, WP 4/8, ST 8/10  -> mean 1169/1650
HAND_MACRO_F1 = Fraction(1169, 1650)

GRID = [[75.0, 80.0, 85.0], [77.5, 82.5, 85.0], [65.0, 85.0, 87.5]]
REFS, JUDGES = ["ref_a", "ref_b", "ref_c"], ["judge_a", "judge_b", "judge_c"]


# ------------------------------------------------------------------- metrics

def test_hand_fixture_macro_f1():
    report = ev.compute_metrics(HAND_PAIRS)
    assert report.macro_f1 == pytest.approx(float(HAND_MACRO_F1), abs=1e-12)
    assert report.accuracy == 18 / 25
    assert report.per_class_recall == {"ND": 0.8, "UE": 0.6, "OE": 1.0, "WP": 0.4, "ST": 0.8}


def test_matches_sklearn_on_random_sets():
    rng = random.Random(3)
    for _ in range(50):
        n = rng.randint(1, 60)
        y = [rng.choice(LABELS) for _ in range(n)]
        p = [rng.choice(LABELS) for _ in range(n)]
        report = ev.compute_metrics(list(zip(y, p)))
        present = sorted(set(y), key=LABELS.index)
        assert report.accuracy == pytest.approx(accuracy_score(y, p))
        assert report.macro_f1 == pytest.approx(
            f1_score(y, p, labels=present, average="macro", zero_division=0))
        assert report.confusion.counts == confusion_matrix(y, p, labels=list(LABELS)).tolist()


def test_thirty_five_of_forty():
    pairs = [("ND", "ND")] * 35 + [("ND", "UE")] * 5
    assert ev.compute_metrics(pairs).accuracy == 0.875


def test_perfect_predictions():
    pairs = [(c, c) for c in LABELS for _ in range(3)]
    r = ev.compute_metrics(pairs)
    assert (r.accuracy, r.macro_f1) == (1.0, 1.0)
    assert r.confusion.counts == [[3 if i == j else 0 for j in range(5)] for i in range(5)]


def test_absent_class_recall_is_null():
    r = ev.compute_metrics([("ND", "ND"), ("UE", "ND")])
    assert r.per_class_recall["OE"] is None
    assert r.macro_f1 == pytest.approx((2 / 3 + 0) / 2)


@pytest.mark.parametrize("pairs", [[], [("ND", "XX")], [("??", "ND")]])
def test_metric_errors(pairs):
    with pytest.raises(ValueError):
        ev.compute_metrics(pairs)


_label = st.sampled_from(LABELS)
_sample = st.tuples(_label, _label, st.sampled_from(["MK4S", "BMP1"]), st.sampled_from(["PLA", "ABS"]))


@given(st.lists(_sample, min_size=1, max_size=80), st.permutations(LABELS))
def test_metric_invariants(samples, order):
    pairs = [(t, p) for t, p, _, _ in samples]
    strata = [{"printer": a, "material": b, "printer_material": f"{a}/{b}"} for _, _, a, b in samples]
    r = ev.compute_metrics(pairs, strata)
    assert r.confusion.trace() / r.confusion.total == r.accuracy
    for dim in ("printer", "material", "printer_material"):
        keys = [k for k in r.strata if k.startswith(dim + "=")]
        weighted = sum(r.strata[k] * r.strata_sizes[k] for k in keys) / len(pairs)
        assert weighted == pytest.approx(r.accuracy, abs=1e-12)
    permuted = ev.compute_metrics(pairs, labels=order)
    assert permuted.macro_f1 == pytest.approx(r.macro_f1, abs=1e-12)
    for c in LABELS:
        if all(p == t for t, p in pairs if t == c) and any(t == c for t, _ in pairs):
            assert r.per_class_recall[c] == 1.0


# ---------------------------------------------------------------------- grid

def test_grid_averages_and_display():
    g = ev.GridReport.from_cells(REFS, JUDGES, GRID)
    assert [ev.fmt1(g.row_average(r)) for r in REFS] == ["80.0", "81.7", "79.2"]
    assert [ev.fmt1(g.column_average(j)) for j in JUDGES] == ["72.5", "82.5", "85.8"]
    assert ev.fmt1(g.overall_average()) == "80.3"
    assert g.column_average("judge_c") == pytest.approx(257.5 / 3)  # raw value is not rounded
    table = g.format_table()
    assert "85.8" in table and "Column avg." in table


@pytest.mark.parametrize("x,expected", [(85.25, 85.3), (85.35, 85.4), (-0.05, -0.1), (79.1666, 79.2)])
def test_round_half_up(x, expected):
    assert ev.round_half_up(x) == expected


def test_grid_reuses_extraction(corpus, tmp_path):
    other = BackendDescriptor(id="stub2", kind="stub", model_name="rules-v1")
    cfg = RunConfig(backends={"stub": STUB_BACKEND, "stub2": other}, artifact_root=tmp_path,
                    concurrency=2)
    manifest = ev.load_manifest(corpus / "manifest.jsonl")
    gw = Gateway(env={})
    grid = ev.run_grid(manifest, ["stub", "stub2"], ["stub", "stub2"], "stub", cfg, gw)
    extractor_calls = sum(v for (b, role), v in gw.calls.items() if role == "extractor")
    assert extractor_calls == len(manifest)
    assert sum(v for (b, role), v in gw.calls.items() if role == "reference") == 2 * 4
    assert set(grid.cells.values()) == {100.0}
    assert grid.failures == {}


def test_one_by_one_grid_equals_single_report(corpus, tmp_path):
    manifest = ev.load_manifest(corpus / "manifest.jsonl")
    cfg = RunConfig(artifact_root=tmp_path)
    grid = ev.run_grid(manifest, ["stub"], ["stub"], "stub", cfg, Gateway(env={}))
    single = ev.run_corpus(manifest, cfg, Gateway(env={})).report
    assert grid.reports[("stub", "stub")].to_json() == single.to_json()
    assert grid.overall_average() == 100 * single.accuracy


def test_grid_records_cell_failures(corpus, tmp_path):
    broken = BackendDescriptor(id="broken", kind="http_provider", model_name="m",
                               endpoint="https://x.invalid", credential_env_var="UNSET_VAR")
    cfg = RunConfig(backends={"stub": STUB_BACKEND, "broken": broken}, artifact_root=tmp_path)
    manifest = ev.load_manifest(corpus / "manifest.jsonl")[:4]
    grid = ev.run_grid(manifest, ["stub"], ["stub", "broken"], "stub", cfg, Gateway(env={}))
    assert grid.cells[("stub", "stub")] == 100.0
    assert grid.cells[("stub", "broken")] == 0.0
    assert grid.failures[("stub", "broken")] == {"authentication": 4}


# ---------------------------------------------------------------- extraction

def _perturbing_gateway(target_sample_text, key, factor):
    """HTTP double returning the stub extraction, scaled on one key for one sample."""
    def handler(request):
        body = json.loads(request.content)
        gcode = read_section(body["messages"][-1]["content"], "gcode")
        payload = extract_from_gcode(gcode)
        if gcode == target_sample_text.rstrip("\n"):
            v = payload[key]
            payload[key] = {"value": v["value"] * factor, "unit": v["unit"]} if isinstance(v, dict) \
                else v * factor
        return httpx.Response(200, json={"choices": [{"message": {"content": json.dumps(payload)}}]})

    return Gateway(client=httpx.Client(transport=httpx.MockTransport(handler)), env={"K": "x"})


def test_extraction_benchmark_self_consistency_and_perturbation(corpus, tmp_path):
    remote = BackendDescriptor(id="remote", kind="http_provider", model_name="m",
                               endpoint="https://x.invalid", credential_env_var="K")
    cfg = RunConfig(backends={"stub": STUB_BACKEND, "remote": remote}, artifact_root=tmp_path)
    manifest = ev.load_manifest(corpus / "manifest.jsonl")
    target = manifest[0]
    short = shorten_gcode(parse_gcode(target.gcode_path.read_text()), cfg.policy)
    gw = _perturbing_gateway(short.text, "nozzle_temperature", 1.5)
    base, pert = ev.run_extraction_benchmark(manifest, ["stub", "remote"], cfg, gateway=gw)
    assert (base.score.overall_accuracy, base.score.overall_mape) == (1.0, 0.0)
    # 20 samples x 18 keys; the 10 PLA brim widths are zero and carry no percentage error
    n_cells, n_ape = 360, 350
    assert pert.score.n_cells == n_cells
    assert pert.score.overall_accuracy == pytest.approx((n_cells - 1) / n_cells, abs=1e-12)
    assert pert.score.overall_mape - base.score.overall_mape == pytest.approx(50 / n_ape, abs=1e-9)
    table = ev.format_extraction_table([base, pert])
    assert "1.000" in table and "0.00%" in table


def test_identical_backends_identical_rows(corpus, tmp_path):
    twin = BackendDescriptor(id="twin", kind="stub", model_name="rules-v1")
    cfg = RunConfig(backends={"stub": STUB_BACKEND, "twin": twin}, artifact_root=tmp_path)
    manifest = ev.load_manifest(corpus / "manifest.jsonl")
    a, b = ev.run_extraction_benchmark(manifest, ["stub", "twin"], cfg, gateway=Gateway(env={}))
    assert a.score == b.score


def test_extraction_benchmark_requires_truth(tmp_path, corpus):
    line = json.dumps({"sample_id": "x", "gcode_path": str(corpus / "gcode/mk4s-pla-nd.gcode"),
                       "printer": "MK4S", "material": "PLA", "true_label": "ND"})
    (tmp_path / "m.jsonl").write_text(line + "\n")
    with pytest.raises(ev.ManifestError):
        ev.run_extraction_benchmark(ev.load_manifest(tmp_path / "m.jsonl"), ["stub"], RunConfig())


# ------------------------------------------------------------------ manifest

@pytest.mark.parametrize("lines", [
    ['{"sample_id": "a", "gcode_path": "x", "printer": "P", "material": "M", "true_label": "XX"}'],
    ['{"sample_id": "a", "gcode_path": "x", "printer": "P", "material": "M", "true_label": "ND"}'] * 2,
    ['{"sample_id": "a"}'],
    ["not json"],
])
def test_bad_manifests(tmp_path, lines):
    (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ev.ManifestError):
        ev.load_manifest(tmp_path / "m.jsonl")


def test_manifest_paths_relative_to_file(corpus):
    m = ev.load_manifest(corpus / "manifest.jsonl")
    assert len(m) == 20 and all(e.gcode_path.is_file() and e.truth_path.is_file() for e in m)


# ------------------------------------------------------------------ baseline

def test_delta_in_points():
    assert ev.accuracy_delta_points(0.875, 0.595) == 28.0
    assert ev.fmt1(ev.accuracy_delta_points(0.875, 0.595)) == "28.0"


def test_framework_vs_fixed_answer_baseline(corpus, tmp_path):
    manifest = ev.load_manifest(corpus / "manifest.jsonl")
    fw_cfg = RunConfig(artifact_root=tmp_path / "fw")
    # baseline answers the true class on MK4S files and ND on BMP1 files
    answers = {}
    for e in manifest:
        text = shorten_gcode(parse_gcode(e.gcode_path.read_text()), fw_cfg.policy).text
        answers[baseline_answer_key(text)] = e.true_label if e.printer == "MK4S" else "ND"
    fixed = BackendDescriptor(id="fixed", kind="stub", model_name="fixed", options={"answers": answers})
    base_cfg = RunConfig(backends={"stub": STUB_BACKEND, "fixed": fixed}, roles={"baseline": "fixed"},
                         artifact_root=tmp_path / "base")
    report = ev.compare_framework_vs_baseline(manifest, fw_cfg, base_cfg, Gateway(env={}))
    # hand evaluation: framework is exact everywhere; baseline is exact on MK4S and
    # right on 1 of 5 files (the ND one) per BMP1 combination
    expected = {"MK4S/PLA": 0.0, "MK4S/ABS": 0.0, "BMP1/PLA": 80.0, "BMP1/ABS": 80.0}
    assert {k: v["delta"] for k, v in report.per_combination.items()} == expected
    assert report.baseline.accuracy == 12 / 20
    assert report.delta_points == 40.0
    assert "overall" in report.format_table()


def test_identical_configs_zero_delta(corpus, tmp_path):
    manifest = ev.load_manifest(corpus / "manifest.jsonl")[:5]
    fw = ev.run_corpus(manifest, RunConfig(artifact_root=tmp_path), Gateway(env={})).outcomes
    report = ev.compare_outcomes(fw, fw)
    assert report.delta_points == 0.0
    assert all(v["delta"] == 0.0 for v in report.per_combination.values())


def test_corpus_run_tallies_failures(corpus, tmp_path):
    manifest = ev.load_manifest(corpus / "manifest.jsonl")[:3]
    broken = ev.ManifestEntry("ghost", tmp_path / "missing.gcode", "MK4S", "PLA", "ND")
    run = ev.run_corpus(manifest + [broken], RunConfig(artifact_root=tmp_path), Gateway(env={}))
    assert run.hard_failures == 1 and run.report.n == 3
    assert run.report.error_tallies == {"io": 1}
    text = ev.format_report(run.report)
    assert "errors:" in text
