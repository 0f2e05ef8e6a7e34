import json
import random
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

import gcode_screen
from gcode_screen.schema import (
    DEFAULT_CRITICAL,
    NUMERIC_KEYS,
    ExtractedParameters,
    SchemaValidationError,
    SchemaVersionError,
    Tolerance,
    ToleranceSpec,
    critical_set,
    extraction_json_schema,
    normalize_units,
    score_cells,
    score_extraction,
    summarize_cells,
    validate_extraction,
)

KEYS = list(NUMERIC_KEYS)


def full(values=None, **over):
    base = {k: 10.0 + i for i, k in enumerate(KEYS)}
    base.update(values or {})
    base.update(over)
    return validate_extraction(base)


# --------------------------------------------------------------- validation

def test_number_accepted():
    assert validate_extraction({"nozzle_temperature": 215}).values["nozzle_temperature"] == 215.0


def test_string_value_is_violation_with_path():
    with pytest.raises(SchemaValidationError) as err:
        validate_extraction({"nozzle_temperature": "hot"})
    assert [v.path for v in err.value.violations] == ["nozzle_temperature"]


def test_unknown_key_routed_to_notes():
    ex = validate_extraction({"custom_hint": "z-hop seen"})
    assert ex.notes == ["custom_hint: z-hop seen"]
    assert all(v is None for v in ex.values.values())


@pytest.mark.parametrize("bad", [True, float("nan"), float("inf"), [1], {"value": "x"}])
def test_rejects_non_numbers(bad):
    with pytest.raises(SchemaValidationError):
        validate_extraction({"bed_temperature": bad})


def test_unit_object_and_bad_units():
    ex = validate_extraction({"travel_speed": {"value": 9000, "unit": "mm/min"}})
    assert ex.units == {"travel_speed": "mm/min"}
    with pytest.raises(SchemaValidationError) as err:
        validate_extraction({"travel_speed": {"value": 1, "unit": "furlong"},
                             "bed_temperature": {"value": 1, "unit": "mm"}})
    assert {v.path for v in err.value.violations} == {"travel_speed.unit", "bed_temperature.unit"}


def test_all_violations_reported_together():
    with pytest.raises(SchemaValidationError) as err:
        validate_extraction({"layer_height": "a", "line_width": "b", "printer_model": 3})
    assert len(err.value.violations) == 3


def test_json_round_trip():
    ex = normalize_units(full(travel_speed=9000))
    again = ExtractedParameters.from_json(json.loads(json.dumps(ex.to_json())))
    assert again == ex


# ------------------------------------------------------------- normalization

def test_feedrate_mm_per_min_divided_by_60():
    ex = normalize_units(validate_extraction({"travel_speed": {"value": 9000, "unit": "mm/min"}}))
    assert ex.values["travel_speed"] == 150.0
    assert ex.unit_audit == ["travel_speed: 9000 mm/min -> 150 mm/s"]


def test_fan_duty_255_is_full():
    ex = normalize_units(validate_extraction({"fan_speed": {"value": 255, "unit": "duty"}}))
    assert ex.values["fan_speed"] == 100.0


def test_celsius_unchanged():
    ex = normalize_units(validate_extraction({"nozzle_temperature": {"value": 215, "unit": "C"}}))
    assert ex.values["nozzle_temperature"] == 215.0
    assert ex.unit_audit == []


@pytest.mark.parametrize("key,raw,expected", [
    ("fan_speed", 200, 200 * 100 / 255),
    ("fan_speed", 80, 80.0),
    ("flow_rate", 0.95, 95.0),
    ("flow_rate", 105, 105.0),
    ("print_speed", 3600, 60.0),
    ("print_speed", 60, 60.0),
])
def test_inferred_units(key, raw, expected):
    ex = normalize_units(validate_extraction({key: raw}))
    assert ex.values[key] == pytest.approx(expected, abs=1e-9)
    converted = raw != expected
    assert any("inferred" in a for a in ex.unit_audit) == converted


def test_uninferable_value_is_dropped_and_noted():
    ex = normalize_units(validate_extraction({"fan_speed": 900}))
    assert ex.values["fan_speed"] is None
    assert any(n.startswith("fan_speed:") for n in ex.notes)


_unit_choices = {
    "degC": ["degC", "C", "K", None],
    "mm": ["mm", "um", "cm", None],
    "mm/s": ["mm/s", "mm/min", None],
    "percent": ["percent", "fraction", "duty", None],
}


@st.composite
def raw_extractions(draw):
    payload = {}
    for key in draw(st.lists(st.sampled_from(KEYS), unique=True)):
        value = draw(st.floats(0, 5000, allow_nan=False))
        unit = draw(st.sampled_from(_unit_choices[NUMERIC_KEYS[key]]))
        payload[key] = value if unit is None else {"value": value, "unit": unit}
    return validate_extraction(payload)


@given(raw_extractions())
def test_normalize_is_idempotent(raw):
    once = normalize_units(raw)
    assert normalize_units(once) == once


@given(raw_extractions())
def test_every_conversion_is_audited(raw):
    out = normalize_units(raw)
    changed = {k for k in KEYS
               if raw.values[k] is not None and out.values[k] is not None
               and out.values[k] != raw.values[k]}
    audited = {a.split(":")[0] for a in out.unit_audit}
    assert changed <= audited
    assert set(out.units) == {k for k in KEYS if out.values[k] is not None}


# ------------------------------------------------------------------- scoring

def test_identity_scores_perfectly():
    ex = full()
    s = score_extraction(ex, ex)
    assert (s.overall_accuracy, s.overall_mape, s.n_cells) == (1.0, 0.0, 18)


def test_single_cell_outside_two_percent():
    # |210-200| = 10 > 2% of 200 = 4 ; APE = 10/200 = 5%
    truth = validate_extraction({"nozzle_temperature": 200})
    pred = validate_extraction({"nozzle_temperature": 210})
    (cell,) = score_cells(pred, truth, ToleranceSpec.default())
    assert not cell.within
    assert cell.ape == pytest.approx(5.0)


def test_340_of_360_cells():
    rng = random.Random(1)
    cells = []
    wrong = set(rng.sample(range(360), 20))
    for s in range(20):
        truth = full()
        pred_vals = dict(truth.values)
        for j, k in enumerate(KEYS):
            if s * 18 + j in wrong:
                pred_vals[k] = pred_vals[k] * 2
        cells += score_cells(validate_extraction(pred_vals), truth, ToleranceSpec.default())
    score = summarize_cells(cells, DEFAULT_CRITICAL)
    assert round(score.overall_accuracy, 3) == 0.944
    assert score.overall_accuracy == 340 / 360


def test_null_prediction_capped_at_100():
    truth = validate_extraction({"bed_temperature": 60})
    (cell,) = score_cells(validate_extraction({}), truth, ToleranceSpec.default())
    assert not cell.within and cell.ape == 100.0


def test_zero_truth_has_no_ape():
    truth = validate_extraction({"brim_width": 0})
    (cell,) = score_cells(validate_extraction({"brim_width": 0}), truth, ToleranceSpec.default())
    assert cell.within and cell.ape is None


def test_version_mismatch_rejected():
    a = full()
    b = validate_extraction(dict(full().to_json(), schema_version="0.9"))
    with pytest.raises(SchemaVersionError):
        score_cells(a, b, ToleranceSpec.default())


@given(st.permutations(range(18)), st.lists(st.floats(0.5, 2.0), min_size=18, max_size=18))
def test_scores_invariant_to_cell_order(order, factors):
    truth = full()
    pred = validate_extraction({k: truth.values[k] * f for k, f in zip(KEYS, factors)})
    cells = score_cells(pred, truth, ToleranceSpec.default())
    a = summarize_cells(cells, DEFAULT_CRITICAL)
    b = summarize_cells([cells[i] for i in order], DEFAULT_CRITICAL)
    assert a.overall_accuracy == b.overall_accuracy
    assert a.overall_mape == pytest.approx(b.overall_mape, rel=1e-12)


@given(st.floats(1, 500), st.floats(0.5, 1.5), st.floats(0.01, 100))
def test_scaling_one_key_preserves_relative_verdict(t, ratio, scale):
    tol = ToleranceSpec({k: Tolerance(0.02, 0.0) for k in KEYS})
    truth, pred = {"print_speed": t}, {"print_speed": t * ratio}
    (a,) = score_cells(validate_extraction(pred), validate_extraction(truth), tol)
    scaled_t, scaled_p = t * scale, t * ratio * scale
    (b,) = score_cells(validate_extraction({"print_speed": scaled_p}),
                       validate_extraction({"print_speed": scaled_t}), tol)
    if abs(abs(ratio - 1) - 0.02) > 1e-9:  # away from the float boundary
        assert a.within == b.within
    assert a.ape == pytest.approx(b.ape, rel=1e-9, abs=1e-9)


def test_critical_equals_overall_when_all_keys_critical():
    truth = full()
    pred = full(nozzle_temperature=999, layer_height=0.01)
    s = score_extraction(pred, truth, critical=set(KEYS))
    assert s.critical_accuracy == s.overall_accuracy
    assert s.critical_mape == s.overall_mape


# ---------------------------------------------------------------- tolerance

def test_tolerance_spec_overrides(tmp_path):
    p = tmp_path / "tol.toml"
    p.write_text('[default]\nrelative = 0.05\n[keys.nozzle_temperature]\nabsolute = 3\n')
    spec = ToleranceSpec.load(p)
    assert spec["nozzle_temperature"] == Tolerance(0.05, 3.0)
    assert spec["layer_height"] == Tolerance(0.05, 0.01)
    with pytest.raises(ValueError):
        ToleranceSpec.from_mapping({"keys": {"bogus": {}}})


def test_default_floors():
    spec = ToleranceSpec.default()
    assert spec["bed_temperature"].allows(60.5, 60) and not spec["bed_temperature"].allows(61.3, 60)
    assert spec["fan_speed"].allows(1.0, 0.0)


def test_critical_set_validation():
    assert critical_set(["flow_rate"]) == {"flow_rate"}
    with pytest.raises(ValueError):
        critical_set(["nope"])


# -------------------------------------------------------------- json schema

def test_bundled_schema_file_matches_code():
    path = Path(gcode_screen.__file__).parent / "data" / "parameter_schema.json"
    assert json.loads(path.read_text()) == extraction_json_schema()


def test_schema_lists_all_keys():
    schema = extraction_json_schema()
    assert set(KEYS) <= set(schema["required"])
    assert "notes" in schema["properties"]
