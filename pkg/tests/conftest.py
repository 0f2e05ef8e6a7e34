from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from gcode_screen.config import RunConfig
from gcode_screen.gateway import Gateway
from gcode_screen.synth import write_corpus

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

FOOTER_ENTRIES = [
    ("bed_temperature", "60"),
    ("extrusion_multiplier", "1"),
    ("extrusion_width", "0.45"),
    ("filament_diameter", "1.75"),
    ("filament_type", "PLA"),
    ("first_layer_height", "0.2"),
    ("layer_height", "0.2"),
    ("max_fan_speed", "100"),
    ("nozzle_diameter", "0.4"),
    ("retract_length", "0.8"),
    ("temperature", "215"),
    ("travel_speed", "200"),
]


def ten_layer_lines(layers: int = 10, moves: int = 4) -> dict:
    """A hand-laid Prusa-style program with its expected structure.

    Layout: 4 init lines, then per layer a ``;LAYER_CHANGE`` marker, a Z move
    and ``moves`` extruding moves, then a 14-line footer config block.
    """
    lines = ["; generated for tests", "G90", "M83", "G28"]
    layer_starts = []
    for n in range(1, layers + 1):
        layer_starts.append(len(lines))
        lines.append(";LAYER_CHANGE")
        lines.append(f"G1 Z{0.2 * n:.1f} F600")
        for k in range(moves):
            lines.append(f"G1 X{10 + k} Y{10 + n} E0.5 F1800")
    config_start = len(lines)
    lines.append("; prusaslicer_config = begin")
    lines += [f"; {k} = {v}" for k, v in FOOTER_ENTRIES]
    lines.append("; prusaslicer_config = end")
    return {
        "lines": lines,
        "text": "\n".join(lines) + "\n",
        "layer_starts": layer_starts,
        "config_span": (config_start, len(lines) - 1),
        "layer_size": 2 + moves,
    }


@pytest.fixture
def ten_layer():
    return ten_layer_lines()


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root)
    return root


@pytest.fixture
def stub_config(tmp_path) -> RunConfig:
    return RunConfig(artifact_root=tmp_path / "runs", concurrency=1)


@pytest.fixture
def gateway() -> Gateway:
    return Gateway(env={})


# ----------------------------------------------------- acceptance reporting

_criteria: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = call.excinfo is not None and call.when in ("setup", "call")
    if call.when == "call" or failed:
        _, ok = _criteria.get(number, (title, True))
        _criteria[number] = (title, ok and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
