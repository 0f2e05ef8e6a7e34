"""Selects the compiled scanner when it is importable.

Set ``GCODE_SCREEN_PURE=1`` to force the pure-Python implementation.
"""
from __future__ import annotations

import logging
import os

from . import _pyscan

python_scan_lines = _pyscan.scan_lines
python_z_layer_starts = _pyscan.z_layer_starts

compiled_scan_lines = None
compiled_z_layer_starts = None

try:
    from . import _cscan
except ImportError as exc:  # pragma: no cover - depends on build
    logging.getLogger(__name__).debug("compiled scanner unavailable: %s", exc)
else:
    compiled_scan_lines = _cscan.scan_lines
    compiled_z_layer_starts = _cscan.z_layer_starts

if compiled_scan_lines is not None and not os.environ.get("GCODE_SCREEN_PURE"):
    BACKEND = "cython"
    scan_lines = compiled_scan_lines
    z_layer_starts = compiled_z_layer_starts
else:
    BACKEND = "python"
    scan_lines = python_scan_lines
    z_layer_starts = python_z_layer_starts

COMMAND = _pyscan.COMMAND
COMMENT = _pyscan.COMMENT
CONFIG = _pyscan.CONFIG
BLANK = _pyscan.BLANK
config_pair = _pyscan.config_pair
