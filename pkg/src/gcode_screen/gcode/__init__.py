"""G-code parsing and shortening."""
from .document import (
    GcodeDocument,
    GcodeInputError,
    GcodeLine,
    KeptSpan,
    ShortenedGcode,
    ShorteningPolicy,
    detect_layers,
    extract_config_comments,
    parse_gcode,
    shorten_gcode,
)
from .kernels import BACKEND as SCANNER_BACKEND

__all__ = [
    "GcodeDocument",
    "GcodeInputError",
    "GcodeLine",
    "KeptSpan",
    "SCANNER_BACKEND",
    "ShortenedGcode",
    "ShorteningPolicy",
    "detect_layers",
    "extract_config_comments",
    "parse_gcode",
    "shorten_gcode",
]
