"""Parsed G-code documents and the layer-preserving shortener."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, NamedTuple

from . import kernels

KIND_NAMES = {
    kernels.COMMAND: "command",
    kernels.COMMENT: "comment",
    kernels.CONFIG: "config_comment",
    kernels.BLANK: "blank",
}

SPAN_REASONS = ("config", "init", "head_layer", "final_layer")

_NO_PARAMS: Mapping[str, float] = MappingProxyType({})


class GcodeInputError(ValueError):
    """Input could not be read as text."""


class GcodeLine(NamedTuple):
    index: int
    kind: str
    code: str | None
    params: Mapping[str, float]
    raw: str


@dataclass(frozen=True)
class GcodeDocument:
    lines: tuple[GcodeLine, ...]
    layer_starts: tuple[int, ...] = ()
    config_span: tuple[int, int] | None = None
    trailing_newline: bool = False
    layer_source: str = "none"
    diagnostics: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.lines)
        prev = -1
        for start in self.layer_starts:
            if not prev < start < n:
                raise ValueError(f"invalid layer start {start}")
            prev = start
        if self.config_span is not None:
            start, end = self.config_span
            if not 0 <= start <= end < n:
                raise ValueError(f"invalid config span {self.config_span}")

    def __len__(self):
        return len(self.lines)

    def text(self) -> str:
        body = "\n".join(line.raw for line in self.lines)
        return body + "\n" if self.trailing_newline else body

    def layer_ranges(self) -> list[tuple[int, int]]:
        """Inclusive ``(start, end)`` line range of every detected layer."""
        n = len(self.lines)
        starts = list(self.layer_starts)
        ends = [s - 1 for s in starts[1:]] + [n - 1]
        return list(zip(starts, ends))


def _split(text: str) -> tuple[list[str], bool]:
    if not text:
        return [], False
    parts = text.split("\n")
    if parts[-1] == "":
        parts.pop()
        return parts, True
    return parts, False


def _config_span(kinds, blocks):
    if blocks:
        return max(blocks, key=lambda b: (b[1] - b[0], b[0]))
    best = None
    run_start = None
    for i, kind in enumerate(kinds + [None]):
        if kind == kernels.CONFIG:
            if run_start is None:
                run_start = i
            continue
        if run_start is not None:
            if best is None or (i - 1 - run_start) >= (best[1] - best[0]):
                best = (run_start, i - 1)
            run_start = None
    return best


def parse_gcode(text: str | bytes) -> GcodeDocument:
    """Parse G-code text into a :class:`GcodeDocument`.

    Malformed lines never raise; they are kept as comments and counted in
    ``diagnostics["malformed"]``.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GcodeInputError(f"input is not valid UTF-8: {exc}") from None
    if not isinstance(text, str):
        raise GcodeInputError(f"expected text, got {type(text).__name__}")

    raws, trailing = _split(text)
    kinds, codes, params, markers, blocks, malformed = kernels.scan_lines(raws)
    lines = tuple(
        GcodeLine(i, KIND_NAMES[k], c, p if p is not None else _NO_PARAMS, r)
        for i, (k, c, p, r) in enumerate(zip(kinds, codes, params, raws))
    )
    if markers:
        starts, source = markers, "markers"
    else:
        starts = kernels.z_layer_starts(kinds, codes, params)
        source = "z" if starts else "none"
    return GcodeDocument(
        lines=lines,
        layer_starts=tuple(starts),
        config_span=_config_span(kinds, blocks),
        trailing_newline=trailing,
        layer_source=source,
        diagnostics={"malformed": malformed, "config_blocks": len(blocks)},
    )


def detect_layers(doc: GcodeDocument) -> list[int]:
    """Layer-start line indices: slicer markers first, then Z progression."""
    markers = []
    kinds, codes, params = [], [], []
    for line in doc.lines:
        if line.kind == "comment":
            body = line.raw.strip()
            if body.startswith(";") and body[1:].lstrip().startswith(
                ("LAYER_CHANGE", "LAYER:", "layer num")
            ):
                markers.append(line.index)
        kinds.append(kernels.COMMAND if line.kind == "command" else kernels.COMMENT)
        codes.append(line.code)
        params.append(dict(line.params) if line.kind == "command" else None)
    if markers:
        return markers
    return list(kernels.z_layer_starts(kinds, codes, params))


def extract_config_comments(doc: GcodeDocument) -> dict[str, str]:
    """Flat map of slicer ``; key = value`` settings; the last occurrence wins."""
    settings: dict[str, str] = {}
    for line in doc.lines:
        if line.kind != "config_comment":
            continue
        pair = kernels.config_pair(line.raw.strip())
        if pair is not None and pair[0] != "prusaslicer_config":  # block delimiter
            settings[pair[0]] = pair[1]
    return settings


@dataclass(frozen=True)
class ShorteningPolicy:
    head_layers: int = 3
    keep_final_layer: bool = True
    keep_config: bool = True
    keep_init: bool = True

    def __post_init__(self):
        if self.head_layers < 0:
            raise ValueError("head_layers must be >= 0")


class KeptSpan(NamedTuple):
    start: int
    end: int
    reason: str
    layer: int | None = None

    @property
    def size(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class ShortenedGcode:
    text: str
    kept_spans: tuple[KeptSpan, ...]
    original_line_count: int
    kept_line_count: int
    degraded: bool = False
    # source line index for every output line; None marks an elision comment
    line_map: tuple[int | None, ...] = ()

    @property
    def lines(self) -> list[str]:
        return _split(self.text)[0]

    def sidecar(self) -> dict:
        return {
            "original_line_count": self.original_line_count,
            "kept_line_count": self.kept_line_count,
            "degraded": self.degraded,
            "kept_spans": [
                {"start": s.start, "end": s.end, "reason": s.reason, "layer": s.layer}
                for s in self.kept_spans
            ],
        }

    def sidecar_json(self) -> str:
        return json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ShortenedGcode":
        """Wrap already-shortened text, e.g. a persisted artifact."""
        n = len(_split(text)[0])
        return cls(text=text, kept_spans=(), original_line_count=n, kept_line_count=n)


def elision_marker(count: int) -> str:
    return f"; [shortened: {count} lines elided]"


def shorten_gcode(doc: GcodeDocument, policy: ShorteningPolicy | None = None) -> ShortenedGcode:
    """Keep config, initialization, the first layers and the final layer.

    Lines belonging to no kept region are replaced by a single elision
    comment per gap. Without detected layers the whole file is kept and the
    result is flagged ``degraded``.
    """
    policy = policy or ShorteningPolicy()
    n = len(doc.lines)
    ranges = doc.layer_ranges()
    degraded = not ranges

    tags: list[tuple[str, int | None] | None] = [None] * n

    if ranges:
        last = len(ranges) - 1
        if policy.keep_final_layer:
            start, end = ranges[last]
            reason = "head_layer" if last < policy.head_layers else "final_layer"
            for i in range(start, end + 1):
                tags[i] = (reason, last + 1)
        for ordinal, (start, end) in enumerate(ranges[: policy.head_layers]):
            for i in range(start, end + 1):
                tags[i] = ("head_layer", ordinal + 1)
        first_layer = ranges[0][0]
    else:
        first_layer = n
    if policy.keep_init or degraded:
        for i in range(first_layer):
            tags[i] = ("init", None)
    if policy.keep_config and doc.config_span is not None:
        start, end = doc.config_span
        for i in range(start, end + 1):
            tags[i] = ("config", None)

    spans: list[KeptSpan] = []
    i = 0
    while i < n:
        tag = tags[i]
        if tag is None:
            i += 1
            continue
        j = i
        while j + 1 < n and tags[j + 1] == tag:
            j += 1
        spans.append(KeptSpan(i, j, tag[0], tag[1]))
        i = j + 1

    out: list[str] = []
    line_map: list[int | None] = []
    cursor = 0
    for span in spans:
        if span.start > cursor:
            out.append(elision_marker(span.start - cursor))
            line_map.append(None)
        for k in range(span.start, span.end + 1):
            out.append(doc.lines[k].raw)
            line_map.append(k)
        cursor = span.end + 1
    if cursor < n:
        out.append(elision_marker(n - cursor))
        line_map.append(None)

    text = "\n".join(out)
    if out and doc.trailing_newline:
        text += "\n"
    return ShortenedGcode(
        text=text,
        kept_spans=tuple(spans),
        original_line_count=n,
        kept_line_count=sum(s.size for s in spans),
        degraded=degraded,
        line_map=tuple(line_map),
    )
