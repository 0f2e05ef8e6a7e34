"""Pure-Python line scanner.

Reference implementation of the scanning kernel. ``_cscan.pyx`` must return
exactly the same structures for every input; ``tests/test_kernels.py`` checks
the two against each other.
"""
from __future__ import annotations

import re

COMMAND = 0
COMMENT = 1
CONFIG = 2
BLANK = 3

_NUMBER = re.compile(r"[-+]?(?:[0-9]+\.?[0-9]*|\.[0-9]+)\Z")
_CODE_WORD = re.compile(r"([A-Za-z])([0-9]+)(?:\.([0-9]+))?\Z")
_MACRO_WORD = re.compile(r"[A-Z][A-Z0-9_]+\Z")
_LINE_NUMBER = re.compile(r"[Nn][0-9]+\Z")
_LAYER_MARKERS = ("LAYER_CHANGE", "LAYER:", "layer num")
_MOVES = ("G0", "G1", "G2", "G3")


def config_pair(stripped: str):
    """Return ``(key, value)`` for a ``; key = value`` comment, else None."""
    body = stripped[1:]
    eq = body.find("=")
    if eq < 0:
        return None
    key = body[:eq].strip()
    if not key or ";" in key:
        return None
    first = key[0]
    if not (first == "_" or ("a" <= first <= "z") or ("A" <= first <= "Z")):
        return None
    return key, body[eq + 1:].strip()


def _opens_block(stripped, pair):
    if "CONFIG_BLOCK_START" in stripped:
        return True
    return pair is not None and pair[0] == "prusaslicer_config" and pair[1] == "begin"


def _closes_block(stripped, pair):
    if "CONFIG_BLOCK_END" in stripped:
        return True
    return pair is not None and pair[0] == "prusaslicer_config" and pair[1] == "end"


def _command(stripped):
    """Return ``(code, params)`` or None when the line is malformed."""
    code_part = stripped.split(";", 1)[0]
    if "*" in code_part:
        code_part = code_part.split("*", 1)[0]
    tokens = code_part.split()
    if len(tokens) > 1 and _LINE_NUMBER.match(tokens[0]):
        tokens = tokens[1:]
    if not tokens:
        return None
    head = tokens[0]
    m = _CODE_WORD.match(head)
    if m is None:
        if _MACRO_WORD.match(head):
            return head, {}
        return None
    code = m.group(1).upper() + str(int(m.group(2)))
    if m.group(3) is not None:
        code += "." + m.group(3)
    params = {}
    for tok in tokens[1:]:
        if len(tok) < 2:
            continue
        letter = tok[0]
        if not (("a" <= letter <= "z") or ("A" <= letter <= "Z")):
            continue
        value = tok[1:]
        if _NUMBER.match(value):
            params[letter.upper()] = float(value)
    return code, params


def scan_lines(lines):
    """Classify raw lines.

    Returns ``(kinds, codes, params, markers, blocks, malformed)`` where
    ``kinds`` holds one of the integer kind codes per line, ``codes`` and
    ``params`` are None for non-command lines, ``markers`` lists lines
    carrying a slicer layer-change comment, and ``blocks`` lists inclusive
    ``(start, end)`` ranges of delimited config sections.
    """
    kinds = []
    codes = []
    params = []
    markers = []
    blocks = []
    malformed = 0
    block_start = -1
    for i, raw in enumerate(lines):
        s = raw.strip()
        if not s:
            kinds.append(BLANK)
            codes.append(None)
            params.append(None)
            continue
        first = s[0]
        if first == ";":
            pair = config_pair(s)
            if block_start < 0 and _opens_block(s, pair):
                block_start = i
                kind = CONFIG
            elif block_start >= 0:
                kind = CONFIG
                if _closes_block(s, pair):
                    blocks.append((block_start, i))
                    block_start = -1
            elif pair is not None:
                kind = CONFIG
            else:
                kind = COMMENT
                if s[1:].lstrip().startswith(_LAYER_MARKERS):
                    markers.append(i)
            kinds.append(kind)
            codes.append(None)
            params.append(None)
            continue
        if first == "(":
            kinds.append(COMMENT)
            codes.append(None)
            params.append(None)
            continue
        parsed = _command(s)
        if parsed is None:
            malformed += 1
            kinds.append(COMMENT)
            codes.append(None)
            params.append(None)
        else:
            kinds.append(COMMAND)
            codes.append(parsed[0])
            params.append(parsed[1])
    if block_start >= 0:
        blocks.append((block_start, len(lines) - 1))
    return kinds, codes, params, markers, blocks, malformed


def z_layer_starts(kinds, codes, params):
    """Layer starts inferred from strictly increasing Z of extruding moves.

    A layer begins at the line that last set Z before the first extruding
    move at a height above every earlier layer.
    """
    starts = []
    z = None
    z_line = -1
    last_layer_z = None
    relative_e = False
    last_e = 0.0
    for i, kind in enumerate(kinds):
        if kind != COMMAND:
            continue
        code = codes[i]
        if code == "M83":
            relative_e = True
        elif code == "M82":
            relative_e = False
        elif code == "G92":
            p = params[i]
            if "E" in p:
                last_e = p["E"]
        elif code in _MOVES:
            p = params[i]
            if "Z" in p and p["Z"] != z:
                z = p["Z"]
                z_line = i
            if "E" in p:
                e = p["E"]
                if relative_e:
                    extruding = e > 0
                else:
                    extruding = e > last_e
                    last_e = e
                if extruding and z is not None and (last_layer_z is None or z > last_layer_z):
                    starts.append(z_line)
                    last_layer_z = z
    return starts
