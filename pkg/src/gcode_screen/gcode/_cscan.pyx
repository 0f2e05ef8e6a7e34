# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled line scanner; mirrors ``_pyscan`` exactly."""

cdef enum:
    COMMAND = 0
    COMMENT = 1
    CONFIG = 2
    BLANK = 3

cdef tuple _LAYER_MARKERS = ("LAYER_CHANGE", "LAYER:", "layer num")


cdef inline bint _digit(Py_UCS4 c):
    return c >= u'0' and c <= u'9'


cdef inline bint _letter(Py_UCS4 c):
    return (c >= u'a' and c <= u'z') or (c >= u'A' and c <= u'Z')


cdef inline bint _upper(Py_UCS4 c):
    return c >= u'A' and c <= u'Z'


cdef bint _is_number(str s, Py_ssize_t i):
    cdef Py_ssize_t n = len(s)
    cdef Py_ssize_t nd = 0
    cdef Py_ssize_t nf = 0
    if i < n and (s[i] == u'+' or s[i] == u'-'):
        i += 1
    while i < n and _digit(s[i]):
        i += 1
        nd += 1
    if i < n and s[i] == u'.':
        i += 1
        while i < n and _digit(s[i]):
            i += 1
            nf += 1
    return i == n and (nd > 0 or nf > 0)


cdef bint _is_line_number(str s):
    cdef Py_ssize_t n = len(s)
    cdef Py_ssize_t i
    if n < 2 or not (s[0] == u'N' or s[0] == u'n'):
        return False
    for i in range(1, n):
        if not _digit(s[i]):
            return False
    return True


cdef bint _is_macro(str s):
    cdef Py_ssize_t n = len(s)
    cdef Py_ssize_t i
    cdef Py_UCS4 c
    if n < 2 or not _upper(s[0]):
        return False
    for i in range(1, n):
        c = s[i]
        if not (_upper(c) or _digit(c) or c == u'_'):
            return False
    return True


cdef object _code_word(str s):
    # letter, digits, optional '.' digits; returns normalized code or None
    cdef Py_ssize_t n = len(s)
    cdef Py_ssize_t i = 1
    cdef Py_ssize_t dot = -1
    if n < 2 or not _letter(s[0]):
        return None
    while i < n and _digit(s[i]):
        i += 1
    if i == 1:
        return None
    if i < n:
        if s[i] != u'.':
            return None
        dot = i
        i += 1
        if i == n:
            return None
        while i < n and _digit(s[i]):
            i += 1
        if i != n:
            return None
    if dot < 0:
        return s[0].upper() + str(int(s[1:]))
    return s[0].upper() + str(int(s[1:dot])) + s[dot:]


cdef object _config_pair(str s):
    cdef str body = s[1:]
    cdef Py_ssize_t eq = body.find(u'=')
    cdef str key
    cdef Py_UCS4 first
    if eq < 0:
        return None
    key = body[:eq].strip()
    if not key or u';' in key:
        return None
    first = key[0]
    if not (first == u'_' or _letter(first)):
        return None
    return (key, body[eq + 1:].strip())


cdef object _command(str s):
    cdef str code_part = s.split(u';', 1)[0]
    cdef list tokens
    cdef str head, tok
    cdef dict params
    cdef object code
    cdef Py_ssize_t k, ntok
    if u'*' in code_part:
        code_part = code_part.split(u'*', 1)[0]
    tokens = code_part.split()
    if len(tokens) > 1 and _is_line_number(tokens[0]):
        tokens = tokens[1:]
    ntok = len(tokens)
    if ntok == 0:
        return None
    head = tokens[0]
    code = _code_word(head)
    if code is None:
        if _is_macro(head):
            return (head, {})
        return None
    params = {}
    for k in range(1, ntok):
        tok = tokens[k]
        if len(tok) < 2 or not _letter(tok[0]):
            continue
        if _is_number(tok, 1):
            params[tok[0].upper()] = float(tok[1:])
    return (code, params)


def scan_lines(list lines):
    cdef list kinds = []
    cdef list codes = []
    cdef list params = []
    cdef list markers = []
    cdef list blocks = []
    cdef Py_ssize_t malformed = 0
    cdef Py_ssize_t block_start = -1
    cdef Py_ssize_t i
    cdef Py_ssize_t n = len(lines)
    cdef str raw, s
    cdef Py_UCS4 first
    cdef object pair, parsed
    cdef int kind
    cdef bint opens, closes
    for i in range(n):
        raw = lines[i]
        s = raw.strip()
        if not s:
            kinds.append(BLANK)
            codes.append(None)
            params.append(None)
            continue
        first = s[0]
        if first == u';':
            pair = _config_pair(s)
            if block_start < 0:
                opens = u"CONFIG_BLOCK_START" in s or (
                    pair is not None and pair[0] == u"prusaslicer_config" and pair[1] == u"begin")
            else:
                opens = False
            if opens:
                block_start = i
                kind = CONFIG
            elif block_start >= 0:
                kind = CONFIG
                closes = u"CONFIG_BLOCK_END" in s or (
                    pair is not None and pair[0] == u"prusaslicer_config" and pair[1] == u"end")
                if closes:
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
        if first == u'(':
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
        blocks.append((block_start, n - 1))
    return kinds, codes, params, markers, blocks, malformed


def z_layer_starts(list kinds, list codes, list params):
    cdef list starts = []
    cdef object z = None
    cdef object last_layer_z = None
    cdef Py_ssize_t z_line = -1
    cdef Py_ssize_t i
    cdef Py_ssize_t n = len(kinds)
    cdef bint relative_e = False
    cdef double last_e = 0.0
    cdef double e
    cdef bint extruding
    cdef dict p
    cdef str code
    for i in range(n):
        if kinds[i] != COMMAND:
            continue
        code = codes[i]
        if code == u"M83":
            relative_e = True
        elif code == u"M82":
            relative_e = False
        elif code == u"G92":
            p = params[i]
            if u"E" in p:
                last_e = p[u"E"]
        elif code == u"G0" or code == u"G1" or code == u"G2" or code == u"G3":
            p = params[i]
            if u"Z" in p and p[u"Z"] != z:
                z = p[u"Z"]
                z_line = i
            if u"E" in p:
                e = p[u"E"]
                if relative_e:
                    extruding = e > 0
                else:
                    extruding = e > last_e
                    last_e = e
                if extruding and z is not None and (last_layer_z is None or z > last_layer_z):
                    starts.append(z_line)
                    last_layer_z = z
    return starts
