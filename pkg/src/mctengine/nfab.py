"""``.nfab`` binary image of a compiled NFA.

Layout (little-endian)::

    header   magic "NFAB" | u16 version | u16 flags | 32s schema sha256
             | u32 depth | u32 payload length
    layout   depth x (u16 criterion | u16 partner or 0xFFFF | u8 op | 3x pad)
    u32      crc32 of header + layout
    payload  schema text, dictionaries, level tables, terminals, decisions
    u32      crc32 of payload

The encoding is canonical: serialising a deserialised image reproduces the
input bytes exactly.
"""
from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .model import RuleSchema
from .nfa import CriterionDictionary, Dictionary, Level, Nfa, Op

MAGIC = b"NFAB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHH32sII")
_LAYOUT = struct.Struct("<HHB3x")
_U32 = struct.Struct("<I")
_NO_PARTNER = 0xFFFF
FLAG_MERGED = 1


class NfabError(ValueError):
    pass


class TruncatedError(NfabError):
    pass


class FormatError(NfabError):
    pass


class VersionError(NfabError):
    pass


class SchemaHashError(NfabError):
    pass


class ChecksumError(NfabError):
    pass


# ---------------------------------------------------------------- writing

def _str(out: list, s: str) -> None:
    b = s.encode("utf-8")
    out.append(_U32.pack(len(b)))
    out.append(b)


def _arr(out: list, a: np.ndarray, dtype: str) -> None:
    out.append(np.ascontiguousarray(a, dtype=dtype).tobytes())


def _dictionary(out: list, d: CriterionDictionary) -> None:
    is_str = bool(d.keys) and isinstance(d.keys[0], str)
    out.append(struct.pack("<BBI", int(d.symbolic), int(is_str), len(d.keys)))
    if is_str:
        for k in d.keys:
            _str(out, k)
    else:
        _arr(out, np.array(d.keys, dtype=np.int64), "<i8")


def _decision(out: list, value) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        out.append(b"\x02")
        _str(out, json.dumps(value, sort_keys=True))
    elif isinstance(value, int):
        out.append(b"\x00" + struct.pack("<q", value))
    else:
        out.append(b"\x01")
        _str(out, value)


def serialize_nfa(nfa: Nfa) -> bytes:
    payload: list[bytes] = []
    _str(payload, "\n".join(nfa.schema.header_lines()))
    for d in nfa.dictionary.criteria:
        _dictionary(payload, d)
    for lv in nfa.levels:
        payload.append(_U32.pack(lv.transitions))
        _arr(payload, lv.src, "<u4")
        _arr(payload, lv.label, "<u4")
        if lv.op is Op.BETWEEN:
            _arr(payload, lv.label_hi, "<u4")
        _arr(payload, lv.dst, "<u4")
    terms = len(nfa.term_offsets) - 1
    payload.append(_U32.pack(terms))
    _arr(payload, nfa.term_offsets, "<u8")
    payload.append(_U32.pack(nfa.rule_count))
    _arr(payload, nfa.entry_rule, "<u8")
    _arr(payload, nfa.entry_fragment, "<i8")
    _arr(payload, nfa.entry_weight, "<u8")
    _arr(payload, nfa.entry_decision, "<u4")
    payload.append(_U32.pack(len(nfa.decisions)))
    for dec in nfa.decisions:
        _decision(payload, dec)
    body = b"".join(payload)

    head = [_HEADER.pack(MAGIC, FORMAT_VERSION, FLAG_MERGED if nfa.merged else 0,
                         bytes.fromhex(nfa.schema.hash), nfa.depth, len(body))]
    for lv in nfa.levels:
        partner = lv.criteria[1] if len(lv.criteria) > 1 else _NO_PARTNER
        head.append(_LAYOUT.pack(lv.criteria[0], partner, int(lv.op)))
    header = b"".join(head)
    return b"".join([header, _U32.pack(zlib.crc32(header)), body, _U32.pack(zlib.crc32(body))])


# ---------------------------------------------------------------- reading

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("payload section overruns its declared length")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def arr(self, n: int, dtype: str, as_type) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(n * width), dtype=dtype).astype(as_type)


def read_header(data: bytes) -> dict:
    """Validate and decode the fixed header and level layout."""
    if len(data) < _HEADER.size:
        raise TruncatedError(f"image is {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, flags, digest, depth, payload_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}")
    layout_end = _HEADER.size + depth * _LAYOUT.size
    if len(data) < layout_end + 4:
        raise TruncatedError("image ends inside the level layout")
    (crc,) = _U32.unpack_from(data, layout_end)
    if crc != zlib.crc32(data[:layout_end]):
        raise ChecksumError("header checksum mismatch")
    if flags & ~FLAG_MERGED:
        raise FormatError(f"unknown flags {flags:#x}")
    layout = [_LAYOUT.unpack_from(data, _HEADER.size + i * _LAYOUT.size) for i in range(depth)]
    return {
        "merged": bool(flags & FLAG_MERGED),
        "schema_hash": digest.hex(),
        "depth": depth,
        "payload_len": payload_len,
        "payload_start": layout_end + 4,
        "layout": layout,
    }


def _parse_schema(text: str, parse_ruleset) -> RuleSchema:
    lines = text.split("\n")
    if lines[-1] == "" and all(line.startswith("#!") for line in lines[:-1]):
        # criteria-free schema of an empty image: pragmas only
        pragmas = dict(line[2:].strip().partition("=")[::2] for line in lines[:-1])
        return RuleSchema((), pragmas.get("version", "v2"))
    try:
        return parse_ruleset(text)[0]
    except ValueError as exc:
        raise FormatError(f"embedded schema: {exc}") from None


def deserialize_nfa(data: bytes, expected_schema_hash: str | None = None) -> Nfa:
    from .ruleset import parse_ruleset

    data = bytes(data)
    head = read_header(data)
    if expected_schema_hash is not None and head["schema_hash"] != expected_schema_hash:
        raise SchemaHashError(
            f"image schema {head['schema_hash'][:12]} does not match expected {expected_schema_hash[:12]}"
        )
    start, n = head["payload_start"], head["payload_len"]
    end = start + n
    if len(data) < end + 4:
        raise TruncatedError(f"image truncated: {len(data)} of {end + 4} bytes")
    if len(data) > end + 4:
        raise FormatError("trailing bytes after payload checksum")
    body = data[start:end]
    if _U32.unpack_from(data, end)[0] != zlib.crc32(body):
        raise ChecksumError("payload checksum mismatch")

    r = _Reader(body)
    schema = _parse_schema(r.str(), parse_ruleset)
    if schema.hash != head["schema_hash"]:
        raise SchemaHashError("embedded schema does not match the header schema hash")

    dicts = []
    for _ in range(len(schema)):
        symbolic, is_str, count = struct.unpack("<BBI", r.take(6))
        if is_str:
            keys = tuple(r.str() for _ in range(count))
        else:
            keys = tuple(int(k) for k in r.arr(count, "<i8", np.int64))
        dicts.append(CriterionDictionary(bool(symbolic), keys))

    levels = []
    for crit, partner, op in head["layout"]:
        op = Op(op)
        unit = (crit,) if partner == _NO_PARTNER else (crit, partner)
        if max(unit) >= len(schema):
            raise FormatError(f"level layout references criterion {max(unit)}")
        t = r.u32()
        src = r.arr(t, "<u4", np.uint32)
        label = r.arr(t, "<u4", np.uint32)
        label_hi = r.arr(t, "<u4", np.uint32) if op is Op.BETWEEN else np.zeros(t, dtype=np.uint32)
        dst = r.arr(t, "<u4", np.uint32)
        levels.append(Level(unit, op, schema[crit].field, src, label, label_hi, dst))

    terms = r.u32()
    offsets = r.arr(terms + 1, "<u8", np.int64)
    entries = r.u32()
    rule = r.arr(entries, "<u8", np.int64)
    frag = r.arr(entries, "<i8", np.int64)
    weight = r.arr(entries, "<u8", np.int64)
    dec = r.arr(entries, "<u4", np.int64)
    decisions = []
    for _ in range(r.u32()):
        tag = r.take(1)
        if tag == b"\x00":
            decisions.append(struct.unpack("<q", r.take(8))[0])
        elif tag == b"\x01":
            decisions.append(r.str())
        elif tag == b"\x02":
            decisions.append(json.loads(r.str()))
        else:
            raise FormatError(f"unknown decision tag {tag!r}")
    if r.pos != len(body):
        raise FormatError("payload has unread bytes")
    if offsets[-1] != entries or (len(dec) and dec.max() >= len(decisions)):
        raise FormatError("terminal tables are inconsistent")

    order = tuple(i for lv in levels for i in lv.criteria)
    return Nfa(schema, Dictionary(tuple(dicts)), order, head["merged"], tuple(levels),
               offsets, rule, frag, weight, dec, tuple(decisions))


def save_nfa(path, nfa: Nfa) -> None:
    from .ruleset import atomic_write

    atomic_write(path, serialize_nfa(nfa))


def load_nfa(path, expected_schema_hash: str | None = None) -> Nfa:
    with open(path, "rb") as fh:
        return deserialize_nfa(fh.read(), expected_schema_hash)
