"""Line-oriented rule-set text format.

::

    # comment
    #! version=v1
    #! cross-carrier=marketing_carrier,operating_carrier,code_share,Y
    station:exact-match:8|flight:pair-range:20:1..9999:operating_flight_no
    0|ZRH|700..1000|45|High
    3/1@17|CDG|801..1000|30

The first non-comment line declares the criteria as ``name:kind:weight``
with optional ``:domain:source:nowild`` suffixes. Each following line is
``id[/fragment][@weight]|value...|decision[|precision-tag]`` where a value
is ``*``, ``lo..hi`` or a symbol. ``#!`` lines are pragmas.
"""
from __future__ import annotations

import os
import re
import tempfile
from pathlib import Path
from typing import Sequence

from .model import (
    PRECISION_TAGS,
    WILDCARD,
    CriterionDecl,
    CrossCarrier,
    CrossFlight,
    Exact,
    IntDomain,
    Kind,
    Range,
    Rule,
    RuleError,
    RuleSchema,
    SchemaError,
)

_INT = re.compile(r"^-?\d+$")
_RANGE = re.compile(r"^(-?\d+)\.\.(-?\d+)$")
_ID = re.compile(r"^(\d+)(?:/(\d+))?(?:@(\d+))?$")
_FORBIDDEN = set("|:*#\n\r,")


class RuleSetParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


def _symbol(text: str):
    return int(text) if _INT.match(text) else text


def parse_decl(text: str) -> CriterionDecl:
    parts = text.strip().split(":")
    if len(parts) < 3 or len(parts) > 6:
        raise SchemaError(f"criterion declaration {text!r} is not name:kind:weight[:domain[:source[:nowild]]]")
    name, kind, weight = (p.strip() for p in parts[:3])
    if not _INT.match(weight):
        raise SchemaError(f"{name}: weight {weight!r} is not an integer")
    try:
        kind = Kind(kind)
    except ValueError:
        raise SchemaError(f"{name}: unknown kind {kind!r}") from None
    domain = None
    if len(parts) > 3 and parts[3].strip():
        d = parts[3].strip()
        m = _RANGE.match(d)
        if m:
            domain = IntDomain(int(m.group(1)), int(m.group(2)))
        else:
            domain = tuple(_symbol(s.strip()) for s in d.split(",") if s.strip())
    source = parts[4].strip() if len(parts) > 4 and parts[4].strip() else None
    flags = parts[5].strip() if len(parts) > 5 else ""
    if flags not in ("", "nowild"):
        raise SchemaError(f"{name}: unknown flag {flags!r}")
    return CriterionDecl(name, kind, int(weight), domain, flags != "nowild", source)


def _parse_value(text: str, decl: CriterionDecl):
    if text == "*":
        return WILDCARD
    m = _RANGE.match(text)
    if m:
        return Range(int(m.group(1)), int(m.group(2)))
    if decl.kind is not Kind.EXACT or isinstance(decl.domain, IntDomain):
        if not _INT.match(text):
            raise RuleError(f"{decl.name}: expected an integer, got {text!r}")
        return Exact(int(text))
    if isinstance(decl.domain, tuple) and all(isinstance(s, int) for s in decl.domain) and _INT.match(text):
        return Exact(int(text))
    return Exact(text)


def _parse_decision(text: str):
    return int(text) if _INT.match(text) else text


def parse_ruleset(text: str) -> tuple[RuleSchema, list[Rule]]:
    pragmas: dict[str, str] = {}
    schema = None
    rules: list[Rule] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#!"):
            if schema is not None:
                raise RuleSetParseError(lineno, "pragmas must precede the schema header")
            key, sep, value = line[2:].strip().partition("=")
            if not sep:
                raise RuleSetParseError(lineno, f"malformed pragma {line!r}")
            pragmas[key.strip()] = value.strip()
            continue
        if line.startswith("#"):
            continue
        try:
            if schema is None:
                schema = _schema_from(line, pragmas)
            else:
                rules.append(_parse_rule(line, schema))
        except (SchemaError, RuleError) as exc:
            raise RuleSetParseError(lineno, str(exc)) from None
    if schema is None:
        raise RuleSetParseError(0, "missing schema header")
    return schema, rules


def _schema_from(line: str, pragmas: dict[str, str]) -> RuleSchema:
    criteria = tuple(parse_decl(d) for d in line.split("|"))
    version = pragmas.get("version")
    if version is None:
        version = "v1" if any(c.kind is Kind.PAIR for c in criteria) else "v2"
    cc = cf = None
    if "cross-carrier" in pragmas:
        parts = [p.strip() for p in pragmas["cross-carrier"].split(",")]
        if len(parts) not in (3, 4):
            raise SchemaError("cross-carrier pragma needs marketing,operating,indicator[,yes]")
        cc = CrossCarrier(*parts)
    if "cross-flight" in pragmas:
        parts = [p.strip() for p in pragmas["cross-flight"].split(",")]
        if len(parts) not in (2, 3, 5):
            raise SchemaError("cross-flight pragma needs flight,indicator[,yes[,marketing_field,operating_field]]")
        cf = CrossFlight(*parts)
    unknown = set(pragmas) - {"version", "cross-carrier", "cross-flight"}
    if unknown:
        raise SchemaError(f"unknown pragma(s): {', '.join(sorted(unknown))}")
    return RuleSchema(criteria, version, cc, cf)


def _parse_rule(line: str, schema: RuleSchema) -> Rule:
    fields = [f.strip() for f in line.split("|")]
    n = len(schema)
    if len(fields) not in (n + 2, n + 3):
        raise RuleError(f"expected {n + 2} or {n + 3} fields, found {len(fields)}")
    m = _ID.match(fields[0])
    if not m:
        raise RuleError(f"malformed rule id {fields[0]!r}")
    rid, frag, pinned = (None if g is None else int(g) for g in m.groups())
    values = tuple(_parse_value(t, c) for t, c in zip(fields[1:n + 1], schema.criteria))
    tag = fields[n + 2] if len(fields) == n + 3 else None
    if tag is not None and tag not in PRECISION_TAGS:
        raise RuleError(f"unknown precision tag {tag!r}")
    if not fields[n + 1]:
        raise RuleError("empty decision")
    rule = Rule(rid, values, _parse_decision(fields[n + 1]), tag, frag, pinned)
    schema.validate_rule(rule)
    return rule


def _value_text(v) -> str:
    if v is WILDCARD:
        return "*"
    if isinstance(v, Range):
        return f"{v.lo}..{v.hi}"
    return _checked(str(v.value))


def _checked(text: str) -> str:
    if not text or _FORBIDDEN & set(text) or ".." in text or text != text.strip():
        raise ValueError(f"symbol {text!r} cannot be written in the rule-set format")
    return text


def format_rule(rule: Rule) -> str:
    head = str(rule.id)
    if rule.fragment is not None:
        head += f"/{rule.fragment}"
    if rule.pinned_weight is not None:
        head += f"@{rule.pinned_weight}"
    fields = [head, *(_value_text(v) for v in rule.values), _checked(str(rule.decision))]
    if rule.precision_tag:
        fields.append(rule.precision_tag)
    return "|".join(fields)


def format_ruleset(schema: RuleSchema, rules: Sequence[Rule]) -> str:
    lines = schema.header_lines()
    lines.extend(format_rule(r) for r in rules)
    return "\n".join(lines) + "\n"


def load_ruleset(path: str | os.PathLike) -> tuple[RuleSchema, list[Rule]]:
    return parse_ruleset(Path(path).read_text(encoding="utf-8"))


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_ruleset(path: str | os.PathLike, schema: RuleSchema, rules: Sequence[Rule]) -> None:
    atomic_write(path, format_ruleset(schema, rules))
