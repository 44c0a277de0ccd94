"""Rule schemas, rules, queries and precision-weight matching.

A rule is a row of criterion values (wildcard, exact symbol or integer
range) plus an opaque decision. A query supplies one concrete value per
query field; the most precise matching rule wins, where precision is the
sum of the per-criterion weights of the rule's non-wildcard values.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np

Symbol = Union[str, int]
Query = Mapping[str, Symbol]

DEFAULT_MAX_CRITERIA = 64
PRECISION_TAGS = ("Low", "Middle", "High")


class SchemaError(ValueError):
    """Invalid schema declaration."""


class RuleError(ValueError):
    """Rule does not conform to its schema."""


class SchemaMismatchError(RuleError):
    """Rule or batch width differs from the schema."""


class Kind(str, Enum):
    EXACT = "exact-match"
    RANGE_MIN = "range-min"
    RANGE_MAX = "range-max"
    PAIR = "pair-range"

    @property
    def is_bound(self) -> bool:
        return self in (Kind.RANGE_MIN, Kind.RANGE_MAX)


@dataclass(frozen=True)
class IntDomain:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise SchemaError(f"empty integer domain {self.lo}..{self.hi}")

    def __contains__(self, value) -> bool:
        return _is_int(value) and self.lo <= value <= self.hi

    def __str__(self) -> str:
        return f"{self.lo}..{self.hi}"


class _Wildcard:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "*"

    def __reduce__(self):
        return (_Wildcard, ())


WILDCARD = _Wildcard()


@dataclass(frozen=True)
class Exact:
    value: Symbol

    def __repr__(self) -> str:
        return f"Exact({self.value!r})"


@dataclass(frozen=True)
class Range:
    lo: int
    hi: int

    def __post_init__(self):
        if not (_is_int(self.lo) and _is_int(self.hi)):
            raise RuleError(f"range bounds must be integers: {self.lo!r}..{self.hi!r}")
        if self.lo > self.hi:
            raise RuleError(f"malformed range {self.lo}..{self.hi}")

    @property
    def span(self) -> int:
        return self.hi - self.lo + 1

    def __contains__(self, value) -> bool:
        return _is_int(value) and self.lo <= value <= self.hi

    def __repr__(self) -> str:
        return f"Range({self.lo}, {self.hi})"


CriterionValue = Union[_Wildcard, Exact, Range]


def _is_int(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


@dataclass(frozen=True)
class CriterionDecl:
    """One criterion of a rule schema.

    ``source`` names the query field the criterion is tested against; it
    defaults to the criterion name. Split range bounds share the source of
    the pair they came from.
    """

    name: str
    kind: Kind
    weight: int
    domain: IntDomain | tuple[Symbol, ...] | None = None
    wildcard_allowed: bool = True
    source: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not self.name or not self.name.replace("_", "a").isalnum():
            raise SchemaError(f"invalid criterion name {self.name!r}")
        if not _is_int(self.weight) or self.weight < 1:
            raise SchemaError(f"{self.name}: intrinsic weight must be >= 1, got {self.weight!r}")
        if self.kind is not Kind.EXACT and not isinstance(self.domain, IntDomain):
            raise SchemaError(f"{self.name}: {self.kind.value} requires an integer domain")
        if isinstance(self.domain, (list, frozenset, set)):
            object.__setattr__(self, "domain", tuple(sorted(self.domain, key=symbol_order)))

    @property
    def field(self) -> str:
        return self.source or self.name

    def admits(self, symbol) -> bool:
        if self.domain is None:
            return isinstance(symbol, str) or _is_int(symbol)
        return symbol in self.domain


@dataclass(frozen=True)
class CrossCarrier:
    """Marketing/operating carrier pair whose matching depends on a code-share indicator.

    Without the indicator the rule's marketing carrier stands for both
    carriers and is tested against the query's operating carrier.
    """

    marketing: str
    operating: str
    indicator: str
    yes: str = "Y"


@dataclass(frozen=True)
class CrossFlight:
    """Flight-number range tested against the marketing or operating flight number.

    ``flight`` names a pair-range criterion, or the range-min half of a
    split pair.
    """

    flight: str
    indicator: str
    yes: str = "Y"
    marketing_field: str = "marketing_flight_no"
    operating_field: str = "operating_flight_no"


@dataclass(frozen=True)
class RuleSchema:
    criteria: tuple[CriterionDecl, ...]
    version: str = "v2"
    cross_carrier: CrossCarrier | None = None
    cross_flight: CrossFlight | None = None
    max_criteria: int = field(default=DEFAULT_MAX_CRITERIA, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "criteria", tuple(self.criteria))
        if self.version not in ("v1", "v2"):
            raise SchemaError(f"unknown schema version {self.version!r}")
        names = [c.name for c in self.criteria]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate criterion names: {', '.join(dup)}")
        if len(names) > self.max_criteria:
            raise SchemaError(f"{len(names)} criteria exceed the maximum of {self.max_criteria}")
        if self.version == "v2" and any(c.kind is Kind.PAIR for c in self.criteria):
            raise SchemaError("v2 schemas cannot contain pair-range criteria")
        index = {n: i for i, n in enumerate(names)}
        object.__setattr__(self, "_index", index)
        cc = self.cross_carrier
        if cc is not None:
            for n in (cc.marketing, cc.operating, cc.indicator):
                if n not in index:
                    raise SchemaError(f"cross-carrier criterion {n!r} not in schema")
            if self[cc.indicator].wildcard_allowed:
                raise SchemaError(f"code-share indicator {cc.indicator!r} must not allow wildcards")
        cf = self.cross_flight
        if cf is not None:
            for n in (cf.flight, cf.indicator):
                if n not in index:
                    raise SchemaError(f"cross-flight criterion {n!r} not in schema")
            if self[cf.indicator].wildcard_allowed:
                raise SchemaError(f"code-share indicator {cf.indicator!r} must not allow wildcards")
            if self[cf.flight].kind not in (Kind.PAIR, Kind.RANGE_MIN):
                raise SchemaError(f"cross-flight criterion {cf.flight!r} must be a range")

    def __len__(self) -> int:
        return len(self.criteria)

    def __iter__(self):
        return iter(self.criteria)

    def __getitem__(self, key: int | str) -> CriterionDecl:
        if isinstance(key, str):
            return self.criteria[self._index[key]]
        return self.criteria[key]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.criteria]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise SchemaError(f"no criterion named {name!r}") from None

    def pair_partner(self, i: int) -> int | None:
        """Index of the other half of a split range pair, if ``i`` belongs to one."""
        c = self.criteria[i]
        if c.kind is Kind.RANGE_MIN and i + 1 < len(self) and self.criteria[i + 1].kind is Kind.RANGE_MAX:
            return i + 1
        if c.kind is Kind.RANGE_MAX and i > 0 and self.criteria[i - 1].kind is Kind.RANGE_MIN:
            return i - 1
        return None

    def range_units(self) -> list[tuple[int, ...]]:
        """Criteria grouped into weight units: split pairs form one unit."""
        units, i = [], 0
        while i < len(self):
            j = self.pair_partner(i)
            if j == i + 1:
                units.append((i, j))
                i += 2
            else:
                units.append((i,))
                i += 1
        return units

    @property
    def fields(self) -> list[str]:
        """Query fields this schema reads, in first-use order."""
        out = []
        for c in self.criteria:
            if c.field not in out:
                out.append(c.field)
        cf = self.cross_flight
        if cf is not None:
            for f in (cf.marketing_field, cf.operating_field):
                if f not in out:
                    out.append(f)
        return out

    def header_lines(self) -> list[str]:
        """Canonical textual declaration (pragmas then the criteria header)."""
        lines = [f"#! version={self.version}"]
        if self.cross_carrier:
            cc = self.cross_carrier
            lines.append(f"#! cross-carrier={cc.marketing},{cc.operating},{cc.indicator},{cc.yes}")
        if self.cross_flight:
            cf = self.cross_flight
            lines.append(
                f"#! cross-flight={cf.flight},{cf.indicator},{cf.yes},"
                f"{cf.marketing_field},{cf.operating_field}"
            )
        lines.append("|".join(_decl_text(c) for c in self.criteria))
        return lines

    @property
    def hash(self) -> str:
        h = hashlib.sha256("\n".join(self.header_lines()).encode("utf-8"))
        return h.hexdigest()

    def validate_rule(self, rule: "Rule") -> None:
        if len(rule.values) != len(self.criteria):
            raise SchemaMismatchError(
                f"rule {rule.id}: {len(rule.values)} values for {len(self.criteria)} criteria"
            )
        for c, v in zip(self.criteria, rule.values):
            if v is WILDCARD:
                if not c.wildcard_allowed:
                    raise RuleError(f"rule {rule.id}: {c.name} does not accept wildcards")
            elif isinstance(v, Range):
                if c.kind is not Kind.PAIR:
                    raise RuleError(f"rule {rule.id}: {c.name} ({c.kind.value}) cannot hold a range")
                if v.lo not in c.domain or v.hi not in c.domain:
                    raise RuleError(f"rule {rule.id}: {c.name} range {v.lo}..{v.hi} outside {c.domain}")
            elif isinstance(v, Exact):
                if c.kind is Kind.PAIR:
                    raise RuleError(f"rule {rule.id}: {c.name} expects a range")
                if not c.admits(v.value):
                    raise RuleError(f"rule {rule.id}: {c.name} value {v.value!r} outside domain")
            else:
                raise RuleError(f"rule {rule.id}: bad value {v!r} for {c.name}")
        for i, j in (u for u in self.range_units() if len(u) == 2):
            lo, hi = rule.values[i], rule.values[j]
            if isinstance(lo, Exact) and isinstance(hi, Exact) and lo.value > hi.value:
                raise RuleError(f"rule {rule.id}: malformed range {lo.value}..{hi.value}")


def _decl_text(c: CriterionDecl) -> str:
    parts = [c.name, c.kind.value, str(c.weight)]
    dom = ""
    if isinstance(c.domain, IntDomain):
        dom = str(c.domain)
    elif c.domain is not None:
        dom = ",".join(str(s) for s in c.domain)
    extra = [dom, c.source or "", "" if c.wildcard_allowed else "nowild"]
    while extra and not extra[-1]:
        extra.pop()
    return ":".join(parts + extra)


def symbol_order(symbol):
    """Sort key putting integers (numerically) before strings (lexicographically)."""
    if _is_int(symbol):
        return (0, int(symbol), "")
    return (1, 0, str(symbol))


@dataclass(frozen=True)
class Rule:
    id: int
    values: tuple[CriterionValue, ...]
    decision: Any
    precision_tag: str | None = None
    # provenance of de-overlap fragments; matching ties still use ``id``
    fragment: int | None = None
    # weight inherited from the rule a fragment was cut from
    pinned_weight: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if not _is_int(self.id) or self.id < 0:
            raise RuleError(f"rule id must be a non-negative integer, got {self.id!r}")
        if self.precision_tag is not None and self.precision_tag not in PRECISION_TAGS:
            raise RuleError(f"rule {self.id}: unknown precision tag {self.precision_tag!r}")

    def with_values(self, values: Sequence[CriterionValue], **changes) -> "Rule":
        kw = dict(
            id=self.id,
            decision=self.decision,
            precision_tag=self.precision_tag,
            fragment=self.fragment,
            pinned_weight=self.pinned_weight,
        )
        kw.update(changes)
        return Rule(values=tuple(values), **kw)


@dataclass(frozen=True)
class MatchResult:
    rule_id: int | None = None
    decision: Any = None
    weight: int = 0
    fragment: int | None = None

    def __post_init__(self):
        if self.rule_id is None and (self.decision is not None or self.weight != 0):
            raise ValueError("NoMatch carries neither decision nor weight")
        if self.rule_id is not None and self.decision is None:
            raise ValueError("a match must carry a decision")

    @property
    def matched(self) -> bool:
        return self.rule_id is not None

    def key(self) -> tuple:
        return (self.rule_id, self.decision, self.weight)


NO_MATCH = MatchResult()


# ---------------------------------------------------------------- weights

def range_weight(intrinsic: int, lo: int, hi: int) -> int:
    """Precision of a range: the intrinsic weight less ceil(log2(span)), floored at 1."""
    if hi < lo:
        raise RuleError(f"malformed range {lo}..{hi}")
    return max(1, intrinsic - (hi - lo).bit_length())


def _effective_values(rule: Rule, schema: RuleSchema) -> tuple:
    cc = schema.cross_carrier
    values = rule.values
    if cc is not None and not _is_codeshare(rule, schema, cc.indicator, cc.yes):
        values = list(values)
        values[schema.index(cc.operating)] = values[schema.index(cc.marketing)]
    return values


def rule_weight(rule: Rule, schema: RuleSchema) -> int:
    if len(rule.values) != len(schema):
        raise SchemaMismatchError(f"rule {rule.id}: {len(rule.values)} values for {len(schema)} criteria")
    if rule.pinned_weight is not None:
        return rule.pinned_weight
    values = _effective_values(rule, schema)
    total = 0
    for unit in schema.range_units():
        c = schema[unit[0]]
        if len(unit) == 2:
            lo, hi = values[unit[0]], values[unit[1]]
            if lo is WILDCARD and hi is WILDCARD:
                continue
            lo_v = c.domain.lo if lo is WILDCARD else lo.value
            hi_v = schema[unit[1]].domain.hi if hi is WILDCARD else hi.value
            total += range_weight(c.weight, lo_v, hi_v)
            continue
        v = values[unit[0]]
        if v is WILDCARD:
            continue
        if isinstance(v, Range):
            total += range_weight(c.weight, v.lo, v.hi)
        elif c.kind is Kind.RANGE_MIN:
            total += range_weight(c.weight, v.value, c.domain.hi)
        elif c.kind is Kind.RANGE_MAX:
            total += range_weight(c.weight, c.domain.lo, v.value)
        else:
            total += c.weight
    return total


def precision_key(rule: Rule, weight: int) -> tuple:
    """Sort key: heavier first, then lower id, then lower fragment."""
    frag = -1 if rule.fragment is None else rule.fragment
    return (-weight, rule.id, frag)


# ---------------------------------------------------------------- matching

def _is_codeshare(rule: Rule, schema: RuleSchema, indicator: str, yes: str) -> bool:
    v = rule.values[schema.index(indicator)]
    return isinstance(v, Exact) and v.value == yes


def value_matches(kind: Kind, value: CriterionValue, q) -> bool:
    if value is WILDCARD:
        return True
    if isinstance(value, Range):
        return _is_int(q) and value.lo <= q <= value.hi
    if kind is Kind.EXACT:
        if _is_int(value.value):
            return _is_int(q) and q == value.value
        return isinstance(q, str) and q == value.value
    if not _is_int(q):
        return False
    if kind is Kind.RANGE_MIN:
        return q >= value.value
    return q <= value.value


def _routing(rule: Rule, schema: RuleSchema) -> list[str | None]:
    """Query field each criterion of ``rule`` reads (None: criterion ignored)."""
    fields: list[str | None] = [c.field for c in schema.criteria]
    cc = schema.cross_carrier
    if cc is not None and not _is_codeshare(rule, schema, cc.indicator, cc.yes):
        fields[schema.index(cc.marketing)] = schema[cc.operating].field
        fields[schema.index(cc.operating)] = None
    cf = schema.cross_flight
    if cf is not None:
        f = cf.marketing_field if _is_codeshare(rule, schema, cf.indicator, cf.yes) else cf.operating_field
        i = schema.index(cf.flight)
        fields[i] = f
        j = schema.pair_partner(i)
        if j is not None:
            fields[j] = f
    return fields


def rule_matches(rule: Rule, query: Query, schema: RuleSchema) -> bool:
    for c, v, f in zip(schema.criteria, rule.values, _routing(rule, schema)):
        if v is WILDCARD or f is None:
            continue
        if not value_matches(c.kind, v, query[f]):
            return False
    return True


def oracle_match(query: Query, rules: Iterable[Rule], schema: RuleSchema) -> MatchResult:
    """Linear-scan reference matcher: most precise matching rule, ties to lowest id."""
    best, best_key = None, None
    for rule in rules:
        if not rule_matches(rule, query, schema):
            continue
        w = rule_weight(rule, schema)
        k = precision_key(rule, w)
        if best_key is None or k < best_key:
            best, best_key = rule, k
    if best is None:
        return NO_MATCH
    return MatchResult(best.id, best.decision, -best_key[0], best.fragment)


# ---------------------------------------------------------------- columnar queries

class QueryColumns:
    """Column-oriented table of raw (unencoded) queries keyed by query field."""

    def __init__(self, columns: Mapping[str, Any], n: int | None = None):
        cols = {k: _as_column(v) for k, v in columns.items()}
        lengths = {len(v) for v in cols.values()}
        if n is None:
            if len(lengths) != 1:
                raise ValueError("columns must be non-empty and of equal length")
            n = lengths.pop()
        elif lengths and lengths != {n}:
            raise ValueError("column lengths differ from n")
        self.columns = cols
        self.n = n

    @classmethod
    def from_queries(cls, queries: Sequence[Query], fields: Sequence[str]) -> "QueryColumns":
        return cls({f: [q[f] for q in queries] for f in fields}, n=len(queries))

    @classmethod
    def concat(cls, parts: Sequence["QueryColumns"]) -> "QueryColumns":
        parts = [p for p in parts if p.n]
        if not parts:
            return cls({}, n=0)
        if len(parts) == 1:
            return parts[0]
        keys = parts[0].columns.keys()
        return cls({k: np.concatenate([p.columns[k] for p in parts]) for k in keys},
                   n=sum(p.n for p in parts))

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def take(self, index) -> "QueryColumns":
        sub = {k: v[index] for k, v in self.columns.items()}
        n = len(next(iter(sub.values()))) if sub else len(np.arange(self.n)[index])
        return QueryColumns(sub, n=n)

    def row(self, i: int) -> dict:
        return {k: v[i].item() for k, v in self.columns.items()}

    def rows(self) -> list[dict]:
        lists = {k: v.tolist() for k, v in self.columns.items()}
        return [{k: lists[k][i] for k in lists} for i in range(self.n)]


def _as_column(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind in "iu":
        return arr.astype(np.int64, copy=False)
    if arr.dtype.kind in "U":
        return arr
    if arr.dtype.kind == "O" and all(_is_int(v) for v in arr):
        return arr.astype(np.int64)
    return arr.astype(str)


class MatchColumns:
    """Array form of a batch of match results (rule id -1 means NoMatch)."""

    def __init__(self, rule_id, weight, fragment, decision):
        self.rule_id = np.asarray(rule_id, dtype=np.int64)
        self.weight = np.asarray(weight, dtype=np.int64)
        self.fragment = np.asarray(fragment, dtype=np.int64)
        self.decision = np.asarray(decision, dtype=object)

    @classmethod
    def empty(cls, n: int) -> "MatchColumns":
        return cls(np.full(n, -1), np.zeros(n), np.full(n, -1), np.full(n, None, dtype=object))

    @classmethod
    def concat(cls, parts: Sequence["MatchColumns"]) -> "MatchColumns":
        if not parts:
            return cls.empty(0)
        return cls(*(np.concatenate([getattr(p, a) for p in parts])
                     for a in ("rule_id", "weight", "fragment", "decision")))

    def __len__(self) -> int:
        return len(self.rule_id)

    def take(self, index) -> "MatchColumns":
        return MatchColumns(self.rule_id[index], self.weight[index], self.fragment[index], self.decision[index])

    def results(self) -> list[MatchResult]:
        out = []
        for rid, w, frag, dec in zip(self.rule_id.tolist(), self.weight.tolist(),
                                     self.fragment.tolist(), self.decision.tolist()):
            if rid < 0:
                out.append(NO_MATCH)
            else:
                out.append(MatchResult(rid, dec, w, None if frag < 0 else frag))
        return out

    def keys(self) -> list[tuple]:
        return [r.key() for r in self.results()]

    def same_as(self, other: "MatchColumns") -> bool:
        return (
            len(self) == len(other)
            and np.array_equal(self.rule_id, other.rule_id)
            and np.array_equal(self.weight, other.weight)
            and all(a == b for a, b in zip(self.decision.tolist(), other.decision.tolist()))
        )


def _column_mask(kind: Kind, value: CriterionValue, col: np.ndarray) -> np.ndarray | None:
    """Vectorised ``value_matches``; None stands for all-true."""
    if value is WILDCARD:
        return None
    numeric = col.dtype.kind == "i"
    if isinstance(value, Range):
        if not numeric:
            return np.zeros(len(col), dtype=bool)
        return (col >= value.lo) & (col <= value.hi)
    v = value.value
    if kind is Kind.EXACT:
        if numeric != _is_int(v):
            return np.zeros(len(col), dtype=bool)
        return col == v
    if not numeric:
        return np.zeros(len(col), dtype=bool)
    return col >= v if kind is Kind.RANGE_MIN else col <= v


def oracle_match_columns(table: QueryColumns, rules: Sequence[Rule], schema: RuleSchema) -> MatchColumns:
    """Rule-major linear scan over a query table; same semantics as :func:`oracle_match`.

    Rules are visited in precision order and each query keeps the first rule
    that matches it.
    """
    n = len(table)
    out = MatchColumns.empty(n)
    if n == 0:
        return out
    ranked = sorted(((precision_key(r, rule_weight(r, schema)), r) for r in rules), key=lambda t: t[0])
    open_ = np.ones(n, dtype=bool)
    for key, rule in ranked:
        mask = open_.copy()
        for c, v, f in zip(schema.criteria, rule.values, _routing(rule, schema)):
            if f is None:
                continue
            m = _column_mask(c.kind, v, table[f])
            if m is not None:
                mask &= m
                if not mask.any():
                    break
        if not mask.any():
            continue
        out.rule_id[mask] = rule.id
        out.weight[mask] = -key[0]
        out.fragment[mask] = -1 if rule.fragment is None else rule.fragment
        out.decision[mask] = rule.decision
        open_ &= ~mask
        if not open_.any():
            break
    return out
