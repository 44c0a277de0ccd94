"""Synthetic MCT rule sets and small hand-built fixtures.

The default schema has 22 declared criteria: 17 exact-match criteria, a
validity-day pair range, the marketing/operating carrier pair with its
code-share flag, and a flight-number pair range. Splitting both ranges and
adding the code-share flight range gives 26 criteria after transformation.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, fields

import numpy as np

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
    RuleSchema,
    SchemaError,
)

# name, intrinsic weight, symbol prefix (None: integer 1..cardinality)
_EXACT_NAMES = (
    ("station", 30, "AP"),
    ("arr_terminal", 6, "T"),
    ("dep_terminal", 6, "T"),
    ("arr_region", 9, "RG"),
    ("dep_region", 9, "RG"),
    ("prev_station", 12, "AP"),
    ("next_station", 12, "AP"),
    ("prev_country", 8, "C"),
    ("next_country", 8, "C"),
    ("arr_aircraft", 5, "EQ"),
    ("dep_aircraft", 5, "EQ"),
    ("arr_body", 3, "B"),
    ("dep_body", 3, "B"),
    ("arr_carrier", 14, "CR"),
    ("service_type", 2, "S"),
    ("connection_type", 10, "CT"),
    ("day_of_week", 4, None),
)
_RANGE_NAMES = (("validity", 12, IntDomain(0, 364), "travel_day"),)
FLIGHT_DOMAIN = IntDomain(1, 9999)
CARRIERS = tuple(f"{a}{b}" for a in "ABCDEFGH" for b in "XYZ")


@dataclass(frozen=True)
class SchemaSpec:
    """Shape of a synthetic rule set."""

    exact: int = 17
    pair_ranges: int = 1
    codeshare: bool = True
    cardinality: int = 12
    stations: int = 40
    wildcard_ratio: float = 0.6
    range_wildcard_ratio: float = 0.6
    flight_wildcard_ratio: float = 0.7
    codeshare_ratio: float = 0.2
    max_span: int = 1000

    def __post_init__(self):
        if self.exact < 1:
            raise SchemaError("spec needs at least one exact criterion (the station)")
        if self.pair_ranges < 0 or self.cardinality < 1 or self.stations < 1 or self.max_span < 0:
            raise SchemaError("spec counts must be non-negative and cardinalities positive")
        for name in ("wildcard_ratio", "range_wildcard_ratio", "flight_wildcard_ratio", "codeshare_ratio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SchemaError(f"{name} must lie in [0, 1]")
        if self.v2_width > 64:
            raise SchemaError(f"spec expands to {self.v2_width} criteria, above the limit of 64")

    @property
    def v1_width(self) -> int:
        return self.exact + self.pair_ranges + (4 if self.codeshare else 0)

    @property
    def v2_width(self) -> int:
        return self.exact + 2 * self.pair_ranges + (7 if self.codeshare else 0)

    @classmethod
    def parse(cls, text: str) -> "SchemaSpec":
        """``key=value`` pairs separated by commas, e.g. ``exact=5,pair_ranges=4``."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for item in filter(None, (p.strip() for p in text.split(","))):
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or key not in types:
                raise SchemaError(f"unknown spec entry {item!r}")
            t = types[key]
            if t in ("bool", bool):
                kwargs[key] = value.strip().lower() in ("1", "true", "yes", "on")
            elif t in ("float", float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


def _symbols(prefix: str | None, n: int, stations: int):
    if prefix is None:
        return tuple(range(1, n + 1))
    if prefix == "AP":
        return tuple(_airport(k) for k in range(stations))
    return tuple(f"{prefix}{k}" for k in range(n))


def _airport(k: int) -> str:
    a, r = divmod(k, 26 * 26)
    b, c = divmod(r, 26)
    return "".join(chr(ord("A") + x % 26) for x in (a, b, c))


def build_schema(spec: SchemaSpec = SchemaSpec()) -> RuleSchema:
    criteria = []
    for k in range(spec.exact):
        name, weight, prefix = _EXACT_NAMES[k] if k < len(_EXACT_NAMES) else (f"crit_{k}", 3, f"V{k}_")
        card = 7 if prefix is None else spec.cardinality
        dom = IntDomain(1, card) if prefix is None else _symbols(prefix, card, spec.stations)
        criteria.append(CriterionDecl(name, Kind.EXACT, weight, dom, k != 0))
    if spec.codeshare:
        carriers = CARRIERS[: max(2, min(len(CARRIERS), spec.cardinality))]
        criteria += [
            CriterionDecl("marketing_carrier", Kind.EXACT, 16, carriers),
            CriterionDecl("operating_carrier", Kind.EXACT, 15, carriers),
            CriterionDecl("code_share", Kind.EXACT, 1, ("N", "Y"), False),
            CriterionDecl("flight", Kind.PAIR, 20, FLIGHT_DOMAIN, True, "operating_flight_no"),
        ]
    for k in range(spec.pair_ranges):
        name, weight, dom, source = _RANGE_NAMES[k] if k < len(_RANGE_NAMES) else (f"range_{k}", 10, IntDomain(0, 999), None)
        criteria.append(CriterionDecl(name, Kind.PAIR, weight, dom, True, source))
    cc = cf = None
    if spec.codeshare:
        cc = CrossCarrier("marketing_carrier", "operating_carrier", "code_share")
        cf = CrossFlight("flight", "code_share")
    return RuleSchema(tuple(criteria), "v1", cc, cf)


def _zipf_probs(n: int) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1)
    return p / p.sum()


def gen_rules(seed: int, n_rules: int, spec: SchemaSpec = SchemaSpec()) -> tuple[RuleSchema, list[Rule]]:
    """Deterministic synthetic v1 rule set with ids ``0..n_rules-1``."""
    if n_rules < 1:
        raise ValueError("n_rules must be >= 1")
    schema = build_schema(spec)
    rng = np.random.default_rng(seed)
    n = n_rules
    columns: list[list] = []
    flag_col = None
    for c in schema.criteria:
        if c.kind is Kind.PAIR:
            ratio = spec.flight_wildcard_ratio if c.name == "flight" else spec.range_wildcard_ratio
            wild = rng.random(n) < ratio
            span = c.domain.hi - c.domain.lo
            lo = rng.integers(c.domain.lo, c.domain.hi + 1, size=n)
            width = rng.integers(0, min(spec.max_span, span) + 1, size=n)
            hi = np.minimum(lo + width, c.domain.hi)
            columns.append([WILDCARD if w else Range(int(a), int(b))
                            for w, a, b in zip(wild.tolist(), lo.tolist(), hi.tolist())])
            continue
        syms = [Exact(s) if isinstance(s, str) else Exact(int(s)) for s in
                (c.domain if isinstance(c.domain, tuple) else range(c.domain.lo, c.domain.hi + 1))]
        idx = rng.choice(len(syms), size=n, p=_zipf_probs(len(syms)))
        if c.name == "code_share":
            flag = rng.random(n) < spec.codeshare_ratio
            flag_col = flag
            columns.append([syms[1] if f else syms[0] for f in flag.tolist()])
            continue
        if not c.wildcard_allowed:
            ratio = 0.0
        elif c.name == "operating_carrier":
            ratio = 0.5
        else:
            ratio = spec.wildcard_ratio
        wild = rng.random(n) < ratio
        columns.append([WILDCARD if w else syms[i] for w, i in zip(wild.tolist(), idx.tolist())])
    if spec.codeshare:
        # v1 non-code-share rules declare no operating carrier
        op = schema.index("operating_carrier")
        columns[op] = [v if f else WILDCARD for v, f in zip(columns[op], flag_col.tolist())]
    decisions = (rng.integers(4, 25, size=n) * 5).tolist()
    tags = rng.choice(3, size=n).tolist()
    return schema, [
        Rule(i, tuple(col[i] for col in columns), decisions[i], PRECISION_TAGS[tags[i]])
        for i in range(n)
    ]


# ---------------------------------------------------------------- fixtures

YEAR_START = dt.date(2021, 1, 1)


def day_of_year(d: dt.date) -> int:
    return (d - YEAR_START).days


def example_rules() -> tuple[RuleSchema, list[Rule]]:
    """Six example MCT rules over airport, time frame, region and terminal.

    Time frames are day-of-year ranges in 2021. Seasons are astronomical;
    rules over a set of disjoint periods are stored as fragments.
    """
    schema = RuleSchema((
        CriterionDecl("airport", Kind.EXACT, 16, ("CDG", "ZRH")),
        CriterionDecl("time_frame", Kind.PAIR, 12, IntDomain(0, 364)),
        CriterionDecl("region", Kind.EXACT, 4, ("International", "Schengen")),
        CriterionDecl("terminal", Kind.EXACT, 2, ("T1", "T2")),
    ), "v1")
    summer = Range(day_of_year(dt.date(2021, 6, 21)), day_of_year(dt.date(2021, 9, 22)))
    winter = [Range(0, day_of_year(dt.date(2021, 3, 20))), Range(day_of_year(dt.date(2021, 12, 21)), 364)]
    first_sunday = day_of_year(dt.date(2021, 1, 3))
    sundays = [Range(d, d) for d in range(first_sunday, 365, 7)]

    def rule(rid, airport, tf, region, terminal, minutes, tag, frag=None):
        vals = (Exact(airport), tf, Exact(region), WILDCARD if terminal is None else Exact(terminal))
        return Rule(rid, vals, minutes, tag, frag)

    rules = [
        rule(0, "ZRH", WILDCARD, "International", None, 90, "Low"),
        rule(1, "ZRH", WILDCARD, "Schengen", "T1", 25, "Middle"),
        rule(2, "ZRH", summer, "Schengen", "T1", 40, "High"),
    ]
    rules += [rule(3, "ZRH", w, "Schengen", "T1", 25, "High", k) for k, w in enumerate(winter)]
    rules += [rule(4, "CDG", w, "Schengen", "T1", 25, "High", k) for k, w in enumerate(winter)]
    rules += [rule(5, "CDG", s, "International", "T2", 45, "High", k) for k, s in enumerate(sundays)]
    return schema, rules


def example_query(airport: str = "ZRH", day: dt.date = dt.date(2021, 8, 12),
                 region: str = "Schengen", terminal: str = "T1") -> dict:
    return {"airport": airport, "time_frame": day_of_year(day), "region": region, "terminal": terminal}


def nested_range_rules() -> tuple[RuleSchema, list[Rule], list[int]]:
    """Two CDG rules with flight ranges [700,1000] and [700,800].

    Returns the schema, the rules and the criteria order that puts the
    flight range ahead of the station once the range is split.
    """
    schema = RuleSchema((
        CriterionDecl("station", Kind.EXACT, 16, ("CDG",)),
        CriterionDecl("flight", Kind.PAIR, 20, FLIGHT_DOMAIN),
    ), "v1")
    rules = [
        Rule(0, (Exact("CDG"), Range(700, 1000)), 30),
        Rule(1, (Exact("CDG"), Range(700, 800)), 45),
    ]
    return schema, rules, [1, 2, 0]
