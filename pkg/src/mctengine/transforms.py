"""Offline rule-set rewrites turning declared (v1) rules into independent conjuncts (v2).

Each function is pure and idempotent. :func:`to_v2` chains them in the
order the compiler expects: split ranges, resolve carrier cross-matching,
add the code-share flight range, then de-overlap every range.
"""
from __future__ import annotations

import heapq
from collections import defaultdict
from dataclasses import replace
from typing import Sequence

from .model import (
    WILDCARD,
    CriterionDecl,
    CrossCarrier,
    CrossFlight,
    Exact,
    Kind,
    Range,
    Rule,
    RuleError,
    RuleSchema,
    SchemaError,
    precision_key,
    rule_weight,
)


class TransformError(ValueError):
    pass


def split_pair_ranges(rules: Sequence[Rule], schema: RuleSchema) -> tuple[list[Rule], RuleSchema]:
    """Replace each pair-range criterion by adjacent range-min/range-max criteria."""
    pairs = [i for i, c in enumerate(schema.criteria) if c.kind is Kind.PAIR]
    if not pairs:
        return list(rules), schema
    criteria: list[CriterionDecl] = []
    renamed = {}
    for c in schema.criteria:
        if c.kind is not Kind.PAIR:
            criteria.append(c)
            continue
        lo_name, hi_name = f"{c.name}_min", f"{c.name}_max"
        if lo_name in schema or hi_name in schema:
            raise SchemaError(f"cannot split {c.name}: {lo_name}/{hi_name} already declared")
        common = dict(weight=c.weight, domain=c.domain, wildcard_allowed=c.wildcard_allowed, source=c.field)
        criteria.append(CriterionDecl(lo_name, Kind.RANGE_MIN, **common))
        criteria.append(CriterionDecl(hi_name, Kind.RANGE_MAX, **common))
        renamed[c.name] = lo_name
    cf = schema.cross_flight
    if cf is not None and cf.flight in renamed:
        cf = replace(cf, flight=renamed[cf.flight])
    new_schema = RuleSchema(tuple(criteria), "v2", schema.cross_carrier, cf, schema.max_criteria)

    pair_set = set(pairs)
    out = []
    for rule in rules:
        schema.validate_rule(rule)
        values = []
        for i, v in enumerate(rule.values):
            if i not in pair_set:
                values.append(v)
            elif v is WILDCARD:
                values.extend((WILDCARD, WILDCARD))
            else:
                values.extend((Exact(v.lo), Exact(v.hi)))
        out.append(rule.with_values(values))
    return out, new_schema


def apply_cross_matching(
    rules: Sequence[Rule],
    schema: RuleSchema,
    layout: CrossCarrier | None = None,
) -> tuple[list[Rule], RuleSchema]:
    """Copy the marketing carrier into the operating carrier of non-code-share rules."""
    layout = layout or schema.cross_carrier or CrossCarrier("marketing_carrier", "operating_carrier", "code_share")
    missing = [n for n in (layout.marketing, layout.operating, layout.indicator) if n not in schema]
    if missing:
        raise TransformError(f"cross-matching needs criteria {', '.join(missing)}")
    mk, op, ind = (schema.index(n) for n in (layout.marketing, layout.operating, layout.indicator))
    out = []
    for rule in rules:
        flag = rule.values[ind]
        if isinstance(flag, Exact) and flag.value == layout.yes:
            out.append(rule)
        elif rule.values[op] == rule.values[mk]:
            out.append(rule)
        else:
            values = list(rule.values)
            values[op] = values[mk]
            out.append(rule.with_values(values))
    return out, replace(schema, cross_carrier=None)


def _codeshare_names(flight: CriterionDecl) -> tuple[str, ...]:
    if flight.kind is Kind.PAIR:
        return (f"cs_{flight.name}",)
    base = flight.name[:-4] if flight.name.endswith("_min") else flight.name
    return (f"cs_{base}_min", f"cs_{base}_max")


def populate_codeshare_flight_range(
    rules: Sequence[Rule],
    schema: RuleSchema,
    layout: CrossFlight | None = None,
) -> tuple[list[Rule], RuleSchema]:
    """Add a code-share flight range read from the marketing flight number.

    Code-share rules move their flight range there and wildcard the plain
    range, which is then read from the operating flight number only.
    """
    if layout is None:
        layout = schema.cross_flight
    if layout is None:
        name = "flight_min" if "flight_min" in schema else "flight"
        layout = CrossFlight(name, "code_share")
    if layout.flight not in schema:
        raise TransformError(f"schema has no flight-number criterion {layout.flight!r}")
    if layout.indicator not in schema:
        raise TransformError(f"schema has no code-share indicator {layout.indicator!r}")
    fi = schema.index(layout.flight)
    flight = schema[fi]
    if flight.kind not in (Kind.PAIR, Kind.RANGE_MIN):
        raise TransformError(f"{layout.flight} is not a range criterion")
    names = _codeshare_names(flight)
    if all(n in schema for n in names):
        return list(rules), replace(schema, cross_flight=None)
    unit = [fi] if flight.kind is Kind.PAIR else [fi, schema.pair_partner(fi)]
    if None in unit:
        raise TransformError(f"{layout.flight} has no range-max partner")

    criteria = list(schema.criteria)
    for i in unit:
        criteria[i] = replace(criteria[i], source=layout.operating_field)
    added = [replace(schema[i], name=n, source=layout.marketing_field) for i, n in zip(unit, names)]
    at = unit[-1] + 1
    criteria[at:at] = added
    new_schema = RuleSchema(tuple(criteria), schema.version, schema.cross_carrier, None, schema.max_criteria)

    ind = schema.index(layout.indicator)
    out = []
    for rule in rules:
        values = list(rule.values)
        flag = values[ind]
        moved = [values[i] for i in unit]
        if isinstance(flag, Exact) and flag.value == layout.yes:
            for i in unit:
                values[i] = WILDCARD
            values[at:at] = moved
        else:
            values[at:at] = [WILDCARD] * len(unit)
        out.append(rule.with_values(values))
    return out, new_schema


# ---------------------------------------------------------------- de-overlap

def _range_accessors(schema: RuleSchema, criterion: str):
    i = schema.index(criterion)
    c = schema[i]
    if c.kind is Kind.PAIR:
        unit = (i,)

        def get(rule):
            v = rule.values[i]
            return None if v is WILDCARD else (v.lo, v.hi)

        def put(rule, lo, hi):
            values = list(rule.values)
            values[i] = Range(lo, hi)
            return values
    elif c.kind.is_bound:
        j = schema.pair_partner(i)
        if j is None:
            raise TransformError(f"{criterion} is a lone range bound, not a range")
        lo_i, hi_i = min(i, j), max(i, j)
        unit = (lo_i, hi_i)
        dom_lo, dom_hi = schema[lo_i].domain.lo, schema[hi_i].domain.hi

        def get(rule):
            a, b = rule.values[lo_i], rule.values[hi_i]
            if a is WILDCARD and b is WILDCARD:
                return None
            return (dom_lo if a is WILDCARD else a.value, dom_hi if b is WILDCARD else b.value)

        def put(rule, lo, hi):
            values = list(rule.values)
            values[lo_i], values[hi_i] = Exact(lo), Exact(hi)
            return values
    else:
        raise TransformError(f"{criterion} is not a range criterion")
    return unit, get, put


def _winning_pieces(members: list[tuple[int, int, tuple, int]]) -> list[tuple[int, int, int]]:
    """Sweep ``(lo, hi, key, idx)`` ranges; return coalesced ``(lo, hi, idx)`` pieces.

    Each integer point goes to the covering member with the smallest key.
    """
    starts = defaultdict(list)
    for lo, hi, key, idx in members:
        starts[lo].append((key, idx, hi))
    points = sorted(set(starts) | {hi + 1 for _, hi, _, _ in members})
    heap: list[tuple] = []
    pieces: list[list[int]] = []
    for p, nxt in zip(points, points[1:]):
        for item in starts.get(p, ()):
            heapq.heappush(heap, item)
        while heap and heap[0][2] < p:
            heapq.heappop(heap)
        if not heap:
            continue
        idx = heap[0][1]
        if pieces and pieces[-1][2] == idx and pieces[-1][1] == p - 1:
            pieces[-1][1] = nxt - 1
        else:
            pieces.append([p, nxt - 1, idx])
    return [tuple(p) for p in pieces]


def deoverlap_ranges(rules: Sequence[Rule], schema: RuleSchema, criterion: str) -> list[Rule]:
    """Make ranges disjoint within groups of rules that differ only in ``criterion``.

    Every point keeps the decision of the most precise original rule covering
    it (highest weight, then lowest id). Cut rules become fragments that keep
    their id and original weight.
    """
    unit, get, put = _range_accessors(schema, criterion)
    groups: dict[tuple, list[int]] = defaultdict(list)
    bounds: dict[int, tuple[int, int]] = {}
    for n, rule in enumerate(rules):
        span = get(rule)
        if span is None:
            continue
        if span[0] > span[1]:
            raise RuleError(f"rule {rule.id}: malformed range {span[0]}..{span[1]}")
        bounds[n] = span
        key = tuple(v for i, v in enumerate(rule.values) if i not in unit)
        groups[key].append(n)

    replaced: dict[int, list[Rule]] = {}
    for members in groups.values():
        if len(members) < 2:
            continue
        ordered = sorted(members, key=lambda n: bounds[n])
        if all(bounds[a][1] < bounds[b][0] for a, b in zip(ordered, ordered[1:])):
            continue
        weights = {n: rule_weight(rules[n], schema) for n in members}
        pieces = _winning_pieces(
            [(*bounds[n], precision_key(rules[n], weights[n]), n) for n in members]
        )
        by_rule: dict[int, list[tuple[int, int]]] = defaultdict(list)
        for lo, hi, n in pieces:
            by_rule[n].append((lo, hi))
        for n in members:
            got = by_rule.get(n, [])
            if got == [bounds[n]]:
                continue
            rule = rules[n]
            replaced[n] = [
                rule.with_values(put(rule, lo, hi), fragment=k, pinned_weight=weights[n])
                for k, (lo, hi) in enumerate(got)
            ]
    if not replaced:
        return list(rules)
    out: list[Rule] = []
    for n, rule in enumerate(rules):
        out.extend(replaced.get(n, (rule,)))
    return out


def range_criteria(schema: RuleSchema) -> list[str]:
    """Names identifying each range of the schema (pair-range or range-min of a split pair)."""
    names = []
    for unit in schema.range_units():
        c = schema[unit[0]]
        if c.kind is Kind.PAIR or len(unit) == 2:
            names.append(c.name)
    return names


MAX_DEOVERLAP_ROUNDS = 64


def _deoverlap_all(rules: list[Rule], schema: RuleSchema) -> list[Rule]:
    """De-overlap every range until a full round changes nothing.

    Cutting one range can make two rules agree on everything except an
    earlier range that still overlaps, so a single round is not enough.
    """
    names = range_criteria(schema)
    for _ in range(MAX_DEOVERLAP_ROUNDS):
        before = rules
        for name in names:
            rules = deoverlap_ranges(rules, schema, name)
        if rules == before:
            return _renumber_fragments(rules)
    raise TransformError(f"range de-overlap did not settle in {MAX_DEOVERLAP_ROUNDS} rounds")


def _renumber_fragments(rules: list[Rule]) -> list[Rule]:
    """Give fragments of a rule distinct numbers when repeated cuts reused one."""
    seen: dict[int, set] = defaultdict(set)
    clash = set()
    for r in rules:
        if r.fragment is not None:
            if r.fragment in seen[r.id]:
                clash.add(r.id)
            seen[r.id].add(r.fragment)
    if not clash:
        return rules
    counter: dict[int, int] = defaultdict(int)
    out = []
    for r in rules:
        if r.id in clash and r.fragment is not None:
            r = replace(r, fragment=counter[r.id])
            counter[r.id] += 1
        out.append(r)
    return out


def to_v2(rules: Sequence[Rule], schema: RuleSchema) -> tuple[list[Rule], RuleSchema]:
    """Full offline rewrite: split, cross-match, code-share flight range, de-overlap."""
    for r in rules:
        schema.validate_rule(r)
    rules, schema = split_pair_ranges(rules, schema)
    if schema.cross_carrier is not None:
        rules, schema = apply_cross_matching(rules, schema)
    if schema.cross_flight is not None:
        rules, schema = populate_codeshare_flight_range(rules, schema)
    rules = _deoverlap_all(rules, schema)
    if schema.version != "v2":
        schema = replace(schema, version="v2")
    return rules, schema
