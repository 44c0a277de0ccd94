"""Dictionary encoding, criteria ordering and leveled NFA construction.

The NFA is a trie over dictionary-encoded rule values: level ``l`` tests
criterion ``order[l]``, rules sharing an encoded prefix share states, and
every final-level state carries the rules that end there. Wildcard values
become transitions labelled :data:`WILD`.

Range bounds are encoded by rank against a sorted list of boundaries
(range starts and one-past range ends), so a query value becomes the
number of boundaries it is not below, and range tests turn into integer
comparisons on codes.
"""
from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction
from typing import Sequence

import numpy as np

from .model import (
    WILDCARD,
    Exact,
    Kind,
    Rule,
    RuleSchema,
    SchemaError,
    rule_weight,
    symbol_order,
)

WILD = 0xFFFF_FFFF
UNKNOWN = 0xFFFF_FFFE


class DictionaryError(ValueError):
    """Rule symbol missing from the dictionary."""


class Op(IntEnum):
    EQ = 0       # label == code
    GE = 1       # range-min: label <= code
    LE = 2       # range-max: code <= label
    BETWEEN = 3  # merged pair: label <= code <= label_hi


# ---------------------------------------------------------------- dictionary

@dataclass(frozen=True)
class CriterionDictionary:
    """Sorted keys of one criterion.

    ``symbolic`` dictionaries map rule symbols to their index; boundary
    dictionaries hold range starts and one-past range ends, and queries are
    encoded by rank (count of boundaries <= value). Values that cannot be
    encoded become :data:`UNKNOWN`, which only wildcard edges accept.
    """

    symbolic: bool
    keys: tuple

    @property
    def cardinality(self) -> int:
        return len(self.keys)

    def encode(self, symbol) -> int:
        i = self._index().get(symbol if self.symbolic else int(symbol))
        if i is None:
            raise DictionaryError(f"{symbol!r} not in dictionary")
        return i

    def decode(self, code: int):
        return self.keys[code]

    def rank(self, value: int) -> int:
        return bisect_right(self.keys, value)

    def encode_query(self, value) -> int:
        if self.symbolic:
            return self._index().get(value, UNKNOWN) if _same_kind(value, self.keys) else UNKNOWN
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            return self.rank(value)
        return UNKNOWN

    def _index(self) -> dict:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {k: i for i, k in enumerate(self.keys)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def array(self) -> np.ndarray:
        arr = self.__dict__.get("_arr")
        if arr is None:
            if not self.keys:
                arr = np.zeros(0, dtype=np.int64)
            elif isinstance(self.keys[0], str):
                arr = np.array(self.keys, dtype=str)
            else:
                arr = np.array(self.keys, dtype=np.int64)
            object.__setattr__(self, "_arr", arr)
        return arr

    def encode_column(self, col: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`encode_query` for a raw query column."""
        keys = self.array()
        n = len(col)
        if not self.symbolic:
            if col.dtype.kind != "i":
                return np.full(n, UNKNOWN, dtype=np.uint32)
            return np.searchsorted(keys, col, side="right").astype(np.uint32)
        if len(keys) == 0 or (keys.dtype.kind == "U") != (col.dtype.kind == "U"):
            return np.full(n, UNKNOWN, dtype=np.uint32)
        pos = np.searchsorted(keys, col)
        clipped = np.minimum(pos, len(keys) - 1)
        found = keys[clipped] == col
        return np.where(found, clipped, UNKNOWN).astype(np.uint32)


def _same_kind(value, keys: tuple) -> bool:
    if not keys:
        return False
    return isinstance(keys[0], str) == isinstance(value, str)


@dataclass(frozen=True)
class Dictionary:
    criteria: tuple[CriterionDictionary, ...]

    def __getitem__(self, i: int) -> CriterionDictionary:
        return self.criteria[i]

    def __len__(self) -> int:
        return len(self.criteria)


def build_dictionary(rules: Sequence[Rule], schema: RuleSchema) -> Dictionary:
    """Per-criterion dictionaries with codes assigned in sorted symbol order."""
    out: list[CriterionDictionary | None] = [None] * len(schema)
    for unit in schema.range_units():
        c = schema[unit[0]]
        if c.kind is Kind.EXACT:
            syms = {r.values[unit[0]].value for r in rules if isinstance(r.values[unit[0]], Exact)}
            out[unit[0]] = CriterionDictionary(True, tuple(sorted(syms, key=symbol_order)))
            continue
        if c.kind is Kind.PAIR:
            raise SchemaError(f"{c.name}: pair-range criteria must be split before encoding")
        bounds: set[int] = set()
        for i in unit:
            shift = 1 if schema[i].kind is Kind.RANGE_MAX else 0
            bounds.update(r.values[i].value + shift for r in rules if isinstance(r.values[i], Exact))
        d = CriterionDictionary(False, tuple(sorted(bounds)))
        for i in unit:
            out[i] = d
    return Dictionary(tuple(out))


# ---------------------------------------------------------------- ordering

def _level_units(schema: RuleSchema, merge: bool) -> list[tuple[int, ...]]:
    if merge:
        return schema.range_units()
    return [(i,) for i in range(len(schema))]


def optimise_order(rules: Sequence[Rule], schema: RuleSchema, merge: bool = False) -> list[int]:
    """Order criteria by ascending expected fan-out.

    score = distinct * (1 - wildcard_ratio) + 0.5 * wildcard_ratio * rule_count,
    ties broken by declared position. Merged range pairs move as one unit.
    """
    if len(schema) == 0:
        raise SchemaError("cannot order an empty schema")
    n = len(rules)
    scored = []
    for unit in _level_units(schema, merge):
        seen = set()
        wild = 0
        for r in rules:
            vals = tuple(r.values[i] for i in unit)
            if all(v is WILDCARD for v in vals):
                wild += 1
            else:
                seen.add(vals)
        ratio = Fraction(wild, n) if n else Fraction(0)
        score = len(seen) * (1 - ratio) + Fraction(1, 2) * ratio * n
        scored.append((score, unit[0], unit))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [i for _, _, unit in scored for i in unit]


def random_order(schema: RuleSchema, seed: int, merge: bool = False) -> list[int]:
    rng = np.random.default_rng(seed)
    units = _level_units(schema, merge)
    perm = rng.permutation(len(units))
    return [i for k in perm for i in units[k]]


# ---------------------------------------------------------------- NFA

@dataclass(eq=False)
class Level:
    criteria: tuple[int, ...]
    op: Op
    field: str
    src: np.ndarray       # uint32, state at this depth
    label: np.ndarray     # uint32
    label_hi: np.ndarray  # uint32, only meaningful for BETWEEN
    dst: np.ndarray       # uint32, state at the next depth

    def __post_init__(self):
        self.keys = (self.src.astype(np.uint64) << np.uint64(32)) | self.label.astype(np.uint64)

    @property
    def transitions(self) -> int:
        return len(self.src)

    @property
    def record_bytes(self) -> int:
        return 16 if self.op is Op.BETWEEN else 12


TERMINAL_RECORD_BYTES = 16


@dataclass(eq=False)
class Nfa:
    schema: RuleSchema
    dictionary: Dictionary
    order: tuple[int, ...]
    merged: bool
    levels: tuple[Level, ...]
    term_offsets: np.ndarray     # int64, len = terminal states + 1
    entry_rule: np.ndarray       # int64
    entry_fragment: np.ndarray   # int64, -1 = none
    entry_weight: np.ndarray     # int64
    entry_decision: np.ndarray   # int64 index into ``decisions``
    decisions: tuple = ()
    _derived: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.entry_rule)
        order = np.lexsort((self.entry_fragment, self.entry_rule, -self.entry_weight))
        rank = np.empty(n, dtype=np.int64)
        rank[order] = np.arange(n)
        self.entry_rank = rank
        self.rank_entry = order
        terms = len(self.term_offsets) - 1
        best = np.full(max(terms, 0), np.iinfo(np.int64).max, dtype=np.int64)
        if n:
            owner = np.repeat(np.arange(terms), np.diff(self.term_offsets))
            np.minimum.at(best, owner, rank)
        self.term_best_rank = best
        self.decision_array = np.empty(len(self.decisions), dtype=object)
        self.decision_array[:] = list(self.decisions)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def rule_count(self) -> int:
        return len(self.entry_rule)

    @property
    def fields(self) -> list[str]:
        return [lv.field for lv in self.levels]

    @property
    def image_hash(self) -> str:
        h = self._derived.get("hash")
        if h is None:
            from .nfab import serialize_nfa
            import hashlib

            h = hashlib.sha256(serialize_nfa(self)).hexdigest()
            self._derived["hash"] = h
        return h

    def __eq__(self, other) -> bool:
        if not isinstance(other, Nfa):
            return NotImplemented
        if (self.schema != other.schema or self.dictionary != other.dictionary
                or self.order != other.order or self.merged != other.merged
                or self.decisions != other.decisions or len(self.levels) != len(other.levels)):
            return False
        for a, b in zip(self.levels, other.levels):
            if (a.criteria, a.op, a.field) != (b.criteria, b.op, b.field):
                return False
            if not all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("src", "label", "label_hi", "dst")):
                return False
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("term_offsets", "entry_rule", "entry_fragment", "entry_weight", "entry_decision")
        )

    __hash__ = None


def _check_v2(schema: RuleSchema) -> None:
    if any(c.kind is Kind.PAIR for c in schema.criteria):
        raise SchemaError("rules must be transformed to v2 before NFA construction (pair-range present)")
    if schema.cross_carrier is not None or schema.cross_flight is not None:
        raise SchemaError("rules must be transformed to v2 before NFA construction (cross-matching unresolved)")


def _check_order(schema: RuleSchema, order: Sequence[int], merge: bool) -> list[tuple[int, ...]]:
    if sorted(order) != list(range(len(schema))):
        raise SchemaError(f"order {list(order)} is not a permutation of {len(schema)} criteria")
    if not merge:
        return [(i,) for i in order]
    units, k = [], 0
    pairs = {u[0]: u for u in schema.range_units() if len(u) == 2}
    while k < len(order):
        i = order[k]
        if i in pairs:
            if k + 1 >= len(order) or order[k + 1] != pairs[i][1]:
                raise SchemaError(f"merged pair {schema[i].name} must be ordered min then max")
            if schema[i].field != schema[pairs[i][1]].field:
                raise SchemaError(f"merged pair {schema[i].name} reads two different query fields")
            units.append(pairs[i])
            k += 2
        elif schema.pair_partner(i) is not None and schema[i].kind is Kind.RANGE_MAX:
            raise SchemaError(f"merged pair {schema[i].name} must be ordered min then max")
        else:
            units.append((i,))
            k += 1
    return units


def _unit_op(schema: RuleSchema, unit: tuple[int, ...]) -> Op:
    if len(unit) == 2:
        return Op.BETWEEN
    kind = schema[unit[0]].kind
    return {Kind.EXACT: Op.EQ, Kind.RANGE_MIN: Op.GE, Kind.RANGE_MAX: Op.LE}[kind]


def _labels(rules: Sequence[Rule], schema: RuleSchema, dictionary: Dictionary, unit, op: Op):
    n = len(rules)
    lo = np.full(n, WILD, dtype=np.uint32)
    hi = np.zeros(n, dtype=np.uint32)
    i = unit[0]
    d = dictionary[i]
    if op is Op.EQ:
        idx = d._index()
        for k, r in enumerate(rules):
            v = r.values[i]
            if v is not WILDCARD:
                code = idx.get(v.value)
                if code is None:
                    raise DictionaryError(f"rule {r.id}: {schema[i].name} symbol {v.value!r} not in dictionary")
                lo[k] = code
        return lo, hi
    if op in (Op.GE, Op.LE):
        for k, r in enumerate(rules):
            v = r.values[i]
            if v is not WILDCARD:
                lo[k] = _rank_checked(d, v.value, r, schema[i].name, op is Op.LE)
        return lo, hi
    j = unit[1]
    top = d.cardinality
    for k, r in enumerate(rules):
        a, b = r.values[i], r.values[j]
        if a is WILDCARD and b is WILDCARD:
            continue
        lo[k] = 0 if a is WILDCARD else _rank_checked(d, a.value, r, schema[i].name, False)
        hi[k] = top if b is WILDCARD else _rank_checked(d, b.value, r, schema[j].name, True)
    return lo, hi


def _rank_checked(d: CriterionDictionary, value: int, rule: Rule, name: str, is_max: bool) -> int:
    boundary = value + 1 if is_max else value
    if boundary not in d._index():
        raise DictionaryError(f"rule {rule.id}: {name} bound {value} not in dictionary")
    return d.rank(value)


def build_nfa(
    rules: Sequence[Rule],
    schema: RuleSchema,
    dictionary: Dictionary | None = None,
    order: Sequence[int] | None = None,
    merge: bool = False,
) -> Nfa:
    """Compile v2 rules into a prefix-shared leveled NFA.

    With ``merge`` each split range pair becomes a single level whose labels
    are (start, end) pairs.
    """
    _check_v2(schema)
    for r in rules:
        schema.validate_rule(r)
    if dictionary is None:
        dictionary = build_dictionary(rules, schema)
    if len(dictionary) != len(schema):
        raise DictionaryError("dictionary does not cover the schema")
    order = tuple(range(len(schema))) if order is None else tuple(int(i) for i in order)
    units = _check_order(schema, order, merge)
    n = len(rules)
    ops = [_unit_op(schema, u) for u in units]
    cols = [_labels(rules, schema, dictionary, u, op) for u, op in zip(units, ops)]

    sort_keys = []
    for (lo, hi), op in zip(cols, ops):
        sort_keys.append(lo)
        if op is Op.BETWEEN:
            sort_keys.append(hi)
    rows = np.lexsort(sort_keys[::-1]) if sort_keys and n else np.arange(n)

    levels = []
    state = np.zeros(n, dtype=np.int64)  # state per sorted row at the current depth
    changed = np.zeros(n, dtype=bool)
    if n:
        changed[0] = True
    for unit, op, (lo, hi) in zip(units, ops, cols):
        lo_s, hi_s = lo[rows], hi[rows]
        diff = np.zeros(n, dtype=bool)
        if n:
            diff[1:] = lo_s[1:] != lo_s[:-1]
            if op is Op.BETWEEN:
                diff[1:] |= hi_s[1:] != hi_s[:-1]
        changed = changed | diff
        heads = np.flatnonzero(changed)
        next_state = np.cumsum(changed) - 1
        levels.append(Level(
            criteria=tuple(unit),
            op=op,
            field=schema[unit[0]].field,
            src=state[heads].astype(np.uint32),
            label=lo_s[heads],
            label_hi=hi_s[heads] if op is Op.BETWEEN else np.zeros(len(heads), dtype=np.uint32),
            dst=next_state[heads].astype(np.uint32),
        ))
        state = next_state

    terms = int(state[-1]) + 1 if n else 0
    counts = np.bincount(state, minlength=terms) if n else np.zeros(0, dtype=np.int64)
    offsets = np.zeros(terms + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    sorted_rules = [rules[k] for k in rows.tolist()]
    decisions: list = []
    dec_index: dict = {}
    entry_dec = np.empty(n, dtype=np.int64)
    for k, r in enumerate(sorted_rules):
        key = _decision_key(r.decision)
        if key not in dec_index:
            dec_index[key] = len(decisions)
            decisions.append(r.decision)
        entry_dec[k] = dec_index[key]
    return Nfa(
        schema=schema,
        dictionary=dictionary,
        order=order,
        merged=merge,
        levels=tuple(levels),
        term_offsets=offsets,
        entry_rule=np.array([r.id for r in sorted_rules], dtype=np.int64),
        entry_fragment=np.array([-1 if r.fragment is None else r.fragment for r in sorted_rules], dtype=np.int64),
        entry_weight=np.array([rule_weight(r, schema) for r in sorted_rules], dtype=np.int64),
        entry_decision=entry_dec,
        decisions=tuple(decisions),
    )


def _decision_key(decision) -> tuple:
    try:
        hash(decision)
    except TypeError:
        return ("json", json.dumps(decision, sort_keys=True))
    return (type(decision).__name__, decision)


def empty_nfa() -> Nfa:
    """NFA over an empty schema with no rules."""
    schema = RuleSchema(())
    z = np.zeros(0, dtype=np.int64)
    return Nfa(schema, Dictionary(()), (), False, (), np.zeros(1, dtype=np.int64), z, z, z, z, ())


def nfa_stats(nfa: Nfa) -> dict:
    """Trie counts. ``states`` includes one state per terminal; drawings that
    share a single accept node show ``states - terminals + 1`` nodes."""
    transitions = sum(lv.transitions for lv in nfa.levels)
    states = transitions + 1 if nfa.rule_count else 0
    size = sum(lv.transitions * lv.record_bytes for lv in nfa.levels)
    size += nfa.rule_count * TERMINAL_RECORD_BYTES
    terminals = len(nfa.term_offsets) - 1
    return {"states": states, "transitions": transitions, "depth": nfa.depth, "bytes": size,
            "terminals": terminals}


def compile_rules(
    rules: Sequence[Rule],
    schema: RuleSchema,
    order: str | Sequence[int] = "declared",
    merge: bool = False,
) -> Nfa:
    """Transform (if needed) and compile. ``order`` is declared, optimised,
    random:<seed> or an explicit permutation."""
    from .transforms import to_v2

    rules, schema = to_v2(rules, schema)
    if isinstance(order, str):
        if order == "declared":
            perm = None
        elif order == "optimised":
            perm = optimise_order(rules, schema, merge)
        elif order.startswith("random:"):
            perm = random_order(schema, int(order.split(":", 1)[1]), merge)
        else:
            raise ValueError(f"unknown order {order!r}")
    else:
        perm = order
    return build_nfa(rules, schema, order=perm, merge=merge)
