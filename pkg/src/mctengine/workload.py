"""Synthetic user queries, Travel Solutions and the MCT queries they spawn.

A user query carries a stream of Travel Solutions (TS). A direct TS needs
no MCT check; a TS with ``n`` connections spawns ``n`` MCT queries (1..5).
A TS is valid when every connection time is at least the MCT decision
of its query.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .model import (
    WILDCARD,
    Exact,
    IntDomain,
    Kind,
    MatchColumns,
    QueryColumns,
    Range,
    Rule,
    RuleSchema,
    oracle_match,
    oracle_match_columns,
)

MAX_CONNECTIONS = 5


@dataclass(frozen=True)
class WorkloadShape:
    direct_fraction: float = 0.17
    mean_queries: float = 1.24
    mean_ts: float = 920.0
    required_qualified_ts: int = 1500
    min_connection_min: int = 15
    max_connection_min: int = 180

    def __post_init__(self):
        if not 0.0 <= self.direct_fraction <= 1.0:
            raise ValueError("direct_fraction must lie in [0, 1]")
        if not 1.0 <= self.mean_queries <= MAX_CONNECTIONS:
            raise ValueError(f"mean_queries must lie in [1, {MAX_CONNECTIONS}]")
        if self.mean_ts < 1 or self.required_qualified_ts < 1:
            raise ValueError("mean_ts and required_qualified_ts must be >= 1")
        if not 0 <= self.min_connection_min <= self.max_connection_min:
            raise ValueError("connection time bounds are inverted")


def connection_count_probs(mean: float, top: int = MAX_CONNECTIONS) -> np.ndarray:
    """P(k) for k = 1..top, geometric in k and truncated, with the given mean."""
    k = np.arange(1, top + 1)

    def mean_of(r: float) -> float:
        w = r ** (k - 1)
        return float((k * w).sum() / w.sum())

    if mean <= 1.0:
        r = 0.0
    elif mean >= mean_of(1e6):
        r = 1e6
    else:
        lo, hi = 0.0, 1.0
        while mean_of(hi) < mean:
            hi *= 2
        for _ in range(100):
            mid = (lo + hi) / 2
            lo, hi = (mid, hi) if mean_of(mid) < mean else (lo, mid)
        r = (lo + hi) / 2
    w = r ** (k - 1)
    return w / w.sum()


@dataclass(frozen=True)
class TravelSolution:
    id: int
    legs: int
    direct: bool

    def __post_init__(self):
        if not 1 <= self.legs <= MAX_CONNECTIONS + 1:
            raise ValueError("a TS has 1..6 legs")
        if self.direct != (self.legs == 1):
            raise ValueError("direct iff one leg")

    @property
    def mct_queries(self) -> int:
        return self.legs - 1


@dataclass(eq=False)
class UserQuery:
    """One user query: per-TS connection counts, and optionally the MCT queries."""

    id: int
    ts_queries: np.ndarray              # connection count per TS, 0 for direct
    required_qualified_ts: int = 1500
    queries: QueryColumns | None = None
    connection_min: np.ndarray | None = None

    def __post_init__(self):
        if self.required_qualified_ts < 1:
            raise ValueError("required_qualified_ts must be >= 1")
        self.ts_queries = np.asarray(self.ts_queries, dtype=np.int64)
        self.query_offsets = np.concatenate([[0], np.cumsum(self.ts_queries)])

    @property
    def n_ts(self) -> int:
        return len(self.ts_queries)

    @property
    def n_queries(self) -> int:
        return int(self.query_offsets[-1])

    def solutions(self) -> Iterator[TravelSolution]:
        for i, q in enumerate(self.ts_queries.tolist()):
            yield TravelSolution(i, q + 1, q == 0)

    def ts_validity(self, decisions: Sequence, default_mct: int, upto_ts: int | None = None) -> np.ndarray:
        """Valid flags of the first ``upto_ts`` TS given per-query MCT decisions."""
        upto_ts = self.n_ts if upto_ts is None else upto_ts
        nq = int(self.query_offsets[upto_ts])
        mct = np.array([d if isinstance(d, (int, np.integer)) and not isinstance(d, bool) else default_mct
                        for d in list(decisions)[:nq]], dtype=np.int64)
        ok = self.connection_min[:nq] >= mct
        bad = np.zeros(upto_ts, dtype=np.int64)
        if nq:
            owner = np.repeat(np.arange(upto_ts), self.ts_queries[:upto_ts])
            np.add.at(bad, owner, ~ok)
        return bad == 0


# ---------------------------------------------------------------- query sampling

class QuerySampler:
    """Draws MCT queries over a schema's query fields.

    A fraction ``hit_ratio`` of queries is instantiated from a random rule
    (so at least that rule matches); the rest are uniform over the declared
    domains. With carrier cross-matching declared, non-code-share queries
    have equal marketing/operating carriers and flight numbers.
    """

    def __init__(self, schema: RuleSchema, rules: Sequence[Rule], hit_ratio: float = 0.8):
        if not 0.0 <= hit_ratio <= 1.0:
            raise ValueError("hit_ratio must lie in [0, 1]")
        self.schema = schema
        self.hit_ratio = hit_ratio if rules else 0.0
        self.n_rules = len(rules)
        self._units = []
        for unit in schema.range_units():
            c = schema[unit[0]]
            if c.domain is None:
                raise ValueError(f"{c.name}: sampling needs a declared domain")
            if c.kind is Kind.EXACT:
                dom = list(c.domain) if isinstance(c.domain, tuple) else list(range(c.domain.lo, c.domain.hi + 1))
                pos = {s: i for i, s in enumerate(dom)}
                codes = np.array([pos[r.values[unit[0]].value] if isinstance(r.values[unit[0]], Exact) else -1
                                  for r in rules], dtype=np.int64)
                self._units.append(("exact", unit, dom, codes))
            else:
                lo, hi = self._bounds(rules, schema, unit)
                self._units.append(("range", unit, schema[unit[-1]].domain if len(unit) == 2 else c.domain, (lo, hi)))

    @staticmethod
    def _bounds(rules, schema, unit):
        c = schema[unit[0]]
        dom_lo, dom_hi = c.domain.lo, schema[unit[-1]].domain.hi
        lo = np.full(len(rules), dom_lo, dtype=np.int64)
        hi = np.full(len(rules), dom_hi, dtype=np.int64)
        for k, r in enumerate(rules):
            if len(unit) == 2:
                a, b = r.values[unit[0]], r.values[unit[1]]
                if a is not WILDCARD:
                    lo[k] = a.value
                if b is not WILDCARD:
                    hi[k] = b.value
                continue
            v = r.values[unit[0]]
            if isinstance(v, Range):
                lo[k], hi[k] = v.lo, v.hi
            elif v is not WILDCARD:
                if c.kind is Kind.RANGE_MIN:
                    lo[k] = v.value
                else:
                    hi[k] = v.value
        return lo, hi

    def sample(self, n: int, rng: np.random.Generator) -> QueryColumns:
        schema = self.schema
        hit = rng.random(n) < self.hit_ratio
        src = rng.integers(0, max(self.n_rules, 1), size=n)
        hsrc = src[hit]
        values: dict[str, np.ndarray] = {}
        for kind, unit, dom, data in self._units:
            name = schema[unit[0]].name
            if kind == "exact":
                codes = rng.integers(0, len(dom), size=n)
                if len(hsrc):
                    rc = data[hsrc]
                    sub = codes[hit]
                    sub[rc >= 0] = rc[rc >= 0]
                    codes[hit] = sub
                values[name] = np.asarray(dom)[codes]
            else:
                lo, hi = data
                v = rng.integers(dom.lo if isinstance(dom, IntDomain) else 0,
                                 (dom.hi if isinstance(dom, IntDomain) else 0) + 1, size=n)
                if len(hsrc):
                    a, b = lo[hsrc], hi[hsrc]
                    v[hit] = a + np.floor(rng.random(len(hsrc)) * (b - a + 1)).astype(np.int64)
                values[name] = v
        cols: dict[str, np.ndarray] = {}
        for c in schema.criteria:
            key = c.name if c.name in values else None
            if key is None:
                continue
            cols.setdefault(c.field, values[key])
        self._cross(cols, values, hit, src, rng)
        return QueryColumns(cols, n=n)

    def _cross(self, cols, values, hit, src, rng):
        schema = self.schema
        cc, cf = schema.cross_carrier, schema.cross_flight
        if cc is None and cf is None:
            return
        ind = (cc or cf).indicator
        yes = (cc or cf).yes
        flag = values[ind] == yes
        if cc is not None:
            mk_field, op_field = schema[cc.marketing].field, schema[cc.operating].field
            mk = values[cc.marketing]
            op = np.where(flag, values[cc.operating], mk)
            cols[mk_field], cols[op_field] = mk, op
        if cf is not None:
            flight = values[cf.flight]
            dom = schema[cf.flight].domain
            other = rng.integers(dom.lo, dom.hi + 1, size=len(flight))
            # code-share: the rule range constrains the marketing flight number
            cols[cf.marketing_field] = flight
            cols[cf.operating_field] = np.where(flag, other, flight)
            plain = schema[cf.flight].field
            if plain not in (cf.marketing_field, cf.operating_field):
                cols.pop(plain, None)


# ---------------------------------------------------------------- workload

def generate_workload(
    seed: int,
    n_user_queries: int,
    shape: WorkloadShape = WorkloadShape(),
    sampler: QuerySampler | None = None,
    ts_per_query: int | None = None,
) -> list[UserQuery]:
    """Deterministic list of user queries; queries are drawn when a sampler is given."""
    if n_user_queries < 0:
        raise ValueError("n_user_queries must be >= 0")
    rng = np.random.default_rng(seed)
    probs = connection_count_probs(shape.mean_queries)
    out = []
    for uid in range(n_user_queries):
        n_ts = ts_per_query if ts_per_query is not None else max(1, int(rng.poisson(shape.mean_ts)))
        direct = rng.random(n_ts) < shape.direct_fraction
        counts = rng.choice(MAX_CONNECTIONS, size=n_ts, p=probs) + 1
        counts[direct] = 0
        uq = UserQuery(uid, counts, shape.required_qualified_ts)
        nq = uq.n_queries
        uq.connection_min = rng.integers(shape.min_connection_min, shape.max_connection_min + 1, size=nq)
        if sampler is not None:
            uq.queries = sampler.sample(nq, rng)
        out.append(uq)
    return out


def workload_stats(user_queries: Sequence[UserQuery]) -> dict:
    counts = np.concatenate([u.ts_queries for u in user_queries]) if user_queries else np.zeros(0, dtype=np.int64)
    non_direct = counts[counts > 0]
    return {
        "user_queries": len(user_queries),
        "ts": int(len(counts)),
        "direct_fraction": float((counts == 0).mean()) if len(counts) else 0.0,
        "mct_queries": int(counts.sum()),
        "mean_queries_per_non_direct_ts": float(non_direct.mean()) if len(non_direct) else 0.0,
    }


# ---------------------------------------------------------------- batching

@dataclass(frozen=True)
class TsBatch:
    """Half-open TS range and the MCT query range it covers."""

    ts_lo: int
    ts_hi: int
    q_lo: int
    q_hi: int

    @property
    def n_ts(self) -> int:
        return self.ts_hi - self.ts_lo

    @property
    def n_queries(self) -> int:
        return self.q_hi - self.q_lo


@dataclass(frozen=True)
class BatchPolicy:
    kind: str = "required-qualified"
    size: int = 0

    def __post_init__(self):
        if self.kind not in ("required-qualified", "per-ts", "fixed"):
            raise ValueError(f"unknown batching policy {self.kind!r}")
        if self.kind == "fixed" and self.size < 1:
            raise ValueError("fixed(n) requires n >= 1")

    @classmethod
    def parse(cls, text: str) -> "BatchPolicy":
        text = text.strip()
        if text.startswith("fixed"):
            inner = text[len("fixed"):].strip("():= ")
            if not inner.isdigit():
                raise ValueError(f"malformed fixed policy {text!r}")
            return cls("fixed", int(inner))
        return cls(text)

    def __str__(self) -> str:
        return f"fixed({self.size})" if self.kind == "fixed" else self.kind


def batch_policy(user_query: UserQuery, policy: BatchPolicy = BatchPolicy(), pending_ts: int | None = None) -> list[TsBatch]:
    """Full batch plan for the first ``pending_ts`` TS of a user query."""
    n_ts = user_query.n_ts if pending_ts is None else min(pending_ts, user_query.n_ts)
    off = user_query.query_offsets
    out: list[TsBatch] = []
    if policy.kind == "required-qualified":
        step = user_query.required_qualified_ts
        for lo in range(0, n_ts, step):
            hi = min(lo + step, n_ts)
            out.append(TsBatch(lo, hi, int(off[lo]), int(off[hi])))
    elif policy.kind == "per-ts":
        for t in np.flatnonzero(user_query.ts_queries[:n_ts]).tolist():
            out.append(TsBatch(t, t + 1, int(off[t]), int(off[t + 1])))
    else:
        total = int(off[n_ts])
        for q in range(0, total, policy.size):
            q_hi = min(q + policy.size, total)
            ts_lo = int(np.searchsorted(off, q, side="right")) - 1
            ts_hi = int(np.searchsorted(off, q_hi, side="left"))
            out.append(TsBatch(ts_lo, min(ts_hi, n_ts), q, q_hi))
    return out


def complete_ts(user_query: UserQuery, answered_queries: int) -> int:
    """Number of leading TS whose MCT queries all lie within the answered prefix."""
    return int(np.searchsorted(user_query.query_offsets[1:], answered_queries, side="right"))


def explore(user_query: UserQuery, policy: BatchPolicy, answer, default_mct: int = 60):
    """Domain-Explorer loop: submit batches in order until enough valid TS are found.

    ``answer(batch)`` returns the decisions of the batch's queries. Returns
    (decisions, batches submitted, valid TS found).
    """
    decisions: list = []
    submitted = 0
    valid = 0
    for batch in batch_policy(user_query, policy):
        if batch.n_queries:
            decisions.extend(answer(batch))
            submitted += 1
        done = complete_ts(user_query, batch.q_hi)
        valid = int(user_query.ts_validity(decisions, default_mct, done).sum())
        if valid >= user_query.required_qualified_ts:
            break
    return decisions, submitted, valid


# ---------------------------------------------------------------- CPU reference

@dataclass
class CpuReport:
    user_query: int
    queries: int
    matcher_calls: int
    cpu_us: float
    results: MatchColumns = field(repr=False)


def cpu_reference_match(
    user_queries: Sequence[UserQuery],
    rules: Sequence[Rule],
    schema: RuleSchema,
    scalar: bool = False,
) -> list[CpuReport]:
    """Linear-scan matching of every MCT query, timed per user query.

    ``scalar`` runs the per-query reference matcher; the default scans the
    rules once per user query over the whole query table.
    """
    out = []
    for uq in user_queries:
        if uq.queries is None:
            raise ValueError(f"user query {uq.id} has no materialised MCT queries")
        n = uq.n_queries
        t0 = time.perf_counter()
        if n == 0:
            cols = MatchColumns.empty(0)
        elif scalar:
            res = [oracle_match(q, rules, schema) for q in uq.queries.rows()]
            cols = MatchColumns([-1 if r.rule_id is None else r.rule_id for r in res],
                                [r.weight for r in res],
                                [-1 if r.fragment is None else r.fragment for r in res],
                                np.array([r.decision for r in res], dtype=object))
        else:
            cols = oracle_match_columns(uq.queries, rules, schema)
        out.append(CpuReport(uq.id, n, n, (time.perf_counter() - t0) * 1e6, cols))
    return out
