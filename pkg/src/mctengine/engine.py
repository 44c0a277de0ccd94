"""Batch evaluation of encoded queries against a compiled NFA.

Evaluation is level-synchronous: every (query, state) pair of a batch
advances one level at a time with vectorised lookups into the level's
sorted ``src << 32 | label`` keys. A query that survives all levels
collects the terminal entries it reached and keeps the best ranked one.
"""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .model import MatchColumns, MatchResult, QueryColumns
from .nfa import UNKNOWN, WILD, Nfa, Op

_SHIFT = np.uint64(32)
_NONE = np.iinfo(np.int64).max


class EngineError(ValueError):
    pass


class SchemaMismatch(EngineError):
    """Reload image compiled for a different schema."""


@dataclass(frozen=True)
class QueryBatch:
    """Dictionary-encoded queries, one row per query and one column per NFA level."""

    codes: np.ndarray
    batch_id: int = 0
    submitted_at: float = 0.0

    def __post_init__(self):
        if self.codes.ndim != 2:
            raise EngineError("batch codes must be a 2-d matrix")
        if self.codes.shape[0] < 1:
            raise EngineError("batch must hold at least one query")

    def __len__(self) -> int:
        return self.codes.shape[0]


@dataclass(frozen=True)
class KernelConfig:
    kernels: int = 1
    engines_per_kernel: int = 1
    frequency_penalty: float = 1.0

    def __post_init__(self):
        if self.kernels < 1 or self.engines_per_kernel < 1:
            raise ValueError("kernels and engines_per_kernel must be >= 1")
        if self.frequency_penalty < 1.0:
            raise ValueError("frequency_penalty is a slowdown factor and must be >= 1")

    @property
    def slowdown(self) -> float:
        """Time multiplier applied to each engine of a kernel."""
        return self.frequency_penalty ** (self.engines_per_kernel - 1)


@dataclass(frozen=True)
class EngineTiming:
    engine: int
    queries: int
    wall_us: float


# ---------------------------------------------------------------- encoding

def _as_table(queries) -> QueryColumns:
    if isinstance(queries, QueryColumns):
        return queries
    queries = list(queries)
    fields = sorted({k for q in queries for k in q})
    return QueryColumns.from_queries(queries, fields)


def encode_codes(nfa: Nfa, queries: QueryColumns | Sequence[Mapping]) -> np.ndarray:
    """Encode raw queries into an ``n x depth`` uint32 matrix for ``nfa``."""
    table = _as_table(queries)
    codes = np.empty((len(table), nfa.depth), dtype=np.uint32)
    for l, lv in enumerate(nfa.levels):
        try:
            col = table[lv.field]
        except KeyError:
            raise EngineError(f"queries lack field {lv.field!r}") from None
        codes[:, l] = nfa.dictionary[lv.criteria[0]].encode_column(col)
    return codes


def encode_batch(nfa: Nfa, queries, batch_id: int = 0) -> QueryBatch:
    return QueryBatch(encode_codes(nfa, queries), batch_id, time.perf_counter())


# ---------------------------------------------------------------- evaluation

def _expand(start: np.ndarray, end: np.ndarray, owner: np.ndarray):
    """Flatten ``[start, end)`` ranges into (owner, position) pairs."""
    counts = end - start
    total = int(counts.sum())
    if total == 0:
        return owner[:0], start[:0]
    rep = np.repeat(np.arange(len(start)), counts)
    first = np.cumsum(counts) - counts
    pos = np.arange(total, dtype=np.int64) - first[rep] + start[rep]
    return owner[rep], pos


def _advance(lv, q: np.ndarray, s: np.ndarray, c: np.ndarray):
    keys = lv.keys
    base = s.astype(np.uint64) << _SHIFT
    wild_key = base | np.uint64(WILD)
    wpos = np.searchsorted(keys, wild_key)
    if len(keys):
        whit = keys[np.minimum(wpos, len(keys) - 1)] == wild_key
    else:
        whit = np.zeros(len(q), dtype=bool)
    known = c != UNKNOWN
    c64 = c.astype(np.uint64)
    if lv.op is Op.EQ:
        key = base | c64
        start = np.searchsorted(keys, key)
        hit = known & (start < len(keys))
        hit[hit] = keys[start[hit]] == key[hit]
        end = start + hit
    elif lv.op is Op.LE:
        start = np.searchsorted(keys, base | c64)
        end = np.where(known, wpos, start)
    else:  # GE and BETWEEN: every label <= code
        start = np.searchsorted(keys, base)
        end = np.where(known, np.searchsorted(keys, base | c64, side="right"), start)
    owner, pos = _expand(start, end, np.arange(len(q)))
    if lv.op is Op.BETWEEN and len(pos):
        keep = lv.label_hi[pos] >= c[owner]
        owner, pos = owner[keep], pos[keep]
    owner = np.concatenate([owner, np.flatnonzero(whit)])
    pos = np.concatenate([pos, wpos[whit]])
    return q[owner], lv.dst[pos].astype(np.int64)


def evaluate_codes(nfa: Nfa, codes: np.ndarray) -> MatchColumns:
    """Most precise match for every row of an encoded matrix."""
    if codes.ndim != 2 or codes.shape[1] != nfa.depth:
        raise EngineError(f"batch depth {codes.shape[-1] if codes.ndim else 0} does not match NFA depth {nfa.depth}")
    n = codes.shape[0]
    out = MatchColumns.empty(n)
    if n == 0 or nfa.rule_count == 0:
        return out
    q = np.arange(n, dtype=np.int64)
    s = np.zeros(n, dtype=np.int64)
    for l, lv in enumerate(nfa.levels):
        q, s = _advance(lv, q, s, codes[q, l])
        if len(q) == 0:
            return out
    best = np.full(n, _NONE, dtype=np.int64)
    np.minimum.at(best, q, nfa.term_best_rank[s])
    hit = np.flatnonzero(best != _NONE)
    entry = nfa.rank_entry[best[hit]]
    out.rule_id[hit] = nfa.entry_rule[entry]
    out.weight[hit] = nfa.entry_weight[entry]
    out.fragment[hit] = nfa.entry_fragment[entry]
    out.decision[hit] = nfa.decision_array[nfa.entry_decision[entry]]
    return out


def evaluate_batch(nfa: Nfa, batch: QueryBatch) -> list[MatchResult]:
    return evaluate_codes(nfa, batch.codes).results()


@lru_cache(maxsize=None)
def _engine_pool(engines: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=engines, thread_name_prefix="engine")


def _run_engine(nfa: Nfa, codes: np.ndarray, engine: int, slowdown: float):
    t0 = time.perf_counter()
    cols = evaluate_codes(nfa, codes)
    elapsed = time.perf_counter() - t0
    if slowdown > 1.0:
        time.sleep(elapsed * (slowdown - 1.0))
        elapsed = time.perf_counter() - t0
    return cols, EngineTiming(engine, codes.shape[0], elapsed * 1e6)


def evaluate_parallel_codes(nfa: Nfa, codes: np.ndarray, config: KernelConfig) -> tuple[MatchColumns, list[EngineTiming]]:
    """Split rows into ``e`` contiguous chunks, one per engine thread."""
    if codes.ndim != 2 or codes.shape[1] != nfa.depth:
        raise EngineError(f"batch depth does not match NFA depth {nfa.depth}")
    e = config.engines_per_kernel
    chunks = np.array_split(codes, e) if codes.shape[0] else [codes]
    if e == 1:
        cols, t = _run_engine(nfa, codes, 0, config.slowdown)
        return cols, [t]
    pool = _engine_pool(e)
    futures = [pool.submit(_run_engine, nfa, chunk, i, config.slowdown) for i, chunk in enumerate(chunks)]
    done = [f.result() for f in futures]
    return MatchColumns.concat([c for c, _ in done]), [t for _, t in done]


def evaluate_parallel(nfa: Nfa, batch: QueryBatch, config: KernelConfig) -> tuple[list[MatchResult], list[EngineTiming]]:
    cols, timings = evaluate_parallel_codes(nfa, batch.codes, config)
    return cols.results(), timings


# ---------------------------------------------------------------- hot reload

@dataclass
class EngineHandle:
    """Active NFA reference with atomic whole-image replacement.

    Callers take a :meth:`snapshot`, encode against it and evaluate on the
    same snapshot, so a batch never mixes two images.
    """

    nfa: Nfa
    config: KernelConfig = field(default_factory=KernelConfig)
    version: int = 0

    def __post_init__(self):
        self._lock = threading.Lock()
        self._current = (self.version, self.nfa)

    def snapshot(self) -> tuple[int, Nfa]:
        return self._current

    def evaluate(self, queries) -> tuple[MatchColumns, int]:
        version, nfa = self._current
        cols, _ = evaluate_parallel_codes(nfa, encode_codes(nfa, queries), self.config)
        return cols, version

    def reload(self, new_nfa: Nfa) -> int:
        if new_nfa.schema.hash != self._current[1].schema.hash:
            raise SchemaMismatch("replacement NFA was compiled for a different schema")
        with self._lock:
            version = self._current[0] + 1
            self._current = (version, new_nfa)
            self.nfa, self.version = new_nfa, version
        return version


def reload_nfa(handle: EngineHandle, new_nfa: Nfa) -> int:
    return handle.reload(new_nfa)
