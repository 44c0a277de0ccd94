"""Multi-stage matching pipeline: producers, router, wrapper workers, kernels.

Producers (Domain Explorers) walk their user queries batch by batch and
wait for each reply before deciding whether more TS are needed. A router
thread hands requests round-robin to ``w`` workers. Each worker runs an
encoder thread and a submitter thread joined by a one-slot queue, so the
next batch is encoded while the previous one is in the kernel. Worker
``i`` submits to kernel ``i mod k``; a kernel is a single thread serving a
FIFO of calls, each paying a fixed per-call overhead before its ``e``
engines evaluate the batch.
"""
from __future__ import annotations

import hashlib
import json
import os
import queue
import secrets
import threading
import time
from concurrent.futures import Future
from dataclasses import asdict, dataclass, field, replace
from multiprocessing.connection import Client, Listener, wait
from typing import Sequence

import numpy as np

from .engine import EngineHandle, KernelConfig, encode_codes, evaluate_parallel_codes
from .model import QueryColumns
from .nfa import Nfa
from .stats import summary
from .workload import BatchPolicy, UserQuery, explore

TRANSPORTS = ("in-process", "socket")
_STOP = "stop"


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    processes: int = 1
    workers: int = 1
    kernels: int = 1
    engines: int = 1
    policy: BatchPolicy = BatchPolicy()
    per_call_overhead_us: float = 30.0
    transport: str = "in-process"
    frequency_penalty: float = 1.0
    default_mct: int = 60
    queue_depth: int = 64

    def __post_init__(self):
        if min(self.processes, self.workers, self.kernels, self.engines) < 1:
            raise ValueError("p, w, k and e must all be >= 1")
        if self.per_call_overhead_us < 0:
            raise ValueError("per_call_overhead_us must be >= 0")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")
        if isinstance(self.policy, str):
            object.__setattr__(self, "policy", BatchPolicy.parse(self.policy))

    @property
    def label(self) -> str:
        return f"{self.processes}p{self.workers}w{self.kernels}k{self.engines}e"

    @property
    def threads(self) -> int:
        engine_threads = self.kernels * self.engines if self.engines > 1 else 0
        return self.processes + 1 + 2 * self.workers + self.kernels + engine_threads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = str(self.policy)
        return d


_INT_KEYS = {"processes", "workers", "kernels", "engines", "default_mct", "queue_depth"}
_FLOAT_KEYS = {"per_call_overhead_us", "frequency_penalty"}
_ALIASES = {"p": "processes", "w": "workers", "k": "kernels", "e": "engines", "batching_policy": "policy"}


def parse_config(text: str, base: PipelineConfig = PipelineConfig()) -> PipelineConfig:
    """``key = value`` lines (``#`` comments, optional quotes) over ``base``."""
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        key, sep, value = line.partition("=")
        key = _ALIASES.get(key.strip(), key.strip())
        value = value.strip().strip("\"'")
        if not sep:
            raise ValueError(f"line {lineno}: expected key = value")
        try:
            if key in _INT_KEYS:
                changes[key] = int(value)
            elif key in _FLOAT_KEYS:
                changes[key] = float(value)
            elif key == "policy":
                changes[key] = BatchPolicy.parse(value)
            elif key == "transport":
                changes[key] = value
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return replace(base, **changes)


# ---------------------------------------------------------------- messages

@dataclass
class Request:
    req_id: int
    producer: int
    user_query: int
    q_lo: int
    table: QueryColumns
    t_send: float
    t_router: float = 0.0


@dataclass
class Response:
    req_id: int
    producer: int
    rule_id: np.ndarray
    decisions: list
    version: int
    stages: dict
    t_reply: float
    error: str | None = None


@dataclass(frozen=True)
class StageBreakdown:
    encode_us: float
    transport_request_us: float
    queue_us: float
    kernel_us: float
    transport_response_us: float
    decode_scatter_us: float
    total_us: float

    @property
    def parts_us(self) -> float:
        return (self.encode_us + self.transport_request_us + self.kernel_us
                + self.transport_response_us + self.decode_scatter_us)


STAGES = ("encode_us", "transport_request_us", "queue_us", "kernel_us",
          "transport_response_us", "decode_scatter_us", "total_us")


# ---------------------------------------------------------------- transports

class InProcessTransport:
    def __init__(self, producers: int, depth: int):
        self.requests: queue.Queue = queue.Queue(maxsize=depth)
        self.replies = [queue.Queue() for _ in range(producers)]

    def send(self, producer: int, msg) -> None:
        self.requests.put(msg)

    def receive(self):
        return self.requests.get()

    def reply(self, producer: int, resp: Response) -> None:
        self.replies[producer].put(resp)

    def wait_reply(self, producer: int) -> Response:
        return self.replies[producer].get()

    def close(self) -> None:
        pass


class SocketTransport:
    """Request-reply over local TCP, one duplex connection per producer."""

    def __init__(self, producers: int, depth: int):
        key = secrets.token_bytes(16)
        self._listener = Listener(("127.0.0.1", 0), authkey=key)
        server: dict[int, object] = {}

        def accept():
            for _ in range(producers):
                conn = self._listener.accept()
                server[conn.recv()] = conn

        t = threading.Thread(target=accept, daemon=True)
        t.start()
        self._client = []
        for j in range(producers):
            c = Client(self._listener.address, authkey=key)
            c.send(j)
            self._client.append(c)
        t.join()
        self._server = [server[j] for j in range(producers)]
        self._locks = [threading.Lock() for _ in range(producers)]
        self._open = list(self._server)

    def send(self, producer: int, msg) -> None:
        self._client[producer].send(msg)

    def receive(self):
        while True:
            for conn in wait(self._open):
                msg = conn.recv()
                if isinstance(msg, Request):
                    msg.t_router = time.perf_counter()
                return msg

    def reply(self, producer: int, resp: Response) -> None:
        with self._locks[producer]:
            self._server[producer].send(resp)

    def wait_reply(self, producer: int) -> Response:
        return self._client[producer].recv()

    def close(self) -> None:
        for c in self._client + self._server:
            c.close()
        self._listener.close()


# ---------------------------------------------------------------- kernels

class Kernel:
    """One kernel: a FIFO of calls served by a single thread."""

    def __init__(self, index: int, handle: EngineHandle, overhead_us: float, config: KernelConfig):
        self.index = index
        self.handle = handle
        self.overhead = overhead_us / 1e6
        self.config = config
        self.calls = 0
        self._q: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._serve, name=f"kernel-{index}", daemon=True)
        self._thread.start()

    def submit(self, nfa: Nfa, codes: np.ndarray) -> Future:
        fut: Future = Future()
        self._q.put((nfa, codes, fut))
        return fut

    def _serve(self):
        while True:
            item = self._q.get()
            if item is None:
                return
            nfa, codes, fut = item
            t0 = time.perf_counter()
            try:
                if self.overhead:
                    time.sleep(self.overhead)
                cols, _ = evaluate_parallel_codes(nfa, codes, self.config)
                self.calls += 1
                fut.set_result((cols, t0, time.perf_counter()))
            except BaseException as exc:  # delivered to the waiting submitter
                fut.set_exception(exc)

    def stop(self):
        self._q.put(None)
        self._thread.join()


# ---------------------------------------------------------------- report

@dataclass
class UserQueryTrace:
    user_query: int
    producer: int
    queries: int
    calls: int
    valid_ts: int
    elapsed_us: float


@dataclass
class RunReport:
    config: PipelineConfig
    wall_s: float
    emitted: int
    answered: int
    requests: int
    misrouted: int
    worker_requests: list[int]
    kernel_calls: list[int]
    stages: list[StageBreakdown] = field(repr=False)
    traces: list[UserQueryTrace] = field(repr=False)
    results: dict = field(repr=False)        # user query -> decisions (list)
    rule_ids: dict = field(repr=False)       # user query -> rule ids (array)
    segments: dict = field(repr=False)       # user query -> [(first query, count, image version)]
    versions: set = field(default_factory=set)
    oversubscribed: bool = False
    host_cpus: int = 1

    @property
    def throughput_qps(self) -> float:
        return self.answered / self.wall_s if self.wall_s > 0 else 0.0

    def stage_summary(self) -> dict:
        return {s: summary([getattr(b, s) for b in self.stages]) for s in STAGES}

    def decision_multiset(self) -> dict:
        """(user query, query index) -> decision for every answered query."""
        return {(u, i): d for u, ds in self.results.items() for i, d in enumerate(ds)}

    def decision_digest(self) -> str:
        """sha256 over every (user query, query index, decision) in order."""
        h = hashlib.sha256()
        for u in sorted(self.results):
            h.update(json.dumps([u, [_plain(d) for d in self.results[u]]]).encode())
        return h.hexdigest()

    def row(self) -> dict:
        st = self.stage_summary()
        c = self.config
        return {
            "p": c.processes, "w": c.workers, "k": c.kernels, "e": c.engines,
            "policy": str(c.policy),
            "throughput_qps": round(self.throughput_qps, 3),
            "p50_us": round(st["total_us"]["p50"], 3),
            "p90_us": round(st["total_us"]["p90"], 3),
            "encode_us": round(st["encode_us"]["mean"], 3),
            "transport_us": round(st["transport_request_us"]["mean"] + st["transport_response_us"]["mean"], 3),
            "kernel_us": round(st["kernel_us"]["mean"], 3),
            "decisions_sha256": self.decision_digest(),
        }


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    return value


CSV_COLUMNS = ("p", "w", "k", "e", "policy", "throughput_qps", "p50_us", "p90_us",
               "encode_us", "transport_us", "kernel_us", "decisions_sha256")


def run_manifest(report: RunReport, seed: int, nfa: Nfa) -> dict:
    return {
        "seed": seed,
        "schema_hash": nfa.schema.hash,
        "nfa_hash": nfa.image_hash,
        "config": report.config.to_dict(),
        "emitted": report.emitted,
        "answered": report.answered,
        "requests": report.requests,
        "misrouted": report.misrouted,
        "oversubscribed": report.oversubscribed,
        "host_cpus": report.host_cpus,
        "wall_s": report.wall_s,
    }


# ---------------------------------------------------------------- run

class Pipeline:
    """A running pipeline instance; :meth:`run` drives a workload through it."""

    def __init__(self, config: PipelineConfig, nfa: Nfa):
        self.config = config
        kc = KernelConfig(config.kernels, config.engines, config.frequency_penalty)
        self.handles = [EngineHandle(nfa, kc) for _ in range(config.kernels)]
        self.kernels: list[Kernel] = []

    def reload(self, nfa: Nfa) -> None:
        """Swap the image of every kernel; each batch still sees a single image."""
        for h in self.handles:
            h.reload(nfa)

    def run(self, workload: Sequence[UserQuery]) -> RunReport:
        cfg = self.config
        for uq in workload:
            if uq.queries is None:
                raise PipelineError(f"user query {uq.id} has no materialised MCT queries")
        kc = KernelConfig(cfg.kernels, cfg.engines, cfg.frequency_penalty)
        transport = (SocketTransport if cfg.transport == "socket" else InProcessTransport)(cfg.processes, cfg.queue_depth)
        self.kernels = [Kernel(i, h, cfg.per_call_overhead_us, kc) for i, h in enumerate(self.handles)]
        inboxes = [queue.Queue(maxsize=cfg.queue_depth) for _ in range(cfg.workers)]
        worker_requests = [0] * cfg.workers
        errors: list[BaseException] = []
        lock = threading.Lock()
        stages: list[StageBreakdown] = []
        traces: list[UserQueryTrace] = []
        results: dict = {}
        rule_ids: dict = {}
        segments: dict = {}
        versions: set = set()
        counters = {"emitted": 0, "answered": 0, "requests": 0, "misrouted": 0}
        next_id = iter(range(1 << 62))

        def record_error(exc):
            with lock:
                errors.append(exc)

        # -------- producers
        def producer(j: int, mine: list[UserQuery]):
            try:
                for uq in mine:
                    t_start = time.perf_counter()
                    ids: list[np.ndarray] = []
                    segs: list[tuple[int, int, int]] = []

                    def answer(batch, uq=uq):
                        with lock:
                            rid = next(next_id)
                            counters["emitted"] += batch.n_queries
                        req = Request(rid, j, uq.id, batch.q_lo,
                                      uq.queries.take(slice(batch.q_lo, batch.q_hi)), time.perf_counter())
                        transport.send(j, req)
                        resp = transport.wait_reply(j)
                        t_recv = time.perf_counter()
                        if resp.error is not None:
                            raise PipelineError(resp.error)
                        st = resp.stages
                        total = (t_recv - req.t_send) * 1e6
                        parts = dict(
                            encode_us=st["encode_us"],
                            transport_request_us=st["transport_request_us"],
                            kernel_us=st["kernel_us"],
                            transport_response_us=(t_recv - resp.t_reply) * 1e6,
                            decode_scatter_us=st["decode_scatter_us"],
                        )
                        queue_us = max(0.0, total - sum(parts.values()))
                        with lock:
                            if resp.producer != j or resp.req_id != rid:
                                counters["misrouted"] += 1
                            counters["answered"] += len(resp.decisions)
                            counters["requests"] += 1
                            stages.append(StageBreakdown(queue_us=queue_us, total_us=total, **parts))
                            versions.add(resp.version)
                        ids.append(resp.rule_id)
                        segs.append((batch.q_lo, len(resp.decisions), resp.version))
                        return resp.decisions

                    decisions, calls, valid = explore(uq, cfg.policy, answer, cfg.default_mct)
                    elapsed = (time.perf_counter() - t_start) * 1e6
                    with lock:
                        results[uq.id] = decisions
                        rule_ids[uq.id] = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
                        segments[uq.id] = segs
                        traces.append(UserQueryTrace(uq.id, j, len(decisions), calls, valid, elapsed))
            except BaseException as exc:
                record_error(exc)
            finally:
                transport.send(j, _STOP)

        # -------- router
        def router():
            done = 0
            rr = 0
            try:
                while done < cfg.processes:
                    msg = transport.receive()
                    if isinstance(msg, str):
                        done += 1
                        continue
                    if not msg.t_router:
                        msg.t_router = time.perf_counter()
                    worker_requests[rr] += 1
                    inboxes[rr].put(msg)
                    rr = (rr + 1) % cfg.workers
            except BaseException as exc:
                record_error(exc)
            finally:
                for box in inboxes:
                    box.put(_STOP)

        # -------- workers
        def encoder(i: int, slot: queue.Queue):
            box = inboxes[i]
            kernel = self.kernels[i % cfg.kernels]
            while True:
                first = box.get()
                if isinstance(first, str):
                    slot.put(_STOP)
                    return
                reqs, stop = [first], False
                while True:
                    try:
                        nxt = box.get_nowait()
                    except queue.Empty:
                        break
                    if isinstance(nxt, str):
                        stop = True
                        break
                    reqs.append(nxt)
                t0 = time.perf_counter()
                try:
                    version, nfa = kernel.handle.snapshot()
                    table = QueryColumns.concat([r.table for r in reqs])
                    codes = encode_codes(nfa, table)
                    slot.put((reqs, nfa, version, codes, t0, time.perf_counter(), None))
                except BaseException as exc:
                    slot.put((reqs, None, None, None, t0, time.perf_counter(), exc))
                if stop:
                    slot.put(_STOP)
                    return

        def submitter(i: int, slot: queue.Queue):
            kernel = self.kernels[i % cfg.kernels]
            while True:
                item = slot.get()
                if isinstance(item, str):
                    return
                reqs, nfa, version, codes, t_enc0, t_enc1, exc = item
                try:
                    if exc is not None:
                        raise exc
                    cols, k0, k1 = kernel.submit(nfa, codes).result()
                    t_sc0 = time.perf_counter()
                    pieces = []
                    off = 0
                    for r in reqs:
                        n = len(r.table)
                        sub = cols.take(slice(off, off + n))
                        pieces.append((r, sub.rule_id, sub.decision.tolist()))
                        off += n
                    t_sc1 = time.perf_counter()
                    for r, rid, dec in pieces:
                        stages_ = {
                            "encode_us": (t_enc1 - t_enc0) * 1e6,
                            "transport_request_us": (r.t_router - r.t_send) * 1e6,
                            "kernel_us": (k1 - k0) * 1e6,
                            "decode_scatter_us": (t_sc1 - t_sc0) * 1e6,
                        }
                        transport.reply(r.producer, Response(r.req_id, r.producer, rid, dec, version,
                                                             stages_, time.perf_counter()))
                except BaseException as err:
                    record_error(err)
                    for r in reqs:
                        transport.reply(r.producer, Response(r.req_id, r.producer, np.zeros(0, dtype=np.int64),
                                                             [], -1, {}, time.perf_counter(), repr(err)))

        shares: list[list[UserQuery]] = [[] for _ in range(cfg.processes)]
        for n, uq in enumerate(workload):
            shares[n % cfg.processes].append(uq)
        threads = [threading.Thread(target=router, name="router", daemon=True)]
        for i in range(cfg.workers):
            slot: queue.Queue = queue.Queue(maxsize=1)
            threads.append(threading.Thread(target=encoder, args=(i, slot), name=f"encoder-{i}", daemon=True))
            threads.append(threading.Thread(target=submitter, args=(i, slot), name=f"submitter-{i}", daemon=True))
        producers = [threading.Thread(target=producer, args=(j, shares[j]), name=f"producer-{j}", daemon=True)
                     for j in range(cfg.processes)]
        t0 = time.perf_counter()
        try:
            for t in threads + producers:
                t.start()
            for t in producers + threads:
                t.join()
        finally:
            wall = time.perf_counter() - t0
            for k in self.kernels:
                k.stop()
            transport.close()
        if errors:
            raise PipelineError(f"pipeline failed: {errors[0]!r}") from errors[0]
        cpus = os.cpu_count() or 1
        traces.sort(key=lambda t: t.user_query)
        return RunReport(
            config=cfg,
            wall_s=wall,
            emitted=counters["emitted"],
            answered=counters["answered"],
            requests=counters["requests"],
            misrouted=counters["misrouted"],
            worker_requests=worker_requests,
            kernel_calls=[k.calls for k in self.kernels],
            stages=stages,
            traces=traces,
            results=results,
            rule_ids=rule_ids,
            segments=segments,
            versions=versions,
            oversubscribed=cfg.threads > cpus,
            host_cpus=cpus,
        )


def run_pipeline(config: PipelineConfig, workload: Sequence[UserQuery], nfa: Nfa) -> RunReport:
    return Pipeline(config, nfa).run(workload)


# ---------------------------------------------------------------- sweep

def pareto_flags(points: Sequence[tuple[float, float]]) -> list[bool]:
    """Flag (throughput, latency) points that no other point dominates.

    A point is dominated when another has throughput >= and latency <=,
    strictly better in at least one of the two.
    """
    flags = []
    for i, (t, l) in enumerate(points):
        dominated = any(
            t2 >= t and l2 <= l and (t2 > t or l2 < l)
            for j, (t2, l2) in enumerate(points) if j != i
        )
        flags.append(not dominated)
    return flags


def sweep(configs: Sequence[PipelineConfig], workload: Sequence[UserQuery], nfa: Nfa) -> list[dict]:
    rows = []
    for cfg in configs:
        rep = run_pipeline(cfg, workload, nfa)
        row = rep.row()
        row["oversubscribed"] = rep.oversubscribed
        rows.append(row)
    flags = pareto_flags([(r["throughput_qps"], r["p90_us"]) for r in rows])
    for r, f in zip(rows, flags):
        r["pareto"] = f
    return rows


def crossover_report(cpu_reports, report: RunReport) -> list[dict]:
    """Per user query: CPU linear-scan time vs pipeline time and engine calls."""
    by_id = {t.user_query: t for t in report.traces}
    rows = []
    for c in cpu_reports:
        t = by_id.get(c.user_query)
        if t is None:
            continue
        rows.append({
            "user_query": c.user_query,
            "queries": c.queries,
            "cpu_us": round(c.cpu_us, 3),
            "pipeline_us": round(t.elapsed_us, 3),
            "engine_calls": t.calls,
            "faster": "engine" if t.elapsed_us < c.cpu_us else "cpu",
        })
    return rows


def dumps_manifest(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"
