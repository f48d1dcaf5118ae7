"""Batched ingest straight to the shard writers.

Per flush, for each shard: one bulk vertex request (distinct uncached
endpoints, returns internal ids and reserves an edge-id range) and one bulk
edge request carrying the outgoing halves it owns and the incoming halves
targeting it.  That is four messages per shard, two when every endpoint is
already cached and a reserved range is on hand.

Submissions go to the active queue set; a flush swaps in the other set, so
producers never append to a set that is being drained.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from . import wire
from .codec import Reader, Writer
from .dgraph import DistributedGraph
from .graph import EdgeIdRange
from .ids import pack_edge_id
from .messaging import CompletionHandle
from .placement import as_external

log = logging.getLogger(__name__)

DEFAULT_BATCH = 100_000


@dataclass
class PendingEdge:
    src: bytes
    tgt: bytes
    label: Optional[str] = None
    props: Optional[Mapping[str, Any]] = None
    eid: int = 0


@dataclass
class _QueueSet:
    shards: int
    out: list[list[PendingEdge]] = field(init=False)
    incoming: list[list[PendingEdge]] = field(init=False)
    vertices: list[dict[bytes, tuple[Optional[str], Optional[Mapping[str, Any]]]]] = field(init=False)
    size: int = 0

    def __post_init__(self) -> None:
        self.out = [[] for _ in range(self.shards)]
        self.incoming = [[] for _ in range(self.shards)]
        self.vertices = [{} for _ in range(self.shards)]


@dataclass
class ShardFlush:
    shard: int
    vertices_sent: int = 0
    out_edges: int = 0
    in_edges: int = 0
    messages: int = 0
    seconds: float = 0.0
    error: Optional[str] = None


@dataclass
class FlushReport:
    edges: int = 0
    vertices: int = 0
    failed_edges: int = 0
    seconds: float = 0.0
    shards: list[ShardFlush] = field(default_factory=list)

    @property
    def messages(self) -> int:
        return sum(s.messages for s in self.shards)

    def merge(self, other: "FlushReport") -> None:
        self.edges += other.edges
        self.vertices += other.vertices
        self.failed_edges += other.failed_edges
        self.seconds += other.seconds
        by = {s.shard: s for s in self.shards}
        for s in other.shards:
            mine = by.get(s.shard)
            if mine is None:
                mine = ShardFlush(s.shard)
                self.shards.append(mine)
                by[s.shard] = mine
            mine.vertices_sent += s.vertices_sent
            mine.out_edges += s.out_edges
            mine.in_edges += s.in_edges
            mine.messages += s.messages
            mine.seconds += s.seconds
            mine.error = mine.error or s.error


class Firehose:
    def __init__(self, dg: DistributedGraph, batch_size: int = DEFAULT_BATCH,
                 cache_enabled: bool = True, background: bool = True, timeout: float = 600.0):
        self.dg = dg
        self.batch_size = batch_size
        self.cache_enabled = cache_enabled
        self.background = background
        self.timeout = timeout
        self.shards = dg.shard_count
        # flush when the active set holds batch_size entries per shard
        self.threshold = batch_size * self.shards
        self._active = _QueueSet(self.shards)
        self._swap_lock = threading.Lock()
        self._flush_lock = threading.Lock()
        self._inflight: Optional[threading.Thread] = None
        self._ranges: list[Optional[list[int]]] = [None] * self.shards  # [next, end) counters
        self.reports: list[FlushReport] = []
        self.ranges_reserved: list[EdgeIdRange] = []
        self._error: Optional[BaseException] = None

    # -- producer side -------------------------------------------------

    def submit_edge(self, src: bytes | str, tgt: bytes | str, label: Optional[str] = None,
                    props: Optional[Mapping[str, Any]] = None) -> None:
        e = PendingEdge(as_external(src), as_external(tgt), label, props)
        qs = self._active
        qs.out[self.dg.shard_of(e.src)].append(e)
        qs.incoming[self.dg.shard_of(e.tgt)].append(e)
        qs.size += 1
        if qs.size >= self.threshold:
            self._trigger()

    def submit_vertex(self, ext: bytes | str, label: Optional[str] = None,
                      props: Optional[Mapping[str, Any]] = None) -> None:
        ext = as_external(ext)
        qs = self._active
        qs.vertices[self.dg.shard_of(ext)][ext] = (label, props)
        qs.size += 1
        if qs.size >= self.threshold:
            self._trigger()

    def _swap(self) -> _QueueSet:
        with self._swap_lock:
            drained, self._active = self._active, _QueueSet(self.shards)
            return drained

    def _trigger(self) -> None:
        self._wait_inflight()
        drained = self._swap()
        if not self.background:
            self._flush_set(drained)
            return
        t = threading.Thread(target=self._flush_guarded, args=(drained,), name="firehose-flush", daemon=True)
        self._inflight = t
        t.start()

    def _flush_guarded(self, qs: _QueueSet) -> None:
        try:
            self._flush_set(qs)
        except BaseException as exc:
            log.exception("firehose flush failed")
            self._error = exc

    def _wait_inflight(self) -> None:
        t = self._inflight
        if t is not None:
            t.join()
            self._inflight = None
        if self._error is not None:
            err, self._error = self._error, None
            raise err

    def flush(self) -> FlushReport:
        """Flush everything submitted so far; waits for an in-flight flush first."""
        self._wait_inflight()
        return self._flush_set(self._swap())

    def close(self) -> FlushReport:
        report = self.flush()
        return report

    def __enter__(self) -> "Firehose":
        return self

    def __exit__(self, exc_type, *exc) -> None:
        if exc_type is None:
            self.close()
        else:
            self._wait_inflight()

    # -- flush ---------------------------------------------------------

    def _cached(self, ext: bytes) -> Optional[int]:
        return self.dg.vertex_cache.get(ext) if self.cache_enabled else None

    def _available(self, shard: int) -> int:
        r = self._ranges[shard]
        return r[1] - r[0] if r else 0

    def _flush_set(self, qs: _QueueSet) -> FlushReport:
        with self._flush_lock:
            return self._do_flush(qs)

    def _do_flush(self, qs: _QueueSet) -> FlushReport:
        t0 = time.perf_counter()
        dg = self.dg
        P = self.shards
        report = FlushReport(
            edges=sum(len(q) for q in qs.out),
            vertices=sum(len(v) for v in qs.vertices),
            shards=[ShardFlush(s) for s in range(P)],
        )
        if report.edges == 0 and report.vertices == 0:
            return report

        labels: dict[Optional[str], int] = {}

        def lid(label: Optional[str]) -> int:
            if label not in labels:
                labels[label] = dg.label_id(label)
            return labels[label]

        resolved: dict[bytes, int] = {}
        failed_shards: set[int] = set()

        # bulk vertex requests, all shards in parallel
        vreq: dict[int, tuple[CompletionHandle, list[bytes], float]] = {}
        for s in range(P):
            entries: dict[bytes, tuple[int, Optional[Mapping[str, Any]]]] = {}
            for ext, (label, props) in qs.vertices[s].items():
                entries[ext] = (lid(label), props)
            for e in qs.out[s]:
                self._want(e.src, entries, resolved)
            for e in qs.incoming[s]:
                self._want(e.tgt, entries, resolved)
            need = len(qs.out[s])
            range_len = need if self._available(s) < need else 0
            if not entries and not range_len:
                continue
            w = Writer().u64(range_len).u32(len(entries))
            order = list(entries)
            for ext in order:
                label_id, props = entries[ext]
                w.u8(label_id).blob(ext).props(props)
            h = dg.node.call_async(dg.endpoint(s), wire.BULK_VERTICES, w.getvalue())
            vreq[s] = (h, order, time.perf_counter())
            report.shards[s].vertices_sent = len(order)
            report.shards[s].messages += 2
        for s, (h, order, started) in vreq.items():
            try:
                r = Reader(h.wait(self.timeout))
                start, end = r.u64(), r.u64()
                vids = r.u64s()
            except Exception as exc:
                report.shards[s].error = f"bulk vertices: {exc}"
                failed_shards.add(s)
                continue
            report.shards[s].seconds += time.perf_counter() - started
            if end > start:
                self._ranges[s] = [start, end]
                self.ranges_reserved.append(EdgeIdRange(s, start, end))
            for ext, vid in zip(order, vids):
                resolved[ext] = vid
                if self.cache_enabled:
                    dg.vertex_cache.put(ext, vid)

        # materialize tuples: eids drawn from the source shard's reserved range
        outs: list[list[PendingEdge]] = [[] for _ in range(P)]
        for s in range(P):
            for e in qs.out[s]:
                if e.src not in resolved or e.tgt not in resolved:
                    report.failed_edges += 1
                    continue
                rng = self._ranges[s]
                if rng is None or rng[0] >= rng[1]:
                    report.failed_edges += 1
                    continue
                e.eid = pack_edge_id(s, rng[0])
                rng[0] += 1
                outs[s].append(e)

        ereq: dict[int, tuple[CompletionHandle, float]] = {}
        for s in range(P):
            ins = [e for e in qs.incoming[s] if e.eid]
            if not outs[s] and not ins:
                continue
            w = Writer().u64(len(outs[s])).u32(len(outs[s]))
            for e in outs[s]:
                w.u64(resolved[e.src]).u64(resolved[e.tgt]).u8(lid(e.label)).u64(e.eid).props(e.props)
            w.u32(len(ins))
            for e in ins:
                w.u64(resolved[e.tgt]).u64(resolved[e.src]).u8(lid(e.label)).u64(e.eid)
            h = dg.node.call_async(dg.endpoint(s), wire.BULK_EDGES, w.getvalue())
            ereq[s] = (h, time.perf_counter())
            report.shards[s].out_edges = len(outs[s])
            report.shards[s].in_edges = len(ins)
            report.shards[s].messages += 2
        for s, (h, started) in ereq.items():
            try:
                r = Reader(h.wait(self.timeout))
                r.u32()
                start, end = r.u64(), r.u64()
            except Exception as exc:
                report.shards[s].error = f"bulk edges: {exc}"
                report.failed_edges += len(outs[s])
                continue
            report.shards[s].seconds += time.perf_counter() - started
            if end > start:
                # prefetched range for the next batch
                self._ranges[s] = [start, end]
                self.ranges_reserved.append(EdgeIdRange(s, start, end))
        report.seconds = time.perf_counter() - t0
        self.reports.append(report)
        return report

    def _want(self, ext: bytes, entries: dict, resolved: dict) -> None:
        if ext in entries or ext in resolved:
            return
        vid = self._cached(ext)
        if vid is not None:
            resolved[ext] = vid
        else:
            entries[ext] = (0, None)


def firehose_open(dg: DistributedGraph, batch_size: int = DEFAULT_BATCH, **kw) -> Firehose:
    return Firehose(dg, batch_size, **kw)
