"""Shard process: one graph store, a task pool for reads, one writer worker.

Every read/write transaction runs on the writer worker.  It takes whatever
jobs are queued (up to ``max_group``), runs each in its own nested
transaction so a failing job rolls back alone, commits the group once,
and only then sends the jobs' replies and follow-up messages.
"""

from __future__ import annotations

import itertools
import json
import logging
import queue
import signal
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from . import wire
from .codec import Reader, Writer, decode_value, encode_value
from .graph import (
    DEFAULT_GRAPH,
    EdgeRecord,
    GraphConfig,
    GraphStore,
    VertexNotFound,
    graph_create,
    graph_delete,
    graph_open_or_create,
)
from .ids import vertex_shard
from .kvstore import KvConfig, KvEnv, KvTxn, StorageFull
from .messaging import DEFERRED, Endpoint, Request, RpcNode, read_hostfile
from .placement import ShardMap
from .runtime import InlineExecutor, TaskPool

log = logging.getLogger(__name__)

_INLINE = InlineExecutor()


class AsyncEdgeFailed(Exception):
    """An add-edge hop failed; the message names the hop."""


@dataclass
class _Job:
    fn: Callable[[KvTxn], Any]
    done: Callable[[Any, Optional[BaseException]], None]
    exclusive: bool = False


class WriterWorker:
    def __init__(self, env: KvEnv, max_group: int = 512, name: str = "writer"):
        self.env = env
        self.max_group = max_group
        self._q: "queue.SimpleQueue[Optional[_Job]]" = queue.SimpleQueue()
        self._busy = False
        self._stopped = threading.Event()
        self.transactions = 0
        self.commits = 0
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    def submit(self, fn: Callable[[KvTxn], Any], done: Callable[[Any, Optional[BaseException]], None],
               exclusive: bool = False) -> None:
        self._q.put(_Job(fn, done, exclusive))

    def run(self, fn: Callable[[KvTxn], Any], exclusive: bool = False) -> Any:
        """Submit and wait; for use outside the writer thread."""
        box: dict[str, Any] = {}
        ev = threading.Event()

        def done(result, error):
            box["r"], box["e"] = result, error
            ev.set()

        self.submit(fn, done, exclusive)
        ev.wait()
        if box["e"] is not None:
            raise box["e"]
        return box["r"]

    @property
    def idle(self) -> bool:
        return not self._busy and self._q.empty()

    def _run(self) -> None:
        while True:
            job = self._q.get()
            if job is None:
                self._stopped.set()
                return
            self._busy = True
            try:
                if job.exclusive:
                    self._run_exclusive(job)
                    continue
                group = [job]
                held = None
                while len(group) < self.max_group:
                    try:
                        nxt = self._q.get_nowait()
                    except queue.Empty:
                        break
                    if nxt is None or nxt.exclusive:
                        held = nxt
                        break
                    group.append(nxt)
                self._run_group(group)
                if held is not None:
                    if held.exclusive:
                        self._run_exclusive(held)
                    else:
                        self._stopped.set()
                        return
            finally:
                self._busy = not self._q.empty()

    def _run_exclusive(self, job: _Job) -> None:
        try:
            result, error = job.fn(None), None
        except Exception as exc:
            result, error = None, exc
        self._finish(job, result, error)

    def _run_group(self, group: list[_Job]) -> None:
        while True:
            outcomes: list[tuple[Any, Optional[BaseException]]] = []
            parent = self.env.begin(write=True)
            full = False
            try:
                for job in group:
                    child = self.env.begin(write=True, parent=parent)
                    try:
                        result = job.fn(child)
                        child.commit()
                        outcomes.append((result, None))
                    except Exception as exc:
                        child.abort()
                        if isinstance(exc, StorageFull):
                            full = True
                            break
                        outcomes.append((None, exc))
                if full:
                    raise StorageFull("map full")
                parent.commit()
            except StorageFull as exc:
                parent.abort()
                if self.env.config.grow:
                    self.env.grow()
                    continue
                outcomes = [(None, exc)] * len(group)
            except Exception as exc:
                parent.abort()
                log.exception("group commit failed")
                outcomes = [(None, exc)] * len(group)
            else:
                self.commits += 1
                self.transactions += sum(1 for _, e in outcomes if e is None)
            for job, (result, error) in zip(group, outcomes):
                self._finish(job, result, error)
            return

    @staticmethod
    def _finish(job: _Job, result: Any, error: Optional[BaseException]) -> None:
        try:
            job.done(result, error)
        except Exception:
            log.exception("writer completion failed")

    def stop(self) -> None:
        self._q.put(None)
        self._stopped.wait(10)


@dataclass
class ShardConfig:
    shard_id: int
    endpoints: list[Endpoint]
    data_dir: Path
    graph: str = DEFAULT_GRAPH
    workers: int = 4
    kv: KvConfig = field(default_factory=KvConfig)
    property_layout: str = "dup"
    max_group: int = 512


class ShardServer:
    def __init__(self, config: ShardConfig):
        self.config = config
        self.shard_id = config.shard_id
        self.shard_map = ShardMap(config.endpoints)
        path = Path(config.data_dir) / f"shard-{config.shard_id}"
        self.env = KvEnv(path, config.kv)
        self.graph = graph_open_or_create(
            self.env, config.graph,
            GraphConfig(shard_id=config.shard_id, property_layout=config.property_layout),
        )
        if self.graph.shard_id != config.shard_id:
            raise ValueError(
                f"{path} holds shard {self.graph.shard_id}, started as shard {config.shard_id}"
            )
        self.pool = TaskPool(config.workers, name=f"shard{config.shard_id}")
        self.writer = WriterWorker(self.env, config.max_group, name=f"shard{config.shard_id}-writer")
        self.node = RpcNode(f"shard{config.shard_id}", executor=self.pool)
        self._acks: dict[int, Request] = {}
        self._ack_lock = threading.Lock()
        self._tokens = itertools.count(1)
        self._stop = threading.Event()
        self._register()

    # -- plumbing ------------------------------------------------------

    def _register(self) -> None:
        w, r, i = self._writer_handler, self._reader_handler, self._inline_handler
        table = {
            wire.VERTEX_CHECK_OR_CREATE: w(self._vertex_check_or_create),
            wire.VERTEX_LOOKUP: r(self._vertex_lookup),
            wire.VERTEX_ADD: w(self._vertex_add),
            wire.VERTEX_GET: r(self._vertex_get),
            wire.VERTEX_SET_PROPERTY: w(self._vertex_set_property),
            wire.VERTEX_GET_PROPERTY: r(self._vertex_get_property),
            wire.VERTEX_EXTERNAL_IDS: r(self._vertex_externals),
            wire.EDGE_ADD_OUT: w(self._edge_add_out),
            wire.EDGE_ADD_IN: w(self._edge_add_in),
            wire.EDGE_SET_PROPERTY: w(self._edge_set_property),
            wire.EDGE_GET_PROPERTY: r(self._edge_get_property),
            wire.EDGE_GET_PROPERTIES: r(self._edge_get_properties),
            wire.ASYNC_EDGE_TARGET: i(self._async_target),
            wire.ASYNC_EDGE_SOURCE: i(self._async_source),
            wire.ASYNC_EDGE_INCOMING: i(self._async_incoming),
            wire.GET_ALL_EDGES: r(self._get_all_edges),
            wire.GET_IN_EDGES: r(self._get_in_edges),
            wire.VERTEX_DELETE: i(self._vertex_delete),
            wire.PURGE_OUT_EDGE: w(self._purge_out),
            wire.PURGE_IN_EDGE: w(self._purge_in),
            wire.EDGE_REMOVE_OUT: w(self._remove_out),
            wire.EDGE_REMOVE_IN: w(self._remove_in),
            wire.LABEL_CHECK_OR_CREATE: w(self._label_check_or_create),
            wire.LABEL_TABLE: r(self._label_table),
            wire.BULK_VERTICES: w(self._bulk_vertices),
            wire.BULK_EDGES: w(self._bulk_edges),
            wire.PING: i(lambda req: b"pong"),
            wire.STATS: i(self._stats),
            wire.COUNTERS_RESET: i(self._counters_reset),
            wire.DUMP: r(self._dump),
            wire.GRAPH_RESET: i(self._graph_reset),
            wire.SHUTDOWN: i(self._shutdown_request),
        }
        for opcode, (handler, executor) in table.items():
            self.node.register_handler(opcode, handler, executor)

    def _writer_handler(self, fn: Callable[[KvTxn, bytes], bytes]):
        """Run fn(txn, payload) as a writer job; reply after the group commits."""

        def handler(req: Request):
            self.writer.submit(lambda txn: fn(txn, req.payload), _replier(req))
            return DEFERRED

        return handler, _INLINE

    def _reader_handler(self, fn: Callable[[KvTxn, bytes], bytes]):
        def handler(req: Request):
            with self.env.begin() as txn:
                return fn(txn, req.payload)

        return handler, self.pool

    @staticmethod
    def _inline_handler(fn: Callable[[Request], Any]):
        return fn, _INLINE

    def _send(self, shard: int, opcode: int, payload: bytes) -> None:
        self.node.send_oneway(self.shard_map.endpoint(shard), opcode, payload)

    # -- vertices ------------------------------------------------------

    def _vertex_check_or_create(self, txn: KvTxn, payload: bytes) -> bytes:
        r = Reader(payload)
        label, ext = r.u8(), r.blob()
        vid, created = self.graph.check_or_create_vertex_ex(txn, ext, label)
        return struct.pack("<QB", vid, created)

    def _vertex_lookup(self, txn: KvTxn, payload: bytes) -> bytes:
        vid = self.graph.lookup_vertex(txn, Reader(payload).blob())
        return wire.u64(vid or 0)

    def _vertex_add(self, txn: KvTxn, payload: bytes) -> bytes:
        r = Reader(payload)
        label, ext, props = r.u8(), r.blob(), r.props()
        vid = self.graph.check_or_create_vertex(txn, ext, label)
        for name, value in props.items():
            self.graph.set_vertex_property(txn, vid, name, value)
        return wire.u64(vid)

    def _vertex_get(self, txn: KvTxn, payload: bytes) -> bytes:
        vid = self.graph.lookup_vertex(txn, Reader(payload).blob())
        if vid is None:
            return wire.encode_vertex_get(0, {})
        return wire.encode_vertex_get(vid, self.graph.vertex_properties(txn, vid))

    def _vertex_set_property(self, txn: KvTxn, payload: bytes) -> bytes:
        r = Reader(payload)
        vid, name, raw = r.u64(), r.text(), r.blob()
        self.graph.set_vertex_property(txn, vid, name, decode_value(raw)[0])
        return b""

    def _vertex_get_property(self, txn: KvTxn, payload: bytes) -> bytes:
        r = Reader(payload)
        vid, name = r.u64(), r.text()
        return _optional_value(self.graph.get_vertex_property(txn, vid, name))

    def _vertex_externals(self, txn: KvTxn, payload: bytes) -> bytes:
        vids = Reader(payload).u64s()
        w = Writer().u32(len(vids))
        for vid in vids:
            w.blob(self.graph.external_id(txn, vid) or b"")
        return w.getvalue()

    # -- edges ---------------------------------------------------------

    def _edge_add_out(self, txn: KvTxn, payload: bytes) -> bytes:
        r = Reader(payload)
        src, tgt, label, props = r.u64(), r.u64(), r.u8(), r.props()
        eid = self.graph.add_outgoing_edge(txn, src, tgt, label)
        for name, value in props.items():
            self.graph.set_edge_property(txn, eid, name, value)
        return wire.u64(eid)

    def _edge_add_in(self, txn: KvTxn, payload: bytes) -> bytes:
        tgt, src, eid, label = struct.unpack("<QQQB", payload)
        self.graph.add_incoming_edge(txn, tgt, src, eid, label)
        return b""

    def _edge_set_property(self, txn: KvTxn, payload: bytes) -> bytes:
        r = Reader(payload)
        eid, name, raw = r.u64(), r.text(), r.blob()
        self.graph.set_edge_property(txn, eid, name, decode_value(raw)[0])
        return b""

    def _edge_get_property(self, txn: KvTxn, payload: bytes) -> bytes:
        r = Reader(payload)
        eid, name = r.u64(), r.text()
        return _optional_value(self.graph.get_edge_property(txn, eid, name))

    def _edge_get_properties(self, txn: KvTxn, payload: bytes) -> bytes:
        return Writer().props(self.graph.edge_properties(txn, wire.read_u64(payload))).getvalue()

    def _get_all_edges(self, txn: KvTxn, payload: bytes) -> bytes:
        return self._edge_lists(txn, payload, self.graph.get_out_edges)

    def _get_in_edges(self, txn: KvTxn, payload: bytes) -> bytes:
        return self._edge_lists(txn, payload, self.graph.get_in_edges)

    @staticmethod
    def _edge_lists(txn: KvTxn, payload: bytes, getter) -> bytes:
        t0 = time.perf_counter()
        out = []
        for vid in Reader(payload).u64s():
            out.extend((vid, rec.target, rec.label, rec.edge) for rec in getter(txn, vid))
        micros = min(int((time.perf_counter() - t0) * 1e6), 0xFFFFFFFF)
        return wire.encode_edge_list(micros, out)

    # -- asynchronous add-edge: target -> source -> target [-> proxy] ----------

    def _async_target(self, req: Request):
        r = Reader(req.payload)
        confirm, label, src_ext, tgt_ext, props = r.u8(), r.u8(), r.blob(), r.blob(), r.props()
        token = 0
        if confirm:
            token = next(self._tokens)
            with self._ack_lock:
                self._acks[token] = req

        def done(vidt, error):
            if error is not None:
                self._async_fail(token, 1, error)
                return
            payload = (
                Writer().u64(token).u16(self.shard_id).u64(vidt).u8(label).blob(src_ext)
                .props(props).getvalue()
            )
            self._send(self.shard_map.shard_of(src_ext), wire.ASYNC_EDGE_SOURCE, payload)

        self.writer.submit(lambda txn: self.graph.check_or_create_vertex(txn, tgt_ext), done)
        return DEFERRED

    def _async_source(self, req: Request):
        r = Reader(req.payload)
        token, tshard, vidt, label, src_ext, props = (
            r.u64(), r.u16(), r.u64(), r.u8(), r.blob(), r.props()
        )

        def work(txn: KvTxn) -> tuple[int, int]:
            vids = self.graph.check_or_create_vertex(txn, src_ext)
            eid = self.graph.add_outgoing_edge(txn, vids, vidt, label)
            for name, value in props.items():
                self.graph.set_edge_property(txn, eid, name, value)
            return vids, eid

        def done(result, error):
            w = Writer().u64(token).u64(vidt)
            if error is not None:
                log.warning("async add_edge hop 2 failed: %s", error)
                if not token:
                    return
                w.u64(0).u64(0).u8(label).u8(2).text(str(error))
            else:
                vids, eid = result
                w.u64(vids).u64(eid).u8(label).u8(0).text("")
            self._send(tshard, wire.ASYNC_EDGE_INCOMING, w.getvalue())

        self.writer.submit(work, done)
        return DEFERRED

    def _async_incoming(self, req: Request):
        r = Reader(req.payload)
        token, vidt, vids, eid, label, failed_hop, message = (
            r.u64(), r.u64(), r.u64(), r.u64(), r.u8(), r.u8(), r.text()
        )
        if failed_hop:
            self._async_fail(token, failed_hop, message)
            return DEFERRED

        def done(_, error):
            if error is not None:
                self._async_fail(token, 3, error)
                return
            if token:
                with self._ack_lock:
                    origin = self._acks.pop(token, None)
                if origin is not None:
                    origin.reply(wire.u64(eid))

        self.writer.submit(lambda txn: self.graph.add_incoming_edge(txn, vidt, vids, eid, label), done)
        return DEFERRED

    def _async_fail(self, token: int, hop: int, error: Any) -> None:
        log.warning("async add_edge hop %d failed: %s", hop, error)
        if not token:
            return
        with self._ack_lock:
            origin = self._acks.pop(token, None)
        if origin is not None:
            origin.fail(AsyncEdgeFailed(f"hop {hop}: {error}"))

    # -- deletes -------------------------------------------------------

    def _vertex_delete(self, req: Request):
        ext = Reader(req.payload).blob()

        def work(txn: KvTxn):
            vid = self.graph.lookup_vertex(txn, ext)
            if vid is None:
                raise VertexNotFound(ext.decode(errors="replace"))
            return self.graph.delete_vertex_local(txn, vid)

        def done(removal, error):
            if error is not None:
                req.fail(error)
                return
            v = removal.vertex
            incoming = [(s, e) for s, e in removal.incoming if s != v]
            outgoing = [(t, e) for t, e in removal.outgoing if t != v]
            for src, eid in incoming:
                self._send(vertex_shard(src), wire.PURGE_OUT_EDGE, struct.pack("<QQQ", src, v, eid))
            for tgt, eid in outgoing:
                self._send(vertex_shard(tgt), wire.PURGE_IN_EDGE, struct.pack("<QQQ", tgt, v, eid))
            req.reply(struct.pack("<QII", v, len(incoming), len(outgoing)))

        self.writer.submit(work, done)
        return DEFERRED

    def _purge_out(self, txn: KvTxn, payload: bytes) -> bytes:
        src, tgt, eid = struct.unpack("<QQQ", payload)
        self.graph.remove_out_edge(txn, src, tgt, eid)
        return b""

    def _purge_in(self, txn: KvTxn, payload: bytes) -> bytes:
        tgt, src, eid = struct.unpack("<QQQ", payload)
        self.graph.remove_in_edge(txn, tgt, src, eid)
        return b""

    def _remove_out(self, txn: KvTxn, payload: bytes) -> bytes:
        src, tgt, eid = struct.unpack("<QQQ", payload)
        return bytes([self.graph.remove_out_edge(txn, src, tgt, eid)])

    def _remove_in(self, txn: KvTxn, payload: bytes) -> bytes:
        tgt, src, eid = struct.unpack("<QQQ", payload)
        return bytes([self.graph.remove_in_edge(txn, tgt, src, eid)])

    # -- labels --------------------------------------------------------

    def _label_check_or_create(self, txn: KvTxn, payload: bytes) -> bytes:
        return bytes([self.graph.check_or_create_label(txn, Reader(payload).text())])

    def _label_table(self, txn: KvTxn, payload: bytes) -> bytes:
        labels = self.graph.all_labels(txn)
        w = Writer().u16(len(labels))
        for lid, name in sorted(labels.items()):
            w.u8(lid).text(name)
        return w.getvalue()

    # -- bulk ingest ---------------------------------------------------

    def _bulk_vertices(self, txn: KvTxn, payload: bytes) -> bytes:
        r = Reader(payload)
        range_len = r.u64()
        entries = [(r.u8(), r.blob(), r.props()) for _ in range(r.u32())]
        vids, rng = self.graph.batch_add_vertices(
            txn, ((ext, label, props) for label, ext, props in entries), range_len
        )
        return Writer().u64(rng.start).u64(rng.end).u64s(vids).getvalue()

    def _bulk_edges(self, txn: KvTxn, payload: bytes) -> bytes:
        r = Reader(payload)
        prefetch = r.u64()
        records = []
        edge_props = []
        for _ in range(r.u32()):
            src, tgt, label, eid, props = r.u64(), r.u64(), r.u8(), r.u64(), r.props()
            records.append((src, EdgeRecord(tgt, label, eid), "out"))
            if props:
                edge_props.append((eid, props))
        for _ in range(r.u32()):
            tgt, src, label, eid = r.u64(), r.u64(), r.u8(), r.u64()
            records.append((tgt, EdgeRecord(src, label, eid), "in"))
        n = self.graph.batch_add_edges(txn, records)
        for eid, props in edge_props:
            for name, value in props.items():
                self.graph.set_edge_property(txn, eid, name, value)
        rng = self.graph.reserve_edge_ids(txn, prefetch)
        return Writer().u32(n).u64(rng.start).u64(rng.end).getvalue()

    # -- control -------------------------------------------------------

    def stats(self) -> dict[str, Any]:
        c = self.node.counters_snapshot()
        return {
            "shard": self.shard_id,
            "sent": {str(k): v for k, v in c.sent.items()},
            "received": {str(k): v for k, v in c.received.items()},
            "transactions": self.writer.transactions,
            "commits": self.writer.commits,
            "idle": self.writer.idle and self.pool.pending == 0,
            "pending_acks": len(self._acks),
        }

    def _stats(self, req: Request) -> bytes:
        return json.dumps(self.stats()).encode()

    def _counters_reset(self, req: Request) -> bytes:
        self.node.counters_reset()
        self.writer.transactions = 0
        self.writer.commits = 0
        return b""

    def _dump(self, txn: KvTxn, payload: bytes) -> bytes:
        g = self.graph
        w = Writer()
        vertices = list(g.iter_vertices(txn))
        w.u32(len(vertices))
        for vid, ext in vertices:
            w.u64(vid).blob(ext).props(g.vertex_properties(txn, vid))
        outs = list(g.iter_out_edges(txn))
        w.u32(len(outs))
        for src, rec in outs:
            w.u64(src).u64(rec.target).u8(rec.label).u64(rec.edge).props(g.edge_properties(txn, rec.edge))
        ins = list(g.iter_in_edges(txn))
        w.u32(len(ins))
        for tgt, rec in ins:
            w.u64(tgt).u64(rec.target).u8(rec.label).u64(rec.edge)
        return w.getvalue()

    def _graph_reset(self, req: Request):
        def work(_):
            name = self.graph.name
            graph_delete(self.env, name)
            self.graph = graph_create(
                self.env, name,
                GraphConfig(shard_id=self.shard_id, property_layout=self.config.property_layout),
            )
            with self._ack_lock:
                self._acks.clear()
            return b""

        self.writer.submit(work, _replier(req), exclusive=True)
        return DEFERRED

    def _shutdown_request(self, req: Request) -> bytes:
        threading.Timer(0.05, self._stop.set).start()
        return b""

    # -- lifecycle -----------------------------------------------------

    def serve(self, host: Optional[str] = None, port: Optional[int] = None) -> tuple[str, int]:
        ep = self.shard_map.endpoint(self.shard_id)
        return self.node.listen(host or ep.host, ep.port if port is None else port)

    def wait(self) -> None:
        while not self._stop.wait(0.5):
            pass

    def stop(self) -> None:
        self._stop.set()

    def close(self) -> None:
        self.node.close()
        self.pool.shutdown(wait=False)
        self.writer.stop()
        self.env.close()


def _replier(req: Request) -> Callable[[Any, Optional[BaseException]], None]:
    def done(result: Any, error: Optional[BaseException]) -> None:
        if error is not None:
            req.fail(error)
        else:
            req.reply(result if result is not None else b"")

    return done


def _optional_value(value: Any) -> bytes:
    if value is None:
        return Writer().u8(0).blob(b"").getvalue()
    return Writer().u8(1).blob(encode_value(value)).getvalue()


def shard_endpoints(hostfile: str | Path) -> list[Endpoint]:
    """Shard endpoints from a hostfile whose last line is the query manager."""
    eps = read_hostfile(hostfile)
    if len(eps) < 2:
        raise ValueError(f"{hostfile}: need at least one shard line and a query manager line")
    return eps[:-1]


def run_shard(config: ShardConfig) -> None:
    server = ShardServer(config)
    server.serve()
    log.info("shard %d serving on %s", config.shard_id, server.node.address)
    signal.signal(signal.SIGTERM, lambda *_: server.stop())
    signal.signal(signal.SIGINT, lambda *_: server.stop())
    try:
        server.wait()
    finally:
        server.close()
