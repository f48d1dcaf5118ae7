"""Distributed graph facade (proxy mode).

Owns no data: resolves the owning shard of each vertex and forwards the
operation over RPC.  Keeps an LRU cache of committed external->internal id
mappings and a cache of interned labels; shard 0 is the label authority.
"""

from __future__ import annotations

import json
import struct
import threading
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Hashable, Iterable, Mapping, Optional, Sequence

from . import wire
from .codec import Reader, Writer, decode_value, encode_value
from .graph import EdgeRecord
from .ids import edge_shard, vertex_shard
from .messaging import (
    CompletionHandle,
    Endpoint,
    MessageCounters,
    RemoteError,
    RpcError,
    RpcNode,
    chain,
    ready_handle,
)
from .placement import ShardMap, as_external
from .shard import shard_endpoints

DEFAULT_CACHE_SIZE = 1_000_000
LABEL_SHARD = 0


class LRUCache:
    def __init__(self, capacity: int = DEFAULT_CACHE_SIZE):
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key: Hashable) -> Any:
        with self._lock:
            value = self._data.get(key)
            if value is not None:
                self._data.move_to_end(key)
            return value

    def put(self, key: Hashable, value: Any) -> None:
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)

    def pop(self, key: Hashable) -> None:
        with self._lock:
            self._data.pop(key, None)

    def clear(self) -> None:
        with self._lock:
            self._data.clear()

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key: Hashable) -> bool:
        return key in self._data


class AddEdgeFailed(RpcError):
    """A step of add_edge failed; ``completed`` lists the steps that committed."""

    def __init__(self, step: str, completed: list[str], cause: BaseException):
        super().__init__(f"add_edge failed at {step} after {completed or 'nothing'}: {cause}")
        self.step = step
        self.completed = completed
        self.cause = cause


class StartNotFound(LookupError):
    pass


@dataclass
class ShardStats:
    shard: int
    counters: MessageCounters
    transactions: int
    commits: int
    idle: bool
    pending_acks: int


class DistributedGraph:
    def __init__(
        self,
        shard_map: ShardMap,
        node: Optional[RpcNode] = None,
        mode: str = "proxy",
        cache_size: int = DEFAULT_CACHE_SIZE,
        cache_enabled: bool = True,
    ):
        if mode not in ("proxy", "shard"):
            raise ValueError(f"unknown mode {mode!r}")
        self.shard_map = shard_map
        self.mode = mode
        self._own_node = node is None
        self.node = node or RpcNode("proxy")
        self.cache_enabled = cache_enabled
        self.vertex_cache = LRUCache(cache_size)
        self.label_cache: dict[str, int] = {}
        self._label_lock = threading.Lock()

    @classmethod
    def from_hostfile(cls, hostfile: str | Path, **kw) -> "DistributedGraph":
        return cls(ShardMap(shard_endpoints(hostfile)), **kw)

    @property
    def shard_count(self) -> int:
        return self.shard_map.shard_count

    def shard_of(self, ext: bytes | str) -> int:
        return self.shard_map.shard_of(ext)

    def endpoint(self, shard: int) -> Endpoint:
        return self.shard_map.endpoint(shard)

    def _call(self, shard: int, opcode: int, payload: bytes) -> bytes:
        return self.node.call(self.endpoint(shard), opcode, payload)

    def close(self) -> None:
        if self._own_node:
            self.node.close()

    def __enter__(self) -> "DistributedGraph":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- caches --------------------------------------------------------

    def _cached(self, ext: bytes) -> Optional[int]:
        return self.vertex_cache.get(ext) if self.cache_enabled else None

    def _remember(self, ext: bytes, vid: int) -> None:
        if self.cache_enabled:
            self.vertex_cache.put(ext, vid)

    def flush_cache(self) -> None:
        self.vertex_cache.clear()

    def label_id(self, label: Optional[str]) -> int:
        """Interned id for ``label``; empty or None means unlabeled (0)."""
        if not label:
            return 0
        lid = self.label_cache.get(label)
        if lid is not None:
            return lid
        with self._label_lock:
            lid = self.label_cache.get(label)
            if lid is None:
                lid = self._call(LABEL_SHARD, wire.LABEL_CHECK_OR_CREATE, Writer().text(label).getvalue())[0]
                self.label_cache[label] = lid
        return lid

    def label_names(self) -> dict[int, str]:
        r = Reader(self._call(LABEL_SHARD, wire.LABEL_TABLE, b""))
        table = {}
        for _ in range(r.u16()):
            lid = r.u8()
            table[lid] = r.text()
        return table

    # -- vertices ------------------------------------------------------

    def lookup(self, ext: bytes | str) -> Optional[int]:
        ext = as_external(ext)
        vid = self._cached(ext)
        if vid is not None:
            return vid
        payload = Writer().blob(ext).getvalue()
        vid = wire.read_u64(self._call(self.shard_of(ext), wire.VERTEX_LOOKUP, payload))
        if not vid:
            return None
        self._remember(ext, vid)
        return vid

    def check_or_create(self, ext: bytes | str, label: int = 0) -> int:
        ext = as_external(ext)
        vid = self._cached(ext)
        if vid is not None:
            return vid
        payload = Writer().u8(label).blob(ext).getvalue()
        vid, _ = struct.unpack("<QB", self._call(self.shard_of(ext), wire.VERTEX_CHECK_OR_CREATE, payload))
        self._remember(ext, vid)
        return vid

    def add_vertex(self, ext: bytes | str, label: Optional[str] = None,
                   props: Optional[Mapping[str, Any]] = None) -> int:
        """Create (or find) the vertex and set its properties in one shard transaction."""
        ext = as_external(ext)
        payload = Writer().u8(self.label_id(label)).blob(ext).props(props).getvalue()
        vid = wire.read_u64(self._call(self.shard_of(ext), wire.VERTEX_ADD, payload))
        self._remember(ext, vid)
        return vid

    def get_vertex(self, ext: bytes | str) -> Optional[tuple[int, dict[str, Any]]]:
        ext = as_external(ext)
        vid, props = wire.decode_vertex_get(
            self._call(self.shard_of(ext), wire.VERTEX_GET, Writer().blob(ext).getvalue())
        )
        return (vid, props) if vid else None

    def _require(self, ext: bytes | str) -> int:
        vid = self.lookup(ext)
        if vid is None:
            raise LookupError(f"vertex {as_external(ext)!r} not found")
        return vid

    def set_vertex_property(self, ext: bytes | str, name: str, value: Any) -> None:
        vid = self._require(ext)
        payload = Writer().u64(vid).text(name).blob(encode_value(value)).getvalue()
        self._call(vertex_shard(vid), wire.VERTEX_SET_PROPERTY, payload)

    def get_vertex_property(self, ext: bytes | str, name: str) -> Any:
        vid = self._require(ext)
        raw = self._call(vertex_shard(vid), wire.VERTEX_GET_PROPERTY, Writer().u64(vid).text(name).getvalue())
        return _optional_value(raw)

    def external_ids(self, vids: Iterable[int]) -> dict[int, bytes]:
        """Reverse-map internal ids; unknown ids are left out."""
        by_shard: dict[int, list[int]] = {}
        for vid in vids:
            by_shard.setdefault(vertex_shard(vid), []).append(vid)
        handles = {
            shard: self.node.call_async(self.endpoint(shard), wire.VERTEX_EXTERNAL_IDS, Writer().u64s(group).getvalue())
            for shard, group in by_shard.items()
        }
        out: dict[int, bytes] = {}
        for shard, h in handles.items():
            r = Reader(h.wait(60))
            for vid in by_shard[shard][: r.u32()]:
                ext = r.blob()
                if ext:
                    out[vid] = ext
        return out

    # -- edges ---------------------------------------------------------

    def _edge_lists(self, opcode: int, ext: bytes | str, label: Optional[str]) -> list[EdgeRecord]:
        vid = self._require(ext)
        _, edges = wire.decode_edge_list(
            self._call(vertex_shard(vid), opcode, Writer().u64s([vid]).getvalue())
        )
        lid = self.label_id(label) if label else None
        return [EdgeRecord(t, l, e) for _, t, l, e in edges if lid is None or l == lid]

    def get_out_edges(self, ext: bytes | str, label: Optional[str] = None) -> list[EdgeRecord]:
        return self._edge_lists(wire.GET_ALL_EDGES, ext, label)

    def get_in_edges(self, ext: bytes | str, label: Optional[str] = None) -> list[EdgeRecord]:
        return self._edge_lists(wire.GET_IN_EDGES, ext, label)

    def get_all_edges_async(self, shard: int, vids: Sequence[int]) -> CompletionHandle:
        """Out-edges of all ``vids`` (owned by ``shard``) in one read transaction.

        The handle completes with (server micros, [(src, tgt, label, eid), ...]).
        """
        handle = self.node.call_async(self.endpoint(shard), wire.GET_ALL_EDGES, Writer().u64s(vids).getvalue())
        return chain(handle, wire.decode_edge_list)

    def poll(self, handles: Iterable[CompletionHandle] = (), timeout: float = 0.05) -> None:
        self.node.poll(handles, timeout)

    def set_edge_property(self, eid: int, name: str, value: Any) -> None:
        payload = Writer().u64(eid).text(name).blob(encode_value(value)).getvalue()
        self._call(edge_shard(eid), wire.EDGE_SET_PROPERTY, payload)

    def get_edge_property(self, eid: int, name: str) -> Any:
        raw = self._call(edge_shard(eid), wire.EDGE_GET_PROPERTY, Writer().u64(eid).text(name).getvalue())
        return _optional_value(raw)

    def get_edge_properties(self, eid: int) -> dict[str, Any]:
        return Reader(self._call(edge_shard(eid), wire.EDGE_GET_PROPERTIES, wire.u64(eid))).props()

    def add_edge_sync(
        self, src: bytes | str, label: Optional[str], tgt: bytes | str,
        props: Optional[Mapping[str, Any]] = None, confirm: bool = False,
    ) -> int:
        """Add-edge steps executed one after another from this process.

        Uncached endpoints cost 7 messages (8 with ``confirm``); each cached
        endpoint saves a request/reply pair.
        """
        src, tgt = as_external(src), as_external(tgt)
        try:
            return self._add_edge_sync(src, label, tgt, props, confirm)
        except AddEdgeFailed as exc:
            stale = isinstance(exc.cause, RemoteError) and exc.cause.kind == "VertexNotFound"
            if not stale or not self.cache_enabled:
                raise
        # a cached id pointed at a deleted vertex
        self.vertex_cache.pop(src)
        self.vertex_cache.pop(tgt)
        return self._add_edge_sync(src, label, tgt, props, confirm)

    def _add_edge_sync(self, src: bytes, label: Optional[str], tgt: bytes,
                       props: Optional[Mapping[str, Any]], confirm: bool) -> int:
        done: list[str] = []
        step = "check_or_create(target)"
        try:
            vidt = self.check_or_create(tgt)
            done.append(step)
            step = "check_or_create(source)"
            vids = self.check_or_create(src)
            done.append(step)
            step = "check_or_create_lid"
            lid = self.label_id(label)
            done.append(step)
            step = "add_outgoing_edge"
            payload = Writer().u64(vids).u64(vidt).u8(lid).props(props).getvalue()
            eid = wire.read_u64(self._call(vertex_shard(vids), wire.EDGE_ADD_OUT, payload))
            done.append(step)
            step = "add_incoming_edge"
            payload = struct.pack("<QQQB", vidt, vids, eid, lid)
            if confirm:
                self._call(vertex_shard(vidt), wire.EDGE_ADD_IN, payload)
            else:
                self.node.send_oneway(self.endpoint(vertex_shard(vidt)), wire.EDGE_ADD_IN, payload)
            return eid
        except (RpcError, OSError) as exc:
            raise AddEdgeFailed(step, done, exc) from exc

    def add_edge_async(
        self, src: bytes | str, label: Optional[str], tgt: bytes | str,
        props: Optional[Mapping[str, Any]] = None, confirm: bool = False,
    ) -> CompletionHandle:
        """Forward the add to the target shard, which relays to the source shard.

        3 messages; with ``confirm`` a 4th carries the edge id back.  Without
        confirmation the handle is ready once the first hop is handed to the
        transport and carries no edge id.
        """
        src, tgt = as_external(src), as_external(tgt)
        lid = self.label_id(label)
        payload = Writer().u8(1 if confirm else 0).u8(lid).blob(src).blob(tgt).props(props).getvalue()
        ep = self.endpoint(self.shard_of(tgt))
        if confirm:
            return chain(self.node.call_async(ep, wire.ASYNC_EDGE_TARGET, payload), wire.read_u64)
        try:
            self.node.send_oneway(ep, wire.ASYNC_EDGE_TARGET, payload)
        except RpcError as exc:
            h = CompletionHandle(0)
            h.set_error(AddEdgeFailed("hop 1", [], exc))
            return h
        return ready_handle(None)

    # -- deletes -------------------------------------------------------

    def delete_vertex(self, ext: bytes | str) -> tuple[int, int]:
        """Delete on the owner shard; it then purges each remote reference with one message.

        Returns (incoming, outgoing) reference counts purged remotely.
        """
        ext = as_external(ext)
        self.vertex_cache.pop(ext)
        raw = self._call(self.shard_of(ext), wire.VERTEX_DELETE, Writer().blob(ext).getvalue())
        _, n_in, n_out = struct.unpack("<QII", raw)
        return n_in, n_out

    def delete_edge(self, eid: int, src: bytes | str, tgt: bytes | str) -> bool:
        vids, vidt = self._require(src), self._require(tgt)
        found_out = self._call(vertex_shard(vids), wire.EDGE_REMOVE_OUT, struct.pack("<QQQ", vids, vidt, eid))
        found_in = self._call(vertex_shard(vidt), wire.EDGE_REMOVE_IN, struct.pack("<QQQ", vidt, vids, eid))
        return bool(found_out[0] or found_in[0])

    # -- cluster control -------------------------------------------------

    def counters_snapshot(self) -> MessageCounters:
        return self.node.counters_snapshot()

    def counters_reset(self) -> None:
        self.node.counters_reset()

    def shard_stats(self) -> list[ShardStats]:
        handles = [self.node.call_async(self.endpoint(s), wire.STATS, b"") for s in range(self.shard_count)]
        out = []
        for h in handles:
            d = json.loads(h.wait(30))
            counters = MessageCounters(
                Counter({int(k): v for k, v in d["sent"].items()}),
                Counter({int(k): v for k, v in d["received"].items()}),
            )
            out.append(ShardStats(d["shard"], counters, d["transactions"], d["commits"], d["idle"], d["pending_acks"]))
        return out

    def cluster_counters(self) -> MessageCounters:
        """This process's counters plus every shard's."""
        total = self.counters_snapshot()
        for s in self.shard_stats():
            total = total + s.counters
        return total

    def reset_cluster_counters(self) -> None:
        self.counters_reset()
        for s in range(self.shard_count):
            self.node.call(self.endpoint(s), wire.COUNTERS_RESET, b"")

    def quiesce(self, timeout: float = 120.0, interval: float = 0.02) -> None:
        """Wait until every shard is idle and no counted frame is still in flight."""
        deadline = time.monotonic() + timeout
        last = None
        while time.monotonic() < deadline:
            stats = self.shard_stats()
            received = sum(s.counters.total_received for s in stats)
            sent = sum(s.counters.total_sent for s in stats) + self.counters_snapshot().total_sent
            idle = all(s.idle for s in stats)
            key = (sent, received)
            if idle and last == key:
                return
            last = key if idle else None
            time.sleep(interval)
        raise TimeoutError("cluster did not quiesce")

    def reset_graph(self) -> None:
        for s in range(self.shard_count):
            self.node.call(self.endpoint(s), wire.GRAPH_RESET, b"")
        self.flush_cache()
        self.label_cache.clear()

    def dump_raw(self) -> list[tuple[list, list, list]]:
        handles = [self.node.call_async(self.endpoint(s), wire.DUMP, b"") for s in range(self.shard_count)]
        return [decode_dump(h.wait(300)) for h in handles]

    def shutdown_cluster(self) -> None:
        for s in range(self.shard_count):
            try:
                self.node.call(self.endpoint(s), wire.SHUTDOWN, b"", timeout=5)
            except (RpcError, TimeoutError):
                pass


def decode_dump(payload: bytes):
    """(vertices [(vid, ext, props)], out [(src, tgt, label, eid, props)], in [(tgt, src, label, eid)])"""
    r = Reader(payload)
    vertices = [(r.u64(), r.blob(), r.props()) for _ in range(r.u32())]
    outs = [(r.u64(), r.u64(), r.u8(), r.u64(), r.props()) for _ in range(r.u32())]
    ins = [(r.u64(), r.u64(), r.u8(), r.u64()) for _ in range(r.u32())]
    return vertices, outs, ins


def _optional_value(raw: bytes) -> Any:
    r = Reader(raw)
    present, blob = r.u8(), r.blob()
    return decode_value(blob)[0] if present else None
