"""Query manager: fixed-depth BFS over a proxy-mode graph, plus a client-facing server."""

from __future__ import annotations

import logging
import signal
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

from . import wire
from .codec import Reader, Writer, decode_value, encode_value
from .dgraph import DistributedGraph, StartNotFound
from .ids import vertex_shard
from .messaging import Endpoint, Request, RpcError, RpcNode, read_hostfile
from .placement import ShardMap, as_external
from .runtime import TaskPool

log = logging.getLogger(__name__)


class ShardUnreachable(RpcError):
    pass


class PartitionedFrontier:
    """Frontier bucketed by owning shard, plus everything already visited."""

    def __init__(self, shards: int):
        self.shards = shards
        self.buckets: list[list[int]] = [[] for _ in range(shards)]
        self.visited: set[int] = set()

    def add(self, vid: int) -> bool:
        """Queue ``vid`` unless seen before; returns whether it was new."""
        if vid in self.visited:
            return False
        self.visited.add(vid)
        self.buckets[vertex_shard(vid)].append(vid)
        return True

    def take(self) -> list[list[int]]:
        out, self.buckets = self.buckets, [[] for _ in range(self.shards)]
        return out

    def __len__(self) -> int:
        return sum(len(b) for b in self.buckets)


@dataclass
class LevelTiming:
    t1_issue: float
    t2_server: float
    t3_network: float
    t4_process: float
    wall: float

    @property
    def total(self) -> float:
        return self.t1_issue + self.t2_server + self.t3_network + self.t4_process


@dataclass
class BfsResult:
    visited: set[int]
    edges: int = 0
    levels: list[LevelTiming] = field(default_factory=list)

    def encode(self) -> bytes:
        w = Writer().u64s(sorted(self.visited)).u64(self.edges).u32(len(self.levels))
        for lv in self.levels:
            for x in (lv.t1_issue, lv.t2_server, lv.t3_network, lv.t4_process, lv.wall):
                w.f64(x)
        return w.getvalue()

    @classmethod
    def decode(cls, payload: bytes) -> "BfsResult":
        r = Reader(payload)
        visited = set(r.u64s())
        edges = r.u64()
        levels = [LevelTiming(*(r.f64() for _ in range(5))) for _ in range(r.u32())]
        r.expect_end()
        return cls(visited, edges, levels)


class QueryManager:
    def __init__(self, dg: DistributedGraph, timeout: float = 120.0):
        self.dg = dg
        self.timeout = timeout

    def bfs_fixed_depth(self, start: bytes | str, max_depth: int) -> BfsResult:
        """Unique vertices reachable from ``start`` within ``max_depth`` out-edge hops."""
        if max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        dg = self.dg
        root = dg.lookup(start)
        if root is None:
            raise StartNotFound(as_external(start).decode(errors="replace"))
        frontier = PartitionedFrontier(dg.shard_count)
        frontier.add(root)
        result = BfsResult(frontier.visited)
        d = 0
        while d < max_depth and len(frontier) > 0:
            level_start = time.perf_counter()
            buckets = frontier.take()
            handles = {
                dg.get_all_edges_async(shard, vids): shard
                for shard, vids in enumerate(buckets) if vids
            }
            t_issued = time.perf_counter()
            pending = set(handles)
            wait = process = 0.0
            server_us = 0
            while pending:
                t = time.perf_counter()
                ready = [h for h in pending if h.done()]
                if not ready:
                    dg.poll(pending, timeout=self.timeout)
                    ready = [h for h in pending if h.done()]
                t_ready = time.perf_counter()
                wait += t_ready - t
                if not ready and t_ready - level_start > self.timeout:
                    raise TimeoutError("bfs level timed out")
                for h in ready:
                    pending.discard(h)
                    if h.error is not None:
                        raise ShardUnreachable(f"shard {handles[h]}: {h.error}") from h.error
                    micros, edges = h.value
                    server_us = max(server_us, micros)
                    result.edges += len(edges)
                    for _, tgt, _, _ in edges:
                        frontier.add(tgt)
                process += time.perf_counter() - t_ready
            t2 = min(server_us / 1e6, wait)
            result.levels.append(LevelTiming(
                t_issued - level_start, t2, wait - t2, process, time.perf_counter() - level_start,
            ))
            d += 1
        return result


def reference_bfs(adjacency: Mapping[Any, Iterable[Any]], start: Any, depth: int) -> set:
    """Plain in-memory BFS used as the test oracle."""
    visited = {start}
    frontier = [start]
    for _ in range(depth):
        nxt = []
        for v in frontier:
            for t in adjacency.get(v, ()):
                if t not in visited:
                    visited.add(t)
                    nxt.append(t)
        if not nxt:
            break
        frontier = nxt
    return visited


# -- server ----------------------------------------------------------------


class QueryManagerServer:
    """Serves client requests; each request runs as a pool task."""

    def __init__(self, shard_endpoints: list[Endpoint], listen: Endpoint, workers: int = 16,
                 cache_size: int = 1_000_000):
        self.listen_endpoint = listen
        self.pool = TaskPool(workers, name="qm-worker")
        self.node = RpcNode("qm", self.pool)
        self.dg = DistributedGraph(ShardMap(shard_endpoints), node=self.node, cache_size=cache_size)
        self.qm = QueryManager(self.dg)
        self._stop = threading.Event()
        for opcode, fn in {
            wire.QM_BFS: self._bfs,
            wire.QM_ADD_VERTEX: self._add_vertex,
            wire.QM_ADD_EDGE: self._add_edge,
            wire.QM_GET_VERTEX: self._get_vertex,
            wire.QM_GET_OUT_EDGES: self._get_out_edges,
            wire.QM_DELETE_VERTEX: self._delete_vertex,
            wire.QM_SET_VERTEX_PROPERTY: self._set_vertex_property,
            wire.QM_EXTERNAL_IDS: self._external_ids,
            wire.PING: lambda req: b"pong",
        }.items():
            self.node.register_handler(opcode, fn, self.pool)

    @classmethod
    def from_hostfile(cls, hostfile: str | Path, **kw) -> "QueryManagerServer":
        eps = read_hostfile(hostfile)
        return cls(eps[:-1], eps[-1], **kw)

    def serve(self, host: Optional[str] = None, port: Optional[int] = None) -> tuple[str, int]:
        ep = self.listen_endpoint
        return self.node.listen(host or ep.host, ep.port if port is None else port)

    def wait(self) -> None:
        while not self._stop.wait(0.5):
            pass

    def stop(self) -> None:
        self._stop.set()

    def close(self) -> None:
        self.node.close()
        self.pool.shutdown(wait=False)

    def __enter__(self) -> "QueryManagerServer":
        self.serve()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _bfs(self, req: Request) -> bytes:
        r = Reader(req.payload)
        start, depth = r.blob(), r.u32()
        return self.qm.bfs_fixed_depth(start, depth).encode()

    def _add_vertex(self, req: Request) -> bytes:
        r = Reader(req.payload)
        label, ext, props = r.text(), r.blob(), r.props()
        return wire.u64(self.dg.add_vertex(ext, label or None, props))

    def _add_edge(self, req: Request) -> bytes:
        r = Reader(req.payload)
        src, label, tgt, props = r.blob(), r.text(), r.blob(), r.props()
        return wire.u64(self.dg.add_edge_async(src, label or None, tgt, props, confirm=True).wait(120))

    def _get_vertex(self, req: Request) -> bytes:
        got = self.dg.get_vertex(Reader(req.payload).blob())
        return wire.encode_vertex_get(*(got or (0, {})))

    def _get_out_edges(self, req: Request) -> bytes:
        edges = self.dg.get_out_edges(Reader(req.payload).blob())
        names = self.dg.label_names() if any(e.label for e in edges) else {}
        exts = self.dg.external_ids(e.target for e in edges)
        w = Writer().u32(len(edges))
        for e in edges:
            w.blob(exts.get(e.target, b"")).text(names.get(e.label, "")).u64(e.edge)
        return w.getvalue()

    def _delete_vertex(self, req: Request) -> bytes:
        self.dg.delete_vertex(Reader(req.payload).blob())
        return b""

    def _set_vertex_property(self, req: Request) -> bytes:
        r = Reader(req.payload)
        ext, name, raw = r.blob(), r.text(), r.blob()
        self.dg.set_vertex_property(ext, name, decode_value(raw, 0)[0])
        return b""

    def _external_ids(self, req: Request) -> bytes:
        vids = Reader(req.payload).u64s()
        exts = self.dg.external_ids(vids)
        w = Writer().u32(len(vids))
        for v in vids:
            w.blob(exts.get(v, b""))
        return w.getvalue()


def qm_serve(hostfile: str | Path, workers: int = 16) -> None:
    server = QueryManagerServer.from_hostfile(hostfile, workers=workers)
    addr = server.serve()
    log.info("query manager serving on %s:%d", *addr)
    signal.signal(signal.SIGTERM, lambda *_: server.stop())
    signal.signal(signal.SIGINT, lambda *_: server.stop())
    try:
        server.wait()
    finally:
        server.close()


# -- client ----------------------------------------------------------------


class QueryClient:
    def __init__(self, endpoint: Endpoint | tuple[str, int], timeout: float = 300.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self.node = RpcNode("qm-client")

    def _call(self, opcode: int, payload: bytes) -> bytes:
        return self.node.call(self.endpoint, opcode, payload, timeout=self.timeout)

    def ping(self) -> bool:
        return self._call(wire.PING, b"") == b"pong"

    def bfs(self, start: bytes | str, depth: int) -> BfsResult:
        return BfsResult.decode(self._call(wire.QM_BFS, Writer().blob(as_external(start)).u32(depth).getvalue()))

    def bfs_async(self, start: bytes | str, depth: int):
        payload = Writer().blob(as_external(start)).u32(depth).getvalue()
        return self.node.call_async(self.endpoint, wire.QM_BFS, payload)

    def add_vertex(self, ext: bytes | str, label: Optional[str] = None,
                   props: Optional[Mapping[str, Any]] = None) -> int:
        payload = Writer().text(label or "").blob(as_external(ext)).props(props).getvalue()
        return wire.read_u64(self._call(wire.QM_ADD_VERTEX, payload))

    def add_edge(self, src: bytes | str, label: Optional[str], tgt: bytes | str,
                 props: Optional[Mapping[str, Any]] = None) -> int:
        payload = Writer().blob(as_external(src)).text(label or "").blob(as_external(tgt)).props(props).getvalue()
        return wire.read_u64(self._call(wire.QM_ADD_EDGE, payload))

    def get_vertex(self, ext: bytes | str) -> Optional[tuple[int, dict[str, Any]]]:
        vid, props = wire.decode_vertex_get(self._call(wire.QM_GET_VERTEX, Writer().blob(as_external(ext)).getvalue()))
        return (vid, props) if vid else None

    def get_out_edges(self, ext: bytes | str) -> list[tuple[bytes, str, int]]:
        r = Reader(self._call(wire.QM_GET_OUT_EDGES, Writer().blob(as_external(ext)).getvalue()))
        return [(r.blob(), r.text(), r.u64()) for _ in range(r.u32())]

    def delete_vertex(self, ext: bytes | str) -> None:
        self._call(wire.QM_DELETE_VERTEX, Writer().blob(as_external(ext)).getvalue())

    def set_vertex_property(self, ext: bytes | str, name: str, value: Any) -> None:
        payload = Writer().blob(as_external(ext)).text(name).blob(encode_value(value)).getvalue()
        self._call(wire.QM_SET_VERTEX_PROPERTY, payload)

    def external_ids(self, vids: Iterable[int]) -> list[bytes]:
        vids = list(vids)
        r = Reader(self._call(wire.QM_EXTERNAL_IDS, Writer().u64s(vids).getvalue()))
        return [r.blob() for _ in range(r.u32())]

    def close(self) -> None:
        self.node.close()

    def __enter__(self) -> "QueryClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def qm_client_connect(endpoint: Endpoint | tuple[str, int]) -> QueryClient:
    client = QueryClient(endpoint)
    client.node.connection(endpoint)
    return client
