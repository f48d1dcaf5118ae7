"""Single-node property graph over the key-value layer.

Each graph owns a handful of named databases inside one environment:

    ex2i / i2ex        external id <-> internal vertex id
    vi2e / vi2e_in     outgoing / incoming EdgeRecords, duplicate values per vertex
    vid2pkv / eid2pkv  properties, (property id + tagged value) duplicates per entity
    labels, props      interned label and property names (plus reverse maps)
    meta               id counters, shard id

Internal ids are stored big-endian so key order equals numeric order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, Mapping, NamedTuple, Optional

from . import ids
from .codec import decode_value, encode_value
from .kvstore import KvDb, KvEnv, KvTxn

_ID = struct.Struct(">Q")
_PID = struct.Struct(">H")
_REC = struct.Struct(">QBQ")
_SPILLED = b"\xff"

GRAPHS_DB = "graphs"
DEFAULT_GRAPH = "default"


class GraphError(Exception):
    pass


class AlreadyExists(GraphError):
    pass


class NotFound(GraphError):
    pass


class VertexNotFound(NotFound):
    pass


class InvalidLabel(GraphError):
    pass


class LabelSpaceExhausted(GraphError):
    pass


class EdgeRecord(NamedTuple):
    target: int
    label: int
    edge: int


class EdgeIdRange(NamedTuple):
    shard: int
    start: int
    end: int  # exclusive counter

    def __len__(self) -> int:
        return self.end - self.start

    def edge_ids(self) -> Iterator[int]:
        for c in range(self.start, self.end):
            yield ids.pack_edge_id(self.shard, c)

    def contains(self, eid: int) -> bool:
        return ids.edge_shard(eid) == self.shard and self.start <= ids.edge_counter(eid) < self.end


@dataclass
class VertexRemoval:
    """References held elsewhere to a deleted vertex's edges."""

    vertex: int
    incoming: list[tuple[int, int]]  # (source vid, eid)
    outgoing: list[tuple[int, int]]  # (target vid, eid)


@dataclass
class GraphConfig:
    shard_id: int = 0
    # "dup": entity id key, duplicate values; "concat": entity id + property id key
    property_layout: str = "dup"


def enc_id(v: int) -> bytes:
    return _ID.pack(v)


def dec_id(b: bytes) -> int:
    return _ID.unpack(b)[0]


def enc_record(rec: EdgeRecord) -> bytes:
    return _REC.pack(rec.target, rec.label, rec.edge)


def dec_record(b: bytes) -> EdgeRecord:
    return EdgeRecord(*_REC.unpack(b))


class GraphStore:
    """One named graph inside a KvEnv.  Every data method takes an explicit txn."""

    def __init__(self, env: KvEnv, name: str, config: GraphConfig):
        self.env = env
        self.name = name
        self.config = config
        self.shard_id = config.shard_id
        if config.property_layout not in ("dup", "concat"):
            raise ValueError(f"unknown property layout {config.property_layout!r}")
        dup_props = config.property_layout == "dup"

        def db(suffix: str, dup: bool = False) -> KvDb:
            return env.open_db(f"{name}/{suffix}", allows_duplicate_keys=dup)

        self.ex2i = db("ex2i")
        self.i2ex = db("i2ex")
        self.vi2e = db("vi2e", dup=True)
        self.vi2e_in = db("vi2e_in", dup=True)
        self.vid2pkv = db("vid2pkv", dup=dup_props)
        self.eid2pkv = db("eid2pkv", dup=dup_props)
        self.pkv_spill = db("pkv_spill")
        self.labels = db("labels")
        self.labels_rev = db("labels_rev")
        self.props = db("props")
        self.props_rev = db("props_rev")
        self.meta = db("meta")
        self._max_dup = env.max_value_size()

    @property
    def databases(self) -> list[KvDb]:
        return [
            self.ex2i, self.i2ex, self.vi2e, self.vi2e_in, self.vid2pkv, self.eid2pkv,
            self.pkv_spill, self.labels, self.labels_rev, self.props, self.props_rev, self.meta,
        ]

    # -- transactions --------------------------------------------------

    def begin(self, write: bool = False) -> KvTxn:
        return self.env.begin(write=write)

    tx_begin = begin

    @staticmethod
    def tx_commit(txn: KvTxn) -> None:
        txn.commit()

    @staticmethod
    def tx_abort(txn: KvTxn) -> None:
        txn.abort()

    # -- counters ------------------------------------------------------

    def _counter(self, txn: KvTxn, key: bytes) -> int:
        raw = txn.get(self.meta, key)
        return dec_id(raw) if raw else 0

    def _bump(self, txn: KvTxn, key: bytes, n: int = 1) -> int:
        """Advance a persisted counter by n; returns the first new value."""
        cur = self._counter(txn, key)
        txn.put(self.meta, key, enc_id(cur + n))
        return cur + 1

    def max_vid(self, txn: KvTxn) -> int:
        return self._counter(txn, b"max_vid")

    def max_eid(self, txn: KvTxn) -> int:
        return self._counter(txn, b"max_eid")

    # -- labels and property names ---------------------------------------

    def check_or_create_label(self, txn: KvTxn, label: str) -> int:
        if not label:
            raise InvalidLabel("empty label")
        raw = label.encode()
        found = txn.get(self.labels, raw)
        if found is not None:
            return found[0]
        nxt = self._counter(txn, b"max_label") + 1
        if nxt > ids.MAX_LABEL:
            raise LabelSpaceExhausted(f"more than {ids.MAX_LABEL} labels")
        txn.put(self.meta, b"max_label", enc_id(nxt))
        txn.put(self.labels, raw, bytes([nxt]))
        txn.put(self.labels_rev, bytes([nxt]), raw)
        return nxt

    def label_id(self, txn: KvTxn, label: str) -> Optional[int]:
        found = txn.get(self.labels, label.encode())
        return found[0] if found is not None else None

    def label_name(self, txn: KvTxn, label_id: int) -> Optional[str]:
        raw = txn.get(self.labels_rev, bytes([label_id]))
        return raw.decode() if raw is not None else None

    def all_labels(self, txn: KvTxn) -> dict[int, str]:
        return {k[0]: v.decode() for k, v in txn.items(self.labels_rev)}

    def _property_id(self, txn: KvTxn, name: str, create: bool) -> Optional[int]:
        raw = name.encode()
        found = txn.get(self.props, raw)
        if found is not None:
            return _PID.unpack(found)[0]
        if not create:
            return None
        nxt = self._counter(txn, b"max_pid") + 1
        if nxt > 0xFFFF:
            raise GraphError("property name space exhausted")
        txn.put(self.meta, b"max_pid", enc_id(nxt))
        txn.put(self.props, raw, _PID.pack(nxt))
        txn.put(self.props_rev, _PID.pack(nxt), raw)
        return nxt

    def _property_name(self, txn: KvTxn, pid: int) -> str:
        return txn.get(self.props_rev, _PID.pack(pid)).decode()

    # -- vertices ------------------------------------------------------

    def lookup_vertex(self, txn: KvTxn, ext: bytes) -> Optional[int]:
        raw = txn.get(self.ex2i, ext)
        return dec_id(raw) if raw is not None else None

    def external_id(self, txn: KvTxn, vid: int) -> Optional[bytes]:
        return txn.get(self.i2ex, enc_id(vid))

    def has_vertex(self, txn: KvTxn, vid: int) -> bool:
        return txn.get(self.i2ex, enc_id(vid)) is not None

    def check_or_create_vertex(self, txn: KvTxn, ext: bytes, label: int = 0) -> int:
        vid, _ = self.check_or_create_vertex_ex(txn, ext, label)
        return vid

    def check_or_create_vertex_ex(self, txn: KvTxn, ext: bytes, label: int = 0) -> tuple[int, bool]:
        """Like check_or_create_vertex, also reporting whether it was created."""
        if not ext:
            raise ValueError("empty external id")
        raw = txn.get(self.ex2i, ext)
        if raw is not None:
            return dec_id(raw), False
        counter = self._bump(txn, b"max_vid")
        vid = ids.pack_vertex_id(label, self.shard_id, counter)
        key = enc_id(vid)
        txn.put(self.ex2i, ext, key)
        txn.put(self.i2ex, key, ext)
        return vid, True

    def iter_vertices(self, txn: KvTxn) -> Iterator[tuple[int, bytes]]:
        for k, v in txn.items(self.i2ex):
            yield dec_id(k), v

    def vertex_count(self, txn: KvTxn) -> int:
        return txn.count(self.i2ex)

    def _require_vertex(self, txn: KvTxn, vid: int) -> None:
        if txn.get(self.i2ex, enc_id(vid)) is None:
            raise VertexNotFound(f"vertex {vid:#x} not found")

    # -- edges ---------------------------------------------------------

    def _alloc_eid(self, txn: KvTxn) -> int:
        return ids.pack_edge_id(self.shard_id, self._bump(txn, b"max_eid"))

    def reserve_edge_ids(self, txn: KvTxn, count: int) -> EdgeIdRange:
        if count <= 0:
            nxt = self.max_eid(txn) + 1
            return EdgeIdRange(self.shard_id, nxt, nxt)
        start = self._bump(txn, b"max_eid", count)
        return EdgeIdRange(self.shard_id, start, start + count)

    def add_outgoing_edge(
        self, txn: KvTxn, src: int, tgt: int, label: int, eid: Optional[int] = None
    ) -> int:
        self._require_vertex(txn, src)
        if eid is None:
            eid = self._alloc_eid(txn)
        txn.put(self.vi2e, enc_id(src), enc_record(EdgeRecord(tgt, label, eid)))
        return eid

    def add_incoming_edge(self, txn: KvTxn, tgt: int, src: int, eid: int, label: int) -> None:
        self._require_vertex(txn, tgt)
        txn.put(self.vi2e_in, enc_id(tgt), enc_record(EdgeRecord(src, label, eid)))

    def add_edge(self, txn: KvTxn, src: int, tgt: int, label: int) -> int:
        """Both halves of a local edge in one transaction (single-node use)."""
        eid = self.add_outgoing_edge(txn, src, tgt, label)
        self.add_incoming_edge(txn, tgt, src, eid, label)
        return eid

    def get_out_edges(self, txn: KvTxn, v: int, label: Optional[int] = None) -> list[EdgeRecord]:
        return self._edges(txn, self.vi2e, v, label)

    def get_in_edges(self, txn: KvTxn, v: int, label: Optional[int] = None) -> list[EdgeRecord]:
        return self._edges(txn, self.vi2e_in, v, label)

    def _edges(self, txn: KvTxn, db: KvDb, v: int, label: Optional[int]) -> list[EdgeRecord]:
        recs = [EdgeRecord(*_REC.unpack(raw)) for raw in txn.dup_scan(db, enc_id(v))]
        if label is not None:
            recs = [r for r in recs if r.label == label]
        return recs

    def iter_out_edges(self, txn: KvTxn) -> Iterator[tuple[int, EdgeRecord]]:
        for k, v in txn.items(self.vi2e):
            yield dec_id(k), dec_record(v)

    def iter_in_edges(self, txn: KvTxn) -> Iterator[tuple[int, EdgeRecord]]:
        for k, v in txn.items(self.vi2e_in):
            yield dec_id(k), dec_record(v)

    def _remove_record(self, txn: KvTxn, db: KvDb, owner: int, other: int, eid: int) -> bool:
        key = enc_id(owner)
        for raw in txn.dup_range(db, key, enc_id(other)):
            rec = dec_record(raw)
            if rec.edge == eid:
                txn.delete(db, key, raw)
                return True
        return False

    def remove_out_edge(self, txn: KvTxn, src: int, tgt: int, eid: int) -> bool:
        found = self._remove_record(txn, self.vi2e, src, tgt, eid)
        if found:
            self._clear_props(txn, self.eid2pkv, eid)
        return found

    def remove_in_edge(self, txn: KvTxn, tgt: int, src: int, eid: int) -> bool:
        return self._remove_record(txn, self.vi2e_in, tgt, src, eid)

    def delete_edge(self, txn: KvTxn, eid: int, src: int, tgt: int) -> bool:
        """Remove whichever halves of the edge live in this graph."""
        found = False
        if ids.vertex_shard(src) == self.shard_id:
            found |= self.remove_out_edge(txn, src, tgt, eid)
        if ids.vertex_shard(tgt) == self.shard_id:
            found |= self.remove_in_edge(txn, tgt, src, eid)
        return found

    def delete_vertex_local(self, txn: KvTxn, v: int) -> VertexRemoval:
        """Drop the vertex, its properties, its out-edges (with properties) and in-edge list.

        Returns the references other vertices still hold, which the caller must purge.
        """
        key = enc_id(v)
        ext = txn.get(self.i2ex, key)
        if ext is None:
            raise VertexNotFound(f"vertex {v:#x} not found")
        txn.delete(self.i2ex, key)
        txn.delete(self.ex2i, ext)
        self._clear_props(txn, self.vid2pkv, v)
        outgoing = []
        for rec in self.get_out_edges(txn, v):
            self._clear_props(txn, self.eid2pkv, rec.edge)
            outgoing.append((rec.target, rec.edge))
        incoming = [(rec.target, rec.edge) for rec in self.get_in_edges(txn, v)]
        txn.delete(self.vi2e, key)
        txn.delete(self.vi2e_in, key)
        return VertexRemoval(v, incoming, outgoing)

    def delete_vertex(self, txn: KvTxn, v: int) -> VertexRemoval:
        """Single-node delete: also purges references held by local vertices.

        The returned removal lists only references living on other shards.
        """
        removal = self.delete_vertex_local(txn, v)
        remote_in, remote_out = [], []
        for src, eid in removal.incoming:
            if ids.vertex_shard(src) == self.shard_id:
                if src != v:
                    self.remove_out_edge(txn, src, v, eid)
            else:
                remote_in.append((src, eid))
        for tgt, eid in removal.outgoing:
            if ids.vertex_shard(tgt) == self.shard_id:
                if tgt != v:
                    self.remove_in_edge(txn, tgt, v, eid)
            else:
                remote_out.append((tgt, eid))
        return VertexRemoval(v, remote_in, remote_out)

    # -- batch ingestion -------------------------------------------------

    def batch_add_vertices(
        self,
        txn: KvTxn,
        entries: Iterable[tuple[bytes, int, Optional[Mapping[str, Any]]]],
        edge_range_len: int = 0,
    ) -> tuple[list[int], EdgeIdRange]:
        out = []
        for ext, label, props in entries:
            vid = self.check_or_create_vertex(txn, ext, label)
            if props:
                for name, value in props.items():
                    self._set_prop(txn, self.vid2pkv, vid, name, value)
            out.append(vid)
        return out, self.reserve_edge_ids(txn, edge_range_len)

    def batch_add_edges(
        self, txn: KvTxn, records: Iterable[tuple[int, EdgeRecord, str]]
    ) -> int:
        """Insert prepared halves; direction is "out" or "in"."""
        n = 0
        for owner, rec, direction in records:
            db = self.vi2e if direction == "out" else self.vi2e_in
            txn.put(db, enc_id(owner), enc_record(rec))
            n += 1
        return n

    # -- properties ----------------------------------------------------

    def set_vertex_property(self, txn: KvTxn, v: int, name: str, value: Any) -> None:
        self._require_vertex(txn, v)
        self._set_prop(txn, self.vid2pkv, v, name, value)

    def get_vertex_property(self, txn: KvTxn, v: int, name: str) -> Any:
        self._require_vertex(txn, v)
        return self._get_prop(txn, self.vid2pkv, v, name)

    def vertex_properties(self, txn: KvTxn, v: int) -> dict[str, Any]:
        return self._all_props(txn, self.vid2pkv, v)

    def delete_vertex_property(self, txn: KvTxn, v: int, name: str) -> bool:
        return self._del_prop(txn, self.vid2pkv, v, name)

    # edges have no existence index keyed by eid, so these do not check for the edge
    def set_edge_property(self, txn: KvTxn, eid: int, name: str, value: Any) -> None:
        self._set_prop(txn, self.eid2pkv, eid, name, value)

    def get_edge_property(self, txn: KvTxn, eid: int, name: str) -> Any:
        return self._get_prop(txn, self.eid2pkv, eid, name)

    def edge_properties(self, txn: KvTxn, eid: int) -> dict[str, Any]:
        return self._all_props(txn, self.eid2pkv, eid)

    def _set_prop(self, txn: KvTxn, db: KvDb, entity: int, name: str, value: Any) -> None:
        pid = self._property_id(txn, name, create=True)
        pkey = _PID.pack(pid)
        encoded = encode_value(value)
        key = enc_id(entity)
        if not db.allows_duplicate_keys:
            txn.put(db, key + pkey, encoded)
            return
        self._drop_dup_prop(txn, db, key, pkey)
        if len(pkey) + len(encoded) > self._max_dup:
            txn.put(self.pkv_spill, key + pkey, encoded)
            txn.put(db, key, pkey + _SPILLED)
        else:
            txn.put(db, key, pkey + encoded)

    def _drop_dup_prop(self, txn: KvTxn, db: KvDb, key: bytes, pkey: bytes) -> bool:
        existing = next(iter(txn.dup_range(db, key, pkey)), None)
        if existing is None:
            return False
        if existing[2:] == _SPILLED:
            txn.delete(self.pkv_spill, key + pkey)
        txn.delete(db, key, existing)
        return True

    def _get_prop(self, txn: KvTxn, db: KvDb, entity: int, name: str) -> Any:
        pid = self._property_id(txn, name, create=False)
        if pid is None:
            return None
        pkey = _PID.pack(pid)
        key = enc_id(entity)
        if not db.allows_duplicate_keys:
            raw = txn.get(db, key + pkey)
            return decode_value(raw)[0] if raw is not None else None
        # scan the sorted duplicates for the matching property id
        for raw in txn.dup_range(db, key, pkey):
            return self._decode_dup(txn, key, raw)
        return None

    def _decode_dup(self, txn: KvTxn, key: bytes, raw: bytes) -> Any:
        if raw[2:] == _SPILLED:
            return decode_value(txn.get(self.pkv_spill, key + raw[:2]))[0]
        return decode_value(raw, 2)[0]

    def _all_props(self, txn: KvTxn, db: KvDb, entity: int) -> dict[str, Any]:
        key = enc_id(entity)
        out = {}
        if db.allows_duplicate_keys:
            for raw in txn.dup_scan(db, key):
                pid = _PID.unpack_from(raw)[0]
                out[self._property_name(txn, pid)] = self._decode_dup(txn, key, raw)
        else:
            for k, v in txn.items(db, key):
                if k[:8] != key:
                    break
                out[self._property_name(txn, _PID.unpack_from(k, 8)[0])] = decode_value(v)[0]
        return out

    def _del_prop(self, txn: KvTxn, db: KvDb, entity: int, name: str) -> bool:
        pid = self._property_id(txn, name, create=False)
        if pid is None:
            return False
        key = enc_id(entity)
        if db.allows_duplicate_keys:
            return self._drop_dup_prop(txn, db, key, _PID.pack(pid))
        return txn.delete(db, key + _PID.pack(pid))

    def _clear_props(self, txn: KvTxn, db: KvDb, entity: int) -> None:
        key = enc_id(entity)
        if db.allows_duplicate_keys:
            for raw in txn.dup_scan(db, key):
                if raw[2:] == _SPILLED:
                    txn.delete(self.pkv_spill, key + raw[:2])
            txn.delete(db, key)
        else:
            doomed = []
            for k, _ in txn.items(db, key):
                if k[:8] != key:
                    break
                doomed.append(k)
            for k in doomed:
                txn.delete(db, k)


# -- graph lifecycle ----------------------------------------------------

_REG = struct.Struct("<HB")
_LAYOUTS = {"dup": 0, "concat": 1}


def _registry(env: KvEnv) -> KvDb:
    return env.open_db(GRAPHS_DB)


def graph_create(env: KvEnv, name: str, config: Optional[GraphConfig] = None) -> GraphStore:
    config = config or GraphConfig()
    if not name or "/" in name:
        raise ValueError(f"invalid graph name {name!r}")
    reg = _registry(env)

    def create(txn: KvTxn) -> None:
        if txn.get(reg, name.encode()) is not None:
            raise AlreadyExists(name)
        txn.put(reg, name.encode(), _REG.pack(config.shard_id, _LAYOUTS[config.property_layout]))

    env.write(create)
    return GraphStore(env, name, config)


def graph_open(env: KvEnv, name: str) -> GraphStore:
    reg = _registry(env)
    with env.begin() as txn:
        raw = txn.get(reg, name.encode())
    if raw is None:
        raise NotFound(name)
    shard_id, layout = _REG.unpack(raw)
    inv = {v: k for k, v in _LAYOUTS.items()}
    return GraphStore(env, name, GraphConfig(shard_id=shard_id, property_layout=inv[layout]))


def graph_open_or_create(env: KvEnv, name: str, config: Optional[GraphConfig] = None) -> GraphStore:
    try:
        return graph_open(env, name)
    except NotFound:
        return graph_create(env, name, config)


def graph_delete(env: KvEnv, name: str) -> None:
    store = graph_open(env, name)
    reg = _registry(env)

    def drop(txn: KvTxn) -> None:
        for db in store.databases:
            env.drop_db(txn, db)
        txn.delete(reg, name.encode())

    env.write(drop)


def graph_names(env: KvEnv) -> list[str]:
    reg = _registry(env)
    with env.begin() as txn:
        return [k.decode() for k, _ in txn.items(reg)]
