"""Opcodes and payload layouts.

All integers little-endian.  ``ext`` and ``text`` fields are u32-length-prefixed
bytes; ``props`` is u16 count + (text name, blob tagged-value) pairs;
``u64s`` is u32 count + u64 values.

Shard opcodes (request -> reply unless marked one-way)

  0x0101 VERTEX_CHECK_OR_CREATE  u8 label, ext              -> u64 vid, u8 created
  0x0102 VERTEX_LOOKUP           ext                        -> u64 vid (0 = absent)
  0x0103 VERTEX_ADD              u8 label, ext, props       -> u64 vid
  0x0104 VERTEX_GET              ext                        -> u64 vid (0 = absent), props
  0x0105 VERTEX_SET_PROPERTY     u64 vid, text name, blob   -> empty
  0x0106 VERTEX_GET_PROPERTY     u64 vid, text name         -> u8 present, blob
  0x0107 VERTEX_EXTERNAL_IDS     u64s vids                  -> u32 n, n * ext (empty when unknown)
  0x0110 EDGE_ADD_OUT            u64 src, u64 tgt, u8 label, props -> u64 eid
  0x0111 EDGE_ADD_IN             u64 tgt, u64 src, u64 eid, u8 label -> empty
                                 (one-way unless confirmation is requested)
  0x0112 EDGE_SET_PROPERTY       u64 eid, text name, blob   -> empty
  0x0113 EDGE_GET_PROPERTY       u64 eid, text name         -> u8 present, blob
  0x0114 EDGE_GET_PROPERTIES     u64 eid                    -> props
  0x0120 ASYNC_EDGE_TARGET       hop 1, proxy -> target shard:
                                 u8 confirm, u8 label, ext src, ext tgt, props
                                 (one-way; a request when confirm=1, answered by hop 4 with u64 eid)
  0x0121 ASYNC_EDGE_SOURCE       hop 2, target -> source shard (one-way):
                                 u64 token, u16 target shard, u64 vidt, u8 label, ext src, props
  0x0122 ASYNC_EDGE_INCOMING     hop 3, source -> target shard (one-way):
                                 u64 token, u64 vidt, u64 vids, u64 eid, u8 label,
                                 u8 failed hop (0 = ok), text error
  0x0130 GET_ALL_EDGES           u64s vids -> u32 server micros, u32 n, n * (u64 src, u64 tgt, u8 label, u64 eid)
  0x0131 GET_IN_EDGES            u64s vids -> same layout as GET_ALL_EDGES
  0x0140 VERTEX_DELETE           ext -> u64 vid, u32 incoming refs, u32 outgoing refs
  0x0141 PURGE_OUT_EDGE          u64 src, u64 tgt, u64 eid (one-way)
  0x0142 PURGE_IN_EDGE           u64 tgt, u64 src, u64 eid (one-way)
  0x0143 EDGE_REMOVE_OUT         u64 src, u64 tgt, u64 eid -> u8 found
  0x0144 EDGE_REMOVE_IN          u64 tgt, u64 src, u64 eid -> u8 found
  0x0150 LABEL_CHECK_OR_CREATE   text label -> u8 label id  (shard 0 is the label authority)
  0x0151 LABEL_TABLE             empty -> u16 n, n * (u8 id, text name)
  0x0160 BULK_VERTICES           u64 edge range len, u32 n, n * (u8 label, ext, props)
                                 -> u64 range start, u64 range end, u64s vids
  0x0161 BULK_EDGES              u64 prefetch, u32 n_out, n_out * (u64 src, u64 tgt, u8 label, u64 eid, props),
                                 u32 n_in, n_in * (u64 tgt, u64 src, u8 label, u64 eid)
                                 -> u32 inserted, u64 range start, u64 range end

Query manager opcodes (client -> query manager)

  0x0201 QM_BFS                  ext start, u32 depth
                                 -> u64s visited, u64 edges, u32 levels, levels * 5 f64 (t1..t4, wall)
  0x0202 QM_ADD_VERTEX           text label, ext, props -> u64 vid
  0x0203 QM_ADD_EDGE             ext src, text label, ext tgt, props -> u64 eid (async protocol, confirmed)
  0x0204 QM_GET_VERTEX           ext -> u64 vid (0 = absent), props
  0x0205 QM_GET_OUT_EDGES        ext -> u32 n, n * (ext target, text label, u64 eid)
  0x0206 QM_DELETE_VERTEX        ext -> empty
  0x0207 QM_SET_VERTEX_PROPERTY  ext, text name, blob -> empty
  0x0208 QM_EXTERNAL_IDS         u64s vids -> u32 n, n * ext (empty when unknown)

Control opcodes (>= 0xF000, not counted)

  0xF001 PING, 0xF002 STATS, 0xF003 COUNTERS_RESET, 0xF004 DUMP,
  0xF005 GRAPH_RESET, 0xF006 SHUTDOWN
"""

from __future__ import annotations

import struct
from typing import Any, Iterable

from .codec import CodecError, Reader, Writer

VERTEX_CHECK_OR_CREATE = 0x0101
VERTEX_LOOKUP = 0x0102
VERTEX_ADD = 0x0103
VERTEX_GET = 0x0104
VERTEX_SET_PROPERTY = 0x0105
VERTEX_GET_PROPERTY = 0x0106
VERTEX_EXTERNAL_IDS = 0x0107
EDGE_ADD_OUT = 0x0110
EDGE_ADD_IN = 0x0111
EDGE_SET_PROPERTY = 0x0112
EDGE_GET_PROPERTY = 0x0113
EDGE_GET_PROPERTIES = 0x0114
ASYNC_EDGE_TARGET = 0x0120
ASYNC_EDGE_SOURCE = 0x0121
ASYNC_EDGE_INCOMING = 0x0122
GET_ALL_EDGES = 0x0130
GET_IN_EDGES = 0x0131
VERTEX_DELETE = 0x0140
PURGE_OUT_EDGE = 0x0141
PURGE_IN_EDGE = 0x0142
EDGE_REMOVE_OUT = 0x0143
EDGE_REMOVE_IN = 0x0144
LABEL_CHECK_OR_CREATE = 0x0150
LABEL_TABLE = 0x0151
BULK_VERTICES = 0x0160
BULK_EDGES = 0x0161

QM_BFS = 0x0201
QM_ADD_VERTEX = 0x0202
QM_ADD_EDGE = 0x0203
QM_GET_VERTEX = 0x0204
QM_GET_OUT_EDGES = 0x0205
QM_DELETE_VERTEX = 0x0206
QM_SET_VERTEX_PROPERTY = 0x0207
QM_EXTERNAL_IDS = 0x0208

PING = 0xF001
STATS = 0xF002
COUNTERS_RESET = 0xF003
DUMP = 0xF004
GRAPH_RESET = 0xF005
SHUTDOWN = 0xF006

OPCODE_NAMES = {v: k for k, v in globals().items() if k.isupper() and isinstance(v, int) and k != "OPCODE_NAMES"}

_EDGE4 = struct.Struct("<QQBQ")


def encode_edge_list(micros: int, edges: Iterable[tuple[int, int, int, int]]) -> bytes:
    edges = list(edges)
    parts = [struct.pack("<II", micros, len(edges))]
    parts.extend(_EDGE4.pack(*e) for e in edges)
    return b"".join(parts)


def decode_edge_list(payload: bytes) -> tuple[int, list[tuple[int, int, int, int]]]:
    try:
        micros, n = struct.unpack_from("<II", payload)
        if len(payload) != 8 + n * _EDGE4.size:
            raise CodecError("edge list length mismatch")
        return micros, list(_EDGE4.iter_unpack(payload[8:]))
    except struct.error as exc:
        raise CodecError(str(exc)) from exc


def encode_vertex_get(vid: int, props: dict[str, Any]) -> bytes:
    return Writer().u64(vid).props(props).getvalue()


def decode_vertex_get(payload: bytes) -> tuple[int, dict[str, Any]]:
    r = Reader(payload)
    return r.u64(), r.props()


def u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def read_u64(payload: bytes) -> int:
    if len(payload) < 8:
        raise CodecError("expected u64")
    return struct.unpack_from("<Q", payload)[0]
