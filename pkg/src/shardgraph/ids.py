"""Packed 64-bit vertex and edge identifiers.

Vertex id: label (8 bits) | shard (12 bits) | local counter (44 bits).
Edge id:   shard (12 bits) | local counter (52 bits).
"""

from __future__ import annotations

from typing import NamedTuple

LABEL_BITS = 8
SHARD_BITS = 12
VERTEX_COUNTER_BITS = 44
EDGE_COUNTER_BITS = 52

MAX_LABEL = (1 << LABEL_BITS) - 1
MAX_SHARD = (1 << SHARD_BITS) - 1
MAX_VERTEX_COUNTER = (1 << VERTEX_COUNTER_BITS) - 1
MAX_EDGE_COUNTER = (1 << EDGE_COUNTER_BITS) - 1

_SHARD_MASK = MAX_SHARD


def pack_vertex_id(label: int, shard: int, counter: int) -> int:
    if not 0 <= label <= MAX_LABEL:
        raise ValueError(f"label id {label} out of range")
    if not 0 <= shard <= MAX_SHARD:
        raise ValueError(f"shard id {shard} out of range")
    if not 0 <= counter <= MAX_VERTEX_COUNTER:
        raise OverflowError(f"vertex counter {counter} out of range")
    return (label << (SHARD_BITS + VERTEX_COUNTER_BITS)) | (shard << VERTEX_COUNTER_BITS) | counter


class VertexIdParts(NamedTuple):
    label: int
    shard: int
    counter: int


def unpack_vertex_id(vid: int) -> VertexIdParts:
    return VertexIdParts(
        vid >> (SHARD_BITS + VERTEX_COUNTER_BITS),
        (vid >> VERTEX_COUNTER_BITS) & _SHARD_MASK,
        vid & MAX_VERTEX_COUNTER,
    )


def vertex_shard(vid: int) -> int:
    return (vid >> VERTEX_COUNTER_BITS) & _SHARD_MASK


def vertex_label(vid: int) -> int:
    return vid >> (SHARD_BITS + VERTEX_COUNTER_BITS)


def pack_edge_id(shard: int, counter: int) -> int:
    if not 0 <= shard <= MAX_SHARD:
        raise ValueError(f"shard id {shard} out of range")
    if not 0 <= counter <= MAX_EDGE_COUNTER:
        raise OverflowError(f"edge counter {counter} out of range")
    return (shard << EDGE_COUNTER_BITS) | counter


def edge_shard(eid: int) -> int:
    return eid >> EDGE_COUNTER_BITS


def edge_counter(eid: int) -> int:
    return eid & MAX_EDGE_COUNTER
