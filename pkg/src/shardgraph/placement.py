"""Vertex placement: 64-bit FNV-1a over the external id, modulo the shard count."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .messaging import Endpoint

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


def as_external(ext: bytes | str) -> bytes:
    return ext.encode() if isinstance(ext, str) else bytes(ext)


@dataclass
class ShardMap:
    endpoints: Sequence[Endpoint]
    placement: Optional[Callable[[bytes], int]] = None

    @property
    def shard_count(self) -> int:
        return len(self.endpoints)

    def shard_of(self, ext: bytes | str) -> int:
        ext = as_external(ext)
        if self.placement is not None:
            shard = self.placement(ext)
            if not 0 <= shard < self.shard_count:
                raise ValueError(f"placement returned shard {shard} of {self.shard_count}")
            return shard
        return fnv1a_64(ext) % self.shard_count

    def endpoint(self, shard: int) -> Endpoint:
        return self.endpoints[shard]
