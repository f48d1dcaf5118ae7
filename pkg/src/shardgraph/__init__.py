"""Sharded property-graph database: LMDB shard engines, RPC runtime, query manager, firehose."""

__version__ = "0.1.0"
