import logging

import pytest

from shardgraph.cluster import LocalCluster
from shardgraph.kvstore import KvConfig, KvEnv


@pytest.fixture
def env(tmp_path):
    e = KvEnv(tmp_path / "kv", KvConfig(map_size=1 << 26, sync=False))
    yield e
    e.close()


class ClusterPool:
    """Local clusters shared across a session, one per shard count."""

    def __init__(self, root):
        self.root = root
        self.clusters = {}

    def get(self, shards: int) -> LocalCluster:
        c = self.clusters.get(shards)
        if c is None:
            c = LocalCluster(shards, self.root / f"p{shards}", workers=2, sync=False, map_size=1 << 30)
            c.start()
            self.clusters[shards] = c
        return c

    def fresh(self, shards: int, **kw):
        """An empty graph on a P-shard cluster, counters zeroed."""
        c = self.get(shards)
        dg = c.graph(**kw)
        dg.reset_graph()
        dg.quiesce()
        dg.reset_cluster_counters()
        return dg

    def close(self):
        for c in self.clusters.values():
            c.close()
        self.clusters.clear()


@pytest.fixture(scope="session")
def clusters(tmp_path_factory):
    logging.getLogger("shardgraph").setLevel(logging.WARNING)
    pool = ClusterPool(tmp_path_factory.mktemp("clusters"))
    yield pool
    pool.close()


def pytest_terminal_summary(terminalreporter, config):
    from harness import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
