import random
from collections import Counter

import pytest

from shardgraph import wire
from shardgraph.dgraph import AddEdgeFailed, DistributedGraph
from shardgraph.dump import dump_graph
from shardgraph.ids import edge_shard, vertex_shard
from shardgraph.messaging import Endpoint, RemoteError
from shardgraph.placement import ShardMap, fnv1a_64


def test_fnv1a_reference_vectors():
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def _map(p):
    return ShardMap([Endpoint(i, "127.0.0.1", 1) for i in range(p)])


def test_placement_basics():
    assert _map(1).shard_of("anything") == 0
    m = _map(12)
    assert m.shard_of("A") == m.shard_of(b"A")


def test_placement_spread():
    rng = random.Random(2024)
    m = _map(12)
    counts = Counter(m.shard_of(f"{rng.getrandbits(64):x}") for _ in range(100_000))
    assert len(counts) == 12
    assert all(6000 <= n <= 11000 for n in counts.values()), counts


def test_custom_placement_validated():
    m = ShardMap(_map(2).endpoints, placement=lambda ext: 5)
    with pytest.raises(ValueError):
        m.shard_of("x")


def _pairing(dg):
    outs, ins = set(), set()
    for _, shard_outs, shard_ins in dg.dump_raw():
        outs.update((s, t, e) for s, t, _, e, _ in shard_outs)
        ins.update((s, t, e) for t, s, _, e in shard_ins)
    return outs, ins


def _sent(dg):
    dg.quiesce()
    return dg.cluster_counters().total_sent


@pytest.mark.parametrize("confirm,expected", [(False, 7), (True, 8)])
def test_sync_add_edge_budget(clusters, confirm, expected):
    dg = clusters.fresh(2)
    dg.label_id("knows")
    dg.quiesce()
    dg.reset_cluster_counters()
    eid = dg.add_edge_sync("A", "knows", "B", confirm=confirm)
    assert _sent(dg) == expected
    assert edge_shard(eid) == dg.shard_of("A")


def test_sync_add_edge_cached_endpoints(clusters):
    dg = clusters.fresh(2)
    dg.add_edge_sync("A", "knows", "B")
    dg.quiesce()
    dg.reset_cluster_counters()
    dg.add_edge_sync("A", "knows", "B")
    assert _sent(dg) == 3


def test_cache_flush_changes_counts_not_results(clusters):
    dg = clusters.fresh(2)
    dg.add_edge_sync("A", None, "B")
    dg.flush_cache()
    dg.add_edge_sync("A", None, "B")
    assert len(dg.get_out_edges("A")) == 2
    dg.quiesce()
    dg.reset_cluster_counters()
    dg.flush_cache()
    dg.add_edge_sync("A", None, "B")
    assert _sent(dg) == 7


@pytest.mark.parametrize("confirm,expected", [(False, 3), (True, 4)])
def test_async_add_edge_budget(clusters, confirm, expected):
    dg = clusters.fresh(2)
    dg.label_id("knows")
    dg.quiesce()
    dg.reset_cluster_counters()
    h = dg.add_edge_async("A", "knows", "B", confirm=confirm)
    value = h.wait(30)
    assert _sent(dg) == expected
    if confirm:
        assert edge_shard(value) == dg.shard_of("A")
    assert len(dg.get_in_edges("B", "knows")) == 1


def test_ten_concurrent_async_adds(clusters):
    dg = clusters.fresh(2)
    handles = [dg.add_edge_async(f"s{i}", None, f"t{i}") for i in range(10)]
    for h in handles:
        h.wait(30)
    assert _sent(dg) == 30
    outs, ins = _pairing(dg)
    assert len(outs) == 10 and outs == ins


def test_async_edge_properties_live_on_source_shard(clusters):
    dg = clusters.fresh(3)
    eid = dg.add_edge_async("A", "rel", "B", {"w": 2.5}, confirm=True).wait(30)
    assert edge_shard(eid) == dg.shard_of("A")
    assert dg.get_edge_properties(eid) == {"w": 2.5}
    dg.set_edge_property(eid, "w", 3.0)
    assert dg.get_edge_property(eid, "w") == 3.0


def test_vertex_forwarding_and_properties(clusters):
    dg = clusters.fresh(3)
    vid = dg.add_vertex("alice", "person", {"age": 30})
    assert vertex_shard(vid) == dg.shard_of("alice")
    assert dg.get_vertex("alice") == (vid, {"age": 30})
    dg.set_vertex_property("alice", "age", 31)
    assert dg.get_vertex_property("alice", "age") == 31
    assert dg.get_vertex("nobody") is None
    assert dg.external_ids([vid]) == {vid: b"alice"}
    # label is ignored for an existing vertex
    assert dg.add_vertex("alice", "robot") == vid


def test_get_all_edges_async_batches_one_shard(clusters):
    dg = clusters.fresh(2)
    for i in range(6):
        dg.add_edge_sync("hub", None, f"n{i}")
    hub = dg.lookup("hub")
    micros, edges = dg.get_all_edges_async(vertex_shard(hub), [hub, hub]).wait(10)
    assert len(edges) == 12 and micros >= 0


def test_add_edge_failure_names_the_step(clusters):
    dg = clusters.fresh(2)
    bad = DistributedGraph(ShardMap([Endpoint(0, "127.0.0.1", 1)] * 2))
    with pytest.raises(AddEdgeFailed) as info:
        bad.add_edge_sync("A", None, "B")
    assert info.value.step and info.value.completed == []
    bad.close()
    h = dg.add_edge_async("A", None, "B", confirm=True)
    assert h.wait(10)


@pytest.mark.parametrize("ni", [0, 1, 5])
def test_delete_vertex_budget(clusters, ni):
    dg = clusters.fresh(3)
    for i in range(ni):
        dg.add_edge_sync(f"src{i}", None, "victim")
    dg.add_vertex("victim")
    dg.quiesce()
    dg.reset_cluster_counters()
    stats0 = {s.shard: s.transactions for s in dg.shard_stats()}
    n_in, n_out = dg.delete_vertex("victim")
    dg.quiesce()
    c = dg.cluster_counters()
    assert (n_in, n_out) == (ni, 0)
    assert c.sent[wire.VERTEX_DELETE] == 2  # request + reply
    assert c.sent[wire.PURGE_OUT_EDGE] == ni
    assert c.total_sent == 2 + ni
    stats = dg.shard_stats()
    owner = dg.shard_of("victim")
    purges_per_shard = Counter(dg.shard_of(f"src{i}") for i in range(ni))
    for s in stats:
        assert s.transactions - stats0.get(s.shard, 0) == (s.shard == owner) + purges_per_shard[s.shard]
    outs, ins = _pairing(dg)
    assert outs == ins and not outs
    assert dg.get_vertex("victim") is None


def test_delete_vertex_with_out_edges_purges_in_halves(clusters):
    dg = clusters.fresh(3)
    for i in range(4):
        dg.add_edge_sync("v", None, f"t{i}")
    dg.add_edge_sync("v", None, "v")
    n_in, n_out = dg.delete_vertex("v")
    assert (n_in, n_out) == (0, 4)  # the self-loop goes with the owner txn
    dg.quiesce()
    outs, ins = _pairing(dg)
    assert outs == ins == set()


def test_delete_edge(clusters):
    dg = clusters.fresh(2)
    eid = dg.add_edge_sync("A", None, "B")
    assert dg.delete_edge(eid, "A", "B")
    assert dg.get_out_edges("A") == [] and dg.get_in_edges("B") == []
    assert not dg.delete_edge(eid, "A", "B")


def test_unknown_vertex_errors(clusters):
    dg = clusters.fresh(2)
    with pytest.raises((LookupError, RemoteError)):
        dg.get_out_edges("ghost")
    with pytest.raises((LookupError, RemoteError)):
        dg.delete_vertex("ghost")


def test_dump_reflects_labels_and_props(clusters):
    dg = clusters.fresh(2)
    dg.add_vertex("a", "person", {"n": 1})
    dg.add_edge_sync("a", "knows", "b", {"w": 0.5})
    lines = dump_graph(dg)
    assert "V\ta\tperson\t{'n': 1}" in lines
    assert "E\ta\tb\tknows\t0\t{'w': 0.5}" in lines
