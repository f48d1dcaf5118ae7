import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from shardgraph.crash import invariant_violations
from shardgraph.graph import (
    AlreadyExists,
    EdgeRecord,
    GraphConfig,
    InvalidLabel,
    LabelSpaceExhausted,
    NotFound,
    VertexNotFound,
    graph_create,
    graph_delete,
    graph_names,
    graph_open,
)
from shardgraph.ids import (
    MAX_EDGE_COUNTER,
    edge_counter,
    edge_shard,
    pack_edge_id,
    pack_vertex_id,
    unpack_vertex_id,
    vertex_shard,
)
from shardgraph.kvstore import KvConfig, KvEnv


@pytest.fixture
def g(env):
    return graph_create(env, "g")


def test_create_then_open_same_graph(env):
    graph_create(env, "g")
    g = graph_open(env, "g")
    with g.begin() as txn:
        assert g.vertex_count(txn) == 0
    assert graph_names(env) == ["g"]


def test_create_twice_and_open_missing(env):
    graph_create(env, "g")
    with pytest.raises(AlreadyExists):
        graph_create(env, "g")
    with pytest.raises(NotFound):
        graph_open(env, "nope")


def test_delete_graph(env):
    g = graph_create(env, "g")
    with g.begin(write=True) as txn:
        g.check_or_create_vertex(txn, b"A")
    graph_delete(env, "g")
    assert graph_names(env) == []
    g = graph_create(env, "g")
    with g.begin() as txn:
        assert g.lookup_vertex(txn, b"A") is None


def test_counter_persists_across_reopen(tmp_path):
    path = tmp_path / "kv"
    env = KvEnv(path, KvConfig(map_size=1 << 24))
    g = graph_create(env, "g")
    with g.begin(write=True) as txn:
        for i in range(5):
            g.check_or_create_vertex(txn, f"v{i}".encode())
    env.close()
    env = KvEnv(path, KvConfig(map_size=1 << 24))
    g = graph_open(env, "g")
    with g.begin(write=True) as txn:
        vid = g.check_or_create_vertex(txn, b"new")
    assert unpack_vertex_id(vid).counter == 6
    env.close()


def test_vertex_id_packing():
    vid = pack_vertex_id(1, 0, 1)
    assert vid == (1 << 56) | 1
    assert unpack_vertex_id(vid) == (1, 0, 1)
    assert vertex_shard(pack_vertex_id(3, 4095, 7)) == 4095
    eid = pack_edge_id(5, MAX_EDGE_COUNTER)
    assert edge_shard(eid) == 5 and edge_counter(eid) == MAX_EDGE_COUNTER
    with pytest.raises(ValueError):
        pack_vertex_id(256, 0, 1)
    with pytest.raises(OverflowError):
        pack_edge_id(0, MAX_EDGE_COUNTER + 1)


def test_check_or_create_vertex(g):
    with g.begin(write=True) as txn:
        a = g.check_or_create_vertex(txn, b"A", 1)
        assert a == pack_vertex_id(1, 0, 1)
        assert g.check_or_create_vertex(txn, b"A", 7) == a
        b = g.check_or_create_vertex(txn, b"B")
        assert unpack_vertex_id(b).counter == 2
        assert g.external_id(txn, a) == b"A"


def test_label_interning(g):
    with g.begin(write=True) as txn:
        assert g.check_or_create_label(txn, "Knows") == 1
        assert g.check_or_create_label(txn, "Owns") == 2
        assert g.check_or_create_label(txn, "Knows") == 1
        with pytest.raises(InvalidLabel):
            g.check_or_create_label(txn, "")


def test_label_space_exhausted(g):
    with g.begin(write=True) as txn:
        for i in range(255):
            g.check_or_create_label(txn, f"l{i}")
        with pytest.raises(LabelSpaceExhausted):
            g.check_or_create_label(txn, "one-too-many")


def test_edges_and_multi_edges(g):
    with g.begin(write=True) as txn:
        a = g.check_or_create_vertex(txn, b"A")
        b = g.check_or_create_vertex(txn, b"B")
        e1 = g.add_edge(txn, a, b, 1)
        e2 = g.add_edge(txn, a, b, 1)
        assert e1 != e2
        assert g.get_out_edges(txn, a) == [EdgeRecord(b, 1, e1), EdgeRecord(b, 1, e2)]
        assert g.get_in_edges(txn, b) == [EdgeRecord(a, 1, e1), EdgeRecord(a, 1, e2)]
        g.add_edge(txn, a, b, 2)
        assert len(g.get_out_edges(txn, a, label=2)) == 1
        with pytest.raises(VertexNotFound):
            g.add_outgoing_edge(txn, pack_vertex_id(0, 0, 99), b, 1)


def test_properties(g):
    with g.begin(write=True) as txn:
        v = g.check_or_create_vertex(txn, b"A")
        g.set_vertex_property(txn, v, "age", 30)
        assert g.get_vertex_property(txn, v, "age") == 30
        g.set_vertex_property(txn, v, "age", 31)
        assert g.get_vertex_property(txn, v, "age") == 31
        assert g.get_vertex_property(txn, v, "unset") is None
        g.set_vertex_property(txn, v, "age", "old")
        assert g.get_vertex_property(txn, v, "age") == "old"
        with pytest.raises(VertexNotFound):
            g.set_vertex_property(txn, pack_vertex_id(0, 0, 42), "x", 1)


def test_large_and_typed_property_values(g):
    values = {"s": "x" * 5000, "i": -(2 ** 63), "f": 1.5, "vec": [1.0, 2.5], "comp": ("a", 1, (2.0,)), "b": b"\0\1"}
    with g.begin(write=True) as txn:
        v = g.check_or_create_vertex(txn, b"A")
        for k, val in values.items():
            g.set_vertex_property(txn, v, k, val)
    with g.begin() as txn:
        assert g.vertex_properties(txn, v) == values


def test_delete_vertex_local_reports_references(env):
    g = graph_create(env, "g", GraphConfig(shard_id=0))
    with g.begin(write=True) as txn:
        a, b, c = (g.check_or_create_vertex(txn, x) for x in (b"A", b"B", b"C"))
        e_ab = g.add_edge(txn, a, b, 0)
        e_cb = g.add_edge(txn, c, b, 0)
        e_ba = g.add_edge(txn, b, a, 0)
        g.set_edge_property(txn, e_ba, "w", 1.0)
        removal = g.delete_vertex_local(txn, b)
        assert sorted(removal.incoming) == sorted([(a, e_ab), (c, e_cb)])
        assert removal.outgoing == [(a, e_ba)]
        assert g.lookup_vertex(txn, b"B") is None
        assert g.edge_properties(txn, e_ba) == {}


def test_single_node_delete_keeps_pairing(g):
    with g.begin(write=True) as txn:
        vs = [g.check_or_create_vertex(txn, f"v{i}".encode()) for i in range(4)]
        for s in vs:
            for t in vs:
                g.add_edge(txn, s, t, 0)
        g.delete_vertex(txn, vs[1])
        assert invariant_violations(g, txn) == []
        assert sum(1 for _ in g.iter_out_edges(txn)) == 9
        # counters never reuse a deleted id
        assert unpack_vertex_id(g.check_or_create_vertex(txn, b"v1")).counter == 5


def test_batch_ops_and_ranges(g):
    with g.begin(write=True) as txn:
        vids, rng = g.batch_add_vertices(txn, [(b"A", 0, {"p": 1}), (b"B", 0, None)], 3)
        assert len(rng) == 3
        a, b = vids
        eids = list(rng.edge_ids())
        n = g.batch_add_edges(txn, [(a, EdgeRecord(b, 0, eids[0]), "out"), (b, EdgeRecord(a, 0, eids[0]), "in")])
        assert n == 2
        _, rng2 = g.batch_add_vertices(txn, [], 2)
        assert rng2.start == rng.end
        assert invariant_violations(g, txn) == []
        assert g.get_vertex_property(txn, a, "p") == 1


@pytest.mark.parametrize("layout", ["dup", "concat"])
def test_property_layouts_agree(env, layout):
    g = graph_create(env, f"g-{layout}", GraphConfig(property_layout=layout))
    with g.begin(write=True) as txn:
        v = g.check_or_create_vertex(txn, b"A")
        for i in range(20):
            g.set_vertex_property(txn, v, f"p{i % 7}", i)
        assert g.vertex_properties(txn, v) == {f"p{k}": 14 + k if k < 6 else 13 for k in range(7)}


ops = st.lists(
    st.tuples(st.integers(0, 5), st.sampled_from(["a", "b", "c"]),
              st.one_of(st.integers(-10, 10), st.text(max_size=8), st.floats(allow_nan=False))),
    max_size=30,
)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(ops)
def test_property_round_trip_across_reopen(tmp_path_factory, seq):
    path = tmp_path_factory.mktemp("props")
    env = KvEnv(path, KvConfig(map_size=1 << 22, sync=False))
    g = graph_create(env, "g")
    expected = {}
    with g.begin(write=True) as txn:
        vids = [g.check_or_create_vertex(txn, f"v{i}".encode()) for i in range(6)]
        for i, name, value in seq:
            g.set_vertex_property(txn, vids[i], name, value)
            expected[(i, name)] = value
    env.close()
    env = KvEnv(path, KvConfig(map_size=1 << 22, sync=False))
    g = graph_open(env, "g")
    with g.begin() as txn:
        for (i, name), value in expected.items():
            assert g.get_vertex_property(txn, vids[i], name) == value
    env.close()


edge_ops = st.lists(st.tuples(st.sampled_from(["add", "del"]), st.integers(0, 6), st.integers(0, 6)), max_size=60)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(edge_ops)
def test_pairing_and_bijection_under_random_workload(tmp_path_factory, seq):
    env = KvEnv(tmp_path_factory.mktemp("w"), KvConfig(map_size=1 << 22, sync=False))
    g = graph_create(env, "g")
    live = {}
    with g.begin(write=True) as txn:
        for op, s, t in seq:
            if op == "add":
                vs = g.check_or_create_vertex(txn, f"v{s}".encode())
                vt = g.check_or_create_vertex(txn, f"v{t}".encode())
                g.add_edge(txn, vs, vt, 0)
                live.setdefault(s, vs)
                live.setdefault(t, vt)
            elif s in live:
                g.delete_vertex(txn, live.pop(s))
        assert invariant_violations(g, txn) == []
        counters = [unpack_vertex_id(v).counter for v, _ in g.iter_vertices(txn)]
        assert counters == sorted(set(counters))
    env.close()
