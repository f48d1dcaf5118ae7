import struct
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from shardgraph.kvstore import (
    EnvClosed,
    IncompatibleFormat,
    KvConfig,
    KvEnv,
    ReadOnlyViolation,
    StorageFull,
)


def test_fresh_env_has_no_databases(tmp_path):
    env = KvEnv(tmp_path / "e", KvConfig(map_size=1 << 24))
    assert env.database_names() == []
    env.close()


def test_commit_survives_reopen(tmp_path):
    path = tmp_path / "e"
    env = KvEnv(path, KvConfig(map_size=1 << 24))
    db = env.open_db("d")
    with env.begin(write=True) as txn:
        txn.put(db, b"k", b"v")
    env.close()
    env = KvEnv(path, KvConfig(map_size=1 << 24))
    db = env.open_db("d")
    with env.begin() as txn:
        assert txn.get(db, b"k") == b"v"
    env.close()


def test_abort_discards(env):
    db = env.open_db("d")
    txn = env.begin(write=True)
    txn.put(db, b"k", b"v")
    txn.abort()
    with env.begin() as txn:
        assert txn.get(db, b"k") is None


def test_dup_values_come_back_sorted(env):
    db = env.open_db("d", allows_duplicate_keys=True)
    with env.begin(write=True) as txn:
        for v in (b"3", b"1", b"2"):
            txn.put(db, b"k", v)
    with env.begin() as txn:
        assert txn.dup_scan(db, b"k") == [b"1", b"2", b"3"]


def test_delete_single_dup_and_whole_key(env):
    db = env.open_db("d", allows_duplicate_keys=True)
    with env.begin(write=True) as txn:
        for v in (b"a1", b"a2", b"b1"):
            txn.put(db, b"k", v)
        assert txn.delete(db, b"k", b"a2")
        assert txn.delete_prefix_dups(db, b"k", b"a") == 1
        assert txn.dup_scan(db, b"k") == [b"b1"]
        assert txn.delete(db, b"k")
        assert not txn.delete(db, b"k")


def test_write_in_read_txn_rejected(env):
    db = env.open_db("d")
    with env.begin() as txn:
        with pytest.raises(ReadOnlyViolation):
            txn.put(db, b"k", b"v")


def test_begin_on_closed_env(tmp_path):
    env = KvEnv(tmp_path / "e", KvConfig(map_size=1 << 24))
    env.close()
    with pytest.raises(EnvClosed):
        env.begin()


def test_reader_keeps_snapshot_while_writer_commits(env):
    db = env.open_db("d")
    with env.begin(write=True) as txn:
        txn.put(db, b"k", b"old")
    reader = env.begin()
    writer = env.begin(write=True)
    writer.put(db, b"k", b"new")
    assert reader.get(db, b"k") == b"old"
    writer.commit()
    assert reader.get(db, b"k") == b"old"
    reader.abort()
    with env.begin() as txn:
        assert txn.get(db, b"k") == b"new"


def test_second_writer_blocks_until_first_finishes(env):
    db = env.open_db("d")
    first = env.begin(write=True)
    first.put(db, b"k", b"1")
    order = []

    def second():
        with env.begin(write=True) as txn:
            order.append("second")
            txn.put(db, b"k", b"2")

    t = threading.Thread(target=second)
    t.start()
    time.sleep(0.2)
    order.append("first-commit")
    first.commit()
    t.join(5)
    assert order == ["first-commit", "second"]
    with env.begin() as txn:
        assert txn.get(db, b"k") == b"2"


def test_storage_full_by_default_then_grow(tmp_path):
    env = KvEnv(tmp_path / "e", KvConfig(map_size=1 << 20))
    db = env.open_db("d")
    with pytest.raises(StorageFull):
        with env.begin(write=True) as txn:
            for i in range(2000):
                txn.put(db, struct.pack(">I", i), b"x" * 1000)
    env.close()

    env = KvEnv(tmp_path / "g", KvConfig(map_size=1 << 20, grow=True))
    db = env.open_db("d")

    def fill(txn):
        for i in range(2000):
            txn.put(db, struct.pack(">I", i), b"x" * 1000)

    env.write(fill)
    with env.begin() as txn:
        assert txn.count(db) == 2000
    env.close()


def test_map_size_below_existing_data(tmp_path):
    path = tmp_path / "e"
    env = KvEnv(path, KvConfig(map_size=1 << 24))
    db = env.open_db("d")
    with env.begin(write=True) as txn:
        for i in range(3000):
            txn.put(db, struct.pack(">I", i), b"y" * 1000)
    env.close()
    with pytest.raises(IncompatibleFormat):
        KvEnv(path, KvConfig(map_size=1 << 20))
    env = KvEnv(path, KvConfig(map_size=1 << 20, grow=True))
    db = env.open_db("d")
    with env.begin() as txn:
        assert txn.count(db) == 3000
    env.close()


def test_foreign_format_marker_refused(tmp_path):
    path = tmp_path / "e"
    KvEnv(path, KvConfig(map_size=1 << 24)).close()
    (path / "FORMAT").write_bytes(b"XXXX" + b"\0" * 10)
    with pytest.raises(IncompatibleFormat):
        KvEnv(path, KvConfig(map_size=1 << 24))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.binary(min_size=1, max_size=16), min_size=1, max_size=40, unique=True))
def test_iteration_is_byte_ordered(tmp_path_factory, keys):
    env = KvEnv(tmp_path_factory.mktemp("ord"), KvConfig(map_size=1 << 22, sync=False))
    db = env.open_db("d")
    dup = env.open_db("dup", allows_duplicate_keys=True)
    with env.begin(write=True) as txn:
        for k in keys:
            txn.put(db, k, b"")
            txn.put(dup, b"k", k)
    with env.begin() as txn:
        assert [k for k, _ in txn.items(db)] == sorted(keys)
        assert txn.dup_scan(dup, b"k") == sorted(keys)
    env.close()
