import logging
import socket
import struct
import time

import pytest
from hypothesis import given, strategies as st

from shardgraph.cluster import free_ports
from shardgraph.messaging import (
    ADMIN_BASE,
    DEFERRED,
    ONEWAY,
    REQUEST,
    CompletionHandle,
    ConnectionRefused,
    DecodeError,
    PeerClosed,
    RemoteError,
    RpcNode,
    chain,
    decode_frame,
    encode_frame,
    read_hostfile,
    write_hostfile,
)
from shardgraph.runtime import TaskPool

ECHO = 0x0A01
RELAY = 0x0A02
NOTE = 0x0A03
BOOM = 0x0A04
SLOW = 0x0A05


@pytest.fixture
def server():
    node = RpcNode("server", TaskPool(2))
    node.register_handler(ECHO, lambda req: req.payload)

    def boom(req):
        raise ValueError("nope")

    def slow(req):
        time.sleep(float(req.payload.decode()))
        return req.payload

    node.register_handler(BOOM, boom)
    node.register_handler(SLOW, slow)
    node.listen("127.0.0.1", 0)
    yield node
    node.close()
    node.executor.shutdown(wait=False)


@pytest.fixture
def client():
    node = RpcNode("client")
    yield node
    node.close()


@given(st.integers(0, 0xFFFF), st.integers(0, 2 ** 64 - 1), st.integers(0, 255), st.binary(max_size=64))
def test_frame_round_trip(opcode, rid, flags, payload):
    frame = encode_frame(opcode, rid, flags, payload)
    assert struct.unpack_from("<I", frame)[0] == len(frame) - 4
    assert decode_frame(frame) == (opcode, rid, flags, payload)


def test_frame_layout_is_bit_exact():
    frame = encode_frame(0x0102, 7, REQUEST, b"ab")
    assert frame == struct.pack("<IHQB", 13, 0x0102, 7, 1) + b"ab"
    with pytest.raises(DecodeError):
        decode_frame(frame[:-1])


def test_echo_and_counters(server, client):
    assert client.call(server.address, ECHO, b"abc") == b"abc"
    c = client.counters_snapshot()
    assert c.sent[ECHO] == 1 and c.received[ECHO] == 1
    s = server.counters_snapshot()
    assert s.received[ECHO] == 1 and s.sent[ECHO] == 1
    client.counters_reset()
    assert client.counters_snapshot().total_sent == 0


def test_admin_opcodes_not_counted(server, client):
    server.register_handler(ADMIN_BASE + 0x10, lambda req: b"")
    client.call(server.address, ADMIN_BASE + 0x10, b"")
    assert client.counters_snapshot().total_sent == 0


def test_two_async_calls_then_poll(server, client):
    h1 = client.call_async(server.address, SLOW, b"0.2")
    h2 = client.call_async(server.address, ECHO, b"fast")
    pending = {h1, h2}
    deadline = time.monotonic() + 10
    while pending and time.monotonic() < deadline:
        client.poll(pending, 1.0)
        pending = {h for h in pending if not h.done()}
    assert h1.value == b"0.2" and h2.value == b"fast"
    assert h1.state == h2.state == "ready"


def test_remote_exception_fails_the_call(server, client):
    with pytest.raises(RemoteError) as info:
        client.call(server.address, BOOM, b"")
    assert info.value.kind == "ValueError"
    assert client.call(server.address, ECHO, b"still ok") == b"still ok"


def test_dead_port_refused(client):
    (port,) = free_ports(1)
    with pytest.raises(ConnectionRefused):
        client.call(("127.0.0.1", port), ECHO, b"x")
    h = client.call_async(("127.0.0.1", port), ECHO, b"x")
    assert h.state == "failed" and isinstance(h.error, ConnectionRefused)


def test_oneway_counts_one_message(server, client):
    got = []
    server.register_handler(NOTE, lambda req: got.append(req.payload))
    client.send_oneway(server.address, NOTE, b"hi")
    deadline = time.monotonic() + 5
    while not got and time.monotonic() < deadline:
        time.sleep(0.01)
    assert got == [b"hi"]
    assert client.counters_snapshot().total_sent == 1
    assert client.counters_snapshot().total_received == 0


def test_three_node_relay(server, client):
    middle = RpcNode("middle", TaskPool(2))

    def relay(req):
        h = middle.call_async(server.address, ECHO, b"via:" + req.payload)
        h.add_done_callback(lambda done: req.reply(done.value) if done.error is None else req.fail(done.error))
        return DEFERRED

    middle.register_handler(RELAY, relay)
    middle.listen("127.0.0.1", 0)
    try:
        assert client.call(middle.address, RELAY, b"x") == b"via:x"
        assert middle.counters_snapshot().sent[ECHO] == 1
    finally:
        middle.close()
        middle.executor.shutdown(wait=False)


def test_peer_close_fails_pending(server, client):
    h = client.call_async(server.address, SLOW, b"5")
    time.sleep(0.1)
    server.close()
    with pytest.raises(PeerClosed):
        h.wait(5)


def test_malformed_frame_closes_only_that_connection(server, client, caplog):
    caplog.set_level(logging.WARNING, logger="shardgraph.messaging")
    with socket.create_connection(server.address) as bad:
        bad.sendall(struct.pack("<I", 3) + b"xyz")
        bad.settimeout(5)
        assert bad.recv(16) == b""
    assert "decode_error" in caplog.text
    assert client.call(server.address, ECHO, b"ok") == b"ok"


def test_bad_flags_rejected(server, client):
    with socket.create_connection(server.address) as bad:
        bad.sendall(encode_frame(ECHO, 1, 0, b""))
        bad.settimeout(5)
        assert bad.recv(16) == b""
    with socket.create_connection(server.address) as ok:
        ok.sendall(encode_frame(ECHO, 9, ONEWAY, b""))


def test_completion_handle_transitions_once():
    h = CompletionHandle(1)
    assert h.set_result(b"a")
    assert not h.set_error(RuntimeError())
    assert h.wait(0) == b"a"
    chained = chain(h, lambda v: v + b"!")
    assert chained.wait(1) == b"a!"


def test_hostfile_round_trip(tmp_path):
    path = tmp_path / "hosts"
    eps = write_hostfile(path, [("127.0.0.1", 9000), ("10.0.0.2", 9001)])
    assert read_hostfile(path) == eps
    assert [e.node_id for e in eps] == [0, 1]
