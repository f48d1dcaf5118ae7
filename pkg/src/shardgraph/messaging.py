"""RPC over stream sockets.

Wire frame (all little-endian)::

    u32 length    byte count of everything after this field
    u16 opcode
    u64 request_id
    u8  flags     0x01 request, 0x02 response, 0x04 one-way; 0x80 marks an error response
    ... payload

Every frame is one message.  A request/response pair is two messages and a
one-way send is one.  Frames whose opcode is at or above ``ADMIN_BASE`` are
control traffic and are left out of the message counters.
"""

from __future__ import annotations

import itertools
import logging
import socket
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional

from .runtime import InlineExecutor, PoolClosed

log = logging.getLogger(__name__)

HEADER = struct.Struct("<IHQB")
HEADER_SIZE = HEADER.size
_LEN = struct.Struct("<I")
_REST = struct.Struct("<HQB")
MIN_LENGTH = _REST.size
MAX_FRAME = 1 << 30

REQUEST = 0x01
RESPONSE = 0x02
ONEWAY = 0x04
ERROR = 0x80

ADMIN_BASE = 0xF000

DEFERRED = object()


class RpcError(Exception):
    pass


class ConnectionRefused(RpcError):
    pass


class PeerClosed(RpcError):
    pass


class DecodeError(RpcError):
    pass


class RemoteError(RpcError):
    """The handler on the peer raised; ``kind`` is the remote exception class name."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


def encode_frame(opcode: int, request_id: int, flags: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(MIN_LENGTH + len(payload), opcode, request_id, flags) + payload


def decode_frame(frame: bytes) -> tuple[int, int, int, bytes]:
    if len(frame) < HEADER_SIZE:
        raise DecodeError("short frame")
    length, opcode, rid, flags = HEADER.unpack_from(frame)
    if length != len(frame) - 4:
        raise DecodeError(f"length field {length} does not match {len(frame) - 4}")
    return opcode, rid, flags, frame[HEADER_SIZE:]


def _error_payload(exc: BaseException) -> bytes:
    kind = type(exc).__name__.encode()
    return _LEN.pack(len(kind)) + kind + str(exc).encode(errors="replace")


def _decode_error_payload(payload: bytes) -> RemoteError:
    try:
        (n,) = _LEN.unpack_from(payload)
        return RemoteError(payload[4:4 + n].decode(), payload[4 + n:].decode(errors="replace"))
    except (struct.error, UnicodeDecodeError):
        return RemoteError("RemoteError", repr(payload[:64]))


# -- endpoints ------------------------------------------------------------


@dataclass(frozen=True)
class Endpoint:
    node_id: int
    host: str
    port: int

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)


def read_hostfile(path: str | Path) -> list[Endpoint]:
    """One ``host port`` per line; line index is the node id."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        host, port = line.split()
        out.append(Endpoint(len(out), host, int(port)))
    return out


def write_hostfile(path: str | Path, addresses: Iterable[tuple[str, int]]) -> list[Endpoint]:
    addresses = list(addresses)
    Path(path).write_text("".join(f"{h} {p}\n" for h, p in addresses))
    return [Endpoint(i, h, p) for i, (h, p) in enumerate(addresses)]


# -- counters -------------------------------------------------------------


@dataclass
class MessageCounters:
    sent: Counter = field(default_factory=Counter)
    received: Counter = field(default_factory=Counter)

    @property
    def total_sent(self) -> int:
        return sum(self.sent.values())

    @property
    def total_received(self) -> int:
        return sum(self.received.values())

    def __add__(self, other: "MessageCounters") -> "MessageCounters":
        return MessageCounters(self.sent + other.sent, self.received + other.received)


class _CounterBox:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._sent: Counter = Counter()
        self._received: Counter = Counter()

    def on_send(self, opcode: int) -> None:
        if opcode < ADMIN_BASE:
            with self._lock:
                self._sent[opcode] += 1

    def on_receive(self, opcode: int) -> None:
        if opcode < ADMIN_BASE:
            with self._lock:
                self._received[opcode] += 1

    def snapshot(self) -> MessageCounters:
        with self._lock:
            return MessageCounters(Counter(self._sent), Counter(self._received))

    def reset(self) -> None:
        with self._lock:
            self._sent.clear()
            self._received.clear()


# -- completion handles ---------------------------------------------------


class CompletionHandle:
    """pending -> ready(payload) | failed(error), exactly once."""

    __slots__ = ("request_id", "state", "_value", "_error", "_event", "_callbacks", "_lock", "_node")

    def __init__(self, request_id: int, node: Optional["RpcNode"] = None):
        self.request_id = request_id
        self.state = "pending"
        self._value: Any = None
        self._error: Optional[BaseException] = None
        self._event = threading.Event()
        self._callbacks: list[Callable[["CompletionHandle"], None]] = []
        self._lock = threading.Lock()
        self._node = node

    def done(self) -> bool:
        return self.state != "pending"

    def set_result(self, value: Any) -> bool:
        return self._finish("ready", value, None)

    def set_error(self, error: BaseException) -> bool:
        return self._finish("failed", None, error)

    def _finish(self, state: str, value: Any, error: Optional[BaseException]) -> bool:
        with self._lock:
            if self.state != "pending":
                return False
            self._value, self._error, self.state = value, error, state
            callbacks, self._callbacks = self._callbacks, []
        self._event.set()
        for cb in callbacks:
            try:
                cb(self)
            except Exception:
                log.exception("completion callback failed")
        if self._node is not None:
            self._node._notify_completion()
        return True

    def add_done_callback(self, cb: Callable[["CompletionHandle"], None]) -> None:
        with self._lock:
            if self.state == "pending":
                self._callbacks.append(cb)
                return
        cb(self)

    def wait(self, timeout: Optional[float] = None) -> Any:
        if not self._event.wait(timeout):
            raise TimeoutError(f"request {self.request_id} timed out")
        if self._error is not None:
            raise self._error
        return self._value

    result = wait

    @property
    def error(self) -> Optional[BaseException]:
        return self._error

    @property
    def value(self) -> Any:
        return self._value


def ready_handle(value: Any) -> CompletionHandle:
    h = CompletionHandle(0)
    h.set_result(value)
    return h


def chain(handle: CompletionHandle, fn: Callable[[Any], Any]) -> CompletionHandle:
    """A handle completing with fn(result) of ``handle``."""
    out = CompletionHandle(handle.request_id, handle._node)

    def on_done(h: CompletionHandle) -> None:
        if h.error is not None:
            out.set_error(h.error)
            return
        try:
            out.set_result(fn(h.value))
        except Exception as exc:
            out.set_error(exc)

    handle.add_done_callback(on_done)
    return out


# -- connections ----------------------------------------------------------


@dataclass
class Request:
    node: "RpcNode"
    conn: "Connection"
    opcode: int
    request_id: int
    flags: int
    payload: bytes

    @property
    def expects_reply(self) -> bool:
        return bool(self.flags & REQUEST)

    def reply(self, payload: bytes = b"") -> None:
        if self.expects_reply:
            self.conn.send_frame(self.opcode, self.request_id, RESPONSE, payload)

    def fail(self, exc: BaseException) -> None:
        if self.expects_reply:
            self.conn.send_frame(self.opcode, self.request_id, RESPONSE | ERROR, _error_payload(exc))
        else:
            log.warning("one-way opcode %#x failed: %s", self.opcode, exc)


class Connection:
    def __init__(self, node: "RpcNode", sock: socket.socket, peer: Any, outbound: bool):
        self.node = node
        self.sock = sock
        self.peer = peer
        self.outbound = outbound
        self.closed = False
        self._send_lock = threading.Lock()
        self._pending: dict[int, CompletionHandle] = {}
        self._pending_lock = threading.Lock()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = threading.Thread(
            target=self._read_loop, name=f"{node.name}-rx-{peer}", daemon=True
        )
        self._reader.start()

    def send_frame(self, opcode: int, rid: int, flags: int, payload: bytes = b"") -> None:
        frame = encode_frame(opcode, rid, flags, payload)
        with self._send_lock:
            if self.closed:
                raise PeerClosed(f"connection to {self.peer} closed")
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                self._close(PeerClosed(str(exc)))
                raise PeerClosed(str(exc)) from exc
        self.node._counters.on_send(opcode)

    def send_raw(self, data: bytes) -> None:
        with self._send_lock:
            self.sock.sendall(data)

    def request(self, opcode: int, payload: bytes) -> CompletionHandle:
        rid = self.node._next_rid()
        handle = CompletionHandle(rid, self.node)
        with self._pending_lock:
            if self.closed:
                raise PeerClosed(f"connection to {self.peer} closed")
            self._pending[rid] = handle
        try:
            self.send_frame(opcode, rid, REQUEST, payload)
        except RpcError:
            with self._pending_lock:
                self._pending.pop(rid, None)
            raise
        return handle

    def _read_loop(self) -> None:
        sock = self.sock
        buf = bytearray()
        error: RpcError = PeerClosed(f"peer {self.peer} closed")
        try:
            while True:
                chunk = sock.recv(1 << 18)
                if not chunk:
                    break
                buf += chunk
                pos = 0
                avail = len(buf)
                while avail - pos >= 4:
                    (length,) = _LEN.unpack_from(buf, pos)
                    if length < MIN_LENGTH or length > MAX_FRAME:
                        raise DecodeError(f"bad frame length {length}")
                    end = pos + 4 + length
                    if end > avail:
                        break
                    opcode, rid, flags = _REST.unpack_from(buf, pos + 4)
                    payload = bytes(buf[pos + HEADER_SIZE:end])
                    pos = end
                    self._on_frame(opcode, rid, flags, payload)
                if pos:
                    del buf[:pos]
        except DecodeError as exc:
            log.warning("decode_error from %s: %s; closing connection", self.peer, exc)
            error = exc
        except OSError as exc:
            if not self.closed:
                log.debug("connection %s: %s", self.peer, exc)
        self._close(error)

    def _on_frame(self, opcode: int, rid: int, flags: int, payload: bytes) -> None:
        self.node._counters.on_receive(opcode)
        if flags & RESPONSE:
            with self._pending_lock:
                handle = self._pending.pop(rid, None)
            if handle is None:
                log.warning("response for unknown request %d from %s", rid, self.peer)
                return
            if flags & ERROR:
                handle.set_error(_decode_error_payload(payload))
            else:
                handle.set_result(payload)
            return
        if not flags & (REQUEST | ONEWAY):
            raise DecodeError(f"bad flags {flags:#x}")
        self.node._dispatch(Request(self.node, self, opcode, rid, flags, payload))

    def _close(self, error: RpcError) -> None:
        with self._pending_lock:
            if self.closed:
                return
            self.closed = True
            pending, self._pending = self._pending, {}
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        for handle in pending.values():
            handle.set_error(error)
        self.node._forget(self)

    def close(self) -> None:
        self._close(PeerClosed("closed locally"))


# -- node -----------------------------------------------------------------


Handler = Callable[[Request], Any]


class RpcNode:
    """One process's messaging context: handler table, connections, counters."""

    def __init__(self, name: str = "node", executor: Any = None, connect_timeout: float = 5.0):
        self.name = name
        self.executor = executor or InlineExecutor()
        self.connect_timeout = connect_timeout
        self._handlers: dict[int, tuple[Handler, Any]] = {}
        self._counters = _CounterBox()
        self._rid = itertools.count(1)
        self._out: dict[tuple[str, int], Connection] = {}
        self._out_lock = threading.Lock()
        self._inbound: set[Connection] = set()
        self._listener: Optional[socket.socket] = None
        self._completion = threading.Condition()
        self._closed = False
        self.address: Optional[tuple[str, int]] = None

    def _next_rid(self) -> int:
        return next(self._rid)

    # handlers

    def register_handler(self, opcode: int, handler: Handler, executor: Any = None) -> None:
        if opcode in self._handlers:
            raise ValueError(f"opcode {opcode:#x} already registered")
        self._handlers[opcode] = (handler, executor)

    def _dispatch(self, req: Request) -> None:
        entry = self._handlers.get(req.opcode)
        if entry is None:
            req.fail(RpcError(f"no handler for opcode {req.opcode:#x}"))
            return
        handler, executor = entry
        try:
            (executor or self.executor).submit(self._run_handler, handler, req)
        except PoolClosed:
            # frames racing a shutdown are dropped; the caller sees the connection close
            log.debug("dropping opcode %#x: executor closed", req.opcode)

    @staticmethod
    def _run_handler(handler: Handler, req: Request) -> None:
        try:
            result = handler(req)
        except Exception as exc:
            if not isinstance(exc, (RpcError, LookupError, ValueError)):
                log.exception("handler for %#x failed", req.opcode)
            try:
                req.fail(exc)
            except RpcError:
                pass
            return
        if result is DEFERRED:
            return
        try:
            req.reply(result if result is not None else b"")
        except RpcError as exc:
            log.debug("reply to %s dropped: %s", req.conn.peer, exc)

    # server side

    def listen(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(128)
        self._listener = sock
        self.address = sock.getsockname()[:2]
        threading.Thread(target=self._accept_loop, name=f"{self.name}-accept", daemon=True).start()
        return self.address

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._closed:
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            conn = Connection(self, sock, f"{addr[0]}:{addr[1]}", outbound=False)
            with self._out_lock:
                self._inbound.add(conn)

    # client side

    def connection(self, ep: Endpoint | tuple[str, int]) -> Connection:
        addr = ep.address if isinstance(ep, Endpoint) else tuple(ep)
        conn = self._out.get(addr)
        if conn is not None and not conn.closed:
            return conn
        with self._out_lock:
            conn = self._out.get(addr)
            if conn is not None and not conn.closed:
                return conn
            try:
                sock = socket.create_connection(addr, timeout=self.connect_timeout)
            except ConnectionRefusedError as exc:
                raise ConnectionRefused(f"{addr[0]}:{addr[1]} refused") from exc
            except OSError as exc:
                raise ConnectionRefused(f"{addr[0]}:{addr[1]}: {exc}") from exc
            sock.settimeout(None)
            conn = Connection(self, sock, f"{addr[0]}:{addr[1]}", outbound=True)
            self._out[addr] = conn
            return conn

    def call_async(self, ep: Endpoint | tuple[str, int], opcode: int, payload: bytes = b"") -> CompletionHandle:
        try:
            return self.connection(ep).request(opcode, payload)
        except RpcError as exc:
            handle = CompletionHandle(0, self)
            handle.set_error(exc)
            return handle

    def call(
        self, ep: Endpoint | tuple[str, int], opcode: int, payload: bytes = b"",
        timeout: Optional[float] = None,
    ) -> bytes:
        return self.connection(ep).request(opcode, payload).wait(timeout)

    def send_oneway(self, ep: Endpoint | tuple[str, int], opcode: int, payload: bytes = b"") -> None:
        self.connection(ep).send_frame(opcode, 0, ONEWAY, payload)

    def poll(self, handles: Iterable[CompletionHandle] = (), timeout: float = 0.05) -> None:
        """Block until one of ``handles`` completes (or any completion, if none given)."""
        handles = list(handles)
        with self._completion:
            if handles:
                self._completion.wait_for(lambda: any(h.done() for h in handles), timeout)
            else:
                self._completion.wait(timeout)

    def _notify_completion(self) -> None:
        with self._completion:
            self._completion.notify_all()

    # counters

    def counters_snapshot(self) -> MessageCounters:
        return self._counters.snapshot()

    def counters_reset(self) -> None:
        self._counters.reset()

    # lifecycle

    def _forget(self, conn: Connection) -> None:
        with self._out_lock:
            self._inbound.discard(conn)
            for addr, c in list(self._out.items()):
                if c is conn:
                    del self._out[addr]

    def close(self) -> None:
        self._closed = True
        if self._listener is not None:
            try:
                # shutdown wakes a thread blocked in accept(); close alone leaves the port bound
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
        with self._out_lock:
            conns = list(self._out.values()) + list(self._inbound)
        for c in conns:
            c.close()

    def __enter__(self) -> "RpcNode":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def wait_for_port(host: str, port: int, timeout: float = 10.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            socket.create_connection((host, port), timeout=0.5).close()
            return
        except OSError:
            if time.monotonic() > deadline:
                raise ConnectionRefused(f"{host}:{port} not accepting connections")
            time.sleep(0.05)
