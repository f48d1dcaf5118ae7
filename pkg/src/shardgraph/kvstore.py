"""Embedded ordered transactional key-value layer.

Thin binding over LMDB: copy-on-write B+tree, one serialized writer,
unlimited snapshot readers, sorted duplicate values.  The environment
directory also carries a small ``FORMAT`` file with a magic number and
format version so foreign or future layouts are refused on open.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional, TypeVar

import lmdb

MAGIC = b"SGKV"
FORMAT_VERSION = 1
_FORMAT_FILE = "FORMAT"
_FORMAT = struct.Struct("<4sHQ")

T = TypeVar("T")


class KvError(Exception):
    pass


class EnvClosed(KvError):
    pass


class ReadOnlyViolation(KvError):
    pass


class StorageFull(KvError):
    pass


class IncompatibleFormat(KvError):
    pass


class KvIOError(KvError):
    pass


@dataclass
class KvConfig:
    max_databases: int = 64
    map_size: int = 1 << 30
    # grow the map instead of failing with StorageFull (only via KvEnv.write)
    grow: bool = False
    # fsync on commit; process-kill durability holds either way
    sync: bool = True
    max_readers: int = 256


@dataclass(frozen=True)
class KvDb:
    name: str
    allows_duplicate_keys: bool
    handle: object


class KvEnv:
    """One environment per shard; hosts every named database of its graphs."""

    def __init__(self, path: str | os.PathLike, config: Optional[KvConfig] = None):
        self.path = Path(path)
        self.config = config or KvConfig()
        self._closed = False
        self._dbs: dict[str, KvDb] = {}
        self._db_lock = threading.Lock()
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise KvIOError(str(exc)) from exc
        self._check_format()
        # marker first: a crash right after creating data.mdb must not orphan it
        self._write_format()
        data_file = self.path / "data.mdb"
        if data_file.exists() and data_file.stat().st_size > self.config.map_size:
            if not self.config.grow:
                raise IncompatibleFormat(
                    f"existing data ({data_file.stat().st_size} bytes) exceeds map_size "
                    f"{self.config.map_size}"
                )
            self.config.map_size = _round_up(data_file.stat().st_size * 2)
        try:
            self._env = lmdb.open(
                str(self.path),
                map_size=self.config.map_size,
                max_dbs=self.config.max_databases,
                max_readers=self.config.max_readers,
                sync=self.config.sync,
                metasync=self.config.sync,
                lock=True,
                readahead=False,
            )
        except lmdb.InvalidError as exc:
            raise IncompatibleFormat(str(exc)) from exc
        except lmdb.Error as exc:
            raise KvIOError(str(exc)) from exc

    def _check_format(self) -> None:
        fmt = self.path / _FORMAT_FILE
        if not fmt.exists():
            if (self.path / "data.mdb").exists():
                raise IncompatibleFormat(f"{self.path}: data without format marker")
            return
        raw = fmt.read_bytes()
        if len(raw) != _FORMAT.size:
            raise IncompatibleFormat(f"{fmt}: truncated format marker")
        magic, version, _ = _FORMAT.unpack(raw)
        if magic != MAGIC:
            raise IncompatibleFormat(f"{fmt}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise IncompatibleFormat(f"{fmt}: format version {version}, expected {FORMAT_VERSION}")

    def _write_format(self) -> None:
        fmt = self.path / _FORMAT_FILE
        if fmt.exists():
            return
        tmp = fmt.with_suffix(".tmp")
        tmp.write_bytes(_FORMAT.pack(MAGIC, FORMAT_VERSION, self.config.map_size))
        os.replace(tmp, fmt)

    # -- databases -----------------------------------------------------

    def open_db(self, name: str, allows_duplicate_keys: bool = False, create: bool = True) -> KvDb:
        self._ensure_open()
        with self._db_lock:
            db = self._dbs.get(name)
            if db is not None:
                return db
            try:
                handle = self._env.open_db(
                    name.encode(), dupsort=allows_duplicate_keys, create=create
                )
            except lmdb.NotFoundError as exc:
                raise KeyError(name) from exc
            except lmdb.MapFullError as exc:
                raise StorageFull(str(exc)) from exc
            db = KvDb(name, allows_duplicate_keys, handle)
            self._dbs[name] = db
            return db

    def drop_db(self, txn: "KvTxn", db: KvDb) -> None:
        txn._require_write()
        txn._txn.drop(db.handle, delete=True)
        with self._db_lock:
            self._dbs.pop(db.name, None)

    def database_names(self) -> list[str]:
        with self.begin() as txn:
            return [k.decode() for k, _ in txn._txn.cursor()]

    # -- transactions --------------------------------------------------

    def begin(self, write: bool = False, parent: Optional["KvTxn"] = None) -> "KvTxn":
        """Start a transaction.  Writers block until they are the sole writer."""
        self._ensure_open()
        try:
            raw = self._env.begin(write=write, parent=parent._txn if parent else None)
        except lmdb.MapFullError as exc:
            raise StorageFull(str(exc)) from exc
        except lmdb.Error as exc:
            if self._closed:
                raise EnvClosed(str(self.path)) from exc
            raise KvIOError(str(exc)) from exc
        return KvTxn(self, raw, write)

    def write(self, fn: Callable[["KvTxn"], T]) -> T:
        """Run ``fn`` in a write transaction and commit; retry after growing if enabled."""
        while True:
            txn = self.begin(write=True)
            try:
                result = fn(txn)
                txn.commit()
                return result
            except StorageFull:
                txn.abort()
                if not self.config.grow:
                    raise
                self.grow()
            except BaseException:
                txn.abort()
                raise

    def grow(self, factor: int = 2) -> None:
        self.config.map_size = _round_up(self.config.map_size * factor)
        self._env.set_mapsize(self.config.map_size)

    def sync(self) -> None:
        self._ensure_open()
        self._env.sync(True)

    def max_value_size(self) -> int:
        """Largest value storable in a duplicate-key database."""
        return self._env.max_key_size()

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._env.close()

    @property
    def closed(self) -> bool:
        return self._closed

    def _ensure_open(self) -> None:
        if self._closed:
            raise EnvClosed(str(self.path))

    def __enter__(self) -> "KvEnv":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class KvTxn:
    def __init__(self, env: KvEnv, raw: lmdb.Transaction, write: bool):
        self.env = env
        self._txn = raw
        self.write = write
        self.done = False

    @property
    def mode(self) -> str:
        return "read_write" if self.write else "read_only"

    def _require_write(self) -> None:
        if not self.write:
            raise ReadOnlyViolation("write in a read-only transaction")

    def put(self, db: KvDb, key: bytes, value: bytes, overwrite: bool = True) -> bool:
        self._require_write()
        try:
            if db.allows_duplicate_keys:
                return self._txn.put(key, value, db=db.handle, dupdata=True)
            return self._txn.put(key, value, db=db.handle, overwrite=overwrite)
        except lmdb.MapFullError as exc:
            raise StorageFull(str(exc)) from exc

    def get(self, db: KvDb, key: bytes) -> Optional[bytes]:
        return self._txn.get(key, db=db.handle)

    def dup_scan(self, db: KvDb, key: bytes) -> list[bytes]:
        cur = self._txn.cursor(db=db.handle)
        if not cur.set_key(key):
            return []
        return list(cur.iternext_dup())

    def dup_range(self, db: KvDb, key: bytes, prefix: bytes) -> Iterator[bytes]:
        """Duplicate values under ``key`` that start with ``prefix``, in order."""
        cur = self._txn.cursor(db=db.handle)
        if not cur.set_range_dup(key, prefix):
            return
        for value in cur.iternext_dup():
            if not value.startswith(prefix):
                return
            yield value

    def delete(self, db: KvDb, key: bytes, value: Optional[bytes] = None) -> bool:
        self._require_write()
        if value is None:
            return self._txn.delete(key, db=db.handle)
        return self._txn.delete(key, value, db=db.handle)

    def delete_prefix_dups(self, db: KvDb, key: bytes, prefix: bytes) -> int:
        self._require_write()
        cur = self._txn.cursor(db=db.handle)
        removed = 0
        if not cur.set_range_dup(key, prefix):
            return 0
        while cur.key() == key and cur.value().startswith(prefix):
            cur.delete()
            removed += 1
            if cur.key() != key:
                break
        return removed

    def items(self, db: KvDb, start: Optional[bytes] = None) -> Iterator[tuple[bytes, bytes]]:
        cur = self._txn.cursor(db=db.handle)
        positioned = cur.set_range(start) if start is not None else cur.first()
        if not positioned:
            return iter(())
        return cur.iternext(keys=True, values=True)

    def count(self, db: KvDb) -> int:
        return self._txn.stat(db.handle)["entries"]

    def commit(self) -> None:
        try:
            self._txn.commit()
        except lmdb.MapFullError as exc:
            raise StorageFull(str(exc)) from exc
        except lmdb.Error as exc:
            raise KvIOError(str(exc)) from exc
        finally:
            self.done = True

    def abort(self) -> None:
        if not self.done:
            self._txn.abort()
            self.done = True

    def __enter__(self) -> "KvTxn":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self.done:
            return
        if exc_type is None and self.write:
            self.commit()
        else:
            self.abort()


def _round_up(n: int, page: int = 1 << 20) -> int:
    return (n + page - 1) // page * page
