"""Work-stealing task pool.

Each worker owns a deque.  Tasks submitted from a worker go to its own
deque; external submissions go to a shared injector queue.  A worker takes
from the front of its own deque, then the injector, and otherwise steals
one task from the back of a random victim.

A task that blocks on a task it submitted needs ``workers >= 2``; with a
single worker that pattern deadlocks and is not supported.
"""

from __future__ import annotations

import collections
import logging
import os
import random
import threading
from typing import Any, Callable, Optional

log = logging.getLogger(__name__)

WORKERS_ENV = "SHARDGRAPH_WORKERS"
DEFAULT_WORKERS = 4


def default_worker_count() -> int:
    return int(os.environ.get(WORKERS_ENV, DEFAULT_WORKERS))


class PoolClosed(RuntimeError):
    pass


class TaskPool:
    def __init__(self, workers: Optional[int] = None, name: str = "sg-worker"):
        self.worker_count = workers or default_worker_count()
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        self.name = name
        self._deques = [collections.deque() for _ in range(self.worker_count)]
        self._injector: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._pending = 0
        self._closing = False
        self._stopped = False
        self._local = threading.local()
        self.executed = [0] * self.worker_count
        self.steals = [0] * self.worker_count
        self._threads = [
            threading.Thread(target=self._run, args=(i,), name=f"{name}-{i}", daemon=True)
            for i in range(self.worker_count)
        ]
        for t in self._threads:
            t.start()

    @classmethod
    def start(cls, workers: Optional[int] = None, **kw) -> "TaskPool":
        return cls(workers, **kw)

    def submit(self, fn: Callable[..., Any], *args: Any) -> None:
        task = (fn, args)
        with self._cond:
            me = getattr(self._local, "index", None)
            # during the drain, tasks may still spawn follow-up tasks
            if self._stopped or (self._closing and me is None):
                raise PoolClosed("pool is shut down")
            self._pending += 1
            if me is not None:
                self._deques[me].append(task)
            else:
                self._injector.append(task)
            self._cond.notify()

    def _take(self, me: int):
        own = self._deques[me]
        try:
            return own.popleft()
        except IndexError:
            pass
        try:
            return self._injector.popleft()
        except IndexError:
            pass
        victims = list(range(self.worker_count))
        random.shuffle(victims)
        for v in victims:
            if v == me:
                continue
            try:
                task = self._deques[v].pop()
            except IndexError:
                continue
            self.steals[me] += 1
            return task
        return None

    def _run(self, me: int) -> None:
        self._local.index = me
        while True:
            task = self._take(me)
            if task is None:
                with self._cond:
                    if self._stopped:
                        return
                    if self._pending == 0 or not self._has_visible_work():
                        self._cond.wait(0.05)
                continue
            fn, args = task
            try:
                fn(*args)
            except Exception:
                log.exception("task %r failed", fn)
            finally:
                self.executed[me] += 1
                with self._cond:
                    self._pending -= 1
                    if self._pending == 0:
                        self._cond.notify_all()

    def _has_visible_work(self) -> bool:
        return bool(self._injector) or any(self._deques)

    @property
    def pending(self) -> int:
        return self._pending

    def wait_idle(self, timeout: Optional[float] = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self._pending == 0, timeout)

    def shutdown(self, wait: bool = True) -> None:
        """Drain queued tasks, then stop and join the workers.  Idempotent."""
        with self._cond:
            if self._stopped:
                return
            self._closing = True
        if wait:
            self.wait_idle()
        with self._cond:
            self._stopped = True
            self._cond.notify_all()
        current = threading.current_thread()
        for t in self._threads:
            if t is not current:
                t.join()

    def __enter__(self) -> "TaskPool":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


class InlineExecutor:
    """Runs the task in the caller's thread."""

    @staticmethod
    def submit(fn: Callable[..., Any], *args: Any) -> None:
        fn(*args)
