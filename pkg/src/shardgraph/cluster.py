"""Local multi-process clusters for tests, benchmarks and the CLI."""

from __future__ import annotations

import logging
import os
import signal
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .dgraph import DistributedGraph
from .messaging import Endpoint, read_hostfile, wait_for_port, write_hostfile
from .placement import ShardMap

log = logging.getLogger(__name__)


@dataclass
class ClusterConfig:
    hostfile: Path
    data_dir: Path
    workers: int = 4
    batch_size: int = 100_000
    cache: bool = True
    sync: bool = True
    map_size: int = 1 << 30

    @property
    def endpoints(self) -> list[Endpoint]:
        return read_hostfile(self.hostfile)

    @property
    def shard_endpoints(self) -> list[Endpoint]:
        return self.endpoints[:-1]

    @property
    def qm_endpoint(self) -> Endpoint:
        return self.endpoints[-1]

    @property
    def shard_count(self) -> int:
        return len(self.shard_endpoints)


def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind((host, 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def shard_command(config: ClusterConfig, shard: int) -> list[str]:
    cmd = [
        sys.executable, "-m", "shardgraph", "shard",
        "--hostfile", str(config.hostfile), "--id", str(shard), "--data", str(config.data_dir),
        "--workers", str(config.workers), "--map-size", str(config.map_size),
    ]
    if not config.sync:
        cmd.append("--no-sync")
    return cmd


class LocalCluster:
    """P shard processes on localhost plus a hostfile whose last line is reserved for a query manager."""

    def __init__(self, shards: int, data_dir: Optional[str | Path] = None, host: str = "127.0.0.1",
                 workers: int = 4, sync: bool = True, map_size: int = 1 << 30,
                 start_timeout: float = 60.0):
        self._tmp = None
        if data_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="shardgraph-")
            data_dir = self._tmp.name
        data_dir = Path(data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        hostfile = data_dir / "hostfile"
        if not hostfile.exists():
            write_hostfile(hostfile, [(host, p) for p in free_ports(shards + 1, host)])
        self.config = ClusterConfig(hostfile, data_dir, workers=workers, sync=sync, map_size=map_size)
        if self.config.shard_count != shards:
            raise ValueError(f"{hostfile} lists {self.config.shard_count} shards, expected {shards}")
        self.start_timeout = start_timeout
        self.procs: dict[int, subprocess.Popen] = {}
        self._graphs: list[DistributedGraph] = []

    @property
    def shard_count(self) -> int:
        return self.config.shard_count

    @property
    def hostfile(self) -> Path:
        return self.config.hostfile

    def start(self) -> "LocalCluster":
        for k in range(self.shard_count):
            self.start_shard(k, wait=False)
        for k in range(self.shard_count):
            self.wait_shard(k)
        return self

    def start_shard(self, k: int, wait: bool = True) -> None:
        log_path = self.config.data_dir / f"shard-{k}.log"
        with open(log_path, "ab") as logf:
            self.procs[k] = subprocess.Popen(
                shard_command(self.config, k), stdout=logf, stderr=subprocess.STDOUT,
                env={**os.environ, "PYTHONUNBUFFERED": "1"},
            )
        if wait:
            self.wait_shard(k)

    def wait_shard(self, k: int) -> None:
        ep = self.config.shard_endpoints[k]
        deadline = time.monotonic() + self.start_timeout
        while True:
            if self.procs[k].poll() is not None:
                tail = (self.config.data_dir / f"shard-{k}.log").read_text()[-2000:]
                raise RuntimeError(f"shard {k} exited with {self.procs[k].returncode}:\n{tail}")
            try:
                wait_for_port(ep.host, ep.port, timeout=0.5)
                return
            except Exception:
                if time.monotonic() > deadline:
                    raise

    def kill_shard(self, k: int, sig: int = signal.SIGKILL) -> None:
        proc = self.procs.pop(k, None)
        if proc is not None and proc.poll() is None:
            proc.send_signal(sig)
            proc.wait(30)

    def graph(self, **kw) -> DistributedGraph:
        """A fresh proxy-mode graph connected to every shard."""
        dg = DistributedGraph(ShardMap(self.config.shard_endpoints), **kw)
        self._graphs.append(dg)
        return dg

    def stop(self) -> None:
        for dg in self._graphs:
            dg.close()
        self._graphs.clear()
        for proc in self.procs.values():
            if proc.poll() is None:
                proc.send_signal(signal.SIGTERM)
        for k, proc in list(self.procs.items()):
            try:
                proc.wait(15)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        self.procs.clear()

    def close(self) -> None:
        self.stop()
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def __enter__(self) -> "LocalCluster":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()
