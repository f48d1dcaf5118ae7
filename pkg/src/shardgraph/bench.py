"""CSV loaders and the instrumented benchmark harness."""

from __future__ import annotations

import csv
import logging
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

from .dgraph import DistributedGraph
from .firehose import DEFAULT_BATCH, Firehose

log = logging.getLogger(__name__)

DEFAULT_BLOCK = 1_000_000
MODES = ("sync", "async", "firehose")


@dataclass
class BenchReport:
    kind: str
    total: int
    wall: float
    block_size: int = DEFAULT_BLOCK
    blocks: list[tuple[int, float]] = field(default_factory=list)  # (items, seconds)
    skipped: int = 0
    messages: int = 0
    threads: int = 1
    mode: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.total / self.wall if self.wall > 0 else 0.0

    def block_rates(self) -> list[float]:
        return [n / s if s > 0 else 0.0 for n, s in self.blocks]

    def text(self) -> str:
        lines = [
            f"{'operation':<12} {self.kind}" + (f" ({self.mode})" if self.mode else ""),
            f"{'threads':<12} {self.threads}",
            f"{'items':<12} {self.total}",
            f"{'skipped':<12} {self.skipped}",
            f"{'wall_s':<12} {self.wall:.3f}",
            f"{'items_per_s':<12} {self.rate:.1f}",
            f"{'messages':<12} {self.messages}",
        ]
        for i, (n, s) in enumerate(self.blocks):
            lines.append(f"{'block ' + str(i):<12} {n:>10} items {s:9.3f} s {n / s if s else 0:12.1f}/s")
        for k, v in self.extra.items():
            lines.append(f"{k:<12} {v}")
        return "\n".join(lines)

    def metric_lines(self) -> list[str]:
        """One ``name value`` line per metric."""
        prefix = self.kind + (f".{self.mode}" if self.mode else "")
        out = [
            f"{prefix}.items {self.total}",
            f"{prefix}.skipped {self.skipped}",
            f"{prefix}.threads {self.threads}",
            f"{prefix}.wall_s {self.wall:.6f}",
            f"{prefix}.items_per_s {self.rate:.3f}",
            f"{prefix}.messages {self.messages}",
        ]
        out += [f"{prefix}.block{i}.items_per_s {r:.3f}" for i, r in enumerate(self.block_rates())]
        out += [f"{prefix}.{k} {v}" for k, v in self.extra.items() if isinstance(v, (int, float))]
        return out

    def write_metrics(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.metric_lines()) + "\n")

    def as_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["rate"] = self.rate
        return d


# -- CSV -------------------------------------------------------------------


def _parse_scalar(text: str) -> Any:
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def read_vertex_csv(path: str | Path) -> tuple[list[tuple[str, dict[str, Any]]], int]:
    """``external_id,prop1,...`` with a header naming the properties; returns (rows, skipped)."""
    rows: list[tuple[str, dict[str, Any]]] = []
    skipped = 0
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return rows, 0
        names = [h.strip() for h in header[1:]]
        for row in reader:
            if not row:
                continue
            if len(row) != len(names) + 1 or not row[0].strip():
                skipped += 1
                continue
            props = {n: _parse_scalar(v) for n, v in zip(names, row[1:]) if v != ""}
            rows.append((row[0].strip(), props))
    return rows, skipped


def read_edge_csv(path: str | Path) -> tuple[list[tuple[str, str, float]], int]:
    """``source,target,weight`` rows; an optional header is recognised by a non-numeric weight on line one."""
    edges: list[tuple[str, str, float]] = []
    skipped = 0
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f)):
            if not row:
                continue
            if len(row) != 3 or not row[0].strip() or not row[1].strip():
                skipped += 1
                continue
            try:
                weight = float(row[2])
            except ValueError:
                if lineno != 0:
                    skipped += 1
                continue
            edges.append((row[0].strip(), row[1].strip(), weight))
    return edges, skipped


# -- loaders ---------------------------------------------------------------


class _Blocks:
    """Per-block timing shared by the loader threads."""

    def __init__(self, block_size: int):
        self.block_size = block_size
        self.blocks: list[tuple[int, float]] = []
        self._lock = threading.Lock()
        self._count = 0
        self._mark = time.perf_counter()
        self._mark_count = 0

    def tick(self, n: int = 1) -> None:
        with self._lock:
            self._count += n
            if self._count - self._mark_count >= self.block_size:
                now = time.perf_counter()
                self.blocks.append((self._count - self._mark_count, now - self._mark))
                self._mark, self._mark_count = now, self._count

    def finish(self) -> list[tuple[int, float]]:
        if self._count > self._mark_count:
            self.blocks.append((self._count - self._mark_count, time.perf_counter() - self._mark))
            self._mark_count = self._count
        return self.blocks


def _chunks(items: Sequence, n: int) -> list[Sequence]:
    n = max(1, n)
    size = -(-len(items) // n) if items else 0
    return [items[i * size:(i + 1) * size] for i in range(n)] if size else [items]


def _run_threads(target: Callable[[Sequence], None], chunks: list[Sequence]) -> None:
    errors: list[BaseException] = []

    def run(chunk: Sequence) -> None:
        try:
            target(chunk)
        except BaseException as exc:
            log.exception("loader thread failed")
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(c,), name=f"loader-{i}") for i, c in enumerate(chunks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


def load_vertices(dg: DistributedGraph, rows: Sequence[tuple[str, dict[str, Any]]], *,
                  label: Optional[str] = None, batch: int = DEFAULT_BATCH, mode: str = "firehose",
                  threads: int = 1, block_size: int = DEFAULT_BLOCK, skipped: int = 0,
                  count_messages: bool = True) -> BenchReport:
    if mode not in ("sync", "firehose"):
        raise ValueError("vertex load mode must be sync or firehose")
    if count_messages:
        dg.reset_cluster_counters()
    if label:
        dg.label_id(label)
    blocks = _Blocks(block_size)
    t0 = time.perf_counter()

    def work(chunk: Sequence) -> None:
        if mode == "sync":
            for ext, props in chunk:
                dg.add_vertex(ext, label, props)
                blocks.tick()
            return
        with Firehose(dg, batch_size=batch) as fh:
            for ext, props in chunk:
                fh.submit_vertex(ext, label, props)
                blocks.tick()

    _run_threads(work, _chunks(rows, threads))
    dg.quiesce()
    wall = time.perf_counter() - t0
    report = BenchReport("load_vertices", len(rows), wall, block_size, blocks.finish(), skipped,
                         threads=threads, mode=mode)
    if count_messages:
        report.messages = dg.cluster_counters().total_sent
    return report


def load_edges(dg: DistributedGraph, edges: Sequence[tuple[str, str, float]], *, mode: str = "firehose",
               threads: int = 1, batch: int = DEFAULT_BATCH, label: Optional[str] = None,
               block_size: int = DEFAULT_BLOCK, skipped: int = 0, count_messages: bool = True) -> BenchReport:
    """Insert ``edges`` with ``threads`` client flows, each owning one contiguous chunk."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if count_messages:
        dg.reset_cluster_counters()
    if label:
        dg.label_id(label)
    blocks = _Blocks(block_size)
    flushes: list[int] = []
    t0 = time.perf_counter()

    def work(chunk: Sequence) -> None:
        if mode == "sync":
            for src, tgt, w in chunk:
                dg.add_edge_sync(src, label, tgt, {"weight": w})
                blocks.tick()
        elif mode == "async":
            for src, tgt, w in chunk:
                dg.add_edge_async(src, label, tgt, {"weight": w}).wait()
                blocks.tick()
        else:
            with Firehose(dg, batch_size=batch) as fh:
                for src, tgt, w in chunk:
                    fh.submit_edge(src, tgt, label, {"weight": w})
                    blocks.tick()
            flushes.append(len(fh.reports))

    _run_threads(work, _chunks(edges, threads))
    dg.quiesce()
    wall = time.perf_counter() - t0
    report = BenchReport("load_edges", len(edges), wall, block_size, blocks.finish(), skipped,
                         threads=threads, mode=mode)
    if flushes:
        report.extra["flushes"] = sum(flushes)
    if count_messages:
        report.messages = dg.cluster_counters().total_sent
    return report


def bfs_bench(run_bfs: Callable[[str], Any], starts: Sequence[str], *, depth: int, threads: int = 1,
              block_size: int = DEFAULT_BLOCK) -> tuple[BenchReport, dict[str, int]]:
    """``run_bfs(start)`` returns a BfsResult; reports queries/s and per-start visited counts."""
    visited: dict[str, int] = {}
    lock = threading.Lock()
    blocks = _Blocks(block_size)
    t0 = time.perf_counter()

    def work(chunk: Sequence[str]) -> None:
        for s in chunk:
            res = run_bfs(s)
            with lock:
                visited[s] = len(res.visited)
            blocks.tick()

    _run_threads(work, _chunks(list(starts), threads))
    wall = time.perf_counter() - t0
    report = BenchReport("bfs", len(starts), wall, block_size, blocks.finish(), threads=threads,
                         mode=f"depth{depth}")
    if visited:
        report.extra["mean_visited"] = sum(visited.values()) / len(visited)
    return report, visited


def read_starts(path: str | Path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


def synthetic_edges(n_edges: int, n_vertices: int, seed: int = 0, skew: float = 0.0) -> list[tuple[str, str, float]]:
    """Random edge list; ``skew`` > 0 biases endpoints toward low ids (power-law-ish degrees)."""
    rng = random.Random(seed)

    def pick() -> int:
        if skew <= 0:
            return rng.randrange(n_vertices)
        return min(n_vertices - 1, int(n_vertices * rng.random() ** (1.0 + skew)))

    return [(f"v{pick()}", f"v{pick()}", round(rng.random(), 6)) for _ in range(n_edges)]


def write_edge_csv(path: str | Path, edges: Iterable[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["source", "target", "weight"])
        w.writerows(edges)
