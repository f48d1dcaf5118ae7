"""Crash-injection harness for one shard's storage.

A child process applies a deterministic sequence of write transactions
through the shard writer (group commit, nested txns) and prints ``ack i``
once transaction ``i`` is durable.  The parent kills it with SIGKILL at a
random moment, reopens the store and checks that what survived is exactly
the first ``k`` transactions for some ``k`` no smaller than the last ack.

Run the child directly with ``python -m shardgraph.crash --data DIR --n N``.
"""

from __future__ import annotations

import argparse
import os
import random
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .graph import GraphConfig, GraphStore, NotFound, graph_open, graph_open_or_create
from .ids import vertex_label
from .kvstore import KvConfig, KvEnv, KvTxn

GRAPH = "crash"
BIG = "x" * 600  # larger than one dup value, so it spills


def ext(i: int) -> bytes:
    return f"v{i}".encode()


def label_of(i: int) -> str:
    return f"L{i % 3}"


def target_of(i: int) -> int:
    return (i * 7919) % i


def apply_txn(g: GraphStore, txn: KvTxn, i: int) -> None:
    """Transaction i: one vertex, one edge to an earlier vertex, and a write to v0."""
    lid = g.check_or_create_label(txn, label_of(i))
    v = g.check_or_create_vertex(txn, ext(i), lid)
    g.set_vertex_property(txn, v, "n", i)
    if i % 5 == 0:
        g.set_vertex_property(txn, v, "big", BIG + str(i))
    if i > 0:
        t = g.lookup_vertex(txn, ext(target_of(i)))
        g.add_edge(txn, v, t, lid)
        g.set_vertex_property(txn, g.lookup_vertex(txn, ext(0)), "last", i)


@dataclass
class Recovered:
    k: int
    violations: list[str] = field(default_factory=list)


def invariant_violations(g: GraphStore, txn: KvTxn) -> list[str]:
    """Bijection between ex2i and i2ex, and one in-half for every out-half (and back)."""
    bad = []
    ex2i = {k: v for k, v in txn.items(g.ex2i)}
    i2ex = {k: v for k, v in txn.items(g.i2ex)}
    if len(ex2i) != len(i2ex):
        bad.append(f"ex2i has {len(ex2i)} entries, i2ex {len(i2ex)}")
    for e, key in ex2i.items():
        if i2ex.get(key) != e:
            bad.append(f"ex2i[{e!r}] not mirrored in i2ex")
    outs = {(src, rec.target, rec.label, rec.edge) for src, rec in g.iter_out_edges(txn)}
    ins = {(rec.target, tgt, rec.label, rec.edge) for tgt, rec in g.iter_in_edges(txn)}
    for e in outs - ins:
        bad.append(f"out edge {e} has no in twin")
    for e in ins - outs:
        bad.append(f"in edge {e} has no out twin")
    return bad


def check_prefix(g: GraphStore, txn: KvTxn) -> Recovered:
    """Find k and list every way the stored state differs from the first k transactions."""
    k = g.vertex_count(txn)
    rec = Recovered(k, invariant_violations(g, txn))
    bad = rec.violations
    names = g.all_labels(txn)
    for i in range(k):
        v = g.lookup_vertex(txn, ext(i))
        if v is None:
            bad.append(f"v{i} missing with {k} vertices present")
            continue
        if names.get(vertex_label(v)) != label_of(i):
            bad.append(f"v{i} has label {names.get(vertex_label(v))!r}")
        props = g.vertex_properties(txn, v)
        want = {"n": i}
        if i % 5 == 0:
            want["big"] = BIG + str(i)
        if i == 0 and k > 1:
            want["last"] = k - 1
        if props != want:
            bad.append(f"v{i} props {sorted(props)} != {sorted(want)}")
        outs = g.get_out_edges(txn, v)
        if i == 0:
            if outs:
                bad.append("v0 has out edges")
        elif [names.get(o.label) for o in outs] != [label_of(i)] or \
                g.external_id(txn, outs[0].target) != ext(target_of(i)):
            bad.append(f"v{i} out edges {outs}")
    n_out = sum(1 for _ in g.iter_out_edges(txn))
    if n_out != max(0, k - 1):
        bad.append(f"{n_out} out edges for {k} transactions")
    return rec


def recover(data_dir: str | Path, map_size: int = 1 << 28) -> Recovered:
    env = KvEnv(Path(data_dir), KvConfig(map_size=map_size))
    try:
        g = graph_open(env, GRAPH)
        with env.begin() as txn:
            return check_prefix(g, txn)
    except NotFound:
        return Recovered(0)
    finally:
        env.close()


def run_child(data_dir: Path, n: int, seed: int, map_size: int = 1 << 28) -> None:
    from .shard import WriterWorker

    env = KvEnv(data_dir, KvConfig(map_size=map_size, sync=True))
    g = graph_open_or_create(env, GRAPH, GraphConfig())
    with env.begin() as txn:
        start = g.vertex_count(txn)
    writer = WriterWorker(env, max_group=64)
    rng = random.Random(seed)
    out = sys.stdout
    lock = threading.Lock()
    done_all = threading.Event()
    last = n - 1

    def make_done(i: int):
        def done(_result, error):
            if error is None:
                with lock:
                    out.write(f"ack {i}\n")
                    out.flush()
            if i == last:
                done_all.set()
        return done

    i = start
    while i < n:
        # bursts of varying size so group boundaries move between trials
        burst = rng.choice((1, 1, 2, 5, 20, 64))
        for j in range(i, min(n, i + burst)):
            writer.submit(lambda txn, j=j: apply_txn(g, txn, j), make_done(j))
        i += burst
        if rng.random() < 0.3:
            writer.run(lambda txn: None)
    if start < n:
        done_all.wait()
    writer.stop()
    env.close()


@dataclass
class TrialResult:
    acked: int
    recovered: Recovered
    killed: bool

    @property
    def ok(self) -> bool:
        return not self.recovered.violations and self.recovered.k >= self.acked


def crash_trial(data_dir: str | Path, n: int = 1000, kill_at: Optional[int] = None,
                jitter: float = 0.0, seed: int = 0, map_size: int = 1 << 28) -> TrialResult:
    """Run the child and SIGKILL it ``jitter`` seconds after it acks transaction ``kill_at``.

    With ``kill_at`` None the child runs to completion.  The store is then
    reopened and checked.
    """
    data_dir = Path(data_dir)
    cmd = [sys.executable, "-m", "shardgraph.crash", "--data", str(data_dir), "--n", str(n),
           "--seed", str(seed), "--map-size", str(map_size)]
    proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
                            env={**os.environ, "PYTHONUNBUFFERED": "1"})
    acked = [-1]
    reached = threading.Event()
    if kill_at is not None and kill_at < 0:
        reached.set()  # kill during startup, before any ack

    def reader() -> None:
        assert proc.stdout is not None
        for line in proc.stdout:
            if line.startswith("ack "):
                acked[0] = max(acked[0], int(line.split()[1]))
                if kill_at is not None and acked[0] >= kill_at:
                    reached.set()
        reached.set()

    t = threading.Thread(target=reader, daemon=True)
    t.start()
    killed = False
    if kill_at is not None:
        reached.wait(300)
        if jitter > 0:
            time.sleep(jitter)
        if proc.poll() is None:
            proc.send_signal(signal.SIGKILL)
            killed = True
    proc.wait(300)
    t.join(10)
    if proc.returncode not in (0, -signal.SIGKILL):
        raise RuntimeError(f"crash child failed ({proc.returncode}): {proc.stderr.read()[-2000:]}")
    return TrialResult(acked[0] + 1, recover(data_dir, map_size), killed)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m shardgraph.crash")
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--map-size", type=int, default=1 << 28)
    args = p.parse_args(argv)
    run_child(Path(args.data), args.n, args.seed, args.map_size)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
