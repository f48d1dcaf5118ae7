"""Single-writer serialization harness shared by the unit and acceptance tests.

Producers submit write transactions to one shard's writer.  Each transaction
creates a vertex, links it to the producer's previous vertex, stamps it with
the hub's running total and bumps that total.  The stamps ("tickets") of a
serial execution are a permutation of 0..N-1 that increases along each
producer's chain; every snapshot must show hub total == vertex count - 1 ==
out edge count + producers started.
"""

import threading
from dataclasses import dataclass, field

from shardgraph.graph import GraphConfig, graph_open_or_create
from shardgraph.kvstore import KvConfig, KvEnv
from shardgraph.shard import WriterWorker

# acceptance verdict lines, echoed in the terminal summary
VERDICTS: list[str] = []


@dataclass
class SerialResult:
    ops: int
    reads: int
    violations: list = field(default_factory=list)


def serial_trial(data_dir, producers=4, per_producer=2500, readers=2):
    env = KvEnv(data_dir, KvConfig(map_size=1 << 28, sync=False))
    g = graph_open_or_create(env, "serial", GraphConfig())
    writer = WriterWorker(env, max_group=32)
    hub = writer.run(lambda txn: g.check_or_create_vertex(txn, b"hub"))
    writer.run(lambda txn: g.set_vertex_property(txn, hub, "total", 0))
    violations = []
    stop = threading.Event()
    reads = [0]

    def step(txn, k, j):
        v = g.check_or_create_vertex(txn, f"p{k}_{j}".encode())
        total = g.get_vertex_property(txn, hub, "total")
        g.set_vertex_property(txn, v, "ticket", total)
        if j > 0:
            g.add_edge(txn, g.lookup_vertex(txn, f"p{k}_{j - 1}".encode()), v, 0)
        g.set_vertex_property(txn, hub, "total", total + 1)

    def produce(k):
        for j in range(per_producer):
            writer.run(lambda txn, j=j: step(txn, k, j))

    def read():
        while not stop.is_set():
            with env.begin() as txn:
                total = g.get_vertex_property(txn, hub, "total")
                n_v = g.vertex_count(txn) - 1
                n_e = sum(1 for _ in g.iter_out_edges(txn))
                started = sum(g.lookup_vertex(txn, f"p{k}_0".encode()) is not None for k in range(producers))
            reads[0] += 1
            if total != n_v or n_e != n_v - started:
                violations.append(f"torn snapshot: total={total} vertices={n_v} edges={n_e}")

    rs = [threading.Thread(target=read) for _ in range(readers)]
    ps = [threading.Thread(target=produce, args=(k,)) for k in range(producers)]
    for t in rs + ps:
        t.start()
    for t in ps:
        t.join()
    stop.set()
    for t in rs:
        t.join()
    writer.stop()

    n = producers * per_producer
    with env.begin() as txn:
        tickets = {}
        for k in range(producers):
            chain = [g.get_vertex_property(txn, g.lookup_vertex(txn, f"p{k}_{j}".encode()), "ticket")
                     for j in range(per_producer)]
            if chain != sorted(chain):
                violations.append(f"producer {k} tickets out of order")
            for j, t in enumerate(chain):
                tickets[t] = (k, j)
            for j in range(1, per_producer):
                src = g.lookup_vertex(txn, f"p{k}_{j - 1}".encode())
                dst = g.lookup_vertex(txn, f"p{k}_{j}".encode())
                if [e.target for e in g.get_out_edges(txn, src)] != [dst]:
                    violations.append(f"chain p{k} broken at {j}")
        if sorted(tickets) != list(range(n)):
            violations.append("tickets are not a permutation of 0..N-1")
        if g.get_vertex_property(txn, hub, "total") != n:
            violations.append("hub total mismatch")
    env.close()
    return SerialResult(n, reads[0], violations)
