"""BFS query throughput through the query manager, with per-level time breakdown.

Loads a synthetic graph, starts a query manager process and issues fixed-depth
BFS queries from distinct start vertices with a sweep of client threads.

    python scripts/bfs_throughput.py --edges 200000 --shards 4 --depth 3 --queries 1000
"""

import argparse
import logging
import random
import subprocess
import sys
import tempfile
import threading
import time
from collections import defaultdict

from shardgraph.bench import bfs_bench, load_edges, synthetic_edges
from shardgraph.cluster import LocalCluster
from shardgraph.messaging import wait_for_port
from shardgraph.query import QueryManager, qm_client_connect

log = logging.getLogger("bfs_throughput")


def breakdown(dg, starts, depth):
    """Mean seconds per level spent issuing, in shards, on the wire and merging."""
    qm = QueryManager(dg)
    acc = defaultdict(float)
    for s in starts:
        for lv in qm.bfs_fixed_depth(s, depth).levels:
            acc["issue"] += lv.t1_issue
            acc["server"] += lv.t2_server
            acc["network"] += lv.t3_network
            acc["process"] += lv.t4_process
    return {k: v / len(starts) for k, v in acc.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--edges", type=int, default=200_000)
    ap.add_argument("--vertices", type=int, default=50_000)
    ap.add_argument("--shards", type=int, default=4)
    ap.add_argument("--depth", type=int, default=3)
    ap.add_argument("--queries", type=int, default=1000)
    ap.add_argument("--threads", type=int, nargs="+", default=[1, 4, 16])
    ap.add_argument("--skew", type=float, default=1.0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    edges = synthetic_edges(args.edges, args.vertices, seed=3, skew=args.skew)
    sources = sorted({s for s, _, _ in edges})
    starts = random.Random(3).sample(sources, min(args.queries, len(sources)))
    with tempfile.TemporaryDirectory() as root, LocalCluster(args.shards, root, workers=4, sync=False) as cluster:
        dg = cluster.graph()
        t = time.perf_counter()
        load_edges(dg, edges, mode="firehose")
        log.info("loaded %d edges in %.1fs", len(edges), time.perf_counter() - t)
        print("per-query seconds by phase:", {k: round(v, 5) for k, v in breakdown(dg, starts[:50], args.depth).items()})

        qm = subprocess.Popen([sys.executable, "-m", "shardgraph", "qm", "--hostfile", str(cluster.hostfile)])
        try:
            ep = cluster.config.qm_endpoint
            wait_for_port(ep.host, ep.port, 30)
            print(f"{'threads':>8}{'queries/s':>12}{'mean visited':>14}")
            for threads in args.threads:
                clients = {}

                def run(s):
                    c = clients.get(threading.get_ident())
                    if c is None:
                        c = clients[threading.get_ident()] = qm_client_connect(ep)
                    return c.bfs(s, args.depth)

                report, _ = bfs_bench(run, starts, depth=args.depth, threads=threads)
                for c in clients.values():
                    c.close()
                print(f"{threads:>8}{report.rate:>12.1f}{report.extra.get('mean_visited', 0):>14.1f}")
        finally:
            qm.terminate()
            qm.wait(15)


if __name__ == "__main__":
    main()
