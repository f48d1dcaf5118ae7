"""Firehose vertex ingest throughput as the shard count grows.

    python scripts/vertex_scaling.py --vertices 1200000 --shards 1 2 4 12
"""

import argparse
import logging
import os
import tempfile

from shardgraph.bench import load_vertices
from shardgraph.cluster import LocalCluster

log = logging.getLogger("vertex_scaling")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--vertices", type=int, default=1_200_000)
    ap.add_argument("--shards", type=int, nargs="+", default=[1, 2, 4, 12])
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--batch", type=int, default=100_000)
    ap.add_argument("--workers", type=int, default=2, help="task workers per shard process")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    rows = [(f"u{i}", {"k": i % 97}) for i in range(args.vertices)]
    results = {}
    for p in args.shards:
        with tempfile.TemporaryDirectory() as root, \
                LocalCluster(p, root, workers=args.workers, sync=False, map_size=1 << 32) as cluster:
            report = load_vertices(cluster.graph(), rows, label="node", mode="firehose",
                                   batch=args.batch, threads=args.threads)
        results[p] = report.rate
        log.info("P=%d %.0f vertices/s (%d messages)", p, report.rate, report.messages)
    base = results[args.shards[0]]
    print(f"host cores: {os.cpu_count()}")
    print(f"{'shards':>6}{'vertices/s':>14}{'speedup':>10}")
    for p, rate in results.items():
        print(f"{p:>6}{rate:>14.0f}{rate / base:>10.2f}")


if __name__ == "__main__":
    main()
