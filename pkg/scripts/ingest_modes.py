"""Edge-ingest throughput for sync, async and firehose across client thread counts.

    python scripts/ingest_modes.py --edges 100000 --shards 2 --threads 1 4 16
"""

import argparse
import json
import logging
import tempfile

from shardgraph.bench import load_edges, synthetic_edges
from shardgraph.cluster import LocalCluster

log = logging.getLogger("ingest_modes")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--edges", type=int, default=100_000)
    ap.add_argument("--vertices", type=int, default=50_000)
    ap.add_argument("--shards", type=int, default=2)
    ap.add_argument("--threads", type=int, nargs="+", default=[1, 2, 4, 8, 16])
    ap.add_argument("--modes", nargs="+", default=["sync", "async", "firehose"])
    ap.add_argument("--batch", type=int, default=100_000)
    ap.add_argument("--skew", type=float, default=0.0)
    ap.add_argument("--sync-disk", action="store_true", help="fsync every commit on the shards")
    ap.add_argument("--json", help="append one JSON record per run here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    edges = synthetic_edges(args.edges, args.vertices, seed=1, skew=args.skew)
    rows = []
    with tempfile.TemporaryDirectory() as root, \
            LocalCluster(args.shards, root, workers=4, sync=args.sync_disk) as cluster:
        for threads in args.threads:
            for mode in args.modes:
                dg = cluster.graph()
                dg.reset_graph()
                dg.quiesce()
                report = load_edges(dg, edges, mode=mode, threads=threads, batch=args.batch)
                log.info("%s threads=%d %.0f edges/s", mode, threads, report.rate)
                rows.append({"mode": mode, "threads": threads, "rate": report.rate,
                             "wall": report.wall, "messages": report.messages})
                dg.close()
    print(f"{'mode':<10}{'threads':>8}{'edges/s':>12}{'messages':>12}")
    for r in rows:
        print(f"{r['mode']:<10}{r['threads']:>8}{r['rate']:>12.0f}{r['messages']:>12}")
    if args.json:
        with open(args.json, "a") as f:
            for r in rows:
                f.write(json.dumps({**r, "shards": args.shards, "edges": args.edges}) + "\n")


if __name__ == "__main__":
    main()
