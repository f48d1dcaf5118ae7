"""Command-line entry point: ``shardgraph <command>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench
from .dgraph import DistributedGraph
from .dump import dump_graph
from .firehose import DEFAULT_BATCH
from .kvstore import KvConfig
from .messaging import read_hostfile
from .query import QueryManager, qm_client_connect, qm_serve
from .shard import ShardConfig, run_shard, shard_endpoints

log = logging.getLogger("shardgraph")


def cmd_shard(args: argparse.Namespace) -> int:
    config = ShardConfig(
        shard_id=args.id,
        endpoints=shard_endpoints(args.hostfile),
        data_dir=Path(args.data),
        workers=args.workers,
        kv=KvConfig(map_size=args.map_size, sync=args.sync, grow=args.grow),
        property_layout=args.property_layout,
    )
    run_shard(config)
    return 0


def cmd_qm(args: argparse.Namespace) -> int:
    qm_serve(args.hostfile, workers=args.workers)
    return 0


def _graph(args: argparse.Namespace) -> DistributedGraph:
    return DistributedGraph.from_hostfile(args.hostfile, cache_enabled=not args.no_cache)


def _emit(report: bench.BenchReport, args: argparse.Namespace) -> None:
    print(report.text())
    if args.metrics:
        report.write_metrics(args.metrics)


def cmd_load_vertices(args: argparse.Namespace) -> int:
    rows, skipped = bench.read_vertex_csv(args.csv)
    with _graph(args) as dg:
        report = bench.load_vertices(dg, rows, label=args.label, batch=args.batch, mode=args.mode,
                                     threads=args.threads, block_size=args.block, skipped=skipped)
    _emit(report, args)
    return 0


def cmd_load_edges(args: argparse.Namespace) -> int:
    edges, skipped = bench.read_edge_csv(args.csv)
    with _graph(args) as dg:
        report = bench.load_edges(dg, edges, mode=args.mode, threads=args.threads, batch=args.batch,
                                  label=args.label, block_size=args.block, skipped=skipped)
    _emit(report, args)
    return 0


def cmd_bfs(args: argparse.Namespace) -> int:
    starts = bench.read_starts(args.starts)
    if args.direct:
        dg = _graph(args)
        qm = QueryManager(dg)
        run = lambda s: qm.bfs_fixed_depth(s, args.depth)  # noqa: E731
        closer = dg.close
    else:
        client = qm_client_connect(read_hostfile(args.hostfile)[-1])
        run = lambda s: client.bfs(s, args.depth)  # noqa: E731
        closer = client.close
    try:
        report, visited = bench.bfs_bench(run, starts, depth=args.depth, threads=args.threads, block_size=args.block)
    finally:
        closer()
    _emit(report, args)
    if args.visited:
        with open(args.visited, "w") as f:
            for s in starts:
                f.write(f"{s}\t{visited.get(s, 0)}\n")
    return 0


def cmd_dump(args: argparse.Namespace) -> int:
    with _graph(args) as dg:
        lines = dump_graph(dg)
    out = open(args.output, "w") if args.output else sys.stdout
    try:
        for ln in lines:
            out.write(ln + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_cluster(args: argparse.Namespace) -> int:
    """Run P shards and a query manager locally until interrupted."""
    import signal
    import subprocess
    import threading

    from .cluster import LocalCluster

    cluster = LocalCluster(args.shards, args.data, workers=args.workers, sync=args.sync).start()
    qm = subprocess.Popen([sys.executable, "-m", "shardgraph", "qm", "--hostfile", str(cluster.hostfile)])
    print(f"hostfile {cluster.hostfile}", flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    try:
        while not stop.wait(0.5):
            pass
    finally:
        qm.terminate()
        qm.wait(15)
        cluster.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shardgraph")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("shard", help="run one shard process")
    s.add_argument("--hostfile", required=True)
    s.add_argument("--id", type=int, required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--workers", type=int, default=4)
    s.add_argument("--map-size", type=int, default=1 << 30)
    s.add_argument("--no-sync", dest="sync", action="store_false")
    s.add_argument("--grow", action="store_true")
    s.add_argument("--property-layout", choices=["dup", "concat"], default="dup")
    s.set_defaults(func=cmd_shard)

    q = sub.add_parser("qm", help="run the query manager on the hostfile's last line")
    q.add_argument("--hostfile", required=True)
    q.add_argument("--workers", type=int, default=16)
    q.set_defaults(func=cmd_qm)

    def client_opts(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--hostfile", required=True)
        sp.add_argument("--no-cache", action="store_true", help="disable the external id cache")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--block", type=int, default=bench.DEFAULT_BLOCK, help="items per reported block")
        sp.add_argument("--metrics", help="write one metric per line to this file")

    lv = sub.add_parser("load-vertices", help="load a vertex CSV")
    client_opts(lv)
    lv.add_argument("csv")
    lv.add_argument("--mode", choices=["sync", "firehose"], default="firehose")
    lv.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    lv.add_argument("--label")
    lv.set_defaults(func=cmd_load_vertices)

    le = sub.add_parser("load-edges", help="load an edge CSV")
    client_opts(le)
    le.add_argument("csv")
    le.add_argument("--mode", choices=list(bench.MODES), default="firehose")
    le.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    le.add_argument("--label")
    le.set_defaults(func=cmd_load_edges)

    b = sub.add_parser("bfs", help="fixed-depth BFS from each start vertex")
    client_opts(b)
    b.add_argument("--depth", type=int, required=True)
    b.add_argument("--starts", required=True, help="file with one external id per line")
    b.add_argument("--direct", action="store_true", help="traverse in this process instead of via the query manager")
    b.add_argument("--visited", help="write per-start visited counts here")
    b.set_defaults(func=cmd_bfs)

    d = sub.add_parser("dump", help="canonical sorted dump of the whole graph")
    d.add_argument("--hostfile", required=True)
    d.add_argument("--no-cache", action="store_true")
    d.add_argument("-o", "--output")
    d.set_defaults(func=cmd_dump)

    c = sub.add_parser("cluster", help="run a local cluster (P shards + query manager)")
    c.add_argument("--shards", type=int, required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--workers", type=int, default=4)
    c.add_argument("--no-sync", dest="sync", action="store_false")
    c.set_defaults(func=cmd_cluster)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    return args.func(args)
