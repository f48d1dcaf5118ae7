"""Canonical text dump of a whole cluster.

Records are tab-separated and sorted:

    V  <ext>  <label>  <props>
    E  <src ext>  <tgt ext>  <label>  <k>  <props>
    UNPAIRED_OUT / UNPAIRED_IN  <src ext>  <tgt ext>  <label>  <k>

Edge ids never appear.  ``k`` numbers the parallel edges of one
(source, target, label) triple after sorting them by properties, so two
clusters that hold the same graph print the same lines whatever ids they
assigned.  An out half whose in half is missing (or the reverse) is printed
as UNPAIRED.
"""

from __future__ import annotations

import difflib
from collections import defaultdict
from typing import Any, Iterable, Mapping, Optional

from .dgraph import DistributedGraph
from .ids import vertex_label


def _fmt_props(props: Mapping[str, Any]) -> str:
    if not props:
        return "{}"
    return "{" + ", ".join(f"{k!r}: {props[k]!r}" for k in sorted(props)) + "}"


def _fmt_ext(ext: Optional[bytes]) -> str:
    if ext is None:
        return "?"
    return ext.decode("utf-8", errors="backslashreplace").replace("\t", "\\t").replace("\n", "\\n")


def canonical_lines(shard_dumps: Iterable[tuple[list, list, list]], label_names: Mapping[int, str]) -> list[str]:
    """Canonical lines from decoded per-shard dumps (see ``decode_dump``)."""
    ext_of: dict[int, bytes] = {}
    lines: list[str] = []
    outs: list[tuple] = []
    ins: set[tuple[int, int, int, int]] = set()
    for vertices, shard_outs, shard_ins in shard_dumps:
        for vid, ext, props in vertices:
            ext_of[vid] = ext
            lines.append(f"V\t{_fmt_ext(ext)}\t{label_names.get(vertex_label(vid), '')}\t{_fmt_props(props)}")
        outs.extend(shard_outs)
        ins.update((src, tgt, label, eid) for tgt, src, label, eid in shard_ins)

    def lab(label: int) -> str:
        return label_names.get(label, str(label)) if label else ""

    groups: dict[tuple[str, str, str], list[tuple[str, str]]] = defaultdict(list)
    for src, tgt, label, eid, props in outs:
        key = (_fmt_ext(ext_of.get(src)), _fmt_ext(ext_of.get(tgt)), lab(label))
        paired = (src, tgt, label, eid) in ins
        ins.discard((src, tgt, label, eid))
        groups[key].append(("E" if paired else "UNPAIRED_OUT", _fmt_props(props)))
    for key, items in groups.items():
        for k, (kind, props) in enumerate(sorted(items, key=lambda it: (it[1], it[0]))):
            suffix = f"\t{props}" if kind == "E" else ""
            lines.append(f"{kind}\t{key[0]}\t{key[1]}\t{key[2]}\t{k}{suffix}")
    orphan: dict[tuple[str, str, str], int] = defaultdict(int)
    for src, tgt, label, _ in ins:
        orphan[(_fmt_ext(ext_of.get(src)), _fmt_ext(ext_of.get(tgt)), lab(label))] += 1
    for key, n in orphan.items():
        for k in range(n):
            lines.append(f"UNPAIRED_IN\t{key[0]}\t{key[1]}\t{key[2]}\t{k}")
    lines.sort()
    return lines


def dump_graph(dg: DistributedGraph) -> list[str]:
    return canonical_lines(dg.dump_raw(), dg.label_names())


def diff_lines(a: list[str], b: list[str]) -> list[str]:
    return [ln for ln in difflib.unified_diff(a, b, lineterm="", n=0) if ln[:1] in "+-" and ln[:3] not in ("+++", "---")]
