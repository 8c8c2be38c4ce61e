"""Meta-path parsing and meta-path-based subgraph extraction.

A meta-path is a typed path schema c_1 -> ... -> c_{k+1}; its subgraph around a
target node collects the endpoints of all simple path instances (the
meta-path-based neighbors) plus every interior node on retained paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import GraphError, HtrnGraph, Schema
from .util import derived_rng

DEFAULT_NEIGHBOR_CAP = 10


@dataclass(frozen=True)
class MetaPath:
    name: str
    node_types: tuple[int, ...]  # type ids c_1..c_{k+1}
    relations: tuple[int, ...]  # relation ids r_1..r_k
    phrase: str  # composite semantics used in summaries, e.g. "is authored by"
    description: str  # wording for the prompt's token-description sentence

    @property
    def length(self) -> int:
        return len(self.relations)


@dataclass(frozen=True)
class MetaPathSubgraph:
    target: int
    neighbors: tuple[int, ...]  # endpoints of retained full paths, sorted
    intermediates: tuple[int, ...]  # interior nodes on retained paths, sorted


def _split_type_spec(spec: str | Sequence[str], schema: Schema) -> list[str]:
    if not isinstance(spec, str):
        return list(spec)
    if "-" in spec:
        return spec.split("-")
    # Single-letter abbreviation string such as "PAP".
    return list(spec)


def parse_metapath(
    spec: str | Sequence[str],
    schema: Schema,
    name: str | None = None,
    relations: Sequence[str] | None = None,
    phrase: str | None = None,
    description: str | None = None,
) -> MetaPath:
    """Bind a type-abbreviation spec like "PAP" to schema relations.

    Each hop must be joined by exactly one schema relation (in either
    direction, since edges are traversed undirected); hops joined by several
    relations require explicit relation names.
    """
    type_names = _split_type_spec(spec, schema)
    if len(type_names) < 2:
        raise GraphError(f"meta-path {spec!r} needs at least two node types")
    type_ids = tuple(schema.type_id(t) for t in type_names)

    rel_ids = []
    for hop, (a, b) in enumerate(zip(type_ids[:-1], type_ids[1:])):
        if relations is not None and hop < len(relations) and relations[hop]:
            rid = schema.relation_id(relations[hop])
            r = schema.relations[rid]
            if {r.src_type, r.dst_type} != {a, b} and not (r.src_type == a == b == r.dst_type):
                raise GraphError(
                    f"relation {relations[hop]!r} does not join "
                    f"{type_names[hop]}-{type_names[hop + 1]}"
                )
            rel_ids.append(rid)
            continue
        matches = [
            i
            for i, r in enumerate(schema.relations)
            if (r.src_type, r.dst_type) in ((a, b), (b, a))
        ]
        if not matches:
            raise GraphError(
                f"no schema relation joins {type_names[hop]}-{type_names[hop + 1]}"
            )
        if len(matches) > 1:
            names = [schema.relations[i].name for i in matches]
            raise GraphError(
                f"ambiguous hop {type_names[hop]}-{type_names[hop + 1]}: "
                f"candidates {names}; give an explicit relation name"
            )
        rel_ids.append(matches[0])

    mp_name = name or "".join(type_names)
    return MetaPath(
        name=mp_name,
        node_types=type_ids,
        relations=tuple(rel_ids),
        phrase=phrase or f"is connected via {mp_name} to",
        description=description or mp_name,
    )


def extract_subgraph(
    graph: HtrnGraph,
    node: int,
    metapath: MetaPath,
    cap: int | None = DEFAULT_NEIGHBOR_CAP,
    seed: int = 0,
) -> MetaPathSubgraph:
    """Enumerate simple meta-path instances from `node` and collect the subgraph.

    Neighbors are the distinct far endpoints (never the target itself); when
    there are more than `cap`, a seeded uniform sample of size `cap` is kept
    and the intermediates are restricted to paths ending at retained
    neighbors. Deterministic for fixed (graph, node, metapath, cap, seed).
    """
    if int(graph.node_type[node]) != metapath.node_types[0]:
        raise GraphError(
            f"node {node} has type {graph.type_name(int(graph.node_type[node]))!r}, "
            f"meta-path {metapath.name!r} starts at "
            f"{graph.type_name(metapath.node_types[0])!r}"
        )
    if cap is not None and cap < 1:
        raise GraphError("cap must be >= 1")

    k = metapath.length
    interiors_by_end: dict[int, set[int]] = {}
    path: list[int] = [node]
    on_path = {node}

    def walk(cur: int, depth: int) -> None:
        rel = metapath.relations[depth]
        want = metapath.node_types[depth + 1]
        for nxt in graph.neighbors(cur, rel):
            nxt = int(nxt)
            if graph.node_type[nxt] != want or nxt in on_path:
                continue
            if depth + 1 == k:
                interiors_by_end.setdefault(nxt, set()).update(path[1:])
            else:
                path.append(nxt)
                on_path.add(nxt)
                walk(nxt, depth + 1)
                path.pop()
                on_path.discard(nxt)

    walk(node, 0)
    interiors_by_end.pop(node, None)

    endpoints = sorted(interiors_by_end)
    if cap is not None and len(endpoints) > cap:
        rng = derived_rng(seed, "subgraph", node, metapath.name)
        keep = rng.choice(len(endpoints), size=cap, replace=False)
        endpoints = sorted(endpoints[i] for i in keep)

    intermediates: set[int] = set()
    for e in endpoints:
        intermediates |= interiors_by_end[e]
    return MetaPathSubgraph(
        target=node,
        neighbors=tuple(endpoints),
        intermediates=tuple(sorted(intermediates)),
    )


def extract_all(
    graph: HtrnGraph,
    node: int,
    metapaths: Iterable[MetaPath],
    cap: int | None = DEFAULT_NEIGHBOR_CAP,
    seed: int = 0,
) -> dict[str, MetaPathSubgraph]:
    """One subgraph per meta-path applicable to the node's type; others skipped."""
    node_type = int(graph.node_type[node])
    out: dict[str, MetaPathSubgraph] = {}
    for mp in metapaths:
        if mp.node_types[0] == node_type:
            out[mp.name] = extract_subgraph(graph, node, mp, cap=cap, seed=seed)
    return out


def applicable(metapaths: Iterable[MetaPath], node_type: int) -> list[MetaPath]:
    return [mp for mp in metapaths if mp.node_types[0] == node_type]
