"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's indexed code paths: neighbor
queries scan the raw edge list, meta-path subgraphs come from exhaustive
breadth-first path expansion, and metrics are recomputed by explicit loops.
"""

from __future__ import annotations

import numpy as np
import pytest

from htrnembed.graph import HtrnGraph, RelationDef, Schema, SynthConfig, synth_graph
from htrnembed.metapath import MetaPath, parse_metapath
from htrnembed.textualize import TemplateConfig


# --- canonical small schema/graph fixtures ---


@pytest.fixture(scope="session")
def dblp_schema() -> Schema:
    return Schema(
        node_types=("P", "A", "V"),
        relations=(
            RelationDef("PP", 0, 0),
            RelationDef("PA", 0, 1),
            RelationDef("PV", 0, 2),
        ),
        label_field="label",
    )


def make_graph(schema, node_specs, edge_specs, labels=None):
    """node_specs: list of (key, type_name, text); edge_specs: (src_key, dst_key, rel_name)."""
    keys = [k for k, _, _ in node_specs]
    types = [schema.type_id(t) for _, t, _ in node_specs]
    texts = [x for _, _, x in node_specs]
    kid = {k: i for i, k in enumerate(keys)}
    edges = [(kid[s], kid[d], schema.relation_id(r)) for s, d, r in edge_specs]
    lab = {kid[k]: v for k, v in (labels or {}).items()}
    return HtrnGraph(schema, keys, types, texts, edges, lab)


@pytest.fixture
def paper_author_graph(dblp_schema):
    """The worked example: p1-a1, p2-a1, p1-p3."""
    return make_graph(
        dblp_schema,
        [
            ("p1", "P", "paper one"),
            ("p2", "P", "paper two"),
            ("p3", "P", "paper three"),
            ("a1", "A", "alice"),
        ],
        [("p1", "a1", "PA"), ("p2", "a1", "PA"), ("p1", "p3", "PP")],
    )


@pytest.fixture(scope="session")
def templates() -> TemplateConfig:
    return TemplateConfig(display={"P": "Paper", "A": "Author", "V": "Venue"})


@pytest.fixture(scope="session")
def synth_cfg_small() -> SynthConfig:
    return SynthConfig(
        node_counts={"P": 30, "A": 12, "V": 4},
        edge_counts={"PP": 35, "PA": 45, "PV": 25},
        relations=[("PP", "P", "P"), ("PA", "P", "A"), ("PV", "P", "V")],
        communities=2,
        bias=0.85,
        text_len=6,
    )


@pytest.fixture(scope="session")
def small_graph(synth_cfg_small):
    graph, labels = synth_graph(synth_cfg_small, seed=13)
    return graph


def dblp_metapaths(schema) -> list[MetaPath]:
    return [
        parse_metapath("PA", schema, phrase="is authored by", description="paper is authored by author"),
        parse_metapath("PAP", schema, phrase="has co-author connections:", description="papers sharing an author"),
        parse_metapath("PVP", schema, phrase="shares a venue with", description="papers in the same venue"),
    ]


@pytest.fixture(scope="session")
def small_metapaths(small_graph):
    return dblp_metapaths(small_graph.schema)


# --- random HTRN generator for oracle tests ---


def random_htrn(rng: np.random.Generator, max_nodes=50, max_types=4, max_rels=3) -> HtrnGraph:
    n_types = int(rng.integers(2, max_types + 1))
    type_names = tuple(chr(ord("A") + i) for i in range(n_types))
    n_rels = int(rng.integers(max(1, 3 - n_types), max_rels + 1))
    rels = []
    for i in range(n_rels):
        a = int(rng.integers(n_types))
        b = int(rng.integers(n_types))
        rels.append(RelationDef(f"r{i}", a, b))
    schema = Schema(node_types=type_names, relations=tuple(rels))

    n = int(rng.integers(5, max_nodes + 1))
    types = [int(rng.integers(n_types)) for _ in range(n)]
    keys = [f"n{i}" for i in range(n)]
    texts = [f"text {i}" for i in range(n)]

    by_type = {}
    for i, t in enumerate(types):
        by_type.setdefault(t, []).append(i)
    edges = []
    seen = set()
    for _ in range(int(rng.integers(0, 4 * n))):
        rid = int(rng.integers(n_rels))
        rel = rels[rid]
        src_pool = by_type.get(rel.src_type, [])
        dst_pool = by_type.get(rel.dst_type, [])
        if not src_pool or not dst_pool:
            continue
        s = src_pool[int(rng.integers(len(src_pool)))]
        d = dst_pool[int(rng.integers(len(dst_pool)))]
        if s == d:
            continue
        key = (min(s, d), max(s, d), rid)
        if key in seen:
            continue
        seen.add(key)
        edges.append((s, d, rid))
    return HtrnGraph(schema, keys, types, texts, edges)


def random_metapath(graph: HtrnGraph, rng: np.random.Generator, max_len=3) -> MetaPath | None:
    """A random type-valid meta-path over the graph's schema, or None."""
    rels = graph.schema.relations
    length = int(rng.integers(1, max_len + 1))
    for _ in range(30):
        types = [int(rng.integers(len(graph.schema.node_types)))]
        rel_ids = []
        ok = True
        for _ in range(length):
            options = [
                (i, r.dst_type if r.src_type == types[-1] else r.src_type)
                for i, r in enumerate(rels)
                if types[-1] in (r.src_type, r.dst_type)
            ]
            if not options:
                ok = False
                break
            i, nxt = options[int(rng.integers(len(options)))]
            rel_ids.append(i)
            types.append(nxt)
        if ok:
            name = "".join(graph.schema.node_types[t] for t in types)
            return MetaPath(
                name=name,
                node_types=tuple(types),
                relations=tuple(rel_ids),
                phrase="relates to",
                description=name,
            )
    return None


# --- oracles ---


def oracle_neighbors(graph: HtrnGraph, node: int, relation: int) -> list[int]:
    """Linear scan of the raw edge list."""
    out = []
    for s, d, r in graph.edges:
        if int(r) != relation:
            continue
        if int(s) == node:
            out.append(int(d))
        if int(d) == node:
            out.append(int(s))
    return sorted(out)


def oracle_subgraph(graph: HtrnGraph, node: int, mp: MetaPath) -> tuple[set[int], set[int]]:
    """Exhaustive simple-path expansion using only the edge list."""
    paths = [[node]]
    for hop, rel in enumerate(mp.relations):
        want = mp.node_types[hop + 1]
        nxt = []
        for path in paths:
            for nb in oracle_neighbors(graph, path[-1], rel):
                if int(graph.node_type[nb]) == want and nb not in path:
                    nxt.append(path + [nb])
        paths = nxt
    neighbors = {p[-1] for p in paths}
    intermediates = {x for p in paths for x in p[1:-1]}
    return neighbors, intermediates


def oracle_roc_auc(pos, neg) -> float:
    """All ordered (pos, neg) pairs; ties count one half."""
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def oracle_pr_auc(pos, neg) -> float:
    """Exhaustive sweep over every distinct threshold, step integration."""
    scores = sorted(set(list(pos) + list(neg)), reverse=True)
    prev_recall = 0.0
    area = 0.0
    for t in scores:
        tp = sum(1 for p in pos if p >= t)
        fp = sum(1 for q in neg if q >= t)
        precision = tp / (tp + fp)
        recall = tp / len(pos)
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def oracle_f1(preds, labels) -> float:
    tp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 1)
    fp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 1)
    return 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
