"""Heterogeneous text-rich network data model, file ingestion and synthesis.

A graph holds typed nodes carrying text and typed undirected edges. Edges are
stored once and traversed in both directions; node ids are dense integers
assigned in file order, with the original string ids kept in a sidecar map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .markers import escape_text
from .util import derived_rng, read_jsonl, write_jsonl


class GraphError(ValueError):
    """Raised for schema violations, dangling endpoints or malformed records."""


@dataclass(frozen=True)
class RelationDef:
    name: str
    src_type: int
    dst_type: int
    allow_self: bool = False


@dataclass
class Schema:
    """Declared node types, relation triples and the label field name."""

    node_types: tuple[str, ...]
    relations: tuple[RelationDef, ...]
    label_field: str | None = None

    def __post_init__(self):
        if len(set(self.node_types)) != len(self.node_types):
            raise GraphError("duplicate node type names in schema")
        names = [r.name for r in self.relations]
        if len(set(names)) != len(names):
            raise GraphError("duplicate relation names in schema")
        if len(self.node_types) + len(self.relations) <= 2:
            raise GraphError(
                "need more than two node plus relation types combined, got "
                f"{len(self.node_types)} + {len(self.relations)}"
            )

    def type_id(self, name: str) -> int:
        try:
            return self.node_types.index(name)
        except ValueError:
            raise GraphError(f"unknown node type {name!r}") from None

    def relation_id(self, name: str) -> int:
        for i, r in enumerate(self.relations):
            if r.name == name:
                return i
        raise GraphError(f"unknown relation {name!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "Schema":
        try:
            node_types = tuple(obj["node_types"])
        except KeyError:
            raise GraphError("schema missing 'node_types'") from None
        rel_objs = obj.get("relations")
        if not rel_objs:
            raise GraphError("schema missing 'relations'")
        name_to_id = {n: i for i, n in enumerate(node_types)}
        rels = []
        for r in rel_objs:
            for k in ("name", "src", "dst"):
                if k not in r:
                    raise GraphError(f"relation entry missing {k!r}: {r}")
            for endpoint in (r["src"], r["dst"]):
                if endpoint not in name_to_id:
                    raise GraphError(
                        f"relation {r['name']!r} references unknown node type {endpoint!r}"
                    )
            rels.append(
                RelationDef(
                    name=r["name"],
                    src_type=name_to_id[r["src"]],
                    dst_type=name_to_id[r["dst"]],
                    allow_self=bool(r.get("allow_self", False)),
                )
            )
        return cls(node_types=node_types, relations=tuple(rels), label_field=obj.get("label_field"))

    def to_dict(self) -> dict:
        out: dict = {
            "node_types": list(self.node_types),
            "relations": [
                {
                    "name": r.name,
                    "src": self.node_types[r.src_type],
                    "dst": self.node_types[r.dst_type],
                    "allow_self": r.allow_self,
                }
                for r in self.relations
            ],
        }
        if self.label_field is not None:
            out["label_field"] = self.label_field
        return out


class HtrnGraph:
    """Immutable after construction; safe for concurrent reads."""

    def __init__(
        self,
        schema: Schema,
        node_keys: Sequence[str],
        node_types: Sequence[int],
        node_texts: Sequence[str],
        edges: Sequence[tuple[int, int, int]],
        labels: dict[int, int] | None = None,
        allow_empty_text: bool = True,
    ):
        self.schema = schema
        self.node_key = tuple(node_keys)
        self.node_type = np.asarray(node_types, dtype=np.int64)
        self.node_text = tuple(escape_text(t) for t in node_texts)
        self.key_to_id = {k: i for i, k in enumerate(self.node_key)}
        if len(self.key_to_id) != len(self.node_key):
            raise GraphError("duplicate node ids")
        self.labels = dict(labels or {})

        n = len(self.node_key)
        for i, t in enumerate(self.node_type):
            if not 0 <= t < len(schema.node_types):
                raise GraphError(f"node {self.node_key[i]!r} has unregistered type {t}")
        if not allow_empty_text:
            for i, txt in enumerate(self.node_text):
                if not txt:
                    raise GraphError(f"node {self.node_key[i]!r} has empty text")

        edge_arr = np.asarray(list(edges), dtype=np.int64).reshape(-1, 3)
        seen: set[tuple[int, int, int]] = set()
        adj: dict[tuple[int, int], list[int]] = {}
        for s, d, r in edge_arr:
            s, d, r = int(s), int(d), int(r)
            rel = schema.relations[r]
            if not (0 <= s < n and 0 <= d < n):
                raise GraphError(f"edge endpoint out of range: ({s}, {d})")
            if self.node_type[s] != rel.src_type or self.node_type[d] != rel.dst_type:
                raise GraphError(
                    f"edge ({self.node_key[s]}, {self.node_key[d]}) violates endpoint "
                    f"types of relation {rel.name!r}"
                )
            if s == d and not rel.allow_self:
                raise GraphError(f"self-loop on {self.node_key[s]!r} not allowed by schema")
            key = (min(s, d), max(s, d), r)
            if key in seen:
                raise GraphError(
                    f"duplicate (undirected) edge ({self.node_key[s]}, {self.node_key[d]}, {rel.name})"
                )
            seen.add(key)
            adj.setdefault((s, r), []).append(d)
            if d != s:
                adj.setdefault((d, r), []).append(s)
        self.edges = edge_arr
        self._edge_set = seen
        self._adj = {k: np.array(sorted(v), dtype=np.int64) for k, v in adj.items()}
        self._empty = np.empty(0, dtype=np.int64)
        self._nodes_by_type = {
            t: np.flatnonzero(self.node_type == t) for t in range(len(schema.node_types))
        }

    @property
    def num_nodes(self) -> int:
        return len(self.node_key)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def neighbors(self, node: int, relation: int) -> np.ndarray:
        """All nodes adjacent to `node` via `relation`, sorted ascending by id."""
        if not 0 <= node < self.num_nodes:
            raise GraphError(f"unknown node id {node}")
        if not 0 <= relation < len(self.schema.relations):
            raise GraphError(f"unknown relation id {relation}")
        return self._adj.get((node, relation), self._empty)

    def has_edge(self, u: int, relation: int, v: int) -> bool:
        return (min(u, v), max(u, v), relation) in self._edge_set

    def nodes_of_type(self, type_id: int) -> np.ndarray:
        return self._nodes_by_type[type_id]

    def type_counts(self) -> dict[str, int]:
        return {
            name: int(self._nodes_by_type[t].size)
            for t, name in enumerate(self.schema.node_types)
        }

    def relation_counts(self) -> dict[str, int]:
        out = {r.name: 0 for r in self.schema.relations}
        for r in self.edges[:, 2]:
            out[self.schema.relations[int(r)].name] += 1
        return out

    def type_name(self, type_id: int) -> str:
        return self.schema.node_types[type_id]


def load_graph(
    nodes_path: str | Path, edges_path: str | Path, schema_path: str | Path
) -> HtrnGraph:
    """Load and validate a graph from line-delimited node/edge files plus a schema.

    Node ids become dense integers in file order. Any unknown type, dangling
    endpoint or schema violation aborts with the offending file and line number.
    """
    with open(schema_path, "r", encoding="utf-8") as f:
        schema = Schema.from_dict(json.load(f))

    keys: list[str] = []
    types: list[int] = []
    texts: list[str] = []
    labels: dict[int, int] = {}
    for lineno, rec in enumerate(read_jsonl(nodes_path), start=1):
        try:
            key = str(rec["id"])
            tname = rec["type"]
            text = rec.get("text", "")
        except KeyError as e:
            raise GraphError(f"{nodes_path}:{lineno}: node record missing {e}") from None
        if tname not in schema.node_types:
            raise GraphError(f"{nodes_path}:{lineno}: unknown node type {tname!r}")
        if text is None:
            raise GraphError(f"{nodes_path}:{lineno}: null text on node {key!r}")
        keys.append(key)
        types.append(schema.type_id(tname))
        texts.append(str(text))
        if schema.label_field and schema.label_field in rec:
            labels[len(keys) - 1] = int(rec[schema.label_field])

    key_to_id = {k: i for i, k in enumerate(keys)}
    if len(key_to_id) != len(keys):
        raise GraphError(f"{nodes_path}: duplicate node ids")

    edges: list[tuple[int, int, int]] = []
    for lineno, rec in enumerate(read_jsonl(edges_path), start=1):
        try:
            src, dst, rel = rec["src"], rec["dst"], rec["relation"]
        except KeyError as e:
            raise GraphError(f"{edges_path}:{lineno}: edge record missing {e}") from None
        if src not in key_to_id:
            raise GraphError(f"{edges_path}:{lineno}: edge references missing node id {src!r}")
        if dst not in key_to_id:
            raise GraphError(f"{edges_path}:{lineno}: edge references missing node id {dst!r}")
        try:
            rid = schema.relation_id(rel)
        except GraphError:
            raise GraphError(f"{edges_path}:{lineno}: unknown relation {rel!r}") from None
        edges.append((key_to_id[src], key_to_id[dst], rid))

    try:
        return HtrnGraph(schema, keys, types, texts, edges, labels)
    except GraphError as e:
        raise GraphError(f"{edges_path}: {e}") from None


def save_graph(
    graph: HtrnGraph,
    nodes_path: str | Path,
    edges_path: str | Path,
    schema_path: str | Path,
) -> None:
    """Serialize in canonical order: nodes by dense id, edges by (relation, src, dst)."""
    schema = graph.schema

    def node_records():
        for i in range(graph.num_nodes):
            rec = {
                "id": graph.node_key[i],
                "type": schema.node_types[int(graph.node_type[i])],
                "text": graph.node_text[i],
            }
            if schema.label_field and i in graph.labels:
                rec[schema.label_field] = graph.labels[i]
            yield rec

    order = sorted(range(graph.num_edges), key=lambda i: tuple(graph.edges[i][[2, 0, 1]]))

    def edge_records():
        for i in order:
            s, d, r = (int(x) for x in graph.edges[i])
            yield {
                "src": graph.node_key[s],
                "dst": graph.node_key[d],
                "relation": schema.relations[r].name,
            }

    write_jsonl(nodes_path, node_records())
    write_jsonl(edges_path, edge_records())
    with open(schema_path, "w", encoding="utf-8") as f:
        json.dump(schema.to_dict(), f, ensure_ascii=False, sort_keys=True, indent=2)
        f.write("\n")


@dataclass
class SynthConfig:
    """Planted-community generator settings for desk-scale experiments.

    Text-rich types emit token bags where a `text_signal` fraction of tokens is
    drawn from the community's topic vocabulary and the rest from a shared
    noise pool; textless types carry their name only. Labels are planted on
    `label_type` nodes.
    """

    node_counts: dict[str, int]
    edge_counts: dict[str, int]
    relations: list[tuple[str, str, str]]  # (relation name, src type, dst type)
    communities: int = 4
    bias: float = 0.9
    label_type: str = "P"
    text_rich: tuple[str, ...] = ("P",)
    text_len: int = 12
    text_signal: float = 0.25
    topic_words: int = 20
    noise_words: int = 120
    label_field: str = "label"


def synth_graph(config: SynthConfig, seed: int) -> tuple[HtrnGraph, dict[int, int]]:
    """Generate a planted-community graph; deterministic for a fixed seed.

    Each node's community is assigned round-robin within its type, so label
    counts match the configured sizes exactly. Each edge keeps both endpoints
    in one community with probability `bias`, otherwise the far endpoint is
    uniform over its type.
    """
    k = config.communities
    type_names = tuple(config.node_counts.keys())
    schema = Schema(
        node_types=type_names,
        relations=tuple(
            RelationDef(name, type_names.index(s), type_names.index(d))
            for name, s, d in config.relations
        ),
        label_field=config.label_field,
    )

    keys: list[str] = []
    types: list[int] = []
    community: list[int] = []
    for t, name in enumerate(type_names):
        for j in range(config.node_counts[name]):
            keys.append(f"{name.lower()}{j}")
            types.append(t)
            community.append(j % k)
    comm = np.array(community, dtype=np.int64)
    type_arr = np.array(types, dtype=np.int64)

    rng = derived_rng(seed, "synth-text")
    topic_vocab = [
        [f"t{c}w{j:02d}" for j in range(config.topic_words)] for c in range(k)
    ]
    noise_vocab = [f"w{j:03d}" for j in range(config.noise_words)]
    texts: list[str] = []
    for i, key in enumerate(keys):
        tname = type_names[type_arr[i]]
        if tname in config.text_rich:
            words = []
            for _ in range(config.text_len):
                if rng.random() < config.text_signal:
                    words.append(topic_vocab[comm[i]][rng.integers(config.topic_words)])
                else:
                    words.append(noise_vocab[rng.integers(config.noise_words)])
            texts.append(" ".join(words))
        else:
            texts.append(key.upper())

    by_type = {t: np.flatnonzero(type_arr == t) for t in range(len(type_names))}
    by_type_comm = {
        (t, c): np.flatnonzero((type_arr == t) & (comm == c))
        for t in range(len(type_names))
        for c in range(k)
    }

    edges: list[tuple[int, int, int]] = []
    erng = derived_rng(seed, "synth-edges")
    for rid, rel in enumerate(schema.relations):
        count = config.edge_counts.get(rel.name, 0)
        n_src = by_type[rel.src_type].size
        n_dst = by_type[rel.dst_type].size
        if rel.src_type == rel.dst_type:
            max_pairs = n_src * (n_src - 1) // 2
        else:
            max_pairs = n_src * n_dst
        if count > max_pairs:
            raise GraphError(
                f"infeasible config: {count} edges requested for {rel.name!r}, "
                f"only {max_pairs} pairs exist"
            )
        seen: set[tuple[int, int]] = set()
        attempts = 0
        limit = 200 * count + 1000
        while len(seen) < count and attempts < limit:
            attempts += 1
            s = int(by_type[rel.src_type][erng.integers(n_src)])
            if erng.random() < config.bias:
                pool = by_type_comm[(rel.dst_type, int(comm[s]))]
                if pool.size == 0:
                    continue
                d = int(pool[erng.integers(pool.size)])
            else:
                d = int(by_type[rel.dst_type][erng.integers(n_dst)])
            if s == d:
                continue
            key = (min(s, d), max(s, d)) if rel.src_type == rel.dst_type else (s, d)
            if key in seen:
                continue
            seen.add(key)
            edges.append((key[0], key[1], rid) if rel.src_type == rel.dst_type else (s, d, rid))
        if len(seen) < count:
            # Dense corner: deterministically fill from the unused pair list.
            for s in by_type[rel.src_type]:
                for d in by_type[rel.dst_type]:
                    if len(seen) >= count:
                        break
                    s, d = int(s), int(d)
                    if s == d:
                        continue
                    key = (min(s, d), max(s, d)) if rel.src_type == rel.dst_type else (s, d)
                    if key not in seen:
                        seen.add(key)
                        edges.append(
                            (key[0], key[1], rid) if rel.src_type == rel.dst_type else (s, d, rid)
                        )
                if len(seen) >= count:
                    break

    label_t = type_names.index(config.label_type)
    labels = {int(i): int(comm[i]) for i in by_type[label_t]}
    graph = HtrnGraph(schema, keys, types, texts, edges, labels)
    return graph, labels
