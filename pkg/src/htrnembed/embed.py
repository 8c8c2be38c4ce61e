"""Node and edge embeddings from encoded prompts, fine-tuned or training-free."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import EncoderParams, forward, pool_hidden
from .graph import GraphError, HtrnGraph
from .graphtoken import TokenStore
from .metapath import MetaPath
from .textualize import TemplateConfig, graph_aware_prompt, relation_aware_prompt
from .vocab import Vocab, encode_prompt


@dataclass
class EmbeddingRecord:
    subject: int | tuple[int, int, int]  # node id, or (u, relation, v)
    vector: np.ndarray
    mode: str  # "finetuned" | "training-free"
    pooling: str


class Embedder:
    """Deterministic read-only embedding of nodes and edges for one checkpoint."""

    def __init__(
        self,
        params: EncoderParams,
        graph: HtrnGraph,
        vocab: Vocab,
        metapaths: Sequence[MetaPath],
        templates: TemplateConfig | None = None,
        token_store: TokenStore | None = None,
        pooling: str = "cls",
        mode: str = "finetuned",
        max_len: int = 128,
        use_graph_tokens: bool = True,
        use_relation_token: bool = True,
    ):
        self.params = params
        self.graph = graph
        self.vocab = vocab
        self.metapaths = list(metapaths)
        self.templates = templates
        self.store = token_store
        self.pooling = pooling
        self.mode = mode
        self.max_len = max_len
        self.use_graph_tokens = use_graph_tokens
        self.use_relation_token = use_relation_token
        if use_graph_tokens and token_store is None:
            raise GraphError("token store required unless graph tokens are disabled")
        self._prompt_cache: dict[int, object] = {}

    def _node_prompt(self, node: int):
        if node not in self._prompt_cache:
            entries = self.store.for_node(node) if self.use_graph_tokens else None
            self._prompt_cache[node] = graph_aware_prompt(
                node, entries, self.metapaths, self.graph, self.templates
            )
        return self._prompt_cache[node]

    def _run(self, prompt) -> np.ndarray:
        seq = encode_prompt(prompt, self.vocab, max_len=self.max_len)
        soft = [self.store.get(s.slot.node, s.slot.key) for s in seq.graph_slots]
        trace = forward(self.params, seq, soft)
        return pool_hidden(trace, self.pooling)

    def node(self, node: int) -> EmbeddingRecord:
        vec = self._run(self._node_prompt(node))
        return EmbeddingRecord(subject=node, vector=vec, mode=self.mode, pooling=self.pooling)

    def edge(self, u: int, relation: int, v: int) -> EmbeddingRecord:
        prompt = relation_aware_prompt(
            self._node_prompt(u),
            relation,
            self._node_prompt(v),
            self.graph,
            include_relation_token=self.use_relation_token,
        )
        vec = self._run(prompt)
        return EmbeddingRecord(
            subject=(u, relation, v), vector=vec, mode=self.mode, pooling=self.pooling
        )


def embed_all(
    embedder: Embedder,
    out_path: str | Path,
    edges: Sequence[tuple[int, int, int]] | None = None,
) -> dict[int, np.ndarray]:
    """Embed every node (optionally plus given edges) and persist canonically.

    Records are written in ascending subject order; an existing file is reused
    to resume, recomputing only missing subjects. The file round-trips vectors
    bit-exactly.
    """
    out_path = Path(out_path)
    graph = embedder.graph

    done: dict[str, list[float]] = {}
    if out_path.exists():
        try:
            with open(out_path, "r", encoding="utf-8") as f:
                for line in f:
                    rec = json.loads(line)
                    done[json.dumps(rec["subject"], sort_keys=True)] = rec["vector"]
        except (json.JSONDecodeError, KeyError):
            done = {}

    subjects: list[tuple] = [("node", i) for i in range(graph.num_nodes)]
    if edges is not None:
        subjects += [("edge", tuple(int(x) for x in e)) for e in edges]

    records = []
    node_vectors: dict[int, np.ndarray] = {}
    for kind, subj in subjects:
        key_obj = subj if kind == "node" else list(subj)
        key = json.dumps(key_obj, sort_keys=True)
        if key in done:
            vec = np.asarray(done[key], dtype=np.float64)
        else:
            rec = embedder.node(subj) if kind == "node" else embedder.edge(*subj)
            vec = rec.vector
        if kind == "node":
            node_vectors[subj] = vec
        records.append({"subject": key_obj, "vector": [float(x) for x in vec]})

    with open(out_path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return node_vectors


def load_embeddings(path: str | Path) -> dict[int, np.ndarray]:
    """Node records from an embedding file (edge records are skipped)."""
    out: dict[int, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            if isinstance(rec["subject"], int):
                out[rec["subject"]] = np.asarray(rec["vector"], dtype=np.float64)
    return out
