"""Distill subgraph summaries into graph-token vectors via a frozen encoder.

The distiller is either the builtin frozen snapshot or an external process
speaking the line-delimited bridge protocol. Vectors are memoized in a
content-addressed cache (summary sha256 -> float32 vector) so reruns over an
unchanged graph perform zero encoder calls.
"""

from __future__ import annotations

import json
import logging
import queue
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .encoder import EncoderParams, forward, params_hash, pool_hidden
from .graph import GraphError, HtrnGraph
from .metapath import MetaPath, applicable, extract_subgraph
from .textualize import PromptText, Piece, SubgraphSummary, TemplateConfig, summarize
from .vocab import Vocab, encode_prompt
from .util import read_jsonl, sha256_text

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GraphToken:
    node: int
    metapath: str
    vector: np.ndarray
    source: str  # "builtin" | "bridge:<tag>"
    summary_hash: str


class BridgeError(RuntimeError):
    """Bridge failure; carries the summary hash so the call can be retried."""

    def __init__(self, message: str, summary_hash: str | None = None):
        super().__init__(message)
        self.summary_hash = summary_hash


class BuiltinDistiller:
    """Frozen encoder snapshot; summaries pass through as single-segment prompts."""

    def __init__(
        self,
        params: EncoderParams,
        vocab: Vocab,
        pooling: str = "mean",
        max_len: int = 128,
    ):
        self.params = params
        self.vocab = vocab
        self.pooling = pooling
        self.max_len = max_len
        self.calls = 0

    @property
    def dim(self) -> int:
        return self.params.config.dim

    @property
    def tag(self) -> str:
        return "builtin"

    @property
    def snapshot_hash(self) -> str:
        return params_hash(self.params)

    def encode(self, text: str) -> np.ndarray:
        prompt = PromptText(segments=((Piece("lit", text, origin="text"),),))
        seq = encode_prompt(prompt, self.vocab, max_len=self.max_len)
        trace = forward(self.params, seq, [])
        self.calls += 1
        return pool_hidden(trace, self.pooling)

    def encode_many(self, texts: Iterable[str]) -> list[np.ndarray]:
        return [self.encode(t) for t in texts]

    def close(self) -> None:
        pass


class BridgeDistiller:
    """Client for an external frozen encoder over a stdio line protocol.

    The server sends one handshake line {"model_tag", "dim"}, then answers
    each {"id", "text"} request with {"id", "vector"}; responses may arrive
    out of order and are matched by id.
    """

    def __init__(self, command: str | list[str], timeout: float = 60.0):
        self.command = command
        self.timeout = timeout
        argv = command if isinstance(command, list) else command.split()
        try:
            self.proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as e:
            raise BridgeError(f"cannot start bridge {command!r}: {e}") from e
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        hello = self._next_line()
        try:
            self.model_tag = hello["model_tag"]
            self.dim = int(hello["dim"])
        except (KeyError, TypeError, ValueError) as e:
            raise BridgeError(f"bad handshake from bridge: {hello!r}") from e
        self.calls = 0
        self._counter = 0

    @property
    def tag(self) -> str:
        return f"bridge:{self.model_tag}"

    @property
    def snapshot_hash(self) -> str:
        return sha256_text(f"{self.tag}:{self.dim}")

    def _read_loop(self):
        for line in self.proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _next_line(self) -> dict:
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise BridgeError("bridge timed out") from None
        if line is None:
            raise BridgeError("bridge closed its output stream")
        try:
            return json.loads(line)
        except json.JSONDecodeError as e:
            raise BridgeError(f"malformed bridge line: {line!r}") from e

    def encode_many(self, texts: Iterable[str]) -> list[np.ndarray]:
        texts = list(texts)
        pending: dict[str, int] = {}
        try:
            for i, text in enumerate(texts):
                rid = f"q{self._counter}"
                self._counter += 1
                pending[rid] = i
                self.proc.stdin.write(
                    json.dumps({"id": rid, "text": text}, ensure_ascii=False) + "\n"
                )
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise BridgeError(f"bridge pipe failed: {e}") from e

        out: list[np.ndarray | None] = [None] * len(texts)
        while pending:
            resp = self._next_line()
            rid = resp.get("id")
            if rid not in pending:
                raise BridgeError(f"bridge answered unknown id {rid!r}")
            i = pending.pop(rid)
            if "error" in resp:
                raise BridgeError(
                    f"bridge error for request {rid}: {resp['error']}",
                    summary_hash=sha256_text(texts[i]),
                )
            vec = np.asarray(resp.get("vector"), dtype=np.float64)
            if vec.shape != (self.dim,):
                raise BridgeError(
                    f"bridge returned shape {vec.shape}, handshake said ({self.dim},)",
                    summary_hash=sha256_text(texts[i]),
                )
            out[i] = vec
            self.calls += 1
        return out  # type: ignore[return-value]

    def encode(self, text: str) -> np.ndarray:
        return self.encode_many([text])[0]

    def close(self) -> None:
        try:
            if self.proc.stdin:
                self.proc.stdin.close()
            self.proc.wait(timeout=5)
        except Exception:
            self.proc.kill()


def distill(summary: SubgraphSummary, distiller) -> GraphToken:
    """One summary through the frozen encoder; float32-rounded for cache parity."""
    try:
        vec = np.asarray(distiller.encode(summary.text), dtype=np.float64)
    except BridgeError as e:
        if e.summary_hash is None:
            e.summary_hash = sha256_text(summary.text)
        raise
    vec = vec.astype(np.float32).astype(np.float64)
    return GraphToken(
        node=summary.node,
        metapath=summary.metapath,
        vector=vec,
        source=distiller.tag,
        summary_hash=sha256_text(summary.text),
    )


class TokenStore:
    """Graph tokens keyed by (node, metapath name)."""

    def __init__(self, dim: int, source: str):
        self.dim = dim
        self.source = source
        self.vectors: dict[tuple[int, str], np.ndarray] = {}
        self.hashes: dict[tuple[int, str], str] = {}

    def put(self, token: GraphToken) -> None:
        key = (token.node, token.metapath)
        self.vectors[key] = token.vector
        self.hashes[key] = token.summary_hash

    def get(self, node: int, metapath: str) -> np.ndarray:
        try:
            return self.vectors[(node, metapath)]
        except KeyError:
            raise GraphError(
                f"no graph token for node {node}, meta-path {metapath!r}"
            ) from None

    def for_node(self, node: int) -> dict[str, np.ndarray]:
        return {mp: v for (n, mp), v in self.vectors.items() if n == node}

    def __len__(self) -> int:
        return len(self.vectors)

    def covers(self, graph: HtrnGraph, metapaths: Iterable[MetaPath]) -> bool:
        for node in range(graph.num_nodes):
            for mp in applicable(metapaths, int(graph.node_type[node])):
                if (node, mp.name) not in self.vectors:
                    return False
        return True


class TokenCache:
    """On-disk content-addressed cache: jsonl manifest + flat float32 vectors."""

    def __init__(self, path: str | Path):
        self.dir = Path(path)
        self.manifest_path = self.dir / "manifest.jsonl"
        self.vectors_path = self.dir / "vectors.bin"
        self.meta_path = self.dir / "distiller.json"

    def load(self, expected_hash: str) -> dict[str, np.ndarray]:
        """Hash -> vector map; empty (with a warning) on mismatch or corruption."""
        if not self.manifest_path.exists():
            return {}
        try:
            meta = json.loads(self.meta_path.read_text())
            if meta.get("snapshot_hash") != expected_hash:
                log.warning("token cache %s built by a different distiller; rebuilding", self.dir)
                return {}
            raw = self.vectors_path.read_bytes()
            out: dict[str, np.ndarray] = {}
            for rec in read_jsonl(self.manifest_path):
                dim, off = int(rec["dim"]), int(rec["offset"])
                vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off)
                out[rec["hash"]] = vec.astype(np.float64)
            return out
        except Exception as e:  # corrupt cache is recoverable
            log.warning("token cache %s unreadable (%s); rebuilding", self.dir, e)
            return {}

    def save(self, store: TokenStore, snapshot_hash: str) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        offsets: dict[str, int] = {}
        blob = bytearray()
        records = []
        for (node, mp) in sorted(store.vectors):
            h = store.hashes[(node, mp)]
            if h not in offsets:
                offsets[h] = len(blob)
                blob.extend(
                    np.ascontiguousarray(store.vectors[(node, mp)], dtype="<f4").tobytes()
                )
            records.append(
                {
                    "hash": h,
                    "node": node,
                    "metapath": mp,
                    "dim": store.dim,
                    "offset": offsets[h],
                }
            )
        self.vectors_path.write_bytes(bytes(blob))
        with open(self.manifest_path, "w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        self.meta_path.write_text(
            json.dumps({"snapshot_hash": snapshot_hash, "source": store.source}, sort_keys=True)
            + "\n"
        )


def load_token_store(cache_path: str | Path) -> TokenStore:
    """Rebuild a TokenStore from a persisted cache directory."""
    cache = TokenCache(cache_path)
    if not cache.manifest_path.exists():
        raise GraphError(f"no token cache at {cache.dir}")
    meta = json.loads(cache.meta_path.read_text())
    raw = cache.vectors_path.read_bytes()
    store: TokenStore | None = None
    for rec in read_jsonl(cache.manifest_path):
        dim, off = int(rec["dim"]), int(rec["offset"])
        if store is None:
            store = TokenStore(dim=dim, source=meta.get("source", "builtin"))
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off).astype(np.float64)
        store.put(
            GraphToken(
                node=int(rec["node"]),
                metapath=rec["metapath"],
                vector=vec,
                source=store.source,
                summary_hash=rec["hash"],
            )
        )
    if store is None:
        raise GraphError(f"token cache at {cache.dir} is empty")
    return store


def distill_all(
    graph: HtrnGraph,
    metapaths: Iterable[MetaPath],
    distiller,
    cache_path: str | Path | None = None,
    cap: int | None = None,
    seed: int = 0,
    templates: TemplateConfig | None = None,
    summaries: Mapping[tuple[int, str], str] | None = None,
) -> TokenStore:
    """One graph token per (node, applicable meta-path), cache-first.

    Summaries are taken from `summaries` when given (offline dump) or computed
    on the fly; the cache is consulted by content hash before any encoder call
    and persisted afterwards.
    """
    metapaths = list(metapaths)
    cache = TokenCache(cache_path) if cache_path else None
    known = cache.load(distiller.snapshot_hash) if cache else {}

    store = TokenStore(dim=distiller.dim, source=distiller.tag)
    todo: list[tuple[int, str, str, str]] = []  # (node, mp, text, hash)
    for node in range(graph.num_nodes):
        for mp in applicable(metapaths, int(graph.node_type[node])):
            if summaries is not None and (node, mp.name) in summaries:
                text = summaries[(node, mp.name)]
            else:
                sub = extract_subgraph(graph, node, mp, cap=cap, seed=seed)
                text = summarize(node, sub, mp, graph, templates).text
            h = sha256_text(text)
            if h in known:
                store.put(
                    GraphToken(
                        node=node,
                        metapath=mp.name,
                        vector=known[h].copy(),
                        source=distiller.tag,
                        summary_hash=h,
                    )
                )
            else:
                todo.append((node, mp.name, text, h))

    if todo:
        vecs = distiller.encode_many([t[2] for t in todo])
        for (node, mp_name, text, h), vec in zip(todo, vecs):
            vec = np.asarray(vec, dtype=np.float64).astype(np.float32).astype(np.float64)
            token = GraphToken(
                node=node, metapath=mp_name, vector=vec, source=distiller.tag, summary_hash=h
            )
            store.put(token)
            known[h] = vec

    if cache:
        cache.save(store, distiller.snapshot_hash)
    return store
