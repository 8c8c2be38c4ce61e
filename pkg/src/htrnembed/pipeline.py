"""Pipeline stages with a reproducible run manifest.

Each stage reads staged artifacts, writes its outputs plus one manifest entry
(config hash, input hashes, output hashes, wall time) and is a no-op when
nothing changed. All randomness derives from the run seed, so two executions
of the same manifest produce identical report files.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import pretrain as pretrain_mod
from .config import ConfigError, RunConfig
from .embed import Embedder, embed_all, load_embeddings
from .encoder import (
    EncoderConfig,
    EncoderParams,
    forward,
    init_params,
    load_checkpoint,
    nsp_logit,
    params_hash,
    save_checkpoint,
)
from .evaluate import (
    LinkData,
    LinkSplit,
    MetricReport,
    NodeClsSplit,
    link_prediction,
    make_link_split,
    node_classification,
    probe_scorer,
)
from .graph import GraphError, HtrnGraph, load_graph, save_graph, synth_graph
from .graphtoken import (
    BridgeDistiller,
    BuiltinDistiller,
    distill_all,
    load_token_store,
)
from .metapath import MetaPath, parse_metapath
from .pretrain import (
    MaskPlan,
    TrainConfig,
    TrainingExample,
    optimize,
    plan_masks,
    train,
    _sigmoid,
)
from .textualize import (
    PromptText,
    Piece,
    TemplateConfig,
    graph_aware_prompt,
    summarize,
    summary_records,
)
from .metapath import applicable, extract_subgraph
from .vocab import Vocab, build_vocab, encode_prompt
from .util import read_jsonl, sha256_file, sha256_text, stable_seed, write_jsonl

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("full", "no_mlm", "no_nsp", "no_graph_token", "no_relation_token")


# --- manifest ---


class Manifest:
    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / "manifest.json"
        self.entries: dict[str, dict] = {}
        if self.path.exists():
            try:
                self.entries = json.loads(self.path.read_text())
            except json.JSONDecodeError:
                log.warning("manifest %s unreadable; starting fresh", self.path)

    def _hashes(self, paths: Sequence[Path]) -> dict[str, str]:
        return {str(p): sha256_file(p) for p in paths if Path(p).exists()}

    def should_skip(self, stage: str, config_hash: str, inputs: Sequence[Path], outputs: Sequence[Path]) -> bool:
        e = self.entries.get(stage)
        if not e or e.get("config_hash") != config_hash:
            return False
        if any(not Path(p).exists() for p in outputs):
            return False
        if e.get("input_hashes") != self._hashes(inputs):
            return False
        return e.get("output_hashes") == self._hashes(outputs)

    def record(
        self,
        stage: str,
        config_hash: str,
        inputs: Sequence[Path],
        outputs: Sequence[Path],
        wall_time: float,
        info: dict | None = None,
    ) -> None:
        self.entries[stage] = {
            "stage": stage,
            "config_hash": config_hash,
            "input_hashes": self._hashes(inputs),
            "output_hashes": self._hashes(outputs),
            "wall_time": wall_time,
            **({"info": info} if info else {}),
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.entries, indent=2, sort_keys=True) + "\n")


def config_hash(cfg: RunConfig) -> str:
    return sha256_text(json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str))


# --- shared assembly ---


def graph_paths(out_dir: Path) -> tuple[Path, Path, Path]:
    g = out_dir / "graph"
    return g / "nodes.jsonl", g / "edges.jsonl", g / "schema.json"


def load_staged_graph(cfg: RunConfig, out_dir: Path) -> HtrnGraph:
    nodes, edges, schema = graph_paths(out_dir)
    if not nodes.exists():
        raise GraphError(
            f"missing staged graph at {nodes.parent}; run the synth or ingest stage first"
        )
    return load_graph(nodes, edges, schema)


def parse_metapaths(cfg: RunConfig, schema) -> list[MetaPath]:
    out = []
    for m in cfg.active_metapaths():
        out.append(
            parse_metapath(
                m.types,
                schema,
                name=m.name,
                relations=m.relations,
                phrase=m.phrase,
                description=m.description,
            )
        )
    return out


def prompt_corpus(graph: HtrnGraph, metapaths: Sequence[MetaPath], templates: TemplateConfig):
    """Node texts plus every template literal that can appear in a prompt."""
    corpus = list(graph.node_text)
    for tname in graph.schema.node_types:
        disp = templates.display_name(tname)
        corpus.append(templates.intro_template(tname).format(type=disp, text=""))
        corpus.append(templates.lead_template(tname).format(type=disp, text=""))
    for mp in metapaths:
        corpus.append(templates.token_description.format(description=mp.description))
        corpus.append(mp.phrase)
    corpus.append(templates.empty_phrase)
    return corpus


def build_run_vocab(cfg: RunConfig, graph: HtrnGraph, metapaths: Sequence[MetaPath]) -> Vocab:
    return build_vocab(
        prompt_corpus(graph, metapaths, cfg.templates),
        min_freq=cfg.tokenizer.min_freq,
        max_size=cfg.tokenizer.max_size,
        lowercase=cfg.tokenizer.lowercase,
    )


def make_encoder_config(
    cfg: RunConfig, vocab: Vocab, graph: HtrnGraph, soft_dim: int | None = None
) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=vocab.size,
        num_relations=len(graph.schema.relations),
        layers=cfg.encoder.layers,
        dim=cfg.encoder.dim,
        heads=cfg.encoder.heads,
        ff_dim=cfg.encoder.ff_dim,
        max_positions=cfg.tokenizer.max_len,
        dropout=cfg.encoder.dropout,
        tie_mlm=cfg.encoder.tie_mlm,
        soft_dim=soft_dim if (soft_dim and soft_dim != cfg.encoder.dim) else None,
        graph_token_masking=cfg.train.mask_graph_tokens,
    )


def frozen_snapshot(cfg: RunConfig, graph: HtrnGraph, vocab: Vocab) -> EncoderParams:
    """The frozen distiller snapshot; also the tunable encoder's initialization."""
    enc_cfg = make_encoder_config(cfg, vocab, graph)
    params = init_params(enc_cfg, stable_seed(cfg.seed, "init"))
    if cfg.distiller.pre_mlm_steps > 0:
        params = _pre_mlm_warmup(params, cfg, graph, vocab)
    return params


def _pre_mlm_warmup(params: EncoderParams, cfg: RunConfig, graph: HtrnGraph, vocab: Vocab):
    """Optional plain masked-token warmup on bare node texts."""
    tcfg = TrainConfig(
        nsr=0,
        mr=cfg.train.mr,
        batch_size=cfg.train.batch_size,
        epochs=1,
        lr=cfg.train.lr,
        weight_decay=cfg.train.weight_decay,
        seed=stable_seed(cfg.seed, "pre-mlm"),
        max_len=cfg.tokenizer.max_len,
        no_nsp=True,
        max_steps=cfg.distiller.pre_mlm_steps,
    )

    def batches():
        rng_order = np.argsort(
            [stable_seed(cfg.seed, "pre-mlm-order", i) for i in range(graph.num_nodes)]
        )
        batch: list[TrainingExample] = []
        for node in rng_order:
            prompt = PromptText(
                segments=((Piece("lit", graph.node_text[int(node)], origin="text"),),)
            )
            seq = encode_prompt(prompt, vocab, max_len=cfg.tokenizer.max_len)
            plan = plan_masks(seq, tcfg.mr, stable_seed(cfg.seed, "pre-mlm-mask", int(node)), vocab.size)
            seq2, soft, slot_targets = pretrain_mod.apply_mask_plan(seq, plan, [])
            batch.append(
                TrainingExample(seq=seq2, label=0, plan=plan, soft_inputs=soft, slot_targets=slot_targets)
            )
            if len(batch) == tcfg.batch_size:
                yield batch
                batch = []
        if batch:
            yield batch

    return optimize(params, batches(), tcfg).params


def make_distiller(cfg: RunConfig, params: EncoderParams | None, vocab: Vocab):
    if cfg.distiller.kind == "builtin":
        return BuiltinDistiller(
            params, vocab, pooling=cfg.distiller.pooling, max_len=cfg.tokenizer.max_len
        )
    return BridgeDistiller(cfg.distiller.command)


def make_train_config(cfg: RunConfig, ablation: str | None) -> TrainConfig:
    flags = {
        "no_mlm": ablation == "no_mlm",
        "no_nsp": ablation == "no_nsp",
        "no_graph_token": ablation == "no_graph_token",
        "no_relation_token": ablation == "no_relation_token",
    }
    return TrainConfig(
        nsr=cfg.train.nsr,
        mr=cfg.train.mr,
        batch_size=cfg.train.batch_size,
        epochs=cfg.train.epochs,
        lr=cfg.train.lr,
        weight_decay=cfg.train.weight_decay,
        seed=cfg.seed,
        max_len=cfg.tokenizer.max_len,
        max_steps=cfg.train.max_steps,
        mask_graph_tokens=cfg.train.mask_graph_tokens,
        **flags,
    )


# --- report writers ---


def write_table(base: Path, rows: list[dict], columns: Sequence[str]) -> list[Path]:
    tsv = base.with_suffix(".tsv")
    jsonl = base.with_suffix(".jsonl")
    with open(tsv, "w", encoding="utf-8") as f:
        f.write("\t".join(columns) + "\n")
        for row in rows:
            f.write("\t".join(_cell(row.get(c)) for c in columns) + "\n")
    write_jsonl(jsonl, rows)
    return [tsv, jsonl]


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


# --- stages ---


class StageRunner:
    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None, force: bool = False):
        self.cfg = cfg
        self.out_dir = Path(out_dir or cfg.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.force = force
        self.manifest = Manifest(self.out_dir)
        self.cfg_hash = config_hash(cfg)

    def _run(
        self,
        stage: str,
        inputs: Sequence[Path],
        outputs: Sequence[Path],
        fn: Callable[[], dict | None],
    ) -> bool:
        """Returns True when the stage executed, False when skipped."""
        if not self.force and self.manifest.should_skip(stage, self.cfg_hash, inputs, outputs):
            log.info("stage %s: up to date, skipping", stage)
            return False
        for p in inputs:
            if not Path(p).exists():
                raise GraphError(f"stage {stage}: missing input artifact {p}")
        t0 = time.perf_counter()
        info = fn() or {}
        wall = time.perf_counter() - t0
        self.manifest.record(stage, self.cfg_hash, inputs, outputs, wall, info)
        return True

    # -- synth / ingest --

    def synth(self) -> bool:
        cfg = self.cfg
        if cfg.graph.source != "synth":
            raise ConfigError("synth stage requires graph.source=synth")
        nodes, edges, schema = graph_paths(self.out_dir)
        nodes.parent.mkdir(parents=True, exist_ok=True)

        def fn():
            graph, labels = synth_graph(cfg.graph.synth, cfg.seed)
            save_graph(graph, nodes, edges, schema)
            return {"nodes": graph.num_nodes, "edges": graph.num_edges, "types": graph.type_counts()}

        return self._run("synth", [], [nodes, edges, schema], fn)

    def ingest(self) -> bool:
        cfg = self.cfg
        if cfg.graph.source != "files":
            raise ConfigError("ingest stage requires graph.source=files")
        src = [Path(cfg.graph.nodes), Path(cfg.graph.edges), Path(cfg.graph.schema)]
        nodes, edges, schema = graph_paths(self.out_dir)
        nodes.parent.mkdir(parents=True, exist_ok=True)

        def fn():
            graph = load_graph(*src)
            save_graph(graph, nodes, edges, schema)
            counts = graph.type_counts()
            log.info("ingested graph: %s", counts)
            return {"nodes": graph.num_nodes, "edges": graph.num_edges, "types": counts}

        return self._run("ingest", src, [nodes, edges, schema], fn)

    def stage_graph(self) -> bool:
        return self.synth() if self.cfg.graph.source == "synth" else self.ingest()

    # -- summarize --

    def summarize(self) -> bool:
        cfg = self.cfg
        nodes, edges, schema = graph_paths(self.out_dir)
        out_summ = self.out_dir / "summaries.jsonl"
        out_vocab = self.out_dir / "vocab.tsv"

        def fn():
            graph = load_staged_graph(cfg, self.out_dir)
            mps = parse_metapaths(cfg, graph.schema)
            vocab = build_run_vocab(cfg, graph, mps)
            vocab.save(out_vocab)
            summaries = []
            for node in range(graph.num_nodes):
                for mp in applicable(mps, int(graph.node_type[node])):
                    sub = extract_subgraph(
                        graph, node, mp, cap=cfg.extraction.cap, seed=cfg.seed
                    )
                    summaries.append(summarize(node, sub, mp, graph, cfg.templates))
            write_jsonl(out_summ, summary_records(summaries))
            return {"summaries": len(summaries)}

        return self._run("summarize", [nodes, edges, schema], [out_summ, out_vocab], fn)

    # -- distill --

    def distill(self) -> bool:
        cfg = self.cfg
        nodes, edges, schema = graph_paths(self.out_dir)
        in_summ = self.out_dir / "summaries.jsonl"
        in_vocab = self.out_dir / "vocab.tsv"
        cache_dir = self.out_dir / "cache"
        outputs = [cache_dir / "manifest.jsonl", cache_dir / "vectors.bin", cache_dir / "distiller.json"]
        snapshot_path = self.out_dir / "snapshot.ckpt"
        if cfg.distiller.kind == "builtin":
            outputs.append(snapshot_path)

        def fn():
            graph = load_staged_graph(cfg, self.out_dir)
            mps = parse_metapaths(cfg, graph.schema)
            vocab = Vocab.load(in_vocab, lowercase=cfg.tokenizer.lowercase)
            summaries = {
                (int(r["node"]), r["metapath"]): r["text"] for r in read_jsonl(in_summ)
            }
            if cfg.distiller.kind == "builtin":
                snapshot = frozen_snapshot(cfg, graph, vocab)
                save_checkpoint(snapshot, snapshot_path)
                distiller = make_distiller(cfg, snapshot, vocab)
            else:
                distiller = make_distiller(cfg, None, vocab)
            try:
                store = distill_all(
                    graph,
                    mps,
                    distiller,
                    cache_path=cache_dir,
                    cap=cfg.extraction.cap,
                    seed=cfg.seed,
                    templates=cfg.templates,
                    summaries=summaries,
                )
                return {
                    "tokens": len(store),
                    "encoder_calls": distiller.calls,
                    "distiller_hash": distiller.snapshot_hash,
                    "dim": store.dim,
                }
            finally:
                distiller.close()

        return self._run("distill", [nodes, edges, schema, in_summ, in_vocab], outputs, fn)

    # -- pretrain --

    def pretrain(self, ablation: str | None = None) -> bool:
        cfg = self.cfg
        nodes, edges, schema = graph_paths(self.out_dir)
        in_vocab = self.out_dir / "vocab.tsv"
        tcfg = make_train_config(cfg, ablation)
        inputs = [nodes, edges, schema, in_vocab]
        if not tcfg.no_graph_token:
            inputs.append(self.out_dir / "cache" / "manifest.jsonl")
        ckpt = self.out_dir / "checkpoint.ckpt"
        metrics_path = self.out_dir / "metrics.jsonl"
        stage = "pretrain" if not ablation else f"pretrain[{ablation}]"

        def fn():
            graph = load_staged_graph(cfg, self.out_dir)
            mps = parse_metapaths(cfg, graph.schema)
            vocab = Vocab.load(in_vocab, lowercase=cfg.tokenizer.lowercase)
            store = None
            soft_dim = None
            if not tcfg.no_graph_token:
                store = load_token_store(self.out_dir / "cache")
                soft_dim = store.dim
            enc_cfg = make_encoder_config(cfg, vocab, graph, soft_dim=soft_dim)
            snapshot_path = self.out_dir / "snapshot.ckpt"
            init = None
            if snapshot_path.exists():
                candidate = load_checkpoint(snapshot_path)
                if candidate.config == enc_cfg:
                    init = candidate
            sink = []
            result = train(
                graph,
                store,
                tcfg,
                enc_cfg,
                vocab,
                mps,
                templates=cfg.templates,
                init=init,
                on_step=sink.append,
            )
            save_checkpoint(result.params, ckpt)
            write_jsonl(metrics_path, sink)
            return {"steps": result.steps, "checkpoint_hash": params_hash(result.params)}

        return self._run(stage, inputs, [ckpt, metrics_path], fn)

    # -- embed --

    def _embedder(self, params: EncoderParams, graph, vocab, mps, ablation, pooling, mode):
        cfg = self.cfg
        use_gt = ablation != "no_graph_token"
        store = load_token_store(self.out_dir / "cache") if use_gt else None
        return Embedder(
            params,
            graph,
            vocab,
            mps,
            templates=cfg.templates,
            token_store=store,
            pooling=pooling,
            mode=mode,
            max_len=cfg.tokenizer.max_len,
            use_graph_tokens=use_gt,
            use_relation_token=ablation != "no_relation_token",
        )

    def embed(self, ablation: str | None = None) -> bool:
        cfg = self.cfg
        nodes, edges, schema = graph_paths(self.out_dir)
        in_vocab = self.out_dir / "vocab.tsv"
        ckpt = self.out_dir / "checkpoint.ckpt"
        out = self.out_dir / "embeddings.jsonl"
        stage = "embed" if not ablation else f"embed[{ablation}]"

        def fn():
            graph = load_staged_graph(cfg, self.out_dir)
            mps = parse_metapaths(cfg, graph.schema)
            vocab = Vocab.load(in_vocab, lowercase=cfg.tokenizer.lowercase)
            params = load_checkpoint(ckpt)
            emb = self._embedder(params, graph, vocab, mps, ablation, cfg.eval.pooling, "finetuned")
            vectors = embed_all(emb, out)
            return {"records": len(vectors)}

        return self._run(stage, [nodes, edges, schema, in_vocab, ckpt], [out], fn)

    # -- eval --

    def _link_eval(self, graph, scorer) -> MetricReport:
        cfg = self.cfg
        split = LinkSplit(
            train_frac=cfg.eval.link_pred.train_frac,
            test_frac=cfg.eval.link_pred.test_frac,
            seed=stable_seed(cfg.seed, "link"),
            neg_ratio=cfg.eval.link_pred.neg_ratio,
        )
        data = make_link_split(graph, split)
        return link_prediction(scorer, graph, data)

    def _eval_reports(self, graph, node_vectors, embedder: Embedder, params) -> tuple[list[Path], dict]:
        cfg = self.cfg
        ncls = node_classification(
            node_vectors,
            graph.labels,
            NodeClsSplit(
                ratios=cfg.eval.node_cls.ratios,
                seed=stable_seed(cfg.seed, "node-cls"),
                repeats=cfg.eval.node_cls.repeats,
            ),
        )
        if cfg.eval.scorer == "probe" or embedder.mode == "training-free":
            split = LinkSplit(
                train_frac=cfg.eval.link_pred.train_frac,
                test_frac=cfg.eval.link_pred.test_frac,
                seed=stable_seed(cfg.seed, "link"),
                neg_ratio=cfg.eval.link_pred.neg_ratio,
            )
            data = make_link_split(graph, split)
            scorer = probe_scorer(lambda u, r, v: embedder.edge(u, r, v).vector, data)
            lp = link_prediction(scorer, graph, data)
        else:
            lp = self._link_eval(graph, nsp_edge_scorer(params, embedder))
        prefix = "freerun_" if embedder.mode == "training-free" else ""
        paths = write_table(
            self.out_dir / f"{prefix}report_node_cls",
            [{"task": "node-cls", **ncls.summary()}],
            ["task", "micro_f1_mean", "micro_f1_std", "macro_f1_mean", "macro_f1_std"],
        )
        rows = [{"relation": "__all__", **lp.runs[0], "split_hash": lp.extra["split_hash"]}]
        for rel, vals in sorted(lp.extra["per_relation"].items()):
            rows.append({"relation": rel, **vals, "split_hash": lp.extra["split_hash"]})
        paths += write_table(
            self.out_dir / f"{prefix}report_link_pred",
            rows,
            ["relation", "roc_auc", "pr_auc", "f1", "split_hash"],
        )
        summary = {
            "micro_f1": ncls.mean("micro_f1"),
            "macro_f1": ncls.mean("macro_f1"),
            "roc_auc": lp.runs[0]["roc_auc"],
            "pr_auc": lp.runs[0]["pr_auc"],
            "f1": lp.runs[0]["f1"],
            "split_hash": lp.extra["split_hash"],
        }
        return paths, summary

    def evaluate(self, ablation: str | None = None) -> bool:
        cfg = self.cfg
        nodes, edges, schema = graph_paths(self.out_dir)
        in_vocab = self.out_dir / "vocab.tsv"
        ckpt = self.out_dir / "checkpoint.ckpt"
        emb_path = self.out_dir / "embeddings.jsonl"
        outputs = [
            self.out_dir / "report_node_cls.tsv",
            self.out_dir / "report_node_cls.jsonl",
            self.out_dir / "report_link_pred.tsv",
            self.out_dir / "report_link_pred.jsonl",
        ]
        stage = "eval" if not ablation else f"eval[{ablation}]"

        def fn():
            graph = load_staged_graph(cfg, self.out_dir)
            mps = parse_metapaths(cfg, graph.schema)
            vocab = Vocab.load(in_vocab, lowercase=cfg.tokenizer.lowercase)
            params = load_checkpoint(ckpt)
            node_vectors = load_embeddings(emb_path)
            emb = self._embedder(params, graph, vocab, mps, ablation, cfg.eval.pooling, "finetuned")
            _, summary = self._eval_reports(graph, node_vectors, emb, params)
            return summary

        return self._run(stage, [nodes, edges, schema, in_vocab, ckpt, emb_path], outputs, fn)

    # -- training-free --

    def freerun(self) -> bool:
        cfg = self.cfg
        nodes, edges, schema = graph_paths(self.out_dir)
        in_vocab = self.out_dir / "vocab.tsv"
        out_emb = self.out_dir / "freerun_embeddings.jsonl"
        outputs = [
            out_emb,
            self.out_dir / "freerun_report_node_cls.tsv",
            self.out_dir / "freerun_report_node_cls.jsonl",
            self.out_dir / "freerun_report_link_pred.tsv",
            self.out_dir / "freerun_report_link_pred.jsonl",
        ]

        def fn():
            invocations_before = pretrain_mod.TRAIN_INVOCATIONS
            graph = load_staged_graph(cfg, self.out_dir)
            mps = parse_metapaths(cfg, graph.schema)
            vocab = Vocab.load(in_vocab, lowercase=cfg.tokenizer.lowercase)
            snapshot_path = self.out_dir / "snapshot.ckpt"
            if snapshot_path.exists():
                params = load_checkpoint(snapshot_path)
            else:
                params = frozen_snapshot(cfg, graph, vocab)
            emb = self._embedder(
                params, graph, vocab, mps, None, cfg.eval.freerun_pooling, "training-free"
            )
            node_vectors = embed_all(emb, out_emb)
            _, summary = self._eval_reports(graph, node_vectors, emb, params)
            if pretrain_mod.TRAIN_INVOCATIONS != invocations_before:
                raise GraphError("training-free run touched the optimizer")
            summary["optimizer_steps"] = 0
            return summary

        return self._run("freerun", [nodes, edges, schema, in_vocab], outputs, fn)


def nsp_edge_scorer(params: EncoderParams, embedder: Embedder):
    """Edge probability from the trained NSP head over the pair prompt."""
    from .textualize import relation_aware_prompt

    def score(u: int, r: int, v: int) -> float:
        prompt = relation_aware_prompt(
            embedder._node_prompt(u),
            r,
            embedder._node_prompt(v),
            embedder.graph,
            include_relation_token=embedder.use_relation_token,
        )
        seq = encode_prompt(prompt, embedder.vocab, max_len=embedder.max_len)
        soft = [embedder.store.get(s.slot.node, s.slot.key) for s in seq.graph_slots]
        trace = forward(params, seq, soft)
        return _sigmoid(nsp_logit(trace, params))

    return score


# --- ablation and sweeps (library-level, shared artifacts per seed) ---


def _clone_config(cfg: RunConfig, **updates) -> RunConfig:
    obj = dataclasses.asdict(cfg)
    from .config import config_from_dict

    new = config_from_dict(json.loads(json.dumps(obj, default=str)))
    for key, value in updates.items():
        section, _, name = key.partition(".")
        if name:
            setattr(getattr(new, section), name, value)
        else:
            setattr(new, section, value)
    return new


def single_run(
    cfg: RunConfig,
    graph: HtrnGraph,
    metapaths: Sequence[MetaPath],
    vocab: Vocab,
    store,
    snapshot: EncoderParams | None,
    ablation: str | None,
) -> dict:
    """Train + embed + evaluate one variant in memory; returns the metric row."""
    ablation = None if ablation in (None, "full") else ablation
    tcfg = make_train_config(cfg, ablation)
    soft_dim = store.dim if (store is not None and not tcfg.no_graph_token) else None
    enc_cfg = make_encoder_config(cfg, vocab, graph, soft_dim=soft_dim)
    init = snapshot if (snapshot is not None and snapshot.config == enc_cfg) else None
    result = train(
        graph,
        None if tcfg.no_graph_token else store,
        tcfg,
        enc_cfg,
        vocab,
        metapaths,
        templates=cfg.templates,
        init=init,
    )
    use_gt = ablation != "no_graph_token"
    emb = Embedder(
        result.params,
        graph,
        vocab,
        metapaths,
        templates=cfg.templates,
        token_store=store if use_gt else None,
        pooling=cfg.eval.pooling,
        max_len=cfg.tokenizer.max_len,
        use_graph_tokens=use_gt,
        use_relation_token=ablation != "no_relation_token",
    )
    node_vectors = {n: emb.node(n).vector for n in range(graph.num_nodes)}
    ncls = node_classification(
        node_vectors,
        graph.labels,
        NodeClsSplit(
            ratios=cfg.eval.node_cls.ratios,
            seed=stable_seed(cfg.seed, "node-cls"),
            repeats=cfg.eval.node_cls.repeats,
        ),
    )
    data = make_link_split(
        graph,
        LinkSplit(
            train_frac=cfg.eval.link_pred.train_frac,
            test_frac=cfg.eval.link_pred.test_frac,
            seed=stable_seed(cfg.seed, "link"),
            neg_ratio=cfg.eval.link_pred.neg_ratio,
        ),
    )
    lp = link_prediction(nsp_edge_scorer(result.params, emb), graph, data)
    return {
        "variant": ablation or "full",
        "micro_f1": ncls.mean("micro_f1"),
        "macro_f1": ncls.mean("macro_f1"),
        "roc_auc": lp.runs[0]["roc_auc"],
        "pr_auc": lp.runs[0]["pr_auc"],
        "f1": lp.runs[0]["f1"],
        "split_hash": lp.extra["split_hash"],
    }


def _seed_artifacts(cfg: RunConfig, seed: int):
    """Graph, meta-paths, vocab, snapshot and token store for one run seed."""
    run_cfg = _clone_config(cfg, seed=seed)
    if run_cfg.graph.source == "synth":
        graph, _ = synth_graph(run_cfg.graph.synth, seed)
    else:
        graph = load_graph(run_cfg.graph.nodes, run_cfg.graph.edges, run_cfg.graph.schema)
    mps = parse_metapaths(run_cfg, graph.schema)
    vocab = build_run_vocab(run_cfg, graph, mps)
    snapshot = frozen_snapshot(run_cfg, graph, vocab)
    distiller = BuiltinDistiller(
        snapshot, vocab, pooling=run_cfg.distiller.pooling, max_len=run_cfg.tokenizer.max_len
    )
    store = distill_all(
        graph,
        mps,
        distiller,
        cache_path=None,
        cap=run_cfg.extraction.cap,
        seed=seed,
        templates=run_cfg.templates,
    )
    return run_cfg, graph, mps, vocab, snapshot, store


def run_ablation_suite(
    cfg: RunConfig, seeds: Sequence[int] | None = None, out_dir: str | Path | None = None
) -> list[dict]:
    """Train and evaluate all ablation variants with shared seeds and splits."""
    seeds = list(seeds) if seeds else [cfg.seed]
    per_variant: dict[str, list[dict]] = {v: [] for v in ABLATION_VARIANTS}
    for seed in seeds:
        run_cfg, graph, mps, vocab, snapshot, store = _seed_artifacts(cfg, seed)
        split_hashes = set()
        for variant in ABLATION_VARIANTS:
            row = single_run(run_cfg, graph, mps, vocab, store, snapshot, variant)
            split_hashes.add(row["split_hash"])
            per_variant[variant].append(row)
        if len(split_hashes) != 1:
            raise GraphError("ablation variants diverged on the evaluation split")
    rows = []
    for variant in ABLATION_VARIANTS:
        runs = per_variant[variant]
        rows.append(
            {
                "variant": variant,
                "micro_f1": float(np.mean([r["micro_f1"] for r in runs])),
                "macro_f1": float(np.mean([r["macro_f1"] for r in runs])),
                "roc_auc": float(np.mean([r["roc_auc"] for r in runs])),
                "pr_auc": float(np.mean([r["pr_auc"] for r in runs])),
                "f1": float(np.mean([r["f1"] for r in runs])),
            }
        )
    if out_dir is not None:
        write_table(
            Path(out_dir) / "ablation",
            rows,
            ["variant", "micro_f1", "macro_f1", "roc_auc", "pr_auc", "f1"],
        )
    return rows


SWEEPABLE = {"nsr": "train.nsr", "mr": "train.mr", "metapath_set": "metapath_set"}


def run_sweep(
    cfg: RunConfig,
    key: str,
    values: Sequence,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """One full train+eval per value with shared seeds; emits the curve table."""
    if key not in SWEEPABLE:
        raise ConfigError(f"sweep key must be one of {sorted(SWEEPABLE)}")
    rows = []
    for value in values:
        if key == "nsr":
            value = int(value)
        elif key == "mr":
            value = float(value)
        swept = _clone_config(cfg, **{SWEEPABLE[key]: value})
        run_cfg, graph, mps, vocab, snapshot, store = _seed_artifacts(swept, swept.seed)
        row = single_run(run_cfg, graph, mps, vocab, store, snapshot, None)
        row = {key: value, **{k: v for k, v in row.items() if k != "variant"}}
        rows.append(row)
    if out_dir is not None:
        write_table(
            Path(out_dir) / f"sweep_{key}",
            rows,
            [key, "micro_f1", "macro_f1", "roc_auc", "pr_auc", "f1", "split_hash"],
        )
    return rows
