"""Run configuration: one structured file validated before any stage runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .graph import SynthConfig
from .textualize import TemplateConfig


class ConfigError(ValueError):
    pass


def _check_keys(obj: Mapping, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


@dataclass
class MetaPathSpec:
    name: str
    types: str | list[str]
    relations: list[str] | None = None
    phrase: str | None = None
    description: str | None = None


@dataclass
class GraphSection:
    source: str = "synth"  # synth | files
    nodes: str | None = None
    edges: str | None = None
    schema: str | None = None
    synth: SynthConfig | None = None


@dataclass
class TokenizerSection:
    min_freq: int = 1
    max_size: int | None = 5000
    lowercase: bool = True
    max_len: int = 128


@dataclass
class EncoderSection:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.0
    tie_mlm: bool = False


@dataclass
class DistillerSection:
    kind: str = "builtin"  # builtin | bridge
    command: str | None = None
    pooling: str = "mean"
    pre_mlm_steps: int = 0


@dataclass
class ExtractionSection:
    cap: int | None = 10


@dataclass
class TrainSection:
    nsr: int = 1
    mr: float = 0.15
    batch_size: int = 16
    epochs: int = 2
    lr: float = 3e-4
    weight_decay: float = 0.01
    max_steps: int | None = None
    mask_graph_tokens: bool = False


@dataclass
class NodeClsSection:
    repeats: int = 10
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)


@dataclass
class LinkPredSection:
    train_frac: float = 0.1
    test_frac: float = 0.4
    neg_ratio: int = 1


@dataclass
class EvalSection:
    node_cls: NodeClsSection = field(default_factory=NodeClsSection)
    link_pred: LinkPredSection = field(default_factory=LinkPredSection)
    pooling: str = "cls"
    freerun_pooling: str = "mean"
    scorer: str = "nsp"  # nsp | probe


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    graph: GraphSection = field(default_factory=GraphSection)
    metapaths: list[MetaPathSpec] = field(default_factory=list)
    metapath_sets: dict[str, list[str]] = field(default_factory=dict)
    metapath_set: str | None = None
    templates: TemplateConfig = field(default_factory=TemplateConfig)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    distiller: DistillerSection = field(default_factory=DistillerSection)
    extraction: ExtractionSection = field(default_factory=ExtractionSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def active_metapaths(self) -> list[MetaPathSpec]:
        if not self.metapath_set:
            return self.metapaths
        if self.metapath_set not in self.metapath_sets:
            raise ConfigError(f"metapath_set {self.metapath_set!r} not defined")
        wanted = self.metapath_sets[self.metapath_set]
        by_name = {m.name: m for m in self.metapaths}
        missing = [n for n in wanted if n not in by_name]
        if missing:
            raise ConfigError(f"metapath_set names unknown meta-paths {missing}")
        return [by_name[n] for n in wanted]


def _build_simple(cls, obj: Mapping | None, where: str):
    obj = obj or {}
    fields_ = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    _check_keys(obj, fields_, where)
    try:
        return cls(**obj)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def _build_synth(obj: Mapping | None) -> SynthConfig | None:
    if obj is None:
        return None
    allowed = {f for f in SynthConfig.__dataclass_fields__}
    _check_keys(obj, allowed, "graph.synth")
    obj = dict(obj)
    if "relations" in obj:
        obj["relations"] = [tuple(r) for r in obj["relations"]]
    if "text_rich" in obj:
        obj["text_rich"] = tuple(obj["text_rich"])
    try:
        return SynthConfig(**obj)
    except TypeError as e:
        raise ConfigError(f"graph.synth: {e}") from None


def config_from_dict(obj: Mapping[str, Any]) -> RunConfig:
    _check_keys(
        obj,
        {f for f in RunConfig.__dataclass_fields__},
        "config",
    )
    cfg = RunConfig()
    cfg.seed = int(obj.get("seed", cfg.seed))
    cfg.out_dir = str(obj.get("out_dir", cfg.out_dir))

    g = dict(obj.get("graph") or {})
    _check_keys(g, {"source", "nodes", "edges", "schema", "synth"}, "graph")
    cfg.graph = GraphSection(
        source=g.get("source", "synth"),
        nodes=g.get("nodes"),
        edges=g.get("edges"),
        schema=g.get("schema"),
        synth=_build_synth(g.get("synth")),
    )
    if cfg.graph.source not in ("synth", "files"):
        raise ConfigError(f"graph.source must be synth or files, got {cfg.graph.source!r}")
    if cfg.graph.source == "synth" and cfg.graph.synth is None:
        raise ConfigError("graph.source=synth requires a graph.synth block")
    if cfg.graph.source == "files":
        for k in ("nodes", "edges", "schema"):
            if not getattr(cfg.graph, k):
                raise ConfigError(f"graph.source=files requires graph.{k}")

    cfg.metapaths = [
        _build_simple(MetaPathSpec, m, f"metapaths[{i}]")
        for i, m in enumerate(obj.get("metapaths") or [])
    ]
    cfg.metapath_sets = {
        str(k): list(v) for k, v in (obj.get("metapath_sets") or {}).items()
    }
    cfg.metapath_set = obj.get("metapath_set")

    t = dict(obj.get("templates") or {})
    _check_keys(
        t,
        {"display", "intro", "summary_lead", "token_description", "empty_phrase", "char_budget"},
        "templates",
    )
    cfg.templates = TemplateConfig(**t)

    cfg.tokenizer = _build_simple(TokenizerSection, obj.get("tokenizer"), "tokenizer")
    cfg.encoder = _build_simple(EncoderSection, obj.get("encoder"), "encoder")
    cfg.distiller = _build_simple(DistillerSection, obj.get("distiller"), "distiller")
    if cfg.distiller.kind not in ("builtin", "bridge"):
        raise ConfigError("distiller.kind must be builtin or bridge")
    if cfg.distiller.kind == "bridge" and not cfg.distiller.command:
        raise ConfigError("distiller.kind=bridge requires distiller.command")
    cfg.extraction = _build_simple(ExtractionSection, obj.get("extraction"), "extraction")
    cfg.train = _build_simple(TrainSection, obj.get("train"), "train")

    e = dict(obj.get("eval") or {})
    _check_keys(e, {"node_cls", "link_pred", "pooling", "freerun_pooling", "scorer"}, "eval")
    node_cls = _build_simple(NodeClsSection, e.get("node_cls"), "eval.node_cls")
    if e.get("node_cls") and "ratios" in e["node_cls"]:
        node_cls.ratios = tuple(e["node_cls"]["ratios"])
    cfg.eval = EvalSection(
        node_cls=node_cls,
        link_pred=_build_simple(LinkPredSection, e.get("link_pred"), "eval.link_pred"),
        pooling=e.get("pooling", "cls"),
        freerun_pooling=e.get("freerun_pooling", "mean"),
        scorer=e.get("scorer", "nsp"),
    )
    if cfg.eval.scorer not in ("nsp", "probe"):
        raise ConfigError("eval.scorer must be nsp or probe")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        obj = yaml.safe_load(f)
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{path}: config must be a mapping")
    return config_from_dict(obj)
