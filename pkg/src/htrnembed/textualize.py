"""Deterministic template engines turning graph structure into prompt text.

Three layers: subgraph summaries (plain text fed to the frozen distiller),
graph-aware prompts (node text + token descriptions + graph-token slots) and
relation-aware prompts (two graph-aware prompts around a relation-token slot).
Soft slots are rendered as reserved markers; node text is escaped at graph
ingest so a marker can never be forged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .graph import GraphError, HtrnGraph
from .markers import graph_marker, relation_marker, split_markers
from .metapath import MetaPath, MetaPathSubgraph, applicable

EMPTY_PHRASE = "<no such connections>"


@dataclass(frozen=True)
class SubgraphSummary:
    node: int
    metapath: str
    text: str


@dataclass(frozen=True)
class SlotRef:
    """Source of one soft-slot marker: a meta-path graph token or a relation token."""

    kind: str  # "graph" | "relation"
    key: str  # metapath name or relation name
    node: int = -1  # graph slots: the node the token was distilled for
    rel: int = -1  # relation slots: relation id


@dataclass(frozen=True)
class Piece:
    kind: str  # "lit" | "slot"
    text: str  # literal text, or the rendered marker for slots
    origin: str = "template"  # literals: "text" (node text) vs "template"
    slot: SlotRef | None = None


@dataclass(frozen=True)
class PromptText:
    """Rendered prompt: literal pieces interleaved with soft-slot markers.

    `segments` has one entry for a graph-aware prompt and two for a
    relation-aware prompt (the relation slot sits at the end of segment 0).
    """

    segments: tuple[tuple[Piece, ...], ...]

    @property
    def text(self) -> str:
        return " ".join("".join(p.text for p in seg) for seg in self.segments)

    @property
    def manifest(self) -> tuple[SlotRef, ...]:
        return tuple(
            p.slot for seg in self.segments for p in seg if p.kind == "slot"
        )


@dataclass
class TemplateConfig:
    """Configurable wording per node type and meta-path; defaults follow the
    worked phrasing for paper-author neighborhoods."""

    display: dict[str, str] = field(default_factory=dict)  # type name -> noun
    intro: dict[str, str] = field(default_factory=dict)  # type name -> "{type} is named {text}."
    summary_lead: dict[str, str] = field(default_factory=dict)  # type -> "{type} titled {text}"
    token_description: str = (
        "The subgraph extracted via the meta-path '{description}' is summarized as:"
    )
    empty_phrase: str = EMPTY_PHRASE
    char_budget: int = 400

    def display_name(self, type_name: str) -> str:
        return self.display.get(type_name, type_name)

    def intro_template(self, type_name: str) -> str:
        return self.intro.get(type_name, "{type} is named {text}.")

    def lead_template(self, type_name: str) -> str:
        return self.summary_lead.get(type_name, "{type} titled {text}")


def summarize(
    node: int,
    subgraph: MetaPathSubgraph,
    metapath: MetaPath,
    graph: HtrnGraph,
    templates: TemplateConfig | None = None,
) -> SubgraphSummary:
    """Textualize one meta-path-based subgraph.

    Neighbors are listed in ascending node-id order, each prefixed by its type
    noun; an empty subgraph renders the configured empty phrase. The result is
    tail-truncated to the char budget.
    """
    tcfg = templates or TemplateConfig()
    if subgraph.target != node:
        raise GraphError(f"subgraph target {subgraph.target} is not node {node}")
    type_name = graph.type_name(int(graph.node_type[node]))
    lead = tcfg.lead_template(type_name).format(
        type=tcfg.display_name(type_name), text=graph.node_text[node]
    )
    if subgraph.neighbors:
        end_type = graph.type_name(metapath.node_types[-1])
        noun = tcfg.display_name(end_type)
        items = ", ".join(f"{noun} {graph.node_text[v]}" for v in sorted(subgraph.neighbors))
        text = f"{lead} {metapath.phrase} {items}"
    else:
        text = f"{lead} {metapath.phrase} {tcfg.empty_phrase}"
    return SubgraphSummary(node=node, metapath=metapath.name, text=text[: tcfg.char_budget])


def graph_aware_prompt(
    node: int,
    entries: Mapping[str, Any] | None,
    metapaths: Iterable[MetaPath],
    graph: HtrnGraph,
    templates: TemplateConfig | None = None,
) -> PromptText:
    """Build the node-level prompt: intro text, then one token-description
    sentence plus one graph-token marker per applicable meta-path.

    `entries` maps meta-path name to the available token (or summary) and must
    cover every applicable meta-path; passing None drops graph tokens entirely
    (the text-only ablation).
    """
    tcfg = templates or TemplateConfig()
    type_name = graph.type_name(int(graph.node_type[node]))
    tmpl = tcfg.intro_template(type_name)
    pre, _, post = tmpl.partition("{text}")
    pieces: list[Piece] = [
        Piece("lit", pre.format(type=tcfg.display_name(type_name))),
        Piece("lit", graph.node_text[node], origin="text"),
        Piece("lit", post),
    ]
    if entries is not None:
        for mp in applicable(metapaths, int(graph.node_type[node])):
            if mp.name not in entries:
                raise GraphError(
                    f"missing graph-token entry for meta-path {mp.name!r} on node {node}"
                )
            sentence = tcfg.token_description.format(description=mp.description)
            pieces.append(Piece("lit", f" {sentence} "))
            pieces.append(
                Piece(
                    "slot",
                    graph_marker(mp.name),
                    slot=SlotRef(kind="graph", key=mp.name, node=node),
                )
            )
    return PromptText(segments=(tuple(pieces),))


def relation_aware_prompt(
    u_prompt: PromptText,
    relation: int,
    v_prompt: PromptText,
    graph: HtrnGraph,
    include_relation_token: bool = True,
) -> PromptText:
    """Concatenate two graph-aware prompts around one relation-token marker."""
    if not 0 <= relation < len(graph.schema.relations):
        raise GraphError(f"unregistered relation id {relation}")
    if len(u_prompt.segments) != 1 or len(v_prompt.segments) != 1:
        raise GraphError("operands of a relation-aware prompt must be single-segment")
    rel_name = graph.schema.relations[relation].name
    seg0 = list(u_prompt.segments[0])
    if include_relation_token:
        seg0.append(Piece("lit", " "))
        seg0.append(
            Piece(
                "slot",
                relation_marker(rel_name),
                slot=SlotRef(kind="relation", key=rel_name, rel=relation),
            )
        )
    return PromptText(segments=(tuple(seg0), v_prompt.segments[0]))


def verify_markers(prompt: PromptText) -> None:
    """Check the rendered text parses back to exactly the slot manifest."""
    parsed = [(k, key) for k, key in split_markers(prompt.text) if k != "lit"]
    manifest = prompt.manifest
    if len(parsed) != len(manifest):
        raise GraphError(
            f"marker/manifest mismatch: {len(parsed)} markers, {len(manifest)} slots"
        )
    for (kind, key), slot in zip(parsed, manifest):
        want = "GT" if slot.kind == "graph" else "RT"
        if kind != want or key != slot.key:
            raise GraphError(f"marker {kind}:{key} does not match slot {slot}")


def summary_records(summaries: Iterable[SubgraphSummary]) -> Iterable[dict]:
    """Dump format for offline distillation."""
    for s in summaries:
        yield {"node": s.node, "metapath": s.metapath, "text": s.text}
