"""Prompt-based representation learning for heterogeneous text-rich networks.

The pipeline: load or synthesize a typed text-rich graph, extract meta-path
subgraphs, textualize them, distill summaries into graph tokens with a frozen
encoder, pretrain a small tunable encoder on relation-aware prompts with joint
edge-validity and masked-token objectives, then embed nodes/edges and evaluate
on node classification and link prediction.
"""

from .graph import GraphError, HtrnGraph, Schema, SynthConfig, load_graph, save_graph, synth_graph
from .metapath import MetaPath, MetaPathSubgraph, extract_all, extract_subgraph, parse_metapath
from .textualize import (
    PromptText,
    SubgraphSummary,
    TemplateConfig,
    graph_aware_prompt,
    relation_aware_prompt,
    summarize,
)
from .vocab import MixedSequence, Vocab, build_vocab, decode, encode_prompt, tokenize
from .encoder import (
    EncoderConfig,
    EncoderParams,
    backward,
    forward,
    init_params,
    load_checkpoint,
    mlm_logits,
    nsp_logit,
    save_checkpoint,
)
from .graphtoken import BuiltinDistiller, GraphToken, TokenStore, distill, distill_all
from .pretrain import (
    MaskPlan,
    NspSample,
    TrainConfig,
    loss_mlm,
    loss_nsp,
    plan_masks,
    sample_nsp,
    train,
)
from .embed import Embedder, embed_all
from .evaluate import f1_binary, f1_multiclass, link_prediction, node_classification, pr_auc, roc_auc

__version__ = "0.1.0"
