"""Pretraining: edge-validity and masked-token objectives over relation prompts.

Every edge yields one positive pair sample plus `nsr` tail-corrupted negatives
of the correct type; masked-token targets are drawn uniformly over maskable
positions at ratio `mr`. The two losses are combined additively and optimized
with decoupled-weight-decay Adam. Single-worker batching keeps runs fully
deterministic for a fixed seed.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .encoder import (
    EncoderConfig,
    EncoderParams,
    backward,
    forward,
    gt_head_backward,
    gt_head_predict,
    init_params,
    mlm_backward,
    mlm_logits,
    nsp_backward,
    nsp_logit,
    zero_grads,
)
from .graph import GraphError, HtrnGraph
from .graphtoken import TokenStore
from .metapath import MetaPath
from .textualize import PromptText, TemplateConfig, graph_aware_prompt, relation_aware_prompt
from .vocab import MASK, NUM_SPECIALS, MixedSequence, Vocab, encode_prompt
from .util import derived_rng, stable_seed

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12

# Incremented on every optimizer run; lets the training-free path assert that
# no tunable-training code was touched.
TRAIN_INVOCATIONS = 0


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last finite parameter snapshot."""

    def __init__(self, step: int, last_good: EncoderParams):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class NspSample:
    head: int
    relation: int
    tail: int
    label: int  # 1 = true edge, 0 = corrupted tail


@dataclass(frozen=True)
class MaskPlan:
    positions: tuple[int, ...]
    targets: tuple[int, ...]  # original token ids; -1 at graph-slot positions
    actions: tuple[str, ...]  # "mask" | "random" | "keep" | "slot"
    replacements: tuple[int, ...]  # id written at the position; -1 for slots


@dataclass
class TrainingExample:
    seq: MixedSequence  # ids already corrupted per the mask plan
    label: int
    plan: MaskPlan
    soft_inputs: list  # per graph slot: vector, or None when the slot is masked
    slot_targets: dict[int, np.ndarray] = field(default_factory=dict)  # pos -> original vec


@dataclass
class TrainConfig:
    nsr: int = 1
    mr: float = 0.15
    batch_size: int = 16
    epochs: int = 2
    lr: float = 3e-4
    weight_decay: float = 0.01
    seed: int = 0
    max_len: int = 128
    max_steps: int | None = None
    no_mlm: bool = False
    no_nsp: bool = False
    no_graph_token: bool = False
    no_relation_token: bool = False
    mask_graph_tokens: bool = False

    def __post_init__(self):
        if self.nsr < 0:
            raise GraphError("nsr must be >= 0")
        if not 0.0 <= self.mr < 1.0:
            raise GraphError("mr must be in [0, 1)")
        if self.no_mlm and self.no_nsp:
            raise GraphError("cannot ablate both pretraining tasks")


def sample_nsp(graph: HtrnGraph, nsr: int, seed: int) -> list[NspSample]:
    """One positive per edge plus `nsr` tail corruptions of the declared type.

    Negatives share the head and relation and are drawn uniformly without
    replacement among non-adjacent nodes of the tail type; edges with fewer
    candidates than `nsr` yield fewer negatives (count logged).
    """
    if nsr < 0:
        raise GraphError("nsr must be >= 0")
    rng = derived_rng(seed, "nsp")
    out: list[NspSample] = []
    short = 0
    for s, d, r in graph.edges:
        s, d, r = int(s), int(d), int(r)
        out.append(NspSample(head=s, relation=r, tail=d, label=1))
        if nsr == 0:
            continue
        tail_type = graph.schema.relations[r].dst_type
        pool = graph.nodes_of_type(tail_type)
        banned = np.append(graph.neighbors(s, r), s)
        candidates = np.setdiff1d(pool, banned, assume_unique=False)
        take = min(nsr, candidates.size)
        if take < nsr:
            short += nsr - take
        if take:
            for v in rng.choice(candidates, size=take, replace=False):
                out.append(NspSample(head=s, relation=r, tail=int(v), label=0))
    if short:
        log.info("negative sampling: %d negatives skipped (no valid tail)", short)
    return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan_masks(
    seq: MixedSequence, mr: float, seed: int, vocab_size: int
) -> MaskPlan:
    """Uniform sample of maskable positions at ratio mr.

    Count = max(1, round(mr * maskable)) whenever mr > 0 and something is
    maskable; mr = 0 masks nothing. Each masked text position is replaced by
    MASK (80%), a random non-special id (10%) or kept (10%); masked graph
    slots are recorded as "slot" and handled by vector replacement.
    """
    if not 0.0 <= mr < 1.0:
        raise GraphError("mr must be in [0, 1)")
    maskable_pos = np.flatnonzero(seq.maskable)
    if mr == 0.0 or maskable_pos.size == 0:
        return MaskPlan((), (), (), ())
    count = max(1, _round_half_up(mr * maskable_pos.size))
    rng = derived_rng(seed, "mask")
    chosen = np.sort(rng.choice(maskable_pos, size=count, replace=False))
    positions, targets, actions, replacements = [], [], [], []
    slot_positions = {s.pos for s in seq.slots}
    for pos in chosen:
        pos = int(pos)
        positions.append(pos)
        if pos in slot_positions:
            targets.append(-1)
            actions.append("slot")
            replacements.append(-1)
            continue
        original = int(seq.ids[pos])
        targets.append(original)
        u = rng.random()
        if u < 0.8 or vocab_size <= NUM_SPECIALS:
            actions.append("mask")
            replacements.append(MASK)
        elif u < 0.9:
            actions.append("random")
            replacements.append(int(rng.integers(NUM_SPECIALS, vocab_size)))
        else:
            actions.append("keep")
            replacements.append(original)
    return MaskPlan(tuple(positions), tuple(targets), tuple(actions), tuple(replacements))


def apply_mask_plan(
    seq: MixedSequence, plan: MaskPlan, soft_inputs: list
) -> tuple[MixedSequence, list, dict[int, np.ndarray]]:
    """Corrupt ids per the plan; masked graph slots become None soft inputs."""
    ids = seq.ids.copy()
    soft = list(soft_inputs)
    slot_targets: dict[int, np.ndarray] = {}
    graph_positions = [s.pos for s in seq.graph_slots]
    for pos, action, rep in zip(plan.positions, plan.actions, plan.replacements):
        if action == "slot":
            gi = graph_positions.index(pos)
            slot_targets[pos] = soft[gi]
            soft[gi] = None
        else:
            ids[pos] = rep
    return seq.with_ids(ids), soft, slot_targets


def loss_nsp(probs: Sequence[float], labels: Sequence[int]) -> float:
    """Mean binary cross-entropy over edge-validity probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise GraphError("empty batch")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def loss_mlm(distributions: np.ndarray, targets: Sequence[int]) -> float:
    """Mean negative log-probability of the original tokens; 0 when none masked."""
    t = np.asarray(list(targets), dtype=np.int64)
    if t.size == 0:
        return 0.0
    dist = np.asarray(distributions, dtype=np.float64)
    picked = dist[np.arange(t.size), t]
    return float(-np.mean(np.log(np.clip(picked, 1e-300, None))))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class BatchResult:
    loss_total: float
    loss_nsp: float
    loss_mlm: float
    grads: dict[str, np.ndarray]


def batch_loss_and_grads(
    params: EncoderParams,
    examples: Sequence[TrainingExample],
    no_nsp: bool = False,
    no_mlm: bool = False,
    rng: np.random.Generator | None = None,
) -> BatchResult:
    """Joint loss over a batch with exact gradients.

    The masked-token term averages over all masked text tokens in the batch
    (plus the graph-token regression when slots are masked); the edge term
    averages over examples.
    """
    if not examples:
        raise GraphError("empty batch")
    n = len(examples)
    traces = []
    text_positions: list[np.ndarray] = []
    probs: list[float] = []
    nll_sum = 0.0
    m_total = 0
    slot_err_sum = 0.0
    slot_dims_total = 0
    slot_preds: list[list[tuple[int, np.ndarray, np.ndarray]]] = []

    for ex in examples:
        trace = forward(params, ex.seq, ex.soft_inputs, rng=rng)
        traces.append(trace)
        probs.append(_sigmoid(nsp_logit(trace, params)))
        pos = np.array(
            [p for p, a in zip(ex.plan.positions, ex.plan.actions) if a != "slot"],
            dtype=np.int64,
        )
        text_positions.append(pos)
        if not no_mlm:
            if pos.size:
                logits = mlm_logits(trace, pos, params)
                logp = _log_softmax(logits)
                targets = [t for t in ex.plan.targets if t >= 0]
                nll_sum += float(-logp[np.arange(pos.size), targets].sum())
                m_total += pos.size
            preds = []
            for spos, target in sorted(ex.slot_targets.items()):
                pred = gt_head_predict(trace, params, spos)
                slot_err_sum += float(((pred - target) ** 2).sum())
                slot_dims_total += pred.size
                preds.append((spos, pred, target))
            slot_preds.append(preds)
        else:
            slot_preds.append([])

    y = np.array([ex.label for ex in examples], dtype=np.float64)
    l_nsp = 0.0 if no_nsp else loss_nsp(probs, y)
    l_mlm_text = (nll_sum / m_total) if m_total else 0.0
    l_gt = (slot_err_sum / slot_dims_total) if slot_dims_total else 0.0
    l_mlm = 0.0 if no_mlm else l_mlm_text + l_gt
    total = l_nsp + l_mlm

    grads = zero_grads(params)
    for i, ex in enumerate(examples):
        trace = traces[i]
        d_hidden = np.zeros_like(trace.hidden)
        if not no_nsp:
            p = probs[i]
            if PROB_CLAMP < p < 1.0 - PROB_CLAMP:
                nsp_backward(trace, params, (p - y[i]) / n, grads, d_hidden)
        if not no_mlm:
            pos = text_positions[i]
            if pos.size:
                logits = mlm_logits(trace, pos, params)
                soft = np.exp(_log_softmax(logits))
                targets = [t for t in ex.plan.targets if t >= 0]
                soft[np.arange(pos.size), targets] -= 1.0
                mlm_backward(trace, params, pos, soft / m_total, grads, d_hidden)
            for spos, pred, target in slot_preds[i]:
                d_pred = 2.0 * (pred - target) / slot_dims_total
                gt_head_backward(trace, params, spos, d_pred, grads, d_hidden)
        backward(params, trace, d_hidden, grads)
    return BatchResult(loss_total=total, loss_nsp=l_nsp, loss_mlm=l_mlm, grads=grads)


class AdamW:
    """Adam with decoupled weight decay; decay skips biases and norm scales."""

    def __init__(
        self,
        params: EncoderParams,
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self._decay = {k: v.ndim >= 2 for k, v in params.tensors.items()}

    def step(self, params: EncoderParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, w in params.tensors.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            if self._decay[k]:
                update = update + self.weight_decay * w
            w -= self.lr * update


class PromptEncoder:
    """Builds encoded pair examples for sampled edges, honoring ablation flags."""

    def __init__(
        self,
        graph: HtrnGraph,
        vocab: Vocab,
        metapaths: Sequence[MetaPath],
        templates: TemplateConfig | None,
        token_store: TokenStore | None,
        cfg: TrainConfig,
    ):
        self.graph = graph
        self.vocab = vocab
        self.metapaths = list(metapaths)
        self.templates = templates
        self.store = token_store
        self.cfg = cfg
        self._prompts: dict[int, PromptText] = {}

    def node_prompt(self, node: int) -> PromptText:
        if node not in self._prompts:
            entries = None
            if not self.cfg.no_graph_token:
                if self.store is None:
                    raise GraphError("token store required unless graph tokens are ablated")
                entries = self.store.for_node(node)
            self._prompts[node] = graph_aware_prompt(
                node, entries, self.metapaths, self.graph, self.templates
            )
        return self._prompts[node]

    def pair_sequence(self, sample: NspSample) -> MixedSequence:
        prompt = relation_aware_prompt(
            self.node_prompt(sample.head),
            sample.relation,
            self.node_prompt(sample.tail),
            self.graph,
            include_relation_token=not self.cfg.no_relation_token,
        )
        return encode_prompt(
            prompt,
            self.vocab,
            max_len=self.cfg.max_len,
            mask_graph_tokens=self.cfg.mask_graph_tokens,
        )

    def soft_inputs(self, seq: MixedSequence) -> list:
        return [self.store.get(s.slot.node, s.slot.key) for s in seq.graph_slots]

    def example(self, sample: NspSample, mask_seed: int) -> TrainingExample:
        seq = self.pair_sequence(sample)
        mr = 0.0 if self.cfg.no_mlm else self.cfg.mr
        plan = plan_masks(seq, mr, mask_seed, self.vocab.size)
        soft = self.soft_inputs(seq)
        seq, soft, slot_targets = apply_mask_plan(seq, plan, soft)
        return TrainingExample(
            seq=seq, label=sample.label, plan=plan, soft_inputs=soft, slot_targets=slot_targets
        )


@dataclass
class TrainResult:
    params: EncoderParams
    metrics: list[dict]
    steps: int


def optimize(
    params: EncoderParams,
    batches: Iterable[Sequence[TrainingExample]],
    cfg: TrainConfig,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Core optimizer loop; logs the loss identity L_total = L_NSP + L_MLM per step."""
    global TRAIN_INVOCATIONS
    TRAIN_INVOCATIONS += 1
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    metrics: list[dict] = []
    last_good = params.copy()
    step = 0
    for batch in batches:
        result = batch_loss_and_grads(
            params, batch, no_nsp=cfg.no_nsp, no_mlm=cfg.no_mlm
        )
        if not math.isfinite(result.loss_total):
            raise TrainingDiverged(step, last_good)
        last_good = params.copy()
        opt.step(params, result.grads)
        step += 1
        entry = {
            "step": step,
            "loss_total": result.loss_total,
            "loss_nsp": result.loss_nsp,
            "loss_mlm": result.loss_mlm,
            "lr": cfg.lr,
        }
        metrics.append(entry)
        if on_step:
            on_step(entry)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return TrainResult(params=params, metrics=metrics, steps=step)


def train(
    graph: HtrnGraph,
    token_store: TokenStore | None,
    cfg: TrainConfig,
    encoder_cfg: EncoderConfig,
    vocab: Vocab,
    metapaths: Sequence[MetaPath],
    templates: TemplateConfig | None = None,
    init: EncoderParams | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Full pretraining: sample pairs per epoch, encode prompts, optimize.

    Negatives are resampled every epoch; with the edge task ablated only the
    positive pairs feed the masked-token objective. Deterministic for a fixed
    config and seed.
    """
    if not cfg.no_graph_token:
        if token_store is None or not token_store.covers(graph, metapaths):
            raise GraphError("token store must cover all nodes (or ablate graph tokens)")
    params = init.copy() if init is not None else init_params(
        encoder_cfg, stable_seed(cfg.seed, "init")
    )
    enc = PromptEncoder(graph, vocab, metapaths, templates, token_store, cfg)

    def batches():
        for epoch in range(cfg.epochs):
            nsr = 0 if cfg.no_nsp else cfg.nsr
            samples = sample_nsp(graph, nsr, seed=stable_seed(cfg.seed, "nsp", epoch))
            order = derived_rng(cfg.seed, "shuffle", epoch).permutation(len(samples))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                yield [
                    enc.example(samples[i], mask_seed=stable_seed(cfg.seed, "mask", epoch, int(i)))
                    for i in idx
                ]

    return optimize(params, batches(), cfg, on_step=on_step)
