"""Small pre-norm transformer encoder over mixed discrete/soft sequences.

Forward and backward are written in plain float64 numpy so every gradient is
exact reverse-mode; the backward pass is validated against central finite
differences. Graph-token slots take externally supplied soft vectors (through
a learned projection when their dimension differs); relation slots read a
learnable per-relation embedding table.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

from .graph import GraphError
from .vocab import NUM_SPECIALS, MixedSequence

INIT_STD = 0.02
LN_EPS = 1e-12
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    num_relations: int
    layers: int = 2
    dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    max_positions: int = 128
    dropout: float = 0.0
    tie_mlm: bool = False
    soft_dim: int | None = None  # graph-token input dim when it differs from dim
    graph_token_masking: bool = False  # adds mask vector + regression head

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise GraphError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise GraphError("dropout must be in [0, 1)")
        if self.vocab_size < NUM_SPECIALS:
            raise GraphError("vocab too small")
        if self.layers < 1 or self.num_relations < 1:
            raise GraphError("need at least one layer and one relation")

    @property
    def soft_input_dim(self) -> int:
        return self.soft_dim if self.soft_dim is not None else self.dim

    @property
    def has_projection(self) -> bool:
        return self.soft_dim is not None and self.soft_dim != self.dim


def param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init kind) table; kind is normal/zeros/ones."""
    d, ff, v = cfg.dim, cfg.ff_dim, cfg.vocab_size
    sd = cfg.soft_input_dim
    out: list[tuple[str, tuple[int, ...], str]] = [
        ("tok_emb", (v, d), "normal"),
        ("pos_emb", (cfg.max_positions, d), "normal"),
        ("seg_emb", (2, d), "normal"),
        ("rel_emb", (cfg.num_relations, d), "normal"),
    ]
    if cfg.has_projection:
        out += [("soft_proj_w", (sd, d), "normal"), ("soft_proj_b", (d,), "zeros")]
    if cfg.graph_token_masking:
        out += [
            ("gt_mask_emb", (sd,), "normal"),
            ("gt_head_w", (d, sd), "normal"),
            ("gt_head_b", (sd,), "zeros"),
        ]
    for i in range(cfg.layers):
        p = f"l{i}."
        out += [
            (p + "ln1.g", (d,), "ones"),
            (p + "ln1.b", (d,), "zeros"),
            (p + "wq", (d, d), "normal"),
            (p + "bq", (d,), "zeros"),
            (p + "wk", (d, d), "normal"),
            (p + "bk", (d,), "zeros"),
            (p + "wv", (d, d), "normal"),
            (p + "bv", (d,), "zeros"),
            (p + "wo", (d, d), "normal"),
            (p + "bo", (d,), "zeros"),
            (p + "ln2.g", (d,), "ones"),
            (p + "ln2.b", (d,), "zeros"),
            (p + "w1", (d, ff), "normal"),
            (p + "b1", (ff,), "zeros"),
            (p + "w2", (ff, d), "normal"),
            (p + "b2", (d,), "zeros"),
        ]
    out += [
        ("final_ln.g", (d,), "ones"),
        ("final_ln.b", (d,), "zeros"),
        ("nsp_w", (d,), "normal"),
        ("nsp_b", (), "zeros"),
    ]
    if not cfg.tie_mlm:
        out.append(("mlm_w", (d, v), "normal"))
    out.append(("mlm_b", (v,), "zeros"))
    return out


class EncoderParams:
    """Named float64 tensors for one encoder; dict-like access by name."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """Scaled-normal weights (std 0.02), zero biases, unit layer-norm scales."""
    from .util import derived_rng

    rng = derived_rng(seed, "encoder-init")
    tensors: dict[str, np.ndarray] = {}
    for name, shape, kind in param_shapes(config):
        if kind == "normal":
            tensors[name] = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "ones":
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return EncoderParams(config, tensors)


def zero_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    dev = x - mu
    var = (dev * dev).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = dev * inv
    return g * xhat + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    return dx, dg, db


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardTrace:
    seq: MixedSequence
    soft_inputs: list  # per graph slot: np vector or None (masked)
    hidden: np.ndarray | None = None  # final per-position states (n, d)
    caches: list = field(repr=False, default_factory=list)
    final_cache: tuple | None = field(repr=False, default=None)
    x_last: np.ndarray | None = field(repr=False, default=None)
    soft_pre: dict = field(repr=False, default_factory=dict)  # position -> input vec

    @property
    def pooled(self) -> np.ndarray:
        return self.hidden[0]

    @property
    def attention_probs(self) -> list[np.ndarray]:
        return [c["probs"] for c in self.caches]


def _dropout(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def forward(
    params: EncoderParams,
    seq: MixedSequence,
    soft_vectors: Sequence[np.ndarray | None] = (),
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Run the encoder over one mixed sequence.

    `soft_vectors` supplies one vector per graph slot, in slot order; None
    stands for a masked slot and reads the learned mask vector. Relation slots
    read the relation embedding table. Dropout applies only when an rng is
    given (training); inference is deterministic.
    """
    cfg = params.config
    n = len(seq)
    if n > cfg.max_positions:
        raise GraphError(f"sequence length {n} exceeds max positions {cfg.max_positions}")
    graph_slots = seq.graph_slots
    soft_vectors = list(soft_vectors)
    if len(soft_vectors) != len(graph_slots):
        raise GraphError(
            f"{len(graph_slots)} graph slots but {len(soft_vectors)} soft vectors"
        )

    sd = cfg.soft_input_dim
    base = np.zeros((n, cfg.dim))
    discrete = seq.ids >= 0
    base[discrete] = params["tok_emb"][seq.ids[discrete]]
    soft_pre = {}  # position -> pre-projection soft input
    gi = 0
    for s in seq.slots:
        if s.slot.kind == "relation":
            base[s.pos] = params["rel_emb"][s.slot.rel]
            continue
        vec = soft_vectors[gi]
        gi += 1
        if vec is None:
            if not cfg.graph_token_masking:
                raise GraphError("masked graph slot without graph_token_masking config")
            pre = params["gt_mask_emb"]
        else:
            pre = np.asarray(vec, dtype=np.float64)
            if pre.shape != (sd,):
                raise GraphError(f"soft vector shape {pre.shape}, expected ({sd},)")
        soft_pre[s.pos] = pre
        if cfg.has_projection:
            base[s.pos] = pre @ params["soft_proj_w"] + params["soft_proj_b"]
        else:
            base[s.pos] = pre

    x = base + params["pos_emb"][:n] + params["seg_emb"][seq.segment_ids]
    trace = ForwardTrace(seq=seq, soft_inputs=soft_vectors, soft_pre=soft_pre)

    H, dk = cfg.heads, cfg.dim // cfg.heads
    scale = 1.0 / np.sqrt(dk)
    for i in range(cfg.layers):
        p = f"l{i}."
        c: dict = {"x_in": x}
        h1, c["ln1"] = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        c["h1"] = h1
        q = h1 @ params[p + "wq"] + params[p + "bq"]
        k = h1 @ params[p + "wk"] + params[p + "bk"]
        v = h1 @ params[p + "wv"] + params[p + "bv"]
        qh = q.reshape(n, H, dk).transpose(1, 0, 2)
        kh = k.reshape(n, H, dk).transpose(1, 0, 2)
        vh = v.reshape(n, H, dk).transpose(1, 0, 2)
        probs = _softmax(qh @ kh.transpose(0, 2, 1) * scale)
        ctx = probs @ vh
        O = ctx.transpose(1, 0, 2).reshape(n, cfg.dim)
        attn_out = O @ params[p + "wo"] + params[p + "bo"]
        attn_out, c["drop1"] = _dropout(attn_out, cfg.dropout, rng)
        c.update(qh=qh, kh=kh, vh=vh, probs=probs, O=O)
        x = x + attn_out

        c["x_mid"] = x
        h2, c["ln2"] = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        z1 = h2 @ params[p + "w1"] + params[p + "b1"]
        a1 = _gelu(z1)
        ffn_out = a1 @ params[p + "w2"] + params[p + "b2"]
        ffn_out, c["drop2"] = _dropout(ffn_out, cfg.dropout, rng)
        c.update(h2=h2, z1=z1, a1=a1)
        x = x + ffn_out
        trace.caches.append(c)

    trace.x_last = x
    trace.hidden, trace.final_cache = _layer_norm(
        x, params["final_ln.g"], params["final_ln.b"]
    )
    return trace


def backward(
    params: EncoderParams,
    trace: ForwardTrace,
    d_hidden: np.ndarray,
    grads: dict[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], list[np.ndarray | None]]:
    """Exact gradients w.r.t. every parameter plus the supplied soft vectors.

    Accumulates into `grads` in place when given (batch use); returns the grad
    dict and one gradient (or None for masked slots) per graph slot.
    """
    cfg = params.config
    seq = trace.seq
    n = len(seq)
    if d_hidden.shape != trace.hidden.shape:
        raise GraphError(f"d_hidden shape {d_hidden.shape} != {trace.hidden.shape}")
    if grads is None:
        grads = zero_grads(params)

    dx, dg, db = _layer_norm_backward(d_hidden, params["final_ln.g"], trace.final_cache)
    grads["final_ln.g"] += dg
    grads["final_ln.b"] += db

    H, dk = cfg.heads, cfg.dim // cfg.heads
    scale = 1.0 / np.sqrt(dk)
    for i in range(cfg.layers - 1, -1, -1):
        p = f"l{i}."
        c = trace.caches[i]

        d_ffn = dx if c["drop2"] is None else dx * c["drop2"]
        grads[p + "w2"] += c["a1"].T @ d_ffn
        grads[p + "b2"] += d_ffn.sum(axis=0)
        d_a1 = d_ffn @ params[p + "w2"].T
        d_z1 = d_a1 * _gelu_grad(c["z1"])
        grads[p + "w1"] += c["h2"].T @ d_z1
        grads[p + "b1"] += d_z1.sum(axis=0)
        d_h2 = d_z1 @ params[p + "w1"].T
        d_mid, dg, db = _layer_norm_backward(d_h2, params[p + "ln2.g"], c["ln2"])
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        dx = dx + d_mid

        d_attn = dx if c["drop1"] is None else dx * c["drop1"]
        grads[p + "wo"] += c["O"].T @ d_attn
        grads[p + "bo"] += d_attn.sum(axis=0)
        d_O = d_attn @ params[p + "wo"].T
        d_ctx = d_O.reshape(n, H, dk).transpose(1, 0, 2)
        d_probs = d_ctx @ c["vh"].transpose(0, 2, 1)
        d_vh = c["probs"].transpose(0, 2, 1) @ d_ctx
        d_scores = c["probs"] * (
            d_probs - (d_probs * c["probs"]).sum(axis=-1, keepdims=True)
        )
        d_qh = d_scores @ c["kh"] * scale
        d_kh = d_scores.transpose(0, 2, 1) @ c["qh"] * scale
        d_q = d_qh.transpose(1, 0, 2).reshape(n, cfg.dim)
        d_k = d_kh.transpose(1, 0, 2).reshape(n, cfg.dim)
        d_v = d_vh.transpose(1, 0, 2).reshape(n, cfg.dim)
        grads[p + "wq"] += c["h1"].T @ d_q
        grads[p + "bq"] += d_q.sum(axis=0)
        grads[p + "wk"] += c["h1"].T @ d_k
        grads[p + "bk"] += d_k.sum(axis=0)
        grads[p + "wv"] += c["h1"].T @ d_v
        grads[p + "bv"] += d_v.sum(axis=0)
        d_h1 = d_q @ params[p + "wq"].T + d_k @ params[p + "wk"].T + d_v @ params[p + "wv"].T
        d_in, dg, db = _layer_norm_backward(d_h1, params[p + "ln1.g"], c["ln1"])
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dx = dx + d_in

    # Embedding composition: x0 = base + pos + seg.
    grads["pos_emb"][:n] += dx
    np.add.at(grads["seg_emb"], seq.segment_ids, dx)
    discrete = seq.ids >= 0
    np.add.at(grads["tok_emb"], seq.ids[discrete], dx[discrete])

    soft_grads: list[np.ndarray | None] = []
    gi = 0
    for s in seq.slots:
        if s.slot.kind == "relation":
            grads["rel_emb"][s.slot.rel] += dx[s.pos]
            continue
        vec = trace.soft_inputs[gi]
        gi += 1
        d_pos = dx[s.pos]
        pre = trace.soft_pre[s.pos]
        if cfg.has_projection:
            grads["soft_proj_w"] += np.outer(pre, d_pos)
            grads["soft_proj_b"] += d_pos
            d_pre = d_pos @ params["soft_proj_w"].T
        else:
            d_pre = d_pos
        if vec is None:
            grads["gt_mask_emb"] += d_pre
            soft_grads.append(None)
        else:
            soft_grads.append(d_pre)
    return grads, soft_grads


def nsp_logit(trace: ForwardTrace, params: EncoderParams) -> float:
    """Edge-validity logit read from the pooled CLS state."""
    return float(trace.pooled @ params["nsp_w"] + params["nsp_b"])


def nsp_backward(trace, params, d_logit, grads, d_hidden) -> None:
    grads["nsp_w"] += d_logit * trace.pooled
    grads["nsp_b"] += d_logit
    d_hidden[0] += d_logit * params["nsp_w"]


def _mlm_weight(params: EncoderParams) -> np.ndarray:
    if params.config.tie_mlm:
        return params["tok_emb"].T
    return params["mlm_w"]


def mlm_logits(
    trace: ForwardTrace, positions: Sequence[int], params: EncoderParams
) -> np.ndarray:
    """Vocabulary scores at the given positions; softmax-normalized downstream."""
    n = len(trace.seq)
    pos = np.asarray(list(positions), dtype=np.int64)
    if pos.size and (pos.min() < 0 or pos.max() >= n):
        raise GraphError(f"mlm position out of range for length-{n} sequence")
    return trace.hidden[pos] @ _mlm_weight(params) + params["mlm_b"]


def mlm_backward(trace, params, positions, d_logits, grads, d_hidden) -> None:
    pos = np.asarray(list(positions), dtype=np.int64)
    h = trace.hidden[pos]
    if params.config.tie_mlm:
        grads["tok_emb"] += (h.T @ d_logits).T
    else:
        grads["mlm_w"] += h.T @ d_logits
    grads["mlm_b"] += d_logits.sum(axis=0)
    w = _mlm_weight(params)
    np.add.at(d_hidden, pos, d_logits @ w.T)


def gt_head_predict(trace: ForwardTrace, params: EncoderParams, pos: int) -> np.ndarray:
    return trace.hidden[pos] @ params["gt_head_w"] + params["gt_head_b"]


def gt_head_backward(trace, params, pos, d_pred, grads, d_hidden) -> None:
    grads["gt_head_w"] += np.outer(trace.hidden[pos], d_pred)
    grads["gt_head_b"] += d_pred
    d_hidden[pos] += d_pred @ params["gt_head_w"].T


def pool_hidden(trace: ForwardTrace, pooling: str) -> np.ndarray:
    """cls: row 0 of the final hidden states; mean: over non-special positions."""
    if pooling == "cls":
        return trace.hidden[0].copy()
    if pooling == "mean":
        ids = trace.seq.ids
        content = (ids < 0) | (ids >= NUM_SPECIALS)
        if not content.any():
            content = np.ones_like(content)
        return trace.hidden[content].mean(axis=0)
    raise GraphError(f"unknown pooling {pooling!r}")


# --- checkpoint container: deterministic bytes, bit-exact round trip ---

CKPT_MAGIC = "htrnembed-ckpt"


def checkpoint_bytes(params: EncoderParams) -> bytes:
    entries = []
    offset = 0
    blobs = []
    for name in params.names():
        original = params[name]
        arr = np.ascontiguousarray(original, dtype="<f8")  # promotes 0-d to 1-d
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": "<f8", "shape": list(original.shape), "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "format": CKPT_MAGIC,
            "version": 1,
            "config": asdict(params.config),
            "tensors": entries,
        },
        sort_keys=True,
    )
    buf = io.BytesIO()
    buf.write(header.encode("utf-8"))
    buf.write(b"\n")
    for raw in blobs:
        buf.write(raw)
    return buf.getvalue()


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> EncoderParams:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode("utf-8"))
    if header.get("format") != CKPT_MAGIC:
        raise GraphError(f"{path}: not a checkpoint file")
    cfg = EncoderConfig(**header["config"])
    body = data[nl + 1 :]
    tensors: dict[str, np.ndarray] = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            body, dtype=e["dtype"], count=count, offset=e["offset"]
        ).reshape(shape)
        tensors[e["name"]] = arr.astype(np.float64).copy()
    return EncoderParams(cfg, tensors)


def params_hash(params: EncoderParams) -> str:
    from .util import sha256_bytes

    return sha256_bytes(checkpoint_bytes(params))
