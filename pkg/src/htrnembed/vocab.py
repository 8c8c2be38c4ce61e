"""Word-level vocabulary and encoding of prompt text into mixed sequences.

A MixedSequence interleaves discrete token ids with soft-vector slots (graph
tokens and relation tokens) and carries the segment ids and maskable flags the
pretraining objectives need. A subword tokenizer would be a drop-in behind the
same Vocab interface.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .graph import GraphError
from .textualize import PromptText, SlotRef, verify_markers

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIALS = len(SPECIAL_TOKENS)
UNK_RENDER = "⟨unk⟩"

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str, lowercase: bool = True) -> list[str]:
    """Whitespace/punctuation-split word tokens."""
    if lowercase:
        text = text.lower()
    return _WORD_RE.findall(text)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    lowercase: bool = True

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        if len(self._index) != len(self.tokens):
            raise GraphError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def token_to_id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode_text(self, text: str) -> list[int]:
        return [self.token_to_id(t) for t in tokenize(text, self.lowercase)]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, tok in enumerate(self.tokens):
                f.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path, lowercase: bool = True) -> "Vocab":
        toks: list[str] = []
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f):
                tok, _, idx = line.rstrip("\n").partition("\t")
                if int(idx) != lineno:
                    raise GraphError(f"{path}:{lineno + 1}: non-dense vocab ids")
                toks.append(tok)
        return cls(tokens=tuple(toks), lowercase=lowercase)


def build_vocab(
    corpus: Iterable[str],
    min_freq: int = 1,
    max_size: int | None = None,
    lowercase: bool = True,
) -> Vocab:
    """Frequency-ranked vocabulary over the corpus, specials prepended.

    Ties at equal frequency break lexicographically; `max_size` counts the
    five specials. Out-of-vocabulary tokens map to UNK at encode time.
    """
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(tokenize(text, lowercase))
    if n_texts == 0:
        raise GraphError("empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    if max_size is not None:
        if max_size < NUM_SPECIALS:
            raise GraphError(f"max_size must be at least {NUM_SPECIALS}")
        kept = kept[: max_size - NUM_SPECIALS]
    return Vocab(tokens=SPECIAL_TOKENS + tuple(kept), lowercase=lowercase)


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    """Inverse of tokenization up to case/whitespace normalization."""
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < vocab.size:
            raise GraphError(f"token id {i} out of range for vocab of size {vocab.size}")
        out.append(UNK_RENDER if i == UNK else vocab.tokens[i])
    return " ".join(out)


@dataclass(frozen=True)
class SeqSlot:
    pos: int
    slot: SlotRef


@dataclass(frozen=True)
class MixedSequence:
    """Encoded prompt: token ids with -1 at soft-slot positions.

    Element 0 is CLS; a SEP closes each segment. `maskable` is True exactly
    for ordinary discrete tokens (plus graph slots when configured).
    """

    ids: np.ndarray  # int64, -1 where a soft slot sits
    segment_ids: np.ndarray  # int64, 0/1
    maskable: np.ndarray  # bool
    slots: tuple[SeqSlot, ...]

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def graph_slots(self) -> tuple[SeqSlot, ...]:
        return tuple(s for s in self.slots if s.slot.kind == "graph")

    def with_ids(self, ids: np.ndarray) -> "MixedSequence":
        return replace(self, ids=ids)


def encode_prompt(
    prompt: PromptText,
    vocab: Vocab,
    max_len: int = 128,
    mask_graph_tokens: bool = False,
) -> MixedSequence:
    """Encode a prompt into CLS + segment(s) + SEP structure under max_len.

    Over-length sequences drop node-text tokens first (tail-first), then
    template tokens; specials and soft slots always survive. Raises if the
    slots and specials alone cannot fit.
    """
    verify_markers(prompt)
    if len(prompt.segments) > 2:
        raise GraphError("at most two segments supported")

    # element: (id, segment, maskable, droppable_priority, slot_or_None)
    elements: list[tuple[int, int, bool, int, SlotRef | None]] = []
    elements.append((CLS, 0, False, 0, None))
    for seg_idx, seg in enumerate(prompt.segments):
        for piece in seg:
            if piece.kind == "slot":
                elements.append((-1, seg_idx, False, 0, piece.slot))
            else:
                prio = 2 if piece.origin == "text" else 1
                for tok in tokenize(piece.text, vocab.lowercase):
                    elements.append((vocab.token_to_id(tok), seg_idx, True, prio, None))
        elements.append((SEP, seg_idx, False, 0, None))

    overflow = len(elements) - max_len
    if overflow > 0:
        drop: set[int] = set()
        for prio in (2, 1):
            for i in range(len(elements) - 1, -1, -1):
                if overflow <= 0:
                    break
                if elements[i][3] == prio:
                    drop.add(i)
                    overflow -= 1
        if overflow > 0:
            raise GraphError(
                f"prompt needs {len(elements) - len(drop)} slots/specials, "
                f"max_len is {max_len}"
            )
        elements = [e for i, e in enumerate(elements) if i not in drop]

    ids = np.array([e[0] for e in elements], dtype=np.int64)
    segments = np.array([e[1] for e in elements], dtype=np.int64)
    maskable = np.array([e[2] for e in elements], dtype=bool)
    slots = tuple(
        SeqSlot(pos=i, slot=e[4]) for i, e in enumerate(elements) if e[4] is not None
    )
    if mask_graph_tokens:
        for s in slots:
            if s.slot.kind == "graph":
                maskable[s.pos] = True
    return MixedSequence(ids=ids, segment_ids=segments, maskable=maskable, slots=slots)
