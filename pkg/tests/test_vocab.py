import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htrnembed.graph import GraphError
from htrnembed.textualize import graph_aware_prompt, relation_aware_prompt
from htrnembed.vocab import (
    CLS,
    MASK,
    NUM_SPECIALS,
    PAD,
    SEP,
    SPECIAL_TOKENS,
    UNK,
    Vocab,
    build_vocab,
    decode,
    encode_prompt,
    tokenize,
)

from conftest import dblp_metapaths, make_graph


class TestBuildVocab:
    def test_min_freq_filters(self):
        v = build_vocab(["a a b"], min_freq=2)
        assert v.tokens == SPECIAL_TOKENS + ("a",)
        assert v.token_to_id("b") == UNK

    def test_max_size_five_means_specials_only(self):
        v = build_vocab(["many different words here"], max_size=5)
        assert v.tokens == SPECIAL_TOKENS
        assert all(v.token_to_id(t) == UNK for t in ["many", "different", "words"])

    def test_frequency_then_lexicographic_ties(self):
        corpus = ["b b b c c a a zz zz"]
        v = build_vocab(corpus)
        counts = {"b": 3, "c": 2, "a": 2, "zz": 2}
        # independent sort oracle
        expected = sorted(counts, key=lambda t: (-counts[t], t))
        assert list(v.tokens[NUM_SPECIALS:]) == expected

    def test_empty_corpus_errors(self):
        with pytest.raises(GraphError, match="empty corpus"):
            build_vocab([])

    def test_specials_fixed_ids(self):
        assert (PAD, UNK, CLS, SEP, MASK) == (0, 1, 2, 3, 4)

    def test_save_load_round_trip(self, tmp_path):
        v = build_vocab(["alpha beta alpha gamma"])
        v.save(tmp_path / "v.tsv")
        v2 = Vocab.load(tmp_path / "v.tsv")
        assert v2.tokens == v.tokens


class TestDecode:
    def test_round_trip_in_vocab(self):
        v = build_vocab(["the quick brown fox"])
        text = "the quick fox"
        ids = v.encode_text(text)
        assert decode(ids, v) == text

    def test_unk_renders_brackets(self):
        v = build_vocab(["known words"])
        ids = v.encode_text("known mystery")
        assert decode(ids, v) == "known ⟨unk⟩"

    def test_out_of_range_errors(self):
        v = build_vocab(["a"])
        with pytest.raises(GraphError, match="out of range"):
            decode([v.size], v)

    @settings(max_examples=50, deadline=None)
    @given(st.text(alphabet=st.characters(codec="ascii"), max_size=60))
    def test_round_trip_preserves_in_vocab_token_multiset(self, text):
        v = build_vocab(["alpha beta gamma delta 123"])
        ids = v.encode_text(text)
        decoded_tokens = decode(ids, v).split()
        original = tokenize(text)
        expected = [t if v.token_to_id(t) != UNK else "⟨unk⟩" for t in original]
        assert sorted(decoded_tokens) == sorted(expected)


@pytest.fixture
def pair_prompt(dblp_schema, templates):
    g = make_graph(
        dblp_schema,
        [("u", "P", "alpha beta gamma"), ("v", "P", "delta epsilon"), ("a", "A", "zeta")],
        [("u", "a", "PA"), ("u", "v", "PP")],
    )
    mps = dblp_metapaths(dblp_schema)[:2]  # PA, PAP
    entries = {"PA": 1, "PAP": 1}
    fu = graph_aware_prompt(0, entries, mps, g, templates)
    fv = graph_aware_prompt(1, entries, mps, g, templates)
    h = relation_aware_prompt(fu, 0, fv, g)
    corpus = [g.node_text[i] for i in range(3)] + [fu.text, fv.text]
    vocab = build_vocab(corpus)
    return h, vocab


class TestEncodePrompt:
    def test_slot_count_matches_manifest(self, pair_prompt):
        h, vocab = pair_prompt
        seq = encode_prompt(h, vocab, max_len=128)
        assert len(seq.slots) == len(h.manifest) == 5  # 2 GT per side + 1 RT
        kinds = [s.slot.kind for s in seq.slots]
        assert kinds.count("graph") == 4 and kinds.count("relation") == 1

    def test_structure_cls_sep_segments(self, pair_prompt):
        h, vocab = pair_prompt
        seq = encode_prompt(h, vocab, max_len=128)
        assert seq.ids[0] == CLS
        assert seq.ids[-1] == SEP
        seps = np.flatnonzero(seq.ids == SEP)
        assert len(seps) == 2
        # segments are two contiguous runs split at the first SEP
        first_sep = seps[0]
        assert set(seq.segment_ids[: first_sep + 1].tolist()) == {0}
        assert set(seq.segment_ids[first_sep + 1 :].tolist()) == {1}

    def test_truncation_preserves_specials_and_slots(self, pair_prompt):
        h, vocab = pair_prompt
        seq = encode_prompt(h, vocab, max_len=10)
        assert len(seq) == 10
        assert len(seq.slots) == 5
        assert seq.ids[0] == CLS and (seq.ids == SEP).sum() == 2

    def test_truncation_below_structural_floor_errors(self, pair_prompt):
        h, vocab = pair_prompt
        with pytest.raises(GraphError, match="max_len"):
            encode_prompt(h, vocab, max_len=6)

    def test_single_node_prompt_all_segment_zero(self, dblp_schema, templates):
        g = make_graph(dblp_schema, [("u", "P", "alpha beta")], [])
        mps = dblp_metapaths(dblp_schema)[:1]
        p = graph_aware_prompt(0, {"PA": 1}, mps, g, templates)
        vocab = build_vocab([p.text])
        seq = encode_prompt(p, vocab, max_len=64)
        assert set(seq.segment_ids.tolist()) == {0}
        assert (seq.ids == SEP).sum() == 1

    def test_maskable_flags(self, pair_prompt):
        h, vocab = pair_prompt
        seq = encode_prompt(h, vocab, max_len=128)
        for i in range(len(seq)):
            if seq.ids[i] in (PAD, CLS, SEP, MASK) and seq.ids[i] >= 0:
                assert not seq.maskable[i]
        for s in seq.slots:
            assert not seq.maskable[s.pos]
        assert seq.maskable.sum() > 0

    def test_graph_slots_maskable_only_when_configured(self, pair_prompt):
        h, vocab = pair_prompt
        seq = encode_prompt(h, vocab, max_len=128, mask_graph_tokens=True)
        for s in seq.slots:
            expected = s.slot.kind == "graph"
            assert bool(seq.maskable[s.pos]) is expected

    def test_max_len_respected_on_long_text(self, dblp_schema, templates):
        long_text = " ".join(f"w{i}" for i in range(600))
        g = make_graph(dblp_schema, [("u", "P", long_text)], [])
        p = graph_aware_prompt(0, None, [], g, templates)
        vocab = build_vocab([long_text])
        seq = encode_prompt(p, vocab, max_len=512)
        assert len(seq) == 512

    def test_text_tokens_dropped_before_template_tokens(self, dblp_schema, templates):
        g = make_graph(dblp_schema, [("u", "P", "aaa bbb ccc ddd eee")], [])
        mps = dblp_metapaths(dblp_schema)[:1]
        p = graph_aware_prompt(0, {"PA": 1}, mps, g, templates)
        vocab = build_vocab([p.text])
        full = encode_prompt(p, vocab, max_len=128)
        # shrink by 3: exactly the tail of the node text must vanish first
        seq = encode_prompt(p, vocab, max_len=len(full) - 3)
        kept = [vocab.tokens[i] for i in seq.ids if i >= NUM_SPECIALS]
        assert "bbb" in kept and "ddd" not in kept and "eee" not in kept
        assert "summarized" in kept  # template words survive
