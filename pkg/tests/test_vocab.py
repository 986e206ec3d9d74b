import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcot import vocab as V
from mmcot.vocab import UnifiedVocab, default_vocab


class TestLayout:
    def test_default_layout(self):
        v = default_vocab(num_visual=9)
        assert (v.pad, v.bos, v.eos, v.sep) == (0, 1, 2, 3)
        assert v.vis_lo == 4
        assert v.eoi == 13
        assert v.boi == 14
        assert v.text_lo == 15
        assert v.size == 15 + len(V.WORD_LIST)

    def test_paper_scale_ids(self):
        v = UnifiedVocab(num_visual=8192)
        assert v.vis_lo == 4
        assert v.vis_lo + v.num_visual - 1 == 8195
        assert v.eoi == 8196
        assert v.boi == 8197

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=1, max_value=512))
    def test_classification_total_exclusive(self, k):
        v = UnifiedVocab(num_visual=k)
        counts = {"special": 0, "visual": 0, "text": 0}
        for t in range(v.size):
            counts[v.classify(t)] += 1
        assert counts["special"] == 6
        assert counts["visual"] == k
        assert counts["text"] == len(V.WORD_LIST)

    def test_classify_out_of_range(self):
        v = default_vocab()
        with pytest.raises(V.VocabError):
            v.classify(v.size)


class TestTokenize:
    def test_empty(self):
        assert default_vocab().tokenize("") == []

    def test_round_trip(self):
        v = default_vocab()
        ids = v.tokenize("a red square")
        assert len(ids) == 3
        assert v.detokenize(ids) == "a red square"

    def test_oov(self):
        with pytest.raises(V.OutOfVocabularyError):
            default_vocab().tokenize("xylophone")

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from(V.WORD_LIST), min_size=0, max_size=20))
    def test_bijection(self, words):
        v = default_vocab()
        text = " ".join(words)
        assert v.detokenize(v.tokenize(text)) == text

    def test_visual_round_trip(self):
        v = default_vocab(num_visual=9)
        for i in range(9):
            assert v.codebook_index(v.visual_token(i)) == i
