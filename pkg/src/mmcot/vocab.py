"""Unified token vocabulary: specials, a contiguous visual block, and a
closed word-level text range.

Layout (low to high): PAD=0, BOS=1, EOS=2, SEP=3, K visual IDs starting at 4,
then EOI, then BOI, then one ID per word. At K=8192 this puts the visual IDs
at 4..8195, EOI at 8196 and BOI at 8197.
"""
from __future__ import annotations

from dataclasses import dataclass, field

# Every word any template in this package can emit. Order is the token order;
# append-only to keep existing ID assignments stable.
WORD_LIST = (
    # articles / glue
    "a", "an", "and", "the", "then", "is", "are", "not", "it", "there", "all", "at", "to", "of",
    # template markers
    "plan", "next", "final", "now", "done",
    # colors
    "red", "blue", "green", "yellow", "orange", "purple", "cyan", "white",
    # shapes, singular and plural
    "circle", "square", "triangle", "cross",
    "circles", "squares", "triangles", "crosses",
    # counts
    "one", "two", "three", "four",
    # relations
    "left", "right", "above", "below",
    # critique / filtering
    "image", "matches", "prompt", "should", "be", "missing", "add", "extra",
    "remove", "move", "object", "blurry", "wrong", "color",
)

PAD, BOS, EOS, SEP = 0, 1, 2, 3
VIS_LO = 4


class VocabError(ValueError):
    pass


class OutOfVocabularyError(VocabError):
    pass


@dataclass(frozen=True)
class UnifiedVocab:
    num_visual: int
    words: tuple[str, ...] = WORD_LIST

    pad: int = PAD
    bos: int = BOS
    eos: int = EOS
    sep: int = SEP
    vis_lo: int = VIS_LO

    _word_to_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_visual < 1:
            raise VocabError("need at least one visual token")
        if len(set(self.words)) != len(self.words):
            raise VocabError("duplicate words in word list")
        object.__setattr__(
            self, "_word_to_id", {w: self.text_lo + i for i, w in enumerate(self.words)}
        )

    @property
    def eoi(self) -> int:
        return self.vis_lo + self.num_visual

    @property
    def boi(self) -> int:
        return self.eoi + 1

    @property
    def text_lo(self) -> int:
        return self.boi + 1

    @property
    def size(self) -> int:
        return self.text_lo + len(self.words)

    def is_visual(self, token_id: int) -> bool:
        return self.vis_lo <= token_id < self.vis_lo + self.num_visual

    def is_text(self, token_id: int) -> bool:
        return self.text_lo <= token_id < self.size

    def is_special(self, token_id: int) -> bool:
        return token_id in (self.pad, self.bos, self.eos, self.sep, self.eoi, self.boi)

    def classify(self, token_id: int) -> str:
        """Total, exclusive classification of every ID below size."""
        if not (0 <= token_id < self.size):
            raise VocabError(f"token id {token_id} outside vocabulary of size {self.size}")
        if self.is_special(token_id):
            return "special"
        if self.is_visual(token_id):
            return "visual"
        return "text"

    def visual_token(self, codebook_index: int) -> int:
        if not (0 <= codebook_index < self.num_visual):
            raise VocabError(f"codebook index {codebook_index} out of range")
        return self.vis_lo + codebook_index

    def codebook_index(self, token_id: int) -> int:
        if not self.is_visual(token_id):
            raise VocabError(f"token id {token_id} is not visual")
        return token_id - self.vis_lo

    def word_id(self, word: str) -> int:
        try:
            return self._word_to_id[word]
        except KeyError:
            raise OutOfVocabularyError(f"word {word!r} not in vocabulary") from None

    def tokenize(self, text: str) -> list[int]:
        """Word-level bijection over whitespace-separated closed-list words."""
        return [self.word_id(w) for w in text.split()]

    def detokenize(self, ids) -> str:
        words = []
        for t in ids:
            if not self.is_text(t):
                raise VocabError(f"token id {t} is not a text token")
            words.append(self.words[t - self.text_lo])
        return " ".join(words)


def default_vocab(num_visual: int = 9) -> UnifiedVocab:
    return UnifiedVocab(num_visual=num_visual)
