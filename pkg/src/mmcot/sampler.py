"""Constrained autoregressive decoding with multi-condition classifier-free
guidance.

A modality state machine guarantees that every decoded sequence parses under
the requested trace grammar: text states admit only word tokens (plus BOI
where an image may start), image states admit only visual tokens with EOI
forced after exactly T of them, and a token budget shrinks the admissible set
toward the cheapest grammar completion so hitting the length cap mid-trace is
impossible whenever the cap allows any complete trace at all.

Guidance combines per-condition next-token logits as a weighted sum:

    l = l_u + s_full*(l_full - l_u) + s_img*(l_img - l_u)
          + s_prompt*(l_prompt - l_u) + s_neg*(l_u - l_neg)

computed in coefficient form so conditions with a zero coefficient are never
evaluated (scales (1,0,0,0) therefore reproduce plain conditional logits
bit-exactly). Condition contexts differ only in their prefix: full sees the
prompt plus the whole emitted history, image sees previously completed image
spans with text stripped, prompt sees just the prompt, negative a fixed
negative text, uncond nothing; while an image block is open, all conditions
share it as a suffix so their logits stay comparable position by position.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .model import TinyMultimodalLM
from .traces import (
    IMAGE_KINDS,
    MODE_CRITIQUE,
    MODE_DIRECT,
    MODE_SUBGOAL,
    SegmentKind,
    ThoughtTrace,
    parse_sequence,
)
from .vocab import UnifiedVocab

DEFAULT_NEGATIVE_TEXT = "blurry wrong color missing object"
FINAL_MARKER_WORD = "final"

CONDITIONS = ("full", "image", "negative", "prompt", "uncond")


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class CfgScales:
    full: float = 1.0
    image: float = 0.0
    negative: float = 0.0
    prompt: float = 0.0

    def __post_init__(self):
        for name in ("full", "image", "negative", "prompt"):
            if not np.isfinite(getattr(self, name)):
                raise SamplerError(f"scale {name} must be finite")

    def as_tuple(self):
        return (self.full, self.image, self.negative, self.prompt)


PRESETS = {
    "subgoal-images": CfgScales(full=5.0, image=0.0, negative=3.0, prompt=0.0),
    "subgoal-final": CfgScales(full=2.0, image=1.2, negative=3.0, prompt=5.0),
    "critique": CfgScales(full=1.5, image=0.8, negative=3.0, prompt=5.0),
    "conditional": CfgScales(full=1.0, image=0.0, negative=0.0, prompt=0.0),
}


def coefficients(scales: CfgScales) -> dict[str, float]:
    """Per-condition weights of the guidance sum; zero means 'not evaluated'."""
    return {
        "full": scales.full,
        "image": scales.image,
        "prompt": scales.prompt,
        "negative": -scales.negative,
        "uncond": 1.0 - scales.full - scales.image - scales.prompt + scales.negative,
    }


def active_conditions(scales: CfgScales) -> tuple[str, ...]:
    return tuple(c for c in CONDITIONS if coefficients(scales)[c] != 0.0)


def cfg_combine(logit_sets: dict[str, np.ndarray], scales: CfgScales) -> np.ndarray:
    """Weighted combination of per-condition logits."""
    coefs = coefficients(scales)
    out = None
    length = None
    for cond in CONDITIONS:
        c = coefs[cond]
        if c == 0.0:
            continue
        if cond not in logit_sets:
            raise SamplerError(f"missing logits for active condition {cond!r}")
        arr = np.asarray(logit_sets[cond])
        if length is None:
            length = arr.shape
        elif arr.shape != length:
            raise SamplerError("condition logit vectors differ in length")
        term = c * arr
        out = term if out is None else out + term
    assert out is not None  # uncond coefficient is 1 when all scales are 0
    return out


@dataclass(frozen=True)
class DecodeSchedule:
    """Scales per decode phase: 'thinking' covers text and non-final images,
    'final' the grammar-determined final image."""

    thinking: CfgScales
    final: CfgScales
    guide_text: bool = True

    def for_phase(self, phase: str) -> CfgScales:
        if phase == "final":
            return self.final
        if not self.guide_text and phase == "text":
            return PRESETS["conditional"]
        return self.thinking

    def conditions(self) -> tuple[str, ...]:
        used = set(active_conditions(self.thinking)) | set(active_conditions(self.final))
        if not self.guide_text:
            used |= set(active_conditions(PRESETS["conditional"]))
        return tuple(c for c in CONDITIONS if c in used)


def default_schedule(mode: str) -> DecodeSchedule:
    if mode == MODE_SUBGOAL:
        return DecodeSchedule(thinking=PRESETS["subgoal-images"], final=PRESETS["subgoal-final"])
    if mode == MODE_CRITIQUE:
        return DecodeSchedule(thinking=PRESETS["critique"], final=PRESETS["critique"])
    if mode == MODE_DIRECT:
        return DecodeSchedule(thinking=PRESETS["conditional"], final=PRESETS["conditional"])
    raise SamplerError(f"unknown mode {mode!r}")


def uniform_schedule(scales: CfgScales) -> DecodeSchedule:
    return DecodeSchedule(thinking=scales, final=scales)


@dataclass(frozen=True)
class SampleParams:
    temperature: float = 1.0
    top_k: int | None = None
    seed: int = 0


def default_length_cap(block_len: int) -> int:
    return 8 * (block_len + 2) + 128


# ---------------------------------------------------------------------------
# Grammar state machine


class GrammarState:
    """Tracks trace grammar, the open segment, and the remaining token budget.

    States: planning / reflection / critique_text (text), pre_image,
    in_image, post_final, done. completion_cost() is the exact number of
    tokens on the cheapest path to a grammar-complete EOS, and allowed token
    sets never admit a move that would push that cost past the budget.
    """

    def __init__(self, mode: str, block_len: int, vocab: UnifiedVocab, budget: int):
        if mode not in (MODE_SUBGOAL, MODE_CRITIQUE, MODE_DIRECT):
            raise SamplerError(f"unknown mode {mode!r}")
        self.mode = mode
        self.T = block_len
        self.vocab = vocab
        self.budget = budget
        self.marker_id = vocab.word_id(FINAL_MARKER_WORD)
        self.images = 0
        self.text_len = 0
        self.marker = False
        self.image_remaining = 0
        self.image_is_final = False
        self.done = False
        self.state = "planning" if mode == MODE_SUBGOAL else "pre_image"

    # -- cost bookkeeping --

    def _cost_text_min(self) -> int:
        """Cheapest completion from the start of the current text-ish state."""
        t = self.T
        if self.state == "planning":
            extra = 1 if self.text_len == 0 else 0
            return extra + (t + 2) + (t + 4)
        if self.state == "critique_text":
            extra = 1 if self.text_len == 0 else 0
            return extra + (t + 2) + 1
        if self.state == "reflection":
            if self.marker:
                return (t + 2) + 1
            return 1 + (t + 2) + 1
        raise SamplerError(f"not a text state: {self.state}")

    def completion_cost(self) -> int:
        t = self.T
        if self.done:
            return 0
        if self.state == "post_final":
            return 1
        if self.state == "pre_image":
            if self.mode == MODE_DIRECT:
                return (t + 2) + 1
            # critique hypothesis image comes first
            return (t + 2) + (1 + (t + 2) + 1)
        if self.state == "in_image":
            after_eoi = 1 if self.image_is_final else self._cost_after_nonfinal_image()
            return self.image_remaining + 1 + after_eoi
        return self._cost_text_min()

    def _cost_after_nonfinal_image(self) -> int:
        t = self.T
        if self.mode == MODE_CRITIQUE:
            return 1 + (t + 2) + 1  # critique text, final image, EOS
        return 1 + (t + 2) + 1  # reflection with marker, final image, EOS

    # -- admissible moves --

    def allowed_tokens(self) -> np.ndarray:
        """Boolean mask over the vocabulary of tokens admissible right now."""
        v = self.vocab
        mask = np.zeros(v.size, dtype=bool)
        b = self.budget
        if self.done:
            return mask
        if self.state == "post_final":
            mask[v.eos] = True
            return mask
        if self.state == "pre_image":
            mask[v.boi] = True
            return mask
        if self.state == "in_image":
            if self.image_remaining == 0:
                mask[v.eoi] = True
            else:
                mask[v.vis_lo : v.vis_lo + v.num_visual] = True
            return mask
        # text states
        base = self._cost_text_min()
        stay_cost = {  # cost after emitting one more plain text token
            "planning": self.T * 2 + 6,
            "critique_text": self.T + 3,
            "reflection": (self.T + 3) if self.marker else (self.T + 4),
        }[self.state]
        if stay_cost <= b - 1:
            mask[v.text_lo : v.size] = True
        elif self.state == "reflection" and not self.marker and (self.T + 3) <= b - 1:
            # only the final marker keeps completion affordable
            mask[self.marker_id] = True
        if self.text_len >= 1:
            if self.state == "planning":
                boi_cost = 2 * self.T + 5  # a non-final subgoal image must follow
            elif self.state == "critique_text":
                boi_cost = self.T + 2
            else:
                boi_cost = (self.T + 2) if self.marker else (2 * self.T + 5)
            if boi_cost <= b - 1:
                mask[v.boi] = True
        if not mask.any():
            raise SamplerError(
                f"no admissible token in state {self.state} with budget {b}"
            )
        return mask

    @property
    def phase(self) -> str:
        if self.state == "in_image" and self.image_is_final:
            return "final"
        if self.state in ("planning", "reflection", "critique_text"):
            return "text"
        if self.state == "pre_image" and self.mode == MODE_DIRECT:
            return "final"
        return "thinking"

    def on_token(self, token: int) -> dict:
        """Advance the machine; returns span-boundary events for the decoder."""
        v = self.vocab
        events = {"begin_span": False, "end_span": False}
        if self.done:
            raise SamplerError("decoding already finished")
        self.budget -= 1
        if token == v.boi:
            if self.state == "pre_image":
                self.image_is_final = (
                    self.mode == MODE_DIRECT
                    or (self.mode == MODE_CRITIQUE and self.images >= 1)
                )
            elif self.state == "critique_text":
                self.image_is_final = True
            elif self.state in ("planning", "reflection"):
                self.image_is_final = self.marker
            else:
                raise SamplerError(f"BOI not allowed in state {self.state}")
            self.state = "in_image"
            self.image_remaining = self.T
            events["begin_span"] = True
        elif v.is_visual(token):
            if self.state != "in_image" or self.image_remaining <= 0:
                raise SamplerError("visual token outside an open image block")
            self.image_remaining -= 1
        elif token == v.eoi:
            if self.state != "in_image" or self.image_remaining != 0:
                raise SamplerError("EOI before the block completed")
            self.images += 1
            events["end_span"] = True
            if self.image_is_final:
                self.state = "post_final"
            elif self.mode == MODE_CRITIQUE:
                self.state = "critique_text"
            else:
                self.state = "reflection"
            self.text_len = 0
            self.marker = False
            self.image_is_final = False
        elif v.is_text(token):
            if self.state not in ("planning", "reflection", "critique_text"):
                raise SamplerError(f"text token not allowed in state {self.state}")
            self.text_len += 1
            if self.state == "reflection" and token == self.marker_id:
                self.marker = True
        elif token == v.eos:
            if self.state != "post_final":
                raise SamplerError("EOS before the grammar completed")
            self.done = True
        else:
            raise SamplerError(f"token {token} never admissible")
        return events


# ---------------------------------------------------------------------------
# Condition contexts


def split_history(history: list[int], vocab: UnifiedVocab):
    """Split emitted tokens into completed (kind, ids) segments plus the
    currently open image block (empty if none)."""
    segments: list[tuple[str, list[int]]] = []
    open_block: list[int] = []
    i = 0
    while i < len(history):
        t = history[i]
        if t == vocab.boi:
            j = i + 1
            block = [t]
            while j < len(history) and vocab.is_visual(history[j]):
                block.append(history[j])
                j += 1
            if j < len(history) and history[j] == vocab.eoi:
                block.append(vocab.eoi)
                segments.append(("image", block))
                i = j + 1
            else:
                open_block = block
                i = j
        elif vocab.is_text(t):
            run = []
            while i < len(history) and vocab.is_text(history[i]):
                run.append(history[i])
                i += 1
            segments.append(("text", run))
        else:
            raise SamplerError(f"unexpected token {t} in history")
    return segments, open_block


def build_condition_contexts(
    prompt_ids: list[int],
    history: list[int],
    negative_ids: list[int],
    vocab: UnifiedVocab,
) -> dict[str, list[int]]:
    """The five condition contexts for the current decode position.

    full sees everything; image sees completed image spans only (text
    stripped); prompt sees just the prompt; negative its fixed text; uncond
    nothing. An open image block is shared into every context so mid-block
    logits stay aligned.
    """
    segments, open_block = split_history(list(history), vocab)
    image_ids = [t for kind, seg in segments if kind == "image" for t in seg]
    return {
        "full": [vocab.bos] + prompt_ids + [vocab.sep] + list(history),
        "image": [vocab.bos, vocab.sep] + image_ids + open_block,
        "prompt": [vocab.bos] + prompt_ids + [vocab.sep] + open_block,
        "negative": [vocab.bos] + negative_ids + [vocab.sep] + open_block,
        "uncond": [vocab.bos, vocab.sep] + open_block,
    }


class _ConditionRows:
    """Batched per-condition KV caches advancing in lockstep.

    Every emitted token is stepped through all rows; rows whose context should
    not keep it are truncated right back, with their stored anchor logits
    restored. Image-span tokens are kept by every row while the span is open;
    when it closes, full and image keep it for good and the rest roll back.
    """

    def __init__(
        self,
        model: TinyMultimodalLM,
        vocab: UnifiedVocab,
        conds: tuple[str, ...],
        prompt_ids: list[int],
        negative_ids: list[int],
        capacity: int,
    ):
        self.model = model
        self.vocab = vocab
        self.conds = conds
        prefix = {
            "full": [vocab.bos] + prompt_ids + [vocab.sep],
            "prompt": [vocab.bos] + prompt_ids + [vocab.sep],
            "image": [vocab.bos, vocab.sep],
            "negative": [vocab.bos] + negative_ids + [vocab.sep],
            "uncond": [vocab.bos, vocab.sep],
        }
        self.ids = {c: list(prefix[c]) for c in conds}
        self.prefix_len = {c: len(prefix[c]) for c in conds}
        lengths = torch.tensor([len(self.ids[c]) for c in conds])
        max_len = int(lengths.max())
        padded = torch.zeros((len(conds), max_len), dtype=torch.long)
        for i, c in enumerate(conds):
            padded[i, : len(self.ids[c])] = torch.tensor(self.ids[c])
        self.cache = model.make_cache(len(conds), capacity)
        last = model.prefill(padded, lengths, self.cache)
        self.anchor = {c: last[i].clone() for i, c in enumerate(conds)}
        self.last = dict(self.anchor)
        self.in_span = False

    def logits(self) -> dict[str, np.ndarray]:
        return {c: self.last[c].detach().numpy() for c in self.conds}

    def push(self, token: int, begin_span: bool, end_span: bool) -> None:
        if begin_span:
            self.in_span = True
        out = self.model.decode_step(
            torch.full((len(self.conds),), token, dtype=torch.long), self.cache
        )
        for i, c in enumerate(self.conds):
            keep = c == "full" or self.in_span
            if keep:
                self.ids[c].append(token)
                self.last[c] = out[i].clone()
            else:
                self.cache.truncate(i, len(self.ids[c]))
        if end_span:
            self.in_span = False
            for i, c in enumerate(self.conds):
                if c in ("full", "image"):
                    self.prefix_len[c] = len(self.ids[c])
                    self.anchor[c] = self.last[c]
                else:
                    del self.ids[c][self.prefix_len[c] :]
                    self.cache.truncate(i, self.prefix_len[c])
                    self.last[c] = self.anchor[c]


# ---------------------------------------------------------------------------
# Sampling


def constrain_logits(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    out = np.full(logits.shape, -np.inf, dtype=np.float64)
    out[allowed] = logits[allowed].astype(np.float64)
    return out


def sample_token(
    logits: np.ndarray, params: SampleParams, rng: np.random.Generator
) -> int:
    """Temperature/top-k sampling over (already constrained) logits;
    temperature 0 is greedy argmax with lowest-index tie-break."""
    if params.temperature <= 0.0:
        return int(np.argmax(logits))
    scaled = logits / params.temperature
    if params.top_k is not None and params.top_k >= 1:
        finite = np.sum(np.isfinite(scaled))
        k = min(params.top_k, int(finite))
        kth = np.sort(scaled)[-k]
        scaled = np.where(scaled >= kth, scaled, -np.inf)
    scaled = scaled - scaled[np.isfinite(scaled)].max()
    probs = np.exp(scaled)
    probs[~np.isfinite(scaled)] = 0.0
    probs = probs / probs.sum()
    return int(rng.choice(len(probs), p=probs))


@dataclass
class DecodeState:
    """Bundle of the grammar machine, condition rows, and RNG for one decode."""

    grammar: GrammarState
    rows: _ConditionRows
    rng: np.random.Generator
    emitted: list[int] = field(default_factory=list)


def step(state: DecodeState, combined_logits: np.ndarray, params: SampleParams) -> int:
    """One constrained sampling step; masking guarantees grammar validity."""
    allowed = state.grammar.allowed_tokens()
    if not allowed.any():
        raise SamplerError("empty admissible set")
    idx = np.flatnonzero(allowed)
    if idx.size == 1:
        token = int(idx[0])
    else:
        token = sample_token(constrain_logits(combined_logits, allowed), params, state.rng)
    events = state.grammar.on_token(token)
    state.emitted.append(token)
    if not state.grammar.done:
        state.rows.push(token, events["begin_span"], events["end_span"])
    return token


@dataclass(frozen=True)
class GenerateResult:
    trace: ThoughtTrace | None
    ok: bool
    diagnostic: str | None
    ids: tuple[int, ...]

    @property
    def meta(self) -> dict:
        return self.trace.meta if self.trace is not None else {}


def generate_trace(
    model: TinyMultimodalLM,
    vocab: UnifiedVocab,
    prompt: str,
    mode: str,
    block_len: int,
    schedule: DecodeSchedule | None = None,
    params: SampleParams = SampleParams(),
    negative_text: str = DEFAULT_NEGATIVE_TEXT,
    length_cap: int | None = None,
) -> GenerateResult:
    """Decode one trace. Fixed (checkpoint, prompt, schedule, seed) gives an
    identical result; the length cap is reported, never raised."""
    schedule = schedule or default_schedule(mode)
    prompt_ids = vocab.tokenize(prompt)
    negative_ids = vocab.tokenize(negative_text)
    cap = length_cap if length_cap is not None else default_length_cap(block_len)
    max_prefix = max(len(prompt_ids), len(negative_ids)) + 2
    cap = min(cap, model.cfg.context_length - max_prefix)

    grammar = GrammarState(mode, block_len, vocab, budget=cap)
    need = grammar.completion_cost()
    if cap < need:
        return GenerateResult(
            trace=None,
            ok=False,
            diagnostic=f"length cap {cap} below minimal grammar completion {need}",
            ids=(),
        )
    rows = _ConditionRows(
        model, vocab, schedule.conditions(), prompt_ids, negative_ids,
        capacity=max_prefix + cap,
    )
    state = DecodeState(
        grammar=grammar, rows=rows, rng=np.random.default_rng(params.seed)
    )
    while not grammar.done:
        scales = schedule.for_phase(grammar.phase)
        logit_sets = {c: rows.last[c].numpy() for c in active_conditions(scales)}
        combined = cfg_combine(logit_sets, scales)
        step(state, combined, params)
    full_ids = (vocab.bos,) + tuple(prompt_ids) + (vocab.sep,) + tuple(state.emitted)
    trace = parse_sequence(full_ids, vocab, block_len)
    # the per-segment scales are a pure function of grammar position
    segment_log = []
    for seg in trace.segments:
        if seg.kind not in IMAGE_KINDS:
            phase = "text"
        elif seg.kind == SegmentKind.FINAL_IMAGE:
            phase = "final"
        else:
            phase = "thinking"
        segment_log.append(
            {"kind": seg.kind.value, "scales": schedule.for_phase(phase).as_tuple()}
        )
    trace = replace(
        trace,
        meta={
            "seed": params.seed,
            "temperature": params.temperature,
            "segment_scales": segment_log,
        },
    )
    return GenerateResult(trace=trace, ok=True, diagnostic=None, ids=full_ids)
