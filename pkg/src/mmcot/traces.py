"""Thought-trace schemas and their token-sequence form.

A trace is an ordered list of typed segments under one of three grammars:

  subgoal:  TextPlanning, then one or more (VisualSubgoal, Reflection) pairs,
            then FinalImage
  critique: InitialHypothesis, Critique, FinalImage
  direct:   FinalImage only

Assembly lays a trace out as BOS, prompt words, SEP, segments (text as word
IDs, images as BOI + T visual IDs + EOI), EOS. Parsing inverts assembly and
reports the first violating position on malformed input.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .codec import VisualTokenBlock
from .vocab import UnifiedVocab

MODE_SUBGOAL = "subgoal"
MODE_CRITIQUE = "critique"
MODE_DIRECT = "direct"
MODES = (MODE_SUBGOAL, MODE_CRITIQUE, MODE_DIRECT)


class SegmentKind(Enum):
    TEXT_PLANNING = "text_planning"
    VISUAL_SUBGOAL = "visual_subgoal"
    REFLECTION = "reflection"
    INITIAL_HYPOTHESIS = "initial_hypothesis"
    CRITIQUE = "critique"
    FINAL_IMAGE = "final_image"


TEXT_KINDS = (SegmentKind.TEXT_PLANNING, SegmentKind.REFLECTION, SegmentKind.CRITIQUE)
IMAGE_KINDS = (SegmentKind.VISUAL_SUBGOAL, SegmentKind.INITIAL_HYPOTHESIS, SegmentKind.FINAL_IMAGE)


class TraceError(ValueError):
    pass


class TraceParseError(TraceError):
    """Structured parse failure naming the first violating position."""

    def __init__(self, position: int, message: str):
        self.position = position
        super().__init__(f"at position {position}: {message}")


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    text: str | None = None
    tokens: VisualTokenBlock | None = None

    def __post_init__(self):
        if self.kind in TEXT_KINDS and (self.text is None or self.tokens is not None):
            raise TraceError(f"{self.kind.value} segment needs a text payload")
        if self.kind in IMAGE_KINDS and (self.tokens is None or self.text is not None):
            raise TraceError(f"{self.kind.value} segment needs a token payload")


@dataclass(frozen=True)
class ThoughtTrace:
    prompt: str
    mode: str
    segments: tuple[Segment, ...]
    meta: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class MultimodalSequence:
    ids: tuple[int, ...]
    spans: tuple[tuple[str, int, int], ...]  # (kind in {text, image}, start, end)

    def image_spans(self) -> tuple[tuple[int, int], ...]:
        return tuple((s, e) for k, s, e in self.spans if k == "image")


def validate_trace(trace: ThoughtTrace, block_len: int) -> None:
    """Check the mode grammar and per-segment payload shapes."""
    kinds = [s.kind for s in trace.segments]
    for seg in trace.segments:
        if seg.tokens is not None and len(seg.tokens) != block_len:
            raise TraceError(
                f"image segment has {len(seg.tokens)} tokens, expected {block_len}"
            )
        if seg.kind in TEXT_KINDS and not seg.text.strip():
            raise TraceError(f"{seg.kind.value} segment must contain at least one word")
    if trace.mode == MODE_DIRECT:
        if kinds != [SegmentKind.FINAL_IMAGE]:
            raise TraceError("direct mode requires exactly one final_image segment")
    elif trace.mode == MODE_CRITIQUE:
        if kinds != [SegmentKind.INITIAL_HYPOTHESIS, SegmentKind.CRITIQUE, SegmentKind.FINAL_IMAGE]:
            raise TraceError("critique mode requires hypothesis, critique, final_image")
    elif trace.mode == MODE_SUBGOAL:
        ok = (
            len(kinds) >= 4
            and len(kinds) % 2 == 0
            and kinds[0] == SegmentKind.TEXT_PLANNING
            and kinds[-1] == SegmentKind.FINAL_IMAGE
            and all(k == SegmentKind.VISUAL_SUBGOAL for k in kinds[1:-1:2])
            and all(k == SegmentKind.REFLECTION for k in kinds[2:-1:2])
        )
        if not ok:
            raise TraceError("subgoal mode requires planning, (subgoal, reflection)+, final_image")
    else:
        raise TraceError(f"unknown mode {trace.mode!r}")


def assemble_trace(trace: ThoughtTrace, vocab: UnifiedVocab, block_len: int) -> MultimodalSequence:
    """Lay a valid trace out as token IDs with modality span annotations."""
    validate_trace(trace, block_len)
    ids: list[int] = [vocab.bos]
    spans: list[tuple[str, int, int]] = []
    prompt_ids = vocab.tokenize(trace.prompt)
    if prompt_ids:
        spans.append(("text", len(ids), len(ids) + len(prompt_ids)))
        ids.extend(prompt_ids)
    ids.append(vocab.sep)
    for seg in trace.segments:
        start = len(ids)
        if seg.kind in TEXT_KINDS:
            seg_ids = vocab.tokenize(seg.text)
            ids.extend(seg_ids)
            spans.append(("text", start, len(ids)))
        else:
            ids.append(vocab.boi)
            ids.extend(vocab.visual_token(t) for t in seg.tokens.tokens)
            ids.append(vocab.eoi)
            spans.append(("image", start, len(ids)))
    ids.append(vocab.eos)
    return MultimodalSequence(ids=tuple(ids), spans=tuple(spans))


def _scan_runs(ids: Sequence[int], vocab: UnifiedVocab, block_len: int):
    """Split BOS prompt SEP content EOS into a prompt and (kind, payload) runs."""
    if not ids or ids[0] != vocab.bos:
        raise TraceParseError(0, "sequence must start with BOS")
    i = 1
    prompt_ids = []
    while i < len(ids) and vocab.is_text(ids[i]):
        prompt_ids.append(ids[i])
        i += 1
    if i >= len(ids) or ids[i] != vocab.sep:
        raise TraceParseError(i, "expected SEP after prompt")
    i += 1
    runs: list[tuple[str, list[int]]] = []
    while True:
        if i >= len(ids):
            raise TraceParseError(len(ids) - 1, "sequence ended without EOS")
        t = ids[i]
        if t == vocab.eos:
            i += 1
            break
        if t == vocab.boi:
            start = i
            i += 1
            block = []
            while len(block) < block_len:
                if i >= len(ids):
                    raise TraceParseError(len(ids) - 1, "image block cut off")
                if not vocab.is_visual(ids[i]):
                    raise TraceParseError(i, "image block length: expected a visual token")
                block.append(vocab.codebook_index(ids[i]))
                i += 1
            if i >= len(ids) or ids[i] != vocab.eoi:
                raise TraceParseError(min(i, len(ids) - 1), "image block length: expected EOI")
            i += 1
            runs.append(("image", block))
        elif vocab.is_text(t):
            run = []
            while i < len(ids) and vocab.is_text(ids[i]):
                run.append(ids[i])
                i += 1
            runs.append(("text", run))
        elif vocab.is_visual(t):
            raise TraceParseError(i, "visual token outside image span")
        elif t == vocab.eoi:
            raise TraceParseError(i, "EOI without matching BOI")
        else:
            raise TraceParseError(i, f"unexpected special token {t}")
    while i < len(ids):
        if ids[i] != vocab.pad:
            raise TraceParseError(i, "content after EOS")
        i += 1
    return prompt_ids, runs


def parse_sequence(
    seq: MultimodalSequence | Sequence[int], vocab: UnifiedVocab, block_len: int
) -> ThoughtTrace:
    """Reconstruct the trace from token IDs, classifying the mode by grammar."""
    ids = seq.ids if isinstance(seq, MultimodalSequence) else tuple(seq)
    prompt_ids, runs = _scan_runs(ids, vocab, block_len)
    prompt = vocab.detokenize(prompt_ids)
    kinds = [k for k, _ in runs]
    segments: list[Segment] = []

    def image_seg(kind: SegmentKind, payload) -> Segment:
        return Segment(kind=kind, tokens=VisualTokenBlock(tokens=tuple(payload)))

    def text_seg(kind: SegmentKind, payload) -> Segment:
        return Segment(kind=kind, text=vocab.detokenize(payload))

    if kinds == ["image"]:
        mode = MODE_DIRECT
        segments.append(image_seg(SegmentKind.FINAL_IMAGE, runs[0][1]))
    elif kinds == ["image", "text", "image"]:
        mode = MODE_CRITIQUE
        segments.append(image_seg(SegmentKind.INITIAL_HYPOTHESIS, runs[0][1]))
        segments.append(text_seg(SegmentKind.CRITIQUE, runs[1][1]))
        segments.append(image_seg(SegmentKind.FINAL_IMAGE, runs[2][1]))
    elif (
        len(kinds) >= 4
        and len(kinds) % 2 == 0
        and kinds[0] == "text"
        and kinds[-1] == "image"
        and all(k == "image" for k in kinds[1:-1:2])
        and all(k == "text" for k in kinds[2:-1:2])
    ):
        mode = MODE_SUBGOAL
        segments.append(text_seg(SegmentKind.TEXT_PLANNING, runs[0][1]))
        for k, payload in runs[1:-1]:
            if k == "image":
                segments.append(image_seg(SegmentKind.VISUAL_SUBGOAL, payload))
            else:
                segments.append(text_seg(SegmentKind.REFLECTION, payload))
        segments.append(image_seg(SegmentKind.FINAL_IMAGE, runs[-1][1]))
    else:
        raise TraceParseError(len(ids) - 1, "no grammar match for segment pattern")
    return ThoughtTrace(prompt=prompt, mode=mode, segments=tuple(segments))


# ---------------------------------------------------------------------------
# Loss masks

POLICY_RESPONSE_ONLY = "response_only"
POLICY_ALL_CONTENT = "all_content"


def build_loss_mask(
    seq: MultimodalSequence | Sequence[int],
    vocab: UnifiedVocab,
    policy: str = POLICY_RESPONSE_ONLY,
) -> tuple[bool, ...]:
    """Per-position supervision mask over the sequence's target tokens.

    response_only: False on PAD and on every position up to and including SEP.
    all_content: False only on PAD.
    """
    ids = seq.ids if isinstance(seq, MultimodalSequence) else tuple(seq)
    if policy not in (POLICY_RESPONSE_ONLY, POLICY_ALL_CONTENT):
        raise TraceError(f"unknown mask policy {policy!r}")
    mask = [t != vocab.pad for t in ids]
    if policy == POLICY_RESPONSE_ONLY:
        try:
            sep_at = ids.index(vocab.sep)
        except ValueError:
            raise TraceError("sequence has no SEP") from None
        for i in range(sep_at + 1):
            mask[i] = False
    return tuple(mask)


# ---------------------------------------------------------------------------
# Serialization

_KIND_FROM_STR = {k.value: k for k in SegmentKind}


def trace_to_json(trace: ThoughtTrace) -> str:
    segments = []
    for seg in trace.segments:
        if seg.kind in TEXT_KINDS:
            segments.append({"kind": seg.kind.value, "text": seg.text})
        else:
            segments.append({"kind": seg.kind.value, "tokens": list(seg.tokens.tokens)})
    payload = {"prompt": trace.prompt, "mode": trace.mode, "segments": segments}
    if trace.meta:
        payload["meta"] = trace.meta
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def trace_from_json(line: str) -> ThoughtTrace:
    payload = json.loads(line)
    segments = []
    for seg in payload["segments"]:
        kind = _KIND_FROM_STR[seg["kind"]]
        if "text" in seg:
            segments.append(Segment(kind=kind, text=seg["text"]))
        else:
            segments.append(Segment(kind=kind, tokens=VisualTokenBlock(tuple(seg["tokens"]))))
    return ThoughtTrace(
        prompt=payload["prompt"],
        mode=payload["mode"],
        segments=tuple(segments),
        meta=payload.get("meta", {}),
    )


def write_traces(traces: Sequence[ThoughtTrace], path) -> None:
    with open(path, "w") as f:
        for trace in traces:
            f.write(trace_to_json(trace) + "\n")


def read_traces(path) -> list[ThoughtTrace]:
    with open(path) as f:
        return [trace_from_json(line) for line in f if line.strip()]


def write_sequence_dump(seqs: Sequence[Sequence[int]], path) -> None:
    """Debug format: whitespace-separated decimal IDs, one sequence per line."""
    with open(path, "w") as f:
        for seq in seqs:
            ids = seq.ids if isinstance(seq, MultimodalSequence) else seq
            f.write(" ".join(str(t) for t in ids) + "\n")


def read_sequence_dump(path) -> list[tuple[int, ...]]:
    with open(path) as f:
        return [tuple(int(t) for t in line.split()) for line in f if line.strip()]
