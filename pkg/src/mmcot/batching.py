"""Bridging traces to padded training batches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .codec import VisualTokenBlock
from .traces import (
    POLICY_RESPONSE_ONLY,
    MultimodalSequence,
    ThoughtTrace,
    assemble_trace,
    build_loss_mask,
)
from .vocab import UnifiedVocab


@dataclass(frozen=True)
class SequenceExample:
    ids: tuple[int, ...]
    mask: tuple[bool, ...]
    boi_positions: tuple[int, ...]
    target_blocks: tuple[VisualTokenBlock, ...]


def example_from_trace(
    trace: ThoughtTrace,
    vocab: UnifiedVocab,
    block_len: int,
    policy: str = POLICY_RESPONSE_ONLY,
) -> SequenceExample:
    seq = assemble_trace(trace, vocab, block_len)
    mask = build_loss_mask(seq, vocab, policy)
    bois = tuple(start for start, _ in seq.image_spans())
    blocks = tuple(seg.tokens for seg in trace.segments if seg.tokens is not None)
    return SequenceExample(ids=seq.ids, mask=mask, boi_positions=bois, target_blocks=blocks)


@dataclass
class Batch:
    ids: torch.Tensor          # B x L long
    mask: torch.Tensor         # B x L bool
    image_spans: list[tuple[int, int]]   # (row, boi_position)
    target_blocks: list[VisualTokenBlock]

    def __len__(self):
        return self.ids.shape[0]


def collate(examples: Sequence[SequenceExample], pad_id: int = 0) -> Batch:
    max_len = max(len(ex.ids) for ex in examples)
    ids = torch.full((len(examples), max_len), pad_id, dtype=torch.long)
    mask = torch.zeros((len(examples), max_len), dtype=torch.bool)
    spans: list[tuple[int, int]] = []
    targets: list[VisualTokenBlock] = []
    for row, ex in enumerate(examples):
        ids[row, : len(ex.ids)] = torch.tensor(ex.ids, dtype=torch.long)
        mask[row, : len(ex.mask)] = torch.tensor(ex.mask, dtype=torch.bool)
        for boi, block in zip(ex.boi_positions, ex.target_blocks):
            spans.append((row, boi))
            targets.append(block)
    return Batch(ids=ids, mask=mask, image_spans=spans, target_blocks=targets)
