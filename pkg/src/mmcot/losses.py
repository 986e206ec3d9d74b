"""Training objective: token cross-entropy plus a visual feature
reconstruction term.

loss_mm is the mean next-token negative log-likelihood over supervised
positions (position i's logits scored against the token at i+1; the mask
selects which target positions count). loss_rec projects each image span's
hidden states into codebook space and takes the mean squared error against
the target block's codebook features, normalized per image by T*D' and
averaged over images; a batch with no images contributes zero. The composite
is loss_mm + lambda * loss_rec, and both use mean (not sum) reduction so
duplicating sequences leaves values unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .codec import Codebook, VisualTokenBlock, codebook_features
from .vocab import UnifiedVocab


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossReport:
    loss_mm: float
    loss_rec: float
    loss_total: float
    lam: float
    n_valid_positions: int
    n_images: int
    loss_mm_text: float
    loss_mm_visual: float

    def to_dict(self) -> dict:
        return {
            "loss_mm": self.loss_mm,
            "loss_rec": self.loss_rec,
            "loss_total": self.loss_total,
            "lambda": self.lam,
            "n_valid_positions": self.n_valid_positions,
            "n_images": self.n_images,
            "loss_mm_text": self.loss_mm_text,
            "loss_mm_visual": self.loss_mm_visual,
        }


def _check_shapes(logits: torch.Tensor, ids: torch.Tensor, mask: torch.Tensor):
    if logits.dim() != 3 or ids.dim() != 2 or mask.dim() != 2:
        raise LossError("logits must be B x L x V with B x L ids and mask")
    if logits.shape[:2] != ids.shape or ids.shape != mask.shape:
        raise LossError(
            f"shape mismatch: logits {tuple(logits.shape)}, ids {tuple(ids.shape)}, "
            f"mask {tuple(mask.shape)}"
        )


def loss_mm(logits: torch.Tensor, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean NLL over supervised target positions; 0 when none are supervised."""
    _check_shapes(logits, ids, mask)
    pred = logits[:, :-1]
    target = ids[:, 1:]
    pair_mask = mask[:, 1:]
    n = int(pair_mask.sum())
    if n == 0:
        return logits.new_zeros(())
    logp = F.log_softmax(pred, dim=-1)
    nll = -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return (nll * pair_mask.to(nll.dtype)).sum() / n


def loss_rec(
    hidden: torch.Tensor,
    image_spans: list[tuple[int, int]],
    proj: torch.nn.Module,
    codebook: Codebook,
    targets: list[VisualTokenBlock],
    block_len: int,
    alignment: str = "predict",
) -> torch.Tensor:
    """Feature reconstruction MSE, averaged over images; 0 with no images.

    image_spans holds (row, boi_position) pairs aligned with targets.
    """
    if len(image_spans) != len(targets):
        raise LossError(
            f"{len(image_spans)} image spans but {len(targets)} target blocks"
        )
    if not image_spans:
        return hidden.new_zeros(())
    offset = 0 if alignment == "predict" else 1
    total = hidden.new_zeros(())
    for (row, boi), block in zip(image_spans, targets):
        if len(block) != block_len:
            raise LossError(f"target block length {len(block)} != {block_len}")
        lo = boi + offset
        p = proj(hidden[row, lo : lo + block_len])
        c = torch.as_tensor(
            codebook_features(block, codebook), dtype=hidden.dtype, device=hidden.device
        )
        total = total + ((p - c) ** 2).mean()
    return total / len(image_spans)


def loss_total(
    logits: torch.Tensor,
    ids: torch.Tensor,
    mask: torch.Tensor,
    hidden: torch.Tensor,
    image_spans: list[tuple[int, int]],
    proj: torch.nn.Module,
    codebook: Codebook,
    targets: list[VisualTokenBlock],
    block_len: int,
    vocab: UnifiedVocab,
    lam: float = 1.0,
    alignment: str = "predict",
) -> tuple[torch.Tensor, LossReport]:
    """Composite objective and its per-batch report."""
    if lam < 0:
        raise LossError(f"lambda must be non-negative, got {lam}")
    mm = loss_mm(logits, ids, mask)
    rec = loss_rec(hidden, image_spans, proj, codebook, targets, block_len, alignment)
    total = mm + lam * rec

    with torch.no_grad():
        target_ids = ids[:, 1:]
        pair_mask = mask[:, 1:].bool()
        vis_lo, vis_hi = vocab.vis_lo, vocab.vis_lo + vocab.num_visual
        is_visual = (target_ids >= vis_lo) & (target_ids < vis_hi)
        logp = F.log_softmax(logits[:, :-1], dim=-1)
        nll = -logp.gather(-1, target_ids.unsqueeze(-1)).squeeze(-1)

        def masked_mean(m):
            k = int(m.sum())
            return float((nll * m.to(nll.dtype)).sum() / k) if k else 0.0

        report = LossReport(
            loss_mm=float(mm),
            loss_rec=float(rec),
            loss_total=float(total),
            lam=float(lam),
            n_valid_positions=int(pair_mask.sum()),
            n_images=len(image_spans),
            loss_mm_text=masked_mean(pair_mask & ~is_visual),
            loss_mm_visual=masked_mean(pair_mask & is_visual),
        )
    return total, report


def reference_nll(logits: np.ndarray, ids: np.ndarray, mask: np.ndarray) -> float:
    """Independent per-position softmax-NLL oracle (numpy, no shortcuts).

    Kept deliberately separate from loss_mm: this is the check, not the path.
    """
    b, l, _ = logits.shape
    total = 0.0
    count = 0
    for i in range(b):
        for j in range(l - 1):
            if not mask[i, j + 1]:
                continue
            row = logits[i, j].astype(np.float64)
            row = row - row.max()
            probs = np.exp(row) / np.exp(row).sum()
            total += -np.log(probs[ids[i, j + 1]])
            count += 1
    return total / count if count else 0.0
