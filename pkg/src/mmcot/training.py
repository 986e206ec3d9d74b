"""Training loop: AdamW, linear LR decay to zero, gradient clipping, per-step
metrics log, periodic checkpoints, and resume."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .batching import Batch, collate, example_from_trace
from .codec import Codebook
from .losses import loss_total
from .model import TinyMultimodalLM, load_checkpoint, save_checkpoint
from .traces import POLICY_RESPONSE_ONLY, ThoughtTrace
from .vocab import UnifiedVocab


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int
    stage: int = 1
    lr: float = 1e-5
    schedule: str = "linear"
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    lam: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0: final checkpoint only
    loss_mask_policy: str = POLICY_RESPONSE_ONLY

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.schedule != "linear":
            raise ValueError("only the linear schedule is implemented")

    @classmethod
    def desk_default(cls, stage: int, **overrides) -> "TrainConfig":
        base = dict(steps=3000, batch_size=32) if stage == 1 else dict(steps=1500, batch_size=16)
        base.update(stage=stage, **overrides)
        return cls(**base)


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    steps_done: int
    final_loss: float


def _post_clip_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def train(
    model: TinyMultimodalLM,
    traces: Sequence[ThoughtTrace],
    vocab: UnifiedVocab,
    codebook: Codebook,
    block_len: int,
    config: TrainConfig,
    out_dir,
    resume_from=None,
    extra_loss_fn: Callable[[torch.Tensor, torch.Tensor, Batch], torch.Tensor] | None = None,
    extra_loss_weight: float = 0.0,
) -> TrainResult:
    """Optimize the composite objective over the trace dataset.

    Deterministic under a fixed seed with single-threaded torch. A NaN loss
    aborts after dumping the offending batch to nan_dump.json. extra_loss_fn
    is a plug-in slot for additional objective terms (none ship with the
    package); it receives (hidden, logits, batch).
    """
    if not traces:
        raise ValueError("empty training dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    examples = [
        example_from_trace(t, vocab, block_len, config.loss_mask_policy) for t in traces
    ]
    optim = torch.optim.AdamW(
        model.parameters(),
        lr=config.lr,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )
    start_step = 0
    if resume_from is not None:
        loaded, extra = load_checkpoint(resume_from)
        model.load_state_dict(loaded.state_dict())
        if "optimizer" in extra:
            optim.load_state_dict(extra["optimizer"])
        start_step = int(extra.get("step", 0))

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(examples))
    cursor = 0

    def next_batch() -> Batch:
        nonlocal order, cursor
        picked = []
        while len(picked) < config.batch_size:
            if cursor >= len(order):
                order = rng.permutation(len(examples))
                cursor = 0
            picked.append(examples[int(order[cursor])])
            cursor += 1
        return collate(picked, pad_id=vocab.pad)

    metrics_path = out_dir / "metrics.jsonl"
    final_loss = float("nan")
    mode = "a" if start_step > 0 and metrics_path.exists() else "w"
    with open(metrics_path, mode) as metrics:
        for step_idx in range(start_step, config.steps):
            lr_t = config.lr * (1.0 - step_idx / config.steps)
            for group in optim.param_groups:
                group["lr"] = lr_t
            batch = next_batch()
            hidden, logits = model(batch.ids)
            total, report = loss_total(
                logits, batch.ids, batch.mask, hidden, batch.image_spans,
                model.visual_proj, codebook, batch.target_blocks, block_len,
                vocab, lam=config.lam,
            )
            if extra_loss_fn is not None and extra_loss_weight != 0.0:
                total = total + extra_loss_weight * extra_loss_fn(hidden, logits, batch)
            if not torch.isfinite(total):
                dump = {
                    "step": step_idx + 1,
                    "report": report.to_dict(),
                    "batch_ids": batch.ids.tolist(),
                }
                (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                raise TrainingAborted(
                    f"non-finite loss at step {step_idx + 1}; batch dumped to nan_dump.json"
                )
            optim.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            grad_norm = _post_clip_norm(model.parameters())
            optim.step()
            final_loss = report.loss_total
            line = dict(report.to_dict())
            line.update(step=step_idx + 1, lr=lr_t, grad_norm=grad_norm)
            metrics.write(json.dumps(line, sort_keys=True) + "\n")
            if (
                config.checkpoint_every
                and (step_idx + 1) % config.checkpoint_every == 0
                and step_idx + 1 < config.steps
            ):
                save_checkpoint(
                    out_dir / f"ckpt_step{step_idx + 1:06d}.pt",
                    model,
                    extra={"step": step_idx + 1, "optimizer": optim.state_dict(),
                           "train_config": asdict(config)},
                )
    ckpt_path = out_dir / "ckpt_final.pt"
    save_checkpoint(
        ckpt_path, model,
        extra={"step": config.steps, "optimizer": optim.state_dict(),
               "train_config": asdict(config)},
    )
    return TrainResult(
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        steps_done=config.steps - start_step,
        final_loss=final_loss,
    )
