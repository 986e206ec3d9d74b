"""Loss-weight ablation grid: one trained model per (weight, seed) cell,
evaluated on a fixed suite, reported in the six-category table shape."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import Codebook
from .evaluation import EvalItem, evaluate
from .model import ModelConfig, TinyMultimodalLM
from .sampler import PRESETS, SampleParams, uniform_schedule
from .traces import MODE_DIRECT, ThoughtTrace
from .training import TrainConfig, train
from .vocab import UnifiedVocab
from .world import GenevalCategory


def variant_label(lam: float) -> str:
    if lam == 0:
        return "L_mm"
    if lam == 1:
        return "L_mm+L_rec"
    return f"L_mm+{lam:g}*L_rec"


@dataclass(frozen=True)
class AblationRow:
    label: str
    lam: float
    per_category: dict
    overall: float
    error: str | None = None


@dataclass(frozen=True)
class AblationTable:
    rows: tuple[AblationRow, ...]
    seeds: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "rows": [
                {
                    "label": r.label,
                    "lambda": r.lam,
                    "per_category": r.per_category,
                    "overall": r.overall,
                    "error": r.error,
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def ablate_losses(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    traces: Sequence[ThoughtTrace],
    suite: Sequence[EvalItem],
    vocab: UnifiedVocab,
    codebook: Codebook,
    block_len: int,
    lam_grid: Sequence[float] = (0.0, 0.5, 1.0, 5.0),
    seeds: Sequence[int] = (0,),
    out_dir=None,
    eval_params: SampleParams = SampleParams(temperature=0.0),
) -> AblationTable:
    """Train and evaluate one direct-mode model per grid cell.

    Dataset and suite are fixed across cells; evaluation uses plain
    conditional decoding (no guidance), matching how the loss comparison is
    meant to be read. Per-cell failures are recorded, not raised. No
    directional claim is asserted here; the table just reports values.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for lam in lam_grid:
        cell_scores: list[dict] = []
        error = None
        for seed in seeds:
            try:
                model = TinyMultimodalLM(replace(model_cfg, seed=seed))
                cell_cfg = replace(train_cfg, lam=lam, seed=seed)
                cell_dir = (
                    out_dir / f"lam{lam:g}_seed{seed}" if out_dir is not None else None
                )
                if cell_dir is None:
                    import tempfile

                    with tempfile.TemporaryDirectory() as tmp:
                        train(model, traces, vocab, codebook, block_len, cell_cfg, tmp)
                else:
                    train(model, traces, vocab, codebook, block_len, cell_cfg, cell_dir)
                report, _ = evaluate(
                    model, vocab, codebook, suite, MODE_DIRECT, block_len,
                    schedule=uniform_schedule(PRESETS["conditional"]),
                    params=replace(eval_params, seed=seed),
                )
                cell_scores.append(dict(report.per_category, overall=report.overall))
            except Exception as exc:  # keep the grid going
                error = f"{type(exc).__name__}: {exc}"
        if cell_scores:
            cats = {}
            for cat in GenevalCategory:
                vals = [s[cat.value] for s in cell_scores if cat.value in s]
                if vals:
                    cats[cat.value] = round(float(np.mean(vals)), 4)
            overall = round(float(np.mean([s["overall"] for s in cell_scores])), 4)
            rows.append(AblationRow(variant_label(lam), lam, cats, overall, error))
        else:
            rows.append(AblationRow(variant_label(lam), lam, {}, 0.0, error))
    return AblationTable(rows=tuple(rows), seeds=tuple(seeds))
