"""Category-scored evaluation suites.

A suite is a list of (scene, category, prompt) items; evaluation generates one
trace per prompt and scores the decoded final image in the item's category
(and, in critique mode, the hypothesis image as well, giving the paired
hypothesis/final comparison). Ungrammatical generations score 0 and are
tallied separately.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import world
from .codec import Codebook, decode_tokens
from .datagen import ComplexityProfile, brainstorm_prompts
from .model import TinyMultimodalLM
from .sampler import DecodeSchedule, SampleParams, default_schedule, generate_trace
from .traces import MODE_CRITIQUE, ThoughtTrace
from .vocab import UnifiedVocab
from .world import GenevalCategory, SceneSpec

_CATEGORY_SCENE_KIND = {
    GenevalCategory.SINGLE_OBJ: "single",
    GenevalCategory.TWO_OBJ: "two",
    GenevalCategory.COUNTING: "counting",
    GenevalCategory.COLORS: "two",
    GenevalCategory.POSITION: "position",
    GenevalCategory.COLOR_ATTRI: "color_attri",
}


@dataclass(frozen=True)
class EvalItem:
    scene: SceneSpec
    category: GenevalCategory
    prompt: str


def build_eval_suite(
    counts: dict[GenevalCategory, int],
    seed: int,
    canvas_size: int = world.DEFAULT_CANVAS,
    exclude_prompts: set[str] | frozenset[str] = frozenset(),
    refill_when_exhausted: bool = True,
) -> list[EvalItem]:
    """Held-out suite: per-category scenes whose prompts avoid exclude_prompts
    and each other. Tiny prompt spaces (single-object: 32 prompts; counting:
    96) cannot be held out of a large training set, so exhausted categories
    refill from already-seen prompts unless refill_when_exhausted is off."""
    items: list[EvalItem] = []
    used: set[str] = set(exclude_prompts)
    suite_prompts: set[str] = set()
    for cat in GenevalCategory:
        n = counts.get(cat, 0)
        if n <= 0:
            continue
        cat_seed = seed + 1000 * list(GenevalCategory).index(cat)
        profile = ComplexityProfile.only(_CATEGORY_SCENE_KIND[cat], canvas_size=canvas_size)
        found = brainstorm_prompts(
            n, seed=cat_seed, profile=profile, exclude_prompts=frozenset(used)
        )
        if len(found) < n and refill_when_exhausted:
            extra = brainstorm_prompts(
                n - len(found), seed=cat_seed + 1,
                profile=profile,
                exclude_prompts=frozenset(suite_prompts | {p for _, p in found}),
            )
            found = found + extra
        for spec, prompt in found:
            if not world.category_applicable(spec, cat):
                continue
            used.add(prompt)
            suite_prompts.add(prompt)
            items.append(EvalItem(scene=spec, category=cat, prompt=prompt))
    return items


def write_suite(items: Sequence[EvalItem], path) -> None:
    with open(path, "w") as f:
        for it in items:
            payload = json.loads(world.scene_to_json(it.scene))
            payload["category"] = it.category.value
            payload["prompt"] = it.prompt
            f.write(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def read_suite(path) -> list[EvalItem]:
    items = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            payload = json.loads(line)
            scene = world.scene_from_json(line)
            items.append(EvalItem(
                scene=scene,
                category=GenevalCategory(payload["category"]),
                prompt=payload["prompt"],
            ))
    return items


@dataclass(frozen=True)
class EvalReport:
    mode: str
    n_items: int
    per_category: dict
    category_counts: dict
    overall: float
    ungrammatical: int
    hypo_per_category: dict | None = None
    hypo_overall: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "n_items": self.n_items,
            "per_category": self.per_category,
            "category_counts": self.category_counts,
            "overall": self.overall,
            "ungrammatical": self.ungrammatical,
            "note": self.note,
        }
        if self.hypo_per_category is not None:
            out["hypo_per_category"] = self.hypo_per_category
            out["hypo_overall"] = self.hypo_overall
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _score_image(block, item: EvalItem, codebook: Codebook) -> int:
    grid, lossy = decode_tokens(block, item.scene.canvas_size, codebook)
    if lossy:
        return 0
    return world.score_geneval(world.detect_objects(grid), item.scene, item.category)


def _aggregate(scores: dict, counts: dict) -> tuple[dict, float]:
    per_cat = {
        cat: round(scores[cat] / counts[cat], 4) for cat in scores if counts[cat] > 0
    }
    overall = round(float(np.mean(list(per_cat.values()))), 4) if per_cat else 0.0
    return {k.value: v for k, v in per_cat.items()}, overall


GenerateFn = Callable[..., object]


def evaluate(
    model: TinyMultimodalLM | None,
    vocab: UnifiedVocab,
    codebook: Codebook,
    suite: Sequence[EvalItem],
    mode: str,
    block_len: int,
    schedule: DecodeSchedule | None = None,
    params: SampleParams = SampleParams(),
    generate_fn: GenerateFn | None = None,
) -> tuple[EvalReport, list[ThoughtTrace | None]]:
    """Generate one trace per suite item and score final (and hypothesis)
    images per category. generate_fn overrides the sampler, which lets tests
    drive the harness with an oracle that replays ground-truth traces."""
    schedule = schedule or default_schedule(mode)
    if generate_fn is None:
        def generate_fn(prompt, seed):
            return generate_trace(
                model, vocab, prompt, mode, block_len, schedule=schedule,
                params=SampleParams(
                    temperature=params.temperature, top_k=params.top_k, seed=seed),
            )
    scores = {cat: 0 for cat in GenevalCategory}
    hypo_scores = {cat: 0 for cat in GenevalCategory}
    counts = {cat: 0 for cat in GenevalCategory}
    ungrammatical = 0
    traces: list[ThoughtTrace | None] = []
    for idx, item in enumerate(suite):
        item_seed = int(np.random.SeedSequence((params.seed, idx)).generate_state(1)[0])
        result = generate_fn(item.prompt, item_seed)
        counts[item.category] += 1
        if not result.ok or result.trace is None:
            ungrammatical += 1
            traces.append(None)
            continue
        trace = result.trace
        traces.append(trace)
        scores[item.category] += _score_image(trace.segments[-1].tokens, item, codebook)
        if mode == MODE_CRITIQUE:
            hypo_scores[item.category] += _score_image(trace.segments[0].tokens, item, codebook)
    per_cat, overall = _aggregate(scores, counts)
    hypo_cat, hypo_overall = (None, None)
    if mode == MODE_CRITIQUE:
        hypo_cat, hypo_overall = _aggregate(hypo_scores, counts)
    note = ""
    if any(counts[c] == 0 for c in GenevalCategory):
        missing = [c.value for c in GenevalCategory if counts[c] == 0]
        note = "no prompts for: " + ", ".join(missing)
    return (
        EvalReport(
            mode=mode,
            n_items=len(suite),
            per_category=per_cat,
            category_counts={c.value: counts[c] for c in GenevalCategory if counts[c]},
            overall=overall,
            ungrammatical=ungrammatical,
            hypo_per_category=hypo_cat,
            hypo_overall=hypo_overall,
            note=note,
        ),
        traces,
    )
