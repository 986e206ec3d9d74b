"""Synthetic training-data pipeline: prompt brainstorming with dedup, subgoal
decomposition, critique-chain construction against a simulated flawed
first-round generator, trace assembly, and an oracle quality filter.

All stages are deterministic given (seed, config): each prompt index derives
its own RNG stream, so output is identical no matter how work is scheduled.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import world
from .codec import Codebook, encode_image
from .traces import (
    MODE_CRITIQUE,
    MODE_DIRECT,
    MODE_SUBGOAL,
    Segment,
    SegmentKind,
    ThoughtTrace,
    validate_trace,
    write_traces,
)
from .world import ObjectSpec, SceneSpec, describe_scene, render_scene

GENERATOR_VERSION = "mmcot-datagen-1"

FLAW_KINDS = ("drop_object", "wrong_color", "wrong_shape", "wrong_position", "extra_object")

SCENE_KINDS = ("single", "two", "counting", "position", "color_attri", "three", "four")


class DatagenError(ValueError):
    pass


@dataclass(frozen=True)
class ComplexityProfile:
    """Controls the scene mix the brainstormer draws from."""

    kind_weights: dict = field(
        default_factory=lambda: {
            "single": 0.15,
            "two": 0.30,
            "counting": 0.15,
            "position": 0.15,
            "color_attri": 0.15,
            "three": 0.10,
        }
    )
    extents: tuple[int, ...] = (1,)
    canvas_size: int = world.DEFAULT_CANVAS

    def __post_init__(self):
        for k in self.kind_weights:
            if k not in SCENE_KINDS:
                raise DatagenError(f"unknown scene kind {k!r}")
        if not self.kind_weights or sum(self.kind_weights.values()) <= 0:
            raise DatagenError("kind_weights must have positive total weight")

    @classmethod
    def only(cls, kind: str, **kw) -> "ComplexityProfile":
        return cls(kind_weights={kind: 1.0}, **kw)


@dataclass(frozen=True)
class CorruptionModel:
    """Simulates the flawed first-round generator whose mistakes critique
    traces learn to correct.

    With probability flaw_rate one flaw kind is drawn from flaw_weights and
    applied with deterministic parameters (color/shape shift by +1 in enum
    order, position mirror or swap, drop last, add one extra at the first
    free anchor); otherwise the scene is left intact.
    """

    flaw_weights: dict = field(default_factory=lambda: {k: 0.2 for k in FLAW_KINDS})
    flaw_rate: float = 0.85
    seed: int = 0
    max_retries: int = 8

    def __post_init__(self):
        if not (0.0 <= self.flaw_rate <= 1.0):
            raise DatagenError("flaw_rate must be in [0, 1]")
        total = sum(self.flaw_weights.values())
        if abs(total - 1.0) > 1e-9:
            raise DatagenError(f"flaw weights must sum to 1, got {total}")
        if not any(w > 0 for w in self.flaw_weights.values()):
            raise DatagenError("at least one flaw kind must be enabled")
        for k in self.flaw_weights:
            if k not in FLAW_KINDS:
                raise DatagenError(f"unknown flaw kind {k!r}")


def _next_color(color: str) -> str:
    return world.COLORS[(world.COLORS.index(color) + 1) % len(world.COLORS)]


def _next_shape(shape: str) -> str:
    return world.SHAPES[(world.SHAPES.index(shape) + 1) % len(world.SHAPES)]


def _valid(spec: SceneSpec) -> bool:
    try:
        world.validate_scene(spec)
        return True
    except world.SceneError:
        return False


def _first_free_anchor(spec: SceneSpec, shape: str, extent: int) -> tuple[int, int] | None:
    blocked: set[tuple[int, int]] = set()
    for obj in spec.objects:
        blocked |= world._neighborhood(obj.cells())
    h, w = world.stencil_size(shape, extent)
    g = spec.canvas_size
    for r in range(g - h + 1):
        for c in range(g - w + 1):
            if not any((r + dr, c + dc) in blocked for dr, dc in world.STENCILS[(shape, extent)]):
                return (r, c)
    return None


def _apply_flaw(spec: SceneSpec, kind: str, rng: np.random.Generator) -> SceneSpec | None:
    objs = list(spec.objects)
    if kind == "drop_object":
        if len(objs) < 2:
            return None
        out = SceneSpec(objects=tuple(objs[:-1]), relations=(), canvas_size=spec.canvas_size)
    elif kind == "wrong_color":
        i = int(rng.integers(len(objs)))
        o = objs[i]
        objs[i] = ObjectSpec(o.shape, _next_color(o.color), o.anchor, o.extent)
        out = SceneSpec(objects=tuple(objs), relations=(), canvas_size=spec.canvas_size)
    elif kind == "wrong_shape":
        i = int(rng.integers(len(objs)))
        o = objs[i]
        objs[i] = ObjectSpec(_next_shape(o.shape), o.color, o.anchor, o.extent)
        out = SceneSpec(objects=tuple(objs), relations=(), canvas_size=spec.canvas_size)
    elif kind == "wrong_position":
        if len(objs) >= 2:
            a, b = objs[0], objs[1]
            objs[0] = ObjectSpec(a.shape, a.color, b.anchor, a.extent)
            objs[1] = ObjectSpec(b.shape, b.color, a.anchor, b.extent)
        else:
            o = objs[0]
            g = spec.canvas_size
            h, w = world.stencil_size(o.shape, o.extent)
            mirrored = (g - h - o.anchor[0], g - w - o.anchor[1])
            if mirrored == o.anchor:
                return None
            objs[0] = ObjectSpec(o.shape, o.color, mirrored, o.extent)
        out = SceneSpec(objects=tuple(objs), relations=(), canvas_size=spec.canvas_size)
    elif kind == "extra_object":
        if len(objs) >= world.MAX_OBJECTS:
            return None
        shape = _next_shape(objs[-1].shape)
        color = _next_color(objs[-1].color)
        anchor = _first_free_anchor(spec, shape, 1)
        if anchor is None:
            return None
        out = SceneSpec(
            objects=tuple(objs) + (ObjectSpec(shape, color, anchor, 1),),
            relations=(),
            canvas_size=spec.canvas_size,
        )
    else:
        raise DatagenError(f"unknown flaw kind {kind!r}")
    return out if _valid(out) else None


def corrupt_scene(spec: SceneSpec, corruption: CorruptionModel, rng: np.random.Generator) -> SceneSpec:
    """Return the simulated first-round scene; identical to spec when no flaw
    is drawn. Raises after max_retries failed corruption attempts."""
    if rng.random() >= corruption.flaw_rate:
        return SceneSpec(objects=spec.objects, relations=(), canvas_size=spec.canvas_size)
    kinds = [k for k, w in corruption.flaw_weights.items() if w > 0]
    weights = np.array([corruption.flaw_weights[k] for k in kinds])
    weights = weights / weights.sum()
    for _ in range(corruption.max_retries):
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        out = _apply_flaw(spec, kind, rng)
        if out is not None:
            return out
    raise DatagenError(f"could not corrupt scene after {corruption.max_retries} attempts")


# ---------------------------------------------------------------------------
# Oracle diff and critique templates


@dataclass(frozen=True)
class Discrepancy:
    kind: str  # recolor | reshape | missing | extra | moved | none
    shape: str
    color: str
    found: str | None = None  # found color (recolor) or found shape (reshape)


def scene_diff(hypothesis: SceneSpec, target: SceneSpec) -> tuple[Discrepancy, ...]:
    """Compare a flawed scene against the target it should have been.

    Objects are matched by anchor first (attribute changes), then by
    (shape, color) away from their anchor (moves); leftovers are missing or
    extra. Output order is deterministic: target order, then extras.
    """
    hyp = list(hypothesis.objects)
    out: list[Discrepancy] = []
    unmatched_targets: list[ObjectSpec] = []
    for t in target.objects:
        exact = next(
            (h for h in hyp if (h.shape, h.color, h.anchor, h.extent)
             == (t.shape, t.color, t.anchor, t.extent)),
            None,
        )
        if exact is not None:
            hyp.remove(exact)
            continue
        same_anchor = next((h for h in hyp if h.anchor == t.anchor and h.extent == t.extent), None)
        if same_anchor is not None:
            hyp.remove(same_anchor)
            if same_anchor.shape == t.shape and same_anchor.color != t.color:
                out.append(Discrepancy("recolor", t.shape, t.color, found=same_anchor.color))
                continue
            if same_anchor.color == t.color and same_anchor.shape != t.shape:
                out.append(Discrepancy("reshape", t.shape, t.color, found=same_anchor.shape))
                continue
            out.append(Discrepancy("missing", t.shape, t.color))
            hyp.append(same_anchor)
            continue
        unmatched_targets.append(t)
    for t in unmatched_targets:
        moved = next((h for h in hyp if (h.shape, h.color) == (t.shape, t.color)), None)
        if moved is not None:
            hyp.remove(moved)
            out.append(Discrepancy("moved", t.shape, t.color))
        else:
            out.append(Discrepancy("missing", t.shape, t.color))
    for h in hyp:
        out.append(Discrepancy("extra", h.shape, h.color))
    return tuple(out)


def render_critique(diff: Sequence[Discrepancy]) -> str:
    """Deterministic closed-vocabulary critique text for an oracle diff."""
    if not diff:
        return "the image matches the prompt"
    parts = []
    for d in diff:
        if d.kind == "recolor":
            parts.append(f"the {d.shape} should be {d.color} not {d.found}")
        elif d.kind == "reshape":
            parts.append(f"the {d.color} {d.found} should be a {d.shape}")
        elif d.kind == "missing":
            parts.append(f"add a {d.color} {d.shape}")
        elif d.kind == "extra":
            parts.append(f"remove the extra {d.color} {d.shape}")
        elif d.kind == "moved":
            parts.append(f"move the {d.color} {d.shape}")
        else:
            raise DatagenError(f"unknown discrepancy kind {d.kind!r}")
    return " and ".join(parts)


def parse_critique(text: str) -> tuple[Discrepancy, ...]:
    """Inverse of render_critique; used to check critique faithfulness."""
    if text == "the image matches the prompt":
        return ()
    out = []
    for part in text.split(" and "):
        w = part.split()
        if w[:1] == ["add"]:
            out.append(Discrepancy("missing", w[3], w[2]))
        elif w[:1] == ["remove"]:
            out.append(Discrepancy("extra", w[4], w[3]))
        elif w[:1] == ["move"]:
            out.append(Discrepancy("moved", w[3], w[2]))
        elif w[:1] == ["the"] and "not" in w:
            out.append(Discrepancy("recolor", w[1], w[4], found=w[6]))
        elif w[:1] == ["the"] and w[3:5] == ["should", "be"]:
            out.append(Discrepancy("reshape", w[6], w[1], found=w[2]))
        else:
            raise DatagenError(f"cannot parse critique clause {part!r}")
    return tuple(out)


# ---------------------------------------------------------------------------
# Scene brainstorming


def _rand_pair(rng, exclude=()):
    while True:
        shape = world.SHAPES[int(rng.integers(len(world.SHAPES)))]
        color = world.COLORS[int(rng.integers(len(world.COLORS)))]
        if (shape, color) not in exclude:
            return shape, color


def _build_scene(kind: str, rng: np.random.Generator, profile: ComplexityProfile) -> SceneSpec | None:
    g = profile.canvas_size
    ext = lambda: int(profile.extents[int(rng.integers(len(profile.extents)))])
    if kind == "single":
        shape, color = _rand_pair(rng)
        placed = world.place_objects(rng, [(shape, color, ext())], g)
    elif kind in ("two", "three", "four"):
        n = {"two": 2, "three": 3, "four": 4}[kind]
        pairs: list[tuple[str, str]] = []
        for _ in range(n):
            pairs.append(_rand_pair(rng, exclude=pairs))
        placed = world.place_objects(rng, [(s, c, ext()) for s, c in pairs], g)
    elif kind == "counting":
        shape, color = _rand_pair(rng)
        n = int(rng.integers(2, 5))
        placed = world.place_objects(rng, [(shape, color, 1)] * n, g)
    elif kind == "color_attri":
        s1, c1 = _rand_pair(rng)
        s2 = world.SHAPES[int((world.SHAPES.index(s1) + 1 + rng.integers(len(world.SHAPES) - 1)) % len(world.SHAPES))]
        c2 = _next_color(c1) if rng.random() < 0.5 else _rand_pair(rng, exclude=[(s2, c1)])[1]
        if (s2, c2) == (s1, c1) or c2 == c1:
            c2 = _next_color(c1)
        placed = world.place_objects(rng, [(s1, c1, ext()), (s2, c2, ext())], g)
    elif kind == "position":
        p1 = _rand_pair(rng)
        p2 = _rand_pair(rng, exclude=[p1])
        placed = world.place_objects(rng, [(p1[0], p1[1], ext()), (p2[0], p2[1], ext())], g)
        if placed is None:
            return None
        rels = [r for r in world.RELATIONS
                if world.relation_holds(r, placed[0].anchor, placed[1].anchor)]
        if not rels:
            return None
        rel = rels[int(rng.integers(len(rels)))]
        return SceneSpec(objects=placed, relations=((0, rel, 1),), canvas_size=g)
    else:
        raise DatagenError(f"unknown scene kind {kind!r}")
    if placed is None:
        return None
    return SceneSpec(objects=placed, relations=(), canvas_size=g)


def prompt_for(spec: SceneSpec) -> str:
    return describe_scene(spec, "relational" if spec.relations else "plain")


def brainstorm_prompts(
    n: int,
    seed: int,
    profile: ComplexityProfile | None = None,
    exclude_prompts: set[str] | frozenset[str] = frozenset(),
) -> list[tuple[SceneSpec, str]]:
    """Random valid scenes with template prompts, deduplicated by prompt text.

    Emits up to n unique prompts; stops early when the profile's prompt space
    is exhausted (bounded attempts), which the manifest records.
    """
    if n <= 0:
        raise DatagenError("n must be positive")
    profile = profile or ComplexityProfile()
    kinds = sorted(profile.kind_weights)
    weights = np.array([profile.kind_weights[k] for k in kinds], dtype=float)
    weights /= weights.sum()
    seen: set[str] = set(exclude_prompts)
    out: list[tuple[SceneSpec, str]] = []
    attempts = 0
    max_attempts = 200 * n
    while len(out) < n and attempts < max_attempts:
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempts)))
        attempts += 1
        kind = kinds[int(rng.choice(len(kinds), p=weights))]
        spec = _build_scene(kind, rng, profile)
        if spec is None:
            continue
        prompt = prompt_for(spec)
        if prompt in seen:
            continue
        seen.add(prompt)
        out.append((spec, prompt))
    return out


# ---------------------------------------------------------------------------
# Trace builders


def decompose_subgoals(spec: SceneSpec) -> list[SceneSpec]:
    """One single-object scene per object, in object order, anchors kept."""
    if not spec.objects:
        raise DatagenError("cannot decompose an empty scene")
    return [
        SceneSpec(objects=(obj,), relations=(), canvas_size=spec.canvas_size)
        for obj in spec.objects
    ]


def make_direct_trace(spec: SceneSpec, codebook: Codebook) -> ThoughtTrace:
    final = encode_image(render_scene(spec), codebook)
    return ThoughtTrace(
        prompt=prompt_for(spec),
        mode=MODE_DIRECT,
        segments=(Segment(SegmentKind.FINAL_IMAGE, tokens=final),),
    )


def _planning_text(spec: SceneSpec) -> str:
    parts = [world.object_phrase(o.color, o.shape) for o in spec.objects]
    return "plan " + " then ".join(parts)


def make_subgoal_trace(spec: SceneSpec, codebook: Codebook) -> ThoughtTrace:
    """Planning, one (subgoal image, reflection) pair per object, final image.

    Each reflection confirms the drawn component; the last one carries the
    "final" marker that tells the decoder the next image completes the trace.
    """
    subgoals = decompose_subgoals(spec)
    segments: list[Segment] = [Segment(SegmentKind.TEXT_PLANNING, text=_planning_text(spec))]
    for i, sub in enumerate(subgoals):
        segments.append(
            Segment(SegmentKind.VISUAL_SUBGOAL, tokens=encode_image(render_scene(sub), codebook))
        )
        obj = spec.objects[i]
        done = f"the {obj.color} {obj.shape} is done"
        if i + 1 < len(subgoals):
            nxt = spec.objects[i + 1]
            text = f"{done} next {world.object_phrase(nxt.color, nxt.shape)}"
        else:
            text = f"{done} final image now"
        segments.append(Segment(SegmentKind.REFLECTION, text=text))
    segments.append(
        Segment(SegmentKind.FINAL_IMAGE, tokens=encode_image(render_scene(spec), codebook))
    )
    return ThoughtTrace(prompt=prompt_for(spec), mode=MODE_SUBGOAL, segments=tuple(segments))


def make_critique_trace(
    spec: SceneSpec,
    corruption: CorruptionModel,
    codebook: Codebook,
    rng: np.random.Generator | None = None,
) -> ThoughtTrace:
    """Corrupted hypothesis image, oracle-diff critique text, true final image."""
    rng = rng if rng is not None else np.random.default_rng(corruption.seed)
    corrupted = corrupt_scene(spec, corruption, rng)
    diff = scene_diff(corrupted, spec)
    return ThoughtTrace(
        prompt=prompt_for(spec),
        mode=MODE_CRITIQUE,
        segments=(
            Segment(SegmentKind.INITIAL_HYPOTHESIS, tokens=encode_image(render_scene(corrupted), codebook)),
            Segment(SegmentKind.CRITIQUE, text=render_critique(diff)),
            Segment(SegmentKind.FINAL_IMAGE, tokens=encode_image(render_scene(spec), codebook)),
        ),
    )


# ---------------------------------------------------------------------------
# Quality filter and the full pipeline


def quality_filter(
    trace: ThoughtTrace, target: SceneSpec, codebook: Codebook, block_len: int
) -> tuple[bool, str | None]:
    """Keep a trace only if its final image scores 1 in every category that
    applies to the target. Synthetic traces pass by construction; the filter
    guards model-generated data fed back into training."""
    from .codec import decode_tokens

    validate_trace(trace, block_len)
    final = trace.segments[-1].tokens
    grid, lossy = decode_tokens(final, target.canvas_size, codebook)
    if lossy:
        return False, "final image uses out-of-palette tokens"
    detected = world.detect_objects(grid)
    for cat in world.applicable_categories(target):
        if world.score_geneval(detected, target, cat) != 1:
            return False, f"final mismatches spec on {cat.value}"
    return True, None


@dataclass(frozen=True)
class DatasetManifest:
    mode: str
    seed: int
    generator_version: str
    n_requested: int
    n_emitted: int
    n_filtered: int
    filter_pass_rate: float
    counts: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "mode": self.mode,
                "seed": self.seed,
                "generator_version": self.generator_version,
                "n_requested": self.n_requested,
                "n_emitted": self.n_emitted,
                "n_filtered": self.n_filtered,
                "filter_pass_rate": self.filter_pass_rate,
                "counts": self.counts,
            },
            sort_keys=True,
            indent=2,
        )


def build_stage1_pairs(
    n: int,
    seed: int,
    codebook: Codebook,
    profile: ComplexityProfile | None = None,
) -> tuple[list[ThoughtTrace], list[SceneSpec]]:
    """Captioned-scene pairs for first-stage training (direct mode)."""
    profile = profile or ComplexityProfile.only("single")
    scenes = brainstorm_prompts(n, seed, profile)
    return [make_direct_trace(spec, codebook) for spec, _ in scenes], [s for s, _ in scenes]


def generate_dataset(
    mode: str,
    n: int,
    seed: int,
    out_dir,
    codebook: Codebook,
    profile: ComplexityProfile | None = None,
    corruption: CorruptionModel | None = None,
    exclude_prompts: set[str] | frozenset[str] = frozenset(),
) -> DatasetManifest:
    """Run the full pipeline and write traces.jsonl, scenes.jsonl, manifest.json."""
    if mode not in ("stage1", MODE_DIRECT, MODE_SUBGOAL, MODE_CRITIQUE):
        raise DatagenError(f"unknown dataset mode {mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if mode == "stage1":
        profile = profile or ComplexityProfile.only("single")
        trace_mode = MODE_DIRECT
    else:
        profile = profile or ComplexityProfile()
        trace_mode = mode
    scenes = brainstorm_prompts(n, seed, profile, exclude_prompts=exclude_prompts)
    corruption = corruption or CorruptionModel(seed=seed)
    block_len = profile.canvas_size * profile.canvas_size

    traces: list[ThoughtTrace] = []
    kept_scenes: list[SceneSpec] = []
    n_filtered = 0
    for idx, (spec, _) in enumerate(scenes):
        if trace_mode == MODE_DIRECT:
            trace = make_direct_trace(spec, codebook)
        elif trace_mode == MODE_SUBGOAL:
            trace = make_subgoal_trace(spec, codebook)
        else:
            rng = np.random.default_rng(np.random.SeedSequence((corruption.seed, idx)))
            trace = make_critique_trace(spec, corruption, codebook, rng)
        keep, _reason = quality_filter(trace, spec, codebook, block_len)
        if keep:
            traces.append(trace)
            kept_scenes.append(spec)
        else:
            n_filtered += 1

    write_traces(traces, out_dir / "traces.jsonl")
    world.write_scenes(kept_scenes, out_dir / "scenes.jsonl")
    manifest = DatasetManifest(
        mode=mode,
        seed=seed,
        generator_version=GENERATOR_VERSION,
        n_requested=n,
        n_emitted=len(traces),
        n_filtered=n_filtered,
        filter_pass_rate=(len(traces) / (len(traces) + n_filtered)) if traces or n_filtered else 0.0,
        counts={trace_mode: len(traces)},
    )
    (out_dir / "manifest.json").write_text(manifest.to_json() + "\n")
    return manifest
