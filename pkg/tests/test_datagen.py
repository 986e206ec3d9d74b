import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcot import datagen as D
from mmcot import world
from mmcot.codec import Codebook, decode_tokens
from mmcot.datagen import (
    ComplexityProfile,
    CorruptionModel,
    brainstorm_prompts,
    corrupt_scene,
    decompose_subgoals,
    make_critique_trace,
    make_subgoal_trace,
    parse_critique,
    quality_filter,
    render_critique,
    scene_diff,
)
from mmcot.traces import MODE_CRITIQUE, MODE_SUBGOAL, validate_trace
from mmcot.vocab import default_vocab
from mmcot.world import ObjectSpec, SceneSpec

from conftest import random_scene, scenes

CB = Codebook.from_seed()
VOCAB = default_vocab()


class TestBrainstorm:
    def test_unique_and_deterministic(self):
        a = brainstorm_prompts(100, seed=5)
        b = brainstorm_prompts(100, seed=5)
        prompts_a = [p for _, p in a]
        assert len(prompts_a) == len(set(prompts_a)) == 100
        assert a == b

    def test_different_seed_differs(self):
        a = brainstorm_prompts(50, seed=5)
        b = brainstorm_prompts(50, seed=6)
        assert [p for _, p in a] != [p for _, p in b]

    def test_two_object_only_profile(self):
        items = brainstorm_prompts(30, seed=1, profile=ComplexityProfile.only("two"))
        assert all(len(spec.objects) == 2 for spec, _ in items)

    def test_exclusion(self):
        first = brainstorm_prompts(20, seed=2)
        held_out = brainstorm_prompts(20, seed=3, exclude_prompts={p for _, p in first})
        assert not ({p for _, p in first} & {p for _, p in held_out})

    def test_space_exhaustion_returns_fewer(self):
        # only 32 single-object prompts exist
        items = brainstorm_prompts(100, seed=0, profile=ComplexityProfile.only("single"))
        assert len(items) == 32

    def test_scene_matches_prompt(self):
        for spec, prompt in brainstorm_prompts(40, seed=9):
            assert D.prompt_for(spec) == prompt
            world.validate_scene(spec)


class TestDecompose:
    def test_single_is_identity(self, rng):
        spec = random_scene(rng, 1)
        subs = decompose_subgoals(spec)
        assert len(subs) == 1
        assert subs[0].objects == spec.objects

    def test_order_preserved(self, rng):
        spec = random_scene(rng, 3, extents=(1,))
        subs = decompose_subgoals(spec)
        assert [s.objects[0] for s in subs] == list(spec.objects)

    @settings(max_examples=60, deadline=None)
    @given(scenes(max_objects=3, extents=(1,)))
    def test_overlay_union_equals_full_render(self, spec):
        full = world.render_scene(spec).cells
        acc = np.zeros_like(full)
        for sub in decompose_subgoals(spec):
            part = world.render_scene(sub).cells
            assert np.all((acc == 0) | (part == 0)), "subgoals must not overlap"
            acc = acc + part
        assert np.array_equal(acc, full)


class TestSubgoalTrace:
    def test_two_object_structure(self, rng):
        spec = random_scene(rng, 2, extents=(1,))
        trace = make_subgoal_trace(spec, CB)
        validate_trace(trace, 64)
        images = [s for s in trace.segments if s.tokens is not None]
        texts = [s for s in trace.segments if s.text is not None]
        assert len(images) == 3 and len(texts) == 3

    def test_single_object_structure(self, rng):
        spec = random_scene(rng, 1)
        trace = make_subgoal_trace(spec, CB)
        kinds = [s.kind.value for s in trace.segments]
        assert kinds == ["text_planning", "visual_subgoal", "reflection", "final_image"]

    def test_final_marker_on_last_reflection_only(self, rng):
        spec = random_scene(rng, 3, extents=(1,))
        trace = make_subgoal_trace(spec, CB)
        reflections = [s.text for s in trace.segments if s.kind.value == "reflection"]
        assert all("final" not in r for r in reflections[:-1])
        assert "final" in reflections[-1]

    def test_final_decodes_to_spec(self, rng):
        spec = random_scene(rng, 2, extents=(1,))
        trace = make_subgoal_trace(spec, CB)
        grid, _ = decode_tokens(trace.segments[-1].tokens, spec.canvas_size, CB)
        det = world.detect_objects(grid)
        assert sorted((o.shape, o.color, o.anchor) for o in det.objects) == \
               sorted((o.shape, o.color, o.anchor) for o in spec.objects)

    def test_templates_tokenizable(self, rng):
        for _ in range(20):
            spec = random_scene(rng, int(rng.integers(1, 4)), extents=(1,))
            trace = make_subgoal_trace(spec, CB)
            VOCAB.tokenize(trace.prompt)
            for seg in trace.segments:
                if seg.text is not None:
                    VOCAB.tokenize(seg.text)


class TestCorruption:
    def test_identity_below_rate(self, rng):
        spec = random_scene(rng, 2)
        c = CorruptionModel(flaw_rate=0.0)
        out = corrupt_scene(spec, c, np.random.default_rng(0))
        assert out.objects == spec.objects

    def test_always_flawed_at_rate_one(self, rng):
        spec = random_scene(rng, 2, extents=(1,))
        c = CorruptionModel(flaw_rate=1.0)
        out = corrupt_scene(spec, c, np.random.default_rng(0))
        assert out.objects != spec.objects

    def test_corrupted_scene_valid(self, rng):
        c = CorruptionModel(flaw_rate=1.0)
        for i in range(50):
            spec = random_scene(rng, int(rng.integers(1, 4)), extents=(1,))
            out = corrupt_scene(spec, c, np.random.default_rng(i))
            world.validate_scene(out)

    def test_bad_weights_rejected(self):
        with pytest.raises(D.DatagenError, match="sum to 1"):
            CorruptionModel(flaw_weights={"drop_object": 0.5})

    def test_wrong_color_is_next_palette(self):
        spec = SceneSpec(objects=(ObjectSpec("square", "red", (2, 2)),), canvas_size=8)
        out = D._apply_flaw(spec, "wrong_color", np.random.default_rng(0))
        assert out.objects[0].color == "blue"


class TestDiffAndCritique:
    def test_identity_diff_empty(self, rng):
        spec = random_scene(rng, 2)
        assert scene_diff(spec, spec) == ()
        assert render_critique(()) == "the image matches the prompt"

    def test_recolor_named(self):
        target = SceneSpec(objects=(ObjectSpec("square", "red", (2, 2)),), canvas_size=8)
        hypo = SceneSpec(objects=(ObjectSpec("square", "blue", (2, 2)),), canvas_size=8)
        diff = scene_diff(hypo, target)
        text = render_critique(diff)
        assert text == "the square should be red not blue"
        assert "square should be red" in text

    def test_parse_inverts_render(self, rng):
        c = CorruptionModel(flaw_rate=1.0)
        for i in range(100):
            spec = random_scene(rng, int(rng.integers(1, 4)), extents=(1,))
            corrupted = corrupt_scene(spec, c, np.random.default_rng(i))
            diff = scene_diff(corrupted, spec)
            assert parse_critique(render_critique(diff)) == diff

    def test_critique_trace_faithful(self, rng):
        # every stated discrepancy equals the oracle diff, over many seeds
        c = CorruptionModel(flaw_rate=0.9)
        for i in range(500):
            spec = random_scene(rng, int(rng.integers(1, 4)), extents=(1,))
            r = np.random.default_rng(i)
            trace = make_critique_trace(spec, c, CB, r)
            grid, _ = decode_tokens(trace.segments[0].tokens, spec.canvas_size, CB)
            det = world.detect_objects(grid)
            hypo_objs = tuple(
                ObjectSpec(o.shape, o.color, o.anchor, o.extent) for o in det.objects
            )
            hypo = SceneSpec(objects=hypo_objs, relations=(), canvas_size=spec.canvas_size)
            assert parse_critique(trace.segments[1].text) == scene_diff(hypo, spec)

    def test_identity_corruption_final_equals_hypothesis(self, rng):
        spec = random_scene(rng, 2)
        c = CorruptionModel(flaw_rate=0.0)
        trace = make_critique_trace(spec, c, CB, np.random.default_rng(0))
        assert trace.segments[1].text == "the image matches the prompt"
        assert trace.segments[0].tokens == trace.segments[-1].tokens


class TestQualityFilter:
    def test_subgoal_traces_kept(self, rng):
        for _ in range(20):
            spec = random_scene(rng, int(rng.integers(1, 4)), extents=(1,))
            keep, reason = quality_filter(make_subgoal_trace(spec, CB), spec, CB, 64)
            assert keep, reason

    def test_corrupted_final_dropped(self, rng):
        spec = random_scene(rng, 2, extents=(1,))
        c = CorruptionModel(flaw_rate=1.0)
        trace = make_critique_trace(spec, c, CB, np.random.default_rng(1))
        # swap final for the corrupted hypothesis
        bad = type(trace)(prompt=trace.prompt, mode=trace.mode,
                          segments=(trace.segments[0], trace.segments[1], trace.segments[0].__class__(
                              kind=trace.segments[2].kind, tokens=trace.segments[0].tokens)))
        keep, reason = quality_filter(bad, spec, CB, 64)
        assert not keep and "mismatches" in reason


class TestPipeline:
    def test_dataset_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        m1 = D.generate_dataset("subgoal", 30, seed=11, out_dir=a, codebook=CB)
        m2 = D.generate_dataset("subgoal", 30, seed=11, out_dir=b, codebook=CB)
        assert (a / "traces.jsonl").read_bytes() == (b / "traces.jsonl").read_bytes()
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        assert m1 == m2

    def test_manifest_accounting(self, tmp_path):
        m = D.generate_dataset("critique", 25, seed=3, out_dir=tmp_path / "d", codebook=CB)
        lines = (tmp_path / "d" / "traces.jsonl").read_text().strip().splitlines()
        assert m.n_emitted == len(lines)
        assert m.filter_pass_rate == 1.0
        assert m.counts == {"critique": m.n_emitted}

    def test_stage1_direct_mode(self, tmp_path):
        from mmcot.traces import read_traces

        D.generate_dataset("stage1", 40, seed=7, out_dir=tmp_path / "s1", codebook=CB)
        traces = read_traces(tmp_path / "s1" / "traces.jsonl")
        assert traces and all(t.mode == "direct" for t in traces)
        for t in traces:
            validate_trace(t, 64)

    def test_build_stage1_pairs(self):
        a, scenes_a = D.build_stage1_pairs(2000, seed=4, codebook=CB)
        b, _ = D.build_stage1_pairs(2000, seed=4, codebook=CB)
        assert a == b
        # single-object prompt space holds 32 unique prompts
        assert len(a) == 32
        assert all(t.mode == "direct" for t in a)
        assert len(scenes_a) == len(a)

    def test_emitted_traces_grammar_valid(self, tmp_path):
        from mmcot.traces import assemble_trace, parse_sequence, read_traces

        D.generate_dataset("subgoal", 15, seed=5, out_dir=tmp_path / "g", codebook=CB)
        for t in read_traces(tmp_path / "g" / "traces.jsonl"):
            seq = assemble_trace(t, VOCAB, 64)
            assert parse_sequence(seq, VOCAB, 64) == t
