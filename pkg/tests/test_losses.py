import math

import numpy as np
import pytest
import torch

from mmcot import losses as L
from mmcot.batching import collate, example_from_trace
from mmcot.codec import Codebook, VisualTokenBlock
from mmcot.model import ModelConfig, TinyMultimodalLM
from mmcot.traces import (
    MODE_CRITIQUE,
    MODE_DIRECT,
    Segment,
    SegmentKind,
    ThoughtTrace,
)
from mmcot.vocab import UnifiedVocab, default_vocab

from gradcheck import finite_difference_max_rel_err

torch.set_num_threads(1)

VOCAB = default_vocab(num_visual=9)
CB = Codebook.from_seed()
BLOCK = 64


def rand_logits(rng, b, l, v):
    return torch.tensor(rng.standard_normal((b, l, v)), dtype=torch.float64)


class TestLossMM:
    def test_near_one_hot(self):
        ids = torch.tensor([[1, 2, 3, 4]])
        logits = torch.zeros((1, 4, 10), dtype=torch.float64)
        for j in range(3):
            logits[0, j, ids[0, j + 1]] = 100.0
        mask = torch.ones((1, 4), dtype=torch.bool)
        assert float(L.loss_mm(logits, ids, mask)) < 1e-6

    def test_uniform_is_ln_v(self):
        v = 37
        ids = torch.tensor([[1, 2, 3, 4, 5]])
        logits = torch.zeros((1, 5, v), dtype=torch.float64)
        mask = torch.ones((1, 5), dtype=torch.bool)
        assert abs(float(L.loss_mm(logits, ids, mask)) - math.log(v)) < 1e-12

    def test_no_valid_positions_zero(self):
        ids = torch.zeros((1, 4), dtype=torch.long)
        logits = torch.zeros((1, 4, 10), dtype=torch.float64)
        mask = torch.zeros((1, 4), dtype=torch.bool)
        assert float(L.loss_mm(logits, ids, mask)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(L.LossError, match="shape mismatch"):
            L.loss_mm(torch.zeros((1, 4, 10)), torch.zeros((1, 5), dtype=torch.long),
                      torch.ones((1, 5), dtype=torch.bool))

    def test_matches_reference_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            b, l, v = int(rng.integers(1, 4)), int(rng.integers(3, 12)), int(rng.integers(5, 40))
            logits = rand_logits(rng, b, l, v)
            ids = torch.tensor(rng.integers(0, v, size=(b, l)))
            mask = torch.tensor(rng.random((b, l)) < 0.7)
            got = float(L.loss_mm(logits, ids, mask))
            want = L.reference_nll(logits.numpy(), ids.numpy(), mask.numpy())
            if int(mask[:, 1:].sum()) == 0:
                assert got == 0.0 and want == 0.0
            else:
                assert abs(got - want) < 1e-9

    def test_duplication_invariance(self):
        rng = np.random.default_rng(1)
        logits = rand_logits(rng, 2, 8, 20)
        ids = torch.tensor(rng.integers(0, 20, size=(2, 8)))
        mask = torch.ones((2, 8), dtype=torch.bool)
        a = float(L.loss_mm(logits, ids, mask))
        b = float(L.loss_mm(logits.repeat(2, 1, 1), ids.repeat(2, 1), mask.repeat(2, 1)))
        assert abs(a - b) < 1e-12


class _ConstProj(torch.nn.Module):
    """Projection stub mapping everything to a fixed vector."""

    def __init__(self, vec):
        super().__init__()
        self.vec = vec

    def forward(self, x):
        return self.vec.expand(x.shape[0], -1)


class TestLossRec:
    def test_perfect_projection_zero(self):
        block = VisualTokenBlock((3,) * BLOCK)
        target_row = torch.tensor(CB.features[3], dtype=torch.float64)
        hidden = torch.zeros((1, BLOCK + 2, 8), dtype=torch.float64)
        proj = _ConstProj(target_row)
        out = L.loss_rec(hidden, [(0, 0)], proj, CB, [block], BLOCK)
        assert float(out) == 0.0

    def test_unit_offset_is_one(self):
        block = VisualTokenBlock((3,) * BLOCK)
        target_row = torch.tensor(CB.features[3], dtype=torch.float64)
        hidden = torch.zeros((1, BLOCK + 2, 8), dtype=torch.float64)
        proj = _ConstProj(target_row + 1.0)
        out = L.loss_rec(hidden, [(0, 0)], proj, CB, [block], BLOCK)
        assert abs(float(out) - 1.0) < 1e-12

    def test_no_images_zero(self):
        hidden = torch.zeros((2, 10, 8), dtype=torch.float64)
        proj = torch.nn.Linear(8, CB.feature_dim).to(torch.float64)
        assert float(L.loss_rec(hidden, [], proj, CB, [], BLOCK)) == 0.0

    def test_span_target_mismatch(self):
        hidden = torch.zeros((1, 70, 8), dtype=torch.float64)
        proj = torch.nn.Linear(8, CB.feature_dim).to(torch.float64)
        with pytest.raises(L.LossError, match="spans"):
            L.loss_rec(hidden, [(0, 0)], proj, CB, [], BLOCK)


def _collated_batch(rng, model_vocab=VOCAB, n=2):
    traces = []
    for _ in range(n):
        block = VisualTokenBlock(tuple(int(t) for t in rng.integers(0, 9, BLOCK)))
        traces.append(ThoughtTrace(
            prompt="a red square", mode=MODE_DIRECT,
            segments=(Segment(SegmentKind.FINAL_IMAGE, tokens=block),)))
    return collate([example_from_trace(t, model_vocab, BLOCK) for t in traces])


class TestLossTotal:
    def test_lambda_zero(self):
        rng = np.random.default_rng(2)
        model = TinyMultimodalLM(ModelConfig(vocab_size=VOCAB.size, layers=1, heads=2,
                                             hidden_dim=16, feedforward_dim=32,
                                             context_length=128, proj_dim=CB.feature_dim))
        batch = _collated_batch(rng)
        hidden, logits = model(batch.ids)
        total, report = L.loss_total(
            logits, batch.ids, batch.mask, hidden, batch.image_spans,
            model.visual_proj, CB, batch.target_blocks, BLOCK, VOCAB, lam=0.0)
        assert report.loss_total == report.loss_mm
        assert float(total.detach()) == report.loss_total

    def test_arithmetic(self):
        # loss_total = loss_mm + lambda * loss_rec, checked via the report
        rng = np.random.default_rng(3)
        model = TinyMultimodalLM(ModelConfig(vocab_size=VOCAB.size, layers=1, heads=2,
                                             hidden_dim=16, feedforward_dim=32,
                                             context_length=128, proj_dim=CB.feature_dim))
        batch = _collated_batch(rng)
        hidden, logits = model(batch.ids)
        _, report = L.loss_total(
            logits, batch.ids, batch.mask, hidden, batch.image_spans,
            model.visual_proj, CB, batch.target_blocks, BLOCK, VOCAB, lam=5.0)
        assert abs(report.loss_total - (report.loss_mm + 5.0 * report.loss_rec)) < 1e-12
        assert report.n_images == 2

    def test_negative_lambda_rejected(self):
        with pytest.raises(L.LossError, match="lambda"):
            L.loss_total(torch.zeros((1, 3, 5)), torch.zeros((1, 3), dtype=torch.long),
                         torch.ones((1, 3), dtype=torch.bool), torch.zeros((1, 3, 4)),
                         [], torch.nn.Linear(4, 4), CB, [], BLOCK, VOCAB, lam=-1.0)

    def test_rec_invariant_to_text_positions(self):
        # loss_rec reads only image-span hidden rows: perturbing hidden state
        # at text positions (and any text targets) cannot change it
        rng = np.random.default_rng(4)
        model = TinyMultimodalLM(ModelConfig(vocab_size=VOCAB.size, layers=1, heads=2,
                                             hidden_dim=16, feedforward_dim=32,
                                             context_length=128, proj_dim=CB.feature_dim))
        batch = _collated_batch(rng)
        hidden, logits = model(batch.ids)
        hidden = hidden.detach()
        rec1 = L.loss_rec(hidden, batch.image_spans, model.visual_proj, CB,
                          batch.target_blocks, BLOCK)
        perturbed = hidden.clone()
        image_positions = set()
        for row, boi in batch.image_spans:
            image_positions |= {(row, p) for p in range(boi, boi + BLOCK)}
        for row in range(perturbed.shape[0]):
            for pos in range(perturbed.shape[1]):
                if (row, pos) not in image_positions:
                    perturbed[row, pos] += 17.0
        rec2 = L.loss_rec(perturbed, batch.image_spans, model.visual_proj, CB,
                          batch.target_blocks, BLOCK)
        assert float(rec1) == float(rec2)

    def test_duplicating_batch_leaves_losses_unchanged(self):
        rng = np.random.default_rng(6)
        model = TinyMultimodalLM(ModelConfig(vocab_size=VOCAB.size, layers=1, heads=2,
                                             hidden_dim=16, feedforward_dim=32,
                                             context_length=128, proj_dim=CB.feature_dim))
        batch = _collated_batch(rng, n=2)
        hidden, logits = model(batch.ids)
        _, rep1 = L.loss_total(logits, batch.ids, batch.mask, hidden, batch.image_spans,
                               model.visual_proj, CB, batch.target_blocks, BLOCK, VOCAB)
        spans2 = batch.image_spans + [(r + 2, b) for r, b in batch.image_spans]
        _, rep2 = L.loss_total(
            logits.repeat(2, 1, 1), batch.ids.repeat(2, 1), batch.mask.repeat(2, 1),
            hidden.repeat(2, 1, 1), spans2, model.visual_proj, CB,
            batch.target_blocks * 2, BLOCK, VOCAB)
        assert abs(rep1.loss_mm - rep2.loss_mm) < 1e-9
        assert abs(rep1.loss_rec - rep2.loss_rec) < 1e-9


class TestGradients:
    def test_gradcheck_tiny_config(self):
        # 1 layer, D=8, V=24, T=4, D'=4 in double precision
        words = ("a", "red", "square", "blue", "circle", "and", "green", "the",
                 "is", "not", "one", "two", "three", "four")
        vocab = UnifiedVocab(num_visual=4, words=words)
        assert vocab.size == 24
        cb = Codebook.from_seed(num_entries=4, feature_dim=4)
        cfg = ModelConfig(vocab_size=vocab.size, layers=1, heads=2, hidden_dim=8,
                          feedforward_dim=16, context_length=32, proj_dim=4, seed=1)
        model = TinyMultimodalLM(cfg)
        rng = np.random.default_rng(5)
        block = VisualTokenBlock(tuple(int(t) for t in rng.integers(0, 4, size=4)))
        trace = ThoughtTrace(prompt="a red square", mode=MODE_CRITIQUE, segments=(
            Segment(SegmentKind.INITIAL_HYPOTHESIS, tokens=block),
            Segment(SegmentKind.CRITIQUE, text="not red"),
            Segment(SegmentKind.FINAL_IMAGE, tokens=block),
        ))
        batch = collate([example_from_trace(trace, vocab, 4)])

        def loss_fn():
            hidden, logits = model(batch.ids)
            total, _ = L.loss_total(logits, batch.ids, batch.mask, hidden,
                                    batch.image_spans, model.visual_proj, cb,
                                    batch.target_blocks, 4, vocab, lam=1.0)
            return total

        err = finite_difference_max_rel_err(model, loss_fn, step=1e-5)
        assert err < 1e-4, f"max relative gradient error {err}"
