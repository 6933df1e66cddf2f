import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blendcore import blender as BL
from blendcore import tensor as T
from blendcore.roi import BoxProposal

import oracles


def rand(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


class TestConfig:
    def test_abbrev_roundtrip(self):
        cfg = BL.config_from_abbrev("56_4_14")
        assert (cfg.R, cfg.K, cfg.M) == (56, 4, 14)
        assert cfg.label == "56_4_14/blender"
        assert BL.BlendConfig() == cfg

    @pytest.mark.parametrize("bad", ["56_4", "a_b_c", "56-4-14", ""])
    def test_bad_abbrev(self, bad):
        with pytest.raises(BL.ConfigError):
            BL.parse_abbrev(bad)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(M=60),
            dict(merge_mode="weighted_sum"),
            dict(merge_mode="single_basis_sigmoid"),
            dict(merge_mode="assembler"),
            dict(K=16, M=3, merge_mode="assembler"),
            dict(top_interp="cubic"),
            dict(merge_mode="fcis"),
            dict(K=0),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(BL.ConfigError):
            BL.BlendConfig(**kw)

    def test_ablation_grid_valid(self):
        for R in (28, 56):
            for K in (1, 2, 4, 8):
                for M in (2, 4, 7, 14):
                    if M <= R:
                        BL.BlendConfig(R=R, K=K, M=M)


class TestInterpolateAttention:
    def test_identity(self):
        att = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
        np.testing.assert_array_equal(BL.interpolate_attention(att, 5, "bilinear"), att)
        np.testing.assert_array_equal(BL.interpolate_attention(att, 5, "nearest"), att)

    def test_m1_broadcast(self):
        att = np.random.default_rng(1).normal(size=(2, 3, 1, 1))
        out = BL.interpolate_attention(att, 6)
        np.testing.assert_array_equal(out, np.broadcast_to(att, (2, 3, 6, 6)))

    def test_bilinear_matches_oracle(self):
        att = np.random.default_rng(2).normal(size=(1, 2, 2, 2))
        np.testing.assert_allclose(BL.interpolate_attention(att, 4), oracles.bilinear_resize(att, 4, 4), atol=1e-14)

    def test_downsample_rejected(self):
        with pytest.raises(BL.ConfigError):
            BL.interpolate_attention(np.zeros((1, 1, 4, 4)), 3)


class TestNormalizeScores:
    def test_examples(self):
        np.testing.assert_array_equal(BL.normalize_scores(np.full((1, 1, 3, 3), 4.0)), 1.0)
        np.testing.assert_allclose(BL.normalize_scores(np.zeros((1, 4, 2, 2))), 0.25)
        x = np.array([0.0, math.log(3)]).reshape(1, 2, 1, 1)
        np.testing.assert_allclose(BL.normalize_scores(x).ravel(), [0.25, 0.75], atol=1e-15)

    def test_sigmoid_mode(self):
        s = BL.normalize_scores(np.array([-2.0, 0.0, 2.0]).reshape(1, 1, 1, 3), "single_basis_sigmoid")
        assert np.all((s > 0) & (s < 1))
        assert s[0, 0, 0, 1] == 0.5


class TestBlend:
    def test_one_hot_selects(self):
        rng = np.random.default_rng(0)
        regions = rand(rng, 2, 4, 5, 5)
        scores = np.zeros_like(regions)
        scores[:, 2] = 1
        np.testing.assert_array_equal(BL.blend(regions, scores)[:, 0], regions[:, 2])

    def test_constant_bases(self):
        rng = np.random.default_rng(1)
        regions = np.full((2, 4, 5, 5), 0.625)
        scores = T.softmax_channels(rand(rng, 2, 4, 5, 5) * 4)
        np.testing.assert_allclose(BL.blend(regions, scores), 0.625, atol=1e-15)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(2)
        regions = rand(rng, 2, 4, 8, 8)
        scores = T.softmax_channels(rand(rng, 2, 4, 8, 8))
        np.testing.assert_allclose(BL.blend(regions, scores), oracles.blend(regions, scores), atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            BL.blend(np.zeros((1, 4, 3, 3)), np.zeros((1, 3, 3, 3)))

    def test_sigmoid_mode_zero_inputs(self):
        out = BL.blend(np.zeros((1, 1, 3, 3)), BL.normalize_scores(np.zeros((1, 1, 3, 3)), "single_basis_sigmoid"), "single_basis_sigmoid")
        np.testing.assert_array_equal(out, 0.25)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), K=st.integers(1, 6))
    def test_permutation_equivariant(self, seed, K):
        rng = np.random.default_rng(seed)
        regions, att = rand(rng, 2, K, 4, 4), rand(rng, 2, K, 4, 4) * 3
        perm = rng.permutation(K)
        a = BL.blend(regions, T.softmax_channels(att))
        b = BL.blend(regions[:, perm], T.softmax_channels(att[:, perm]))
        np.testing.assert_allclose(a, b, atol=1e-13)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-50, 50))
    def test_softmax_shift_invariance(self, seed, shift):
        rng = np.random.default_rng(seed)
        regions, att = rand(rng, 1, 4, 4, 4), rand(rng, 1, 4, 4, 4)
        offset = shift * rng.uniform(-1, 1, size=(1, 1, 4, 4))
        a = BL.blend(regions, T.softmax_channels(att))
        b = BL.blend(regions, T.softmax_channels(att + offset))
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestAssembler:
    def test_m1(self):
        regions = np.random.default_rng(0).normal(size=(3, 1, 4, 4))
        np.testing.assert_array_equal(BL.assemble_fcis(regions, 4, 1), regions)

    def test_constant_channels(self):
        regions = np.arange(4, dtype=float).reshape(1, 4, 1, 1) * np.ones((1, 4, 4, 4))
        expected = [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
        np.testing.assert_array_equal(BL.assemble_fcis(regions, 4, 2)[0, 0], expected)

    def test_blend_one_hot_equivalence(self):
        rng = np.random.default_rng(1)
        for R, M in [(4, 2), (6, 3), (8, 4), (56, 4)]:
            regions = rng.normal(size=(2, M * M, R, R))
            scores = BL.one_hot_scores(2, R, M)
            np.testing.assert_array_equal(BL.blend(regions, scores), BL.assemble_fcis(regions, R, M))

    def test_bad_k(self):
        with pytest.raises(BL.ConfigError):
            BL.assemble_fcis(np.zeros((1, 5, 4, 4)), 4, 2)


class TestWeightedSum:
    def test_one_hot_and_uniform(self):
        rng = np.random.default_rng(0)
        regions = rand(rng, 2, 4, 5, 5)
        onehot = np.zeros((2, 4))
        onehot[:, 3] = 1
        np.testing.assert_array_equal(BL.weighted_sum_yolact(regions, onehot)[:, 0], regions[:, 3])
        np.testing.assert_allclose(
            BL.weighted_sum_yolact(regions, np.full((2, 4), 0.25)), regions.mean(axis=1, keepdims=True), atol=1e-15
        )

    def test_equals_blend_m1(self):
        rng = np.random.default_rng(2)
        regions = rand(rng, 3, 4, 6, 6)
        att = rand(rng, 3, 4, 1, 1)
        coeffs = T.softmax_channels(att)[:, :, 0, 0]
        via_blend = BL.blend(regions, BL.normalize_scores(BL.interpolate_attention(att, 6)))
        np.testing.assert_array_equal(via_blend, BL.weighted_sum_yolact(regions, coeffs))

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            BL.weighted_sum_yolact(np.zeros((2, 4, 3, 3)), np.zeros((2, 3)))


class TestPasteMask:
    box = BoxProposal(10, 20, 30, 36)

    def test_negative_is_empty(self):
        assert not BL.paste_mask(np.full((8, 8), -50.0), self.box, 64, 64).any()

    def test_positive_is_box(self):
        m = BL.paste_mask(np.full((8, 8), 50.0), self.box, 64, 64)
        expected = np.zeros((64, 64), bool)
        expected[20:36, 10:30] = True
        np.testing.assert_array_equal(m, expected)

    def test_clipped_at_border(self):
        m = BL.paste_mask(np.full((4, 4), 50.0), BoxProposal(-5, 50, 10, 70), 64, 64)
        expected = np.zeros((64, 64), bool)
        expected[50:64, 0:10] = True
        np.testing.assert_array_equal(m, expected)

    def test_left_half(self):
        logits = np.full((8, 8), -20.0)
        logits[:, :4] = 20.0
        m = BL.paste_mask(logits, self.box, 64, 64)
        expected = np.zeros((64, 64), bool)
        expected[20:36, 10:20] = True
        np.testing.assert_array_equal(m, expected)

    def test_errors(self):
        with pytest.raises(ValueError):
            BL.paste_mask(np.zeros((4, 4)), self.box, 0, 64)
        with pytest.raises(ValueError):
            BL.paste_mask(np.zeros((4, 4)), self.box, 64, 64, threshold=1.0)


def test_blend_pipeline_zero_attention_gives_channel_mean():
    rng = np.random.default_rng(3)
    bases = rand(rng, 1, 4, 8, 8)
    boxes = [BoxProposal(1, 2, 13, 15)]
    cfg = BL.BlendConfig(R=6, K=4, M=3)
    out = BL.blend_pipeline(bases, np.zeros((1, 4, 3, 3)), boxes, cfg, 2.0)
    from blendcore.roi import roi_align_bilinear

    np.testing.assert_allclose(out, roi_align_bilinear(bases, boxes, 6, 2).mean(axis=1, keepdims=True), atol=1e-15)
