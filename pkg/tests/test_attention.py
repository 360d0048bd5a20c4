import numpy as np
import pytest

from vidseg.attention import (
    AttentionMask3D,
    CrossAttentionLayer,
    FeedForwardLayer,
    Linear,
    SelfAttentionLayer,
    build_attention_mask,
    masked_cross_attention,
)
from vidseg.tensor import NEG_INF, Tensor


def make_cross(dim, heads, seed, dtype=np.float32):
    return CrossAttentionLayer(dim, heads, np.random.default_rng(seed), dtype=dtype)


def set_identity(linear: Linear):
    linear.w.data = np.eye(linear.w.shape[0], dtype=linear.w.data.dtype)
    linear.b.data[:] = 0


from helpers import cross_attention_oracle


class TestBuildAttentionMask:
    def test_threshold_both_sides(self):
        prob = np.zeros((1, 1, 2, 2), dtype=np.float32)
        prob[0, 0, 0, 0] = 0.7
        prob[0, 0, 0, 1] = 0.3
        prob[0, 0, 1, 0] = 0.5   # ties binarize to foreground
        prob[0, 0, 1, 1] = 0.9
        mask = build_attention_mask(prob, (2, 2))
        np.testing.assert_array_equal(mask.additive[0], [0.0, NEG_INF, 0.0, 0.0])

    def test_empty_mask_falls_back_to_fully_open(self):
        prob = np.zeros((2, 2, 3, 3), dtype=np.float32)
        prob[1] = 1.0
        mask = build_attention_mask(prob, (3, 3))
        assert np.all(mask.additive[0] == 0.0)
        assert np.all(mask.additive[1] == 0.0)

    def test_identity_resize_equals_direct_binarization(self):
        rng = np.random.default_rng(0)
        prob = rng.random((3, 2, 4, 4)).astype(np.float32)
        mask = build_attention_mask(prob, (4, 4))
        direct = np.where(prob.reshape(3, -1) >= 0.5, 0.0, NEG_INF)
        direct[~(prob.reshape(3, -1) >= 0.5).any(axis=1)] = 0.0
        np.testing.assert_array_equal(mask.additive, direct.astype(np.float32))

    def test_upsampling_target_allowed(self):
        prob = np.full((1, 2, 2, 2), 0.8, dtype=np.float32)
        mask = build_attention_mask(prob, (4, 4))
        assert mask.additive.shape == (1, 2 * 4 * 4)
        assert np.all(mask.additive == 0.0)

    def test_time_axis_untouched(self):
        # frame 0 foreground, frame 1 background: must stay distinct per frame
        prob = np.zeros((1, 2, 2, 2), dtype=np.float32)
        prob[0, 0] = 1.0
        mask = build_attention_mask(prob, (3, 3))
        flat = mask.additive.reshape(1, 2, 9)
        assert np.all(flat[0, 0] == 0.0)
        assert np.all(flat[0, 1] == NEG_INF)

    def test_zero_target_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            build_attention_mask(np.zeros((1, 1, 2, 2)), (0, 2))

    def test_entries_only_zero_or_sentinel(self):
        rng = np.random.default_rng(1)
        prob = rng.random((4, 2, 6, 6)).astype(np.float32)
        mask = build_attention_mask(prob, (3, 3))
        assert set(np.unique(mask.additive)) <= {0.0, np.float32(NEG_INF)}

    def test_out_of_range_probabilities_rejected(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            build_attention_mask(np.full((1, 1, 2, 2), 1.5), (2, 2))


class TestMaskedCrossAttention:
    def test_single_key_identity_maps(self):
        dim = 4
        layer = make_cross(dim, 1, seed=0)
        for lin in (layer.f_q, layer.f_k, layer.f_v, layer.proj):
            set_identity(lin)
        x = Tensor(np.arange(8.0).reshape(2, 4))
        feats = Tensor([[1.0, -2.0, 0.5, 3.0]])
        out = layer(x, feats)
        np.testing.assert_allclose(out.data, x.data + feats.data, atol=1e-6)

    def test_masked_positions_cannot_influence_output(self):
        rng = np.random.default_rng(2)
        layer = make_cross(8, 2, seed=3)
        n, tok = 4, 12
        x = rng.standard_normal((n, 8)).astype(np.float32)
        feats = rng.standard_normal((tok, 8)).astype(np.float32)
        prob = rng.random((n, 3, 2, 2)).astype(np.float32)
        mask = build_attention_mask(prob, (2, 2))
        base = layer(Tensor(x), Tensor(feats), mask).data

        j = 5
        feats2 = feats.copy()
        feats2[j] += rng.standard_normal(8).astype(np.float32) * 100
        out2 = layer(Tensor(x), Tensor(feats2), mask).data
        hidden = mask.additive[:, j] == NEG_INF
        assert hidden.any()
        assert np.max(np.abs(out2[hidden] - base[hidden])) == 0.0

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            heads = int(rng.choice([1, 2, 4]))
            dim = heads * int(rng.integers(2, 5))
            n = int(rng.integers(1, 5))
            t, h, w = 2, 2, 3
            layer = make_cross(dim, heads, seed=int(rng.integers(1000)))
            x = rng.standard_normal((n, dim)).astype(np.float32)
            feats = rng.standard_normal((t * h * w, dim)).astype(np.float32)
            pos = rng.standard_normal((t * h * w, dim)).astype(np.float32)
            prob = rng.random((n, t, h, w)).astype(np.float32)
            mask = build_attention_mask(prob, (h, w))
            out = masked_cross_attention(Tensor(x), Tensor(feats), mask, layer, Tensor(pos))
            want = cross_attention_oracle(layer, x, feats, mask.additive, pos)
            assert np.max(np.abs(out.data - want)) < 1e-5

    def test_row_stochastic_weights_respect_mask(self):
        rng = np.random.default_rng(5)
        layer = make_cross(8, 4, seed=6)
        n, tok = 3, 8
        x = Tensor(rng.standard_normal((n, 8)).astype(np.float32))
        feats = Tensor(rng.standard_normal((tok, 8)).astype(np.float32))
        prob = rng.random((n, 2, 2, 2)).astype(np.float32)
        mask = build_attention_mask(prob, (2, 2))
        _, weights = layer(x, feats, mask, return_weights=True)
        w = weights.per_head.data
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
        sentinel = np.broadcast_to(mask.additive == NEG_INF, w.shape)
        assert np.all(w[sentinel] == 0.0)

    def test_temporal_reach_with_open_mask(self):
        rng = np.random.default_rng(7)
        layer = make_cross(8, 2, seed=8)
        t, h, w = 3, 2, 2
        feats = Tensor(rng.standard_normal((t * h * w, 8)).astype(np.float32), requires_grad=True)
        x = Tensor(rng.standard_normal((2, 8)).astype(np.float32))
        layer(x, feats).sum().backward()
        per_frame = feats.grad.reshape(t, h * w * 8)
        for ft in range(t):
            assert np.abs(per_frame[ft]).max() > 0

    def test_width_mismatch_rejected(self):
        layer = make_cross(8, 2, seed=9)
        with pytest.raises(ValueError, match="width"):
            layer(Tensor(np.zeros((2, 8))), Tensor(np.zeros((4, 6))))


class TestSelfAttentionAndFfn:
    def test_zero_output_projection_is_identity(self):
        layer = SelfAttentionLayer(8, 2, np.random.default_rng(0))
        layer.proj.w.data[:] = 0
        layer.proj.b.data[:] = 0
        x = np.random.default_rng(1).standard_normal((5, 8)).astype(np.float32)
        np.testing.assert_array_equal(layer(Tensor(x)).data, x)

    def test_zero_ffn_is_identity(self):
        layer = FeedForwardLayer(8, 16, np.random.default_rng(2))
        layer.lin2.w.data[:] = 0
        layer.lin2.b.data[:] = 0
        x = np.random.default_rng(3).standard_normal((5, 8)).astype(np.float32)
        np.testing.assert_array_equal(layer(Tensor(x)).data, x)

    def test_query_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        self_attn = SelfAttentionLayer(8, 2, rng, dtype=np.float64)
        ffn_layer = FeedForwardLayer(8, 16, rng, dtype=np.float64)
        cross = CrossAttentionLayer(8, 2, rng, dtype=np.float64)
        x = rng.standard_normal((6, 8))
        feats = Tensor(rng.standard_normal((10, 8)), dtype=np.float64)
        prob = rng.random((6, 1, 2, 5))
        mask = build_attention_mask(prob, (2, 5))
        perm = rng.permutation(6)

        full = lambda xv, m: ffn_layer(self_attn(cross(Tensor(xv, dtype=np.float64), feats, m)))
        base = full(x, mask).data
        permuted_mask = AttentionMask3D(mask.additive[perm], mask.source_layer)
        out_perm = full(x[perm], permuted_mask).data
        np.testing.assert_allclose(out_perm, base[perm], atol=1e-10)
