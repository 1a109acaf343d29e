import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dosediff import blocks as B
from dosediff.gradcheck import finite_diff_scalar_fn
from dosediff.optim import ParamStore
from dosediff.tensor import ShapeError, Tensor


def rng_tensor(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


class TestWindowPartition:
    def test_counts(self):
        x = rng_tensor((3, 8, 8))
        assert B.window_partition(x, 4).shape == (4, 3, 4, 4)

    def test_full_window_is_identity(self):
        x = rng_tensor((2, 6, 6))
        w = B.window_partition(x, 6)
        assert w.shape == (1, 2, 6, 6)
        assert np.array_equal(w.data[0], x.data)

    @given(st.sampled_from([(1, 2, 4, 4), (2, 3, 8, 8), (1, 5, 6, 6)]),
           st.sampled_from([2, 4]), st.integers(0, 2 ** 31))
    @settings(max_examples=30, deadline=None)
    def test_merge_partition_roundtrip_bitwise(self, shape, win, seed):
        b, c, h, w = shape
        if h % win:
            win = h
        x = Tensor(np.random.default_rng(seed).standard_normal(shape))
        back = B.window_merge(B.window_partition(x, win), h, w)
        assert np.array_equal(back.data, x.data)

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            B.window_partition(rng_tensor((1, 6, 6)), 4)


class TestCyclicShift:
    def test_zero_shift_identity(self):
        x = rng_tensor((2, 4, 4))
        assert np.array_equal(B.cyclic_shift(x, 0, 0).data, x.data)

    def test_double_half_shift_is_identity_on_4x4(self):
        x = rng_tensor((1, 4, 4))
        y = B.cyclic_shift(B.cyclic_shift(x, 2, 2), 2, 2)
        assert np.array_equal(y.data, x.data)

    @given(st.integers(-5, 5), st.integers(-5, 5), st.integers(0, 2 ** 31))
    @settings(max_examples=30, deadline=None)
    def test_roll_then_inverse_is_exact(self, dy, dx, seed):
        x = Tensor(np.random.default_rng(seed).standard_normal((2, 5, 7)))
        y = B.cyclic_shift(B.cyclic_shift(x, dy, dx), -dy, -dx)
        assert np.array_equal(y.data, x.data)


def make_attention(c=4, heads=2, seed=0):
    store = ParamStore()
    p = B.init_attention(store, "a", c, heads, np.random.default_rng(seed))
    return store, p


class TestWindowAttention:
    def test_uniform_rows_for_equal_tokens(self):
        store, p = make_attention()
        windows = Tensor(np.ones((2, 4, 2, 2)))  # all pixels identical
        _, attn = B.window_attention(windows, p, return_weights=True)
        assert np.allclose(attn.data, 0.25, atol=1e-12)

    def test_single_pixel_window(self):
        store, p = make_attention()
        win = rng_tensor((3, 4, 1, 1), seed=5)
        out, attn = B.window_attention(win, p, return_weights=True)
        assert np.allclose(attn.data, 1.0, atol=0)
        # output must be W_o applied to the value projection
        tok = win.data.reshape(3, 4)
        v = tok @ p.wv.data
        assert np.allclose(out.data.reshape(3, 4), v @ p.wo.data, atol=1e-12)

    def test_rows_sum_to_one(self):
        store, p = make_attention()
        _, attn = B.window_attention(rng_tensor((4, 4, 2, 2), seed=3), p,
                                     return_weights=True)
        assert np.abs(attn.data.sum(axis=-1) - 1.0).max() < 1e-6

    def test_channel_mismatch(self):
        store, p = make_attention(c=4)
        with pytest.raises(ShapeError):
            B.window_attention(rng_tensor((1, 6, 2, 2)), p)


def make_swin(c=4, window=2, shift=False, heads=2, seed=1, t_dim=0):
    store = ParamStore()
    p = B.init_swin_block(store, "blk", c, window, shift, heads,
                          np.random.default_rng(seed), t_dim=t_dim)
    return store, p


class TestSwinBlock:
    @pytest.mark.parametrize("shift", [False, True])
    def test_zeroed_residual_branches_exact_identity(self, shift):
        store, p = make_swin(shift=shift)
        store["blk.attn.wo"].data[:] = 0.0
        store["blk.mlp.w2"].data[:] = 0.0
        store["blk.mlp.b2"].data[:] = 0.0
        x = rng_tensor((2, 4, 4, 4), seed=7)
        out = B.swin_block(x, p)
        assert np.array_equal(out.data, x.data)

    def test_output_shape_equals_input_shape(self):
        store, p = make_swin()
        x = rng_tensor((3, 4, 8, 8), seed=2)
        assert B.swin_block(x, p).shape == x.shape

    def test_shifted_and_unshifted_compose(self):
        s1, p1 = make_swin(shift=False, seed=1)
        s2, p2 = make_swin(shift=True, seed=2)
        x = rng_tensor((1, 4, 4, 4), seed=3)
        y = B.swin_block(B.swin_block(x, p1), p2)
        assert y.shape == x.shape

    def test_time_bias_enters_once(self):
        store, p = make_swin(t_dim=6)
        x = rng_tensor((2, 4, 4, 4), seed=4)
        t_emb = Tensor(np.random.default_rng(5).standard_normal((2, 6)))
        y0 = B.swin_block(x, p)
        y1 = B.swin_block(x, p, t_emb)
        assert not np.array_equal(y0.data, y1.data)

    def test_t_emb_dim_mismatch_rejected(self):
        store, p = make_swin(t_dim=6)
        x = rng_tensor((1, 4, 4, 4))
        with pytest.raises(ShapeError):
            B.swin_block(x, p, Tensor(np.zeros((1, 5))))

    def test_gradients_match_finite_differences(self):
        store, p = make_swin(seed=11)
        x = Tensor(np.random.default_rng(12).standard_normal((1, 4, 4, 4)),
                   requires_grad=True)
        proj = np.random.default_rng(13).standard_normal((1, 4, 4, 4))

        def loss():
            return (B.swin_block(x, p) * Tensor(proj)).sum()

        coords = [(x, i) for i in range(0, 64, 7)]
        for name in ("blk.attn.wq", "blk.attn.wo", "blk.mlp.w1", "blk.ln1.g"):
            t = store[name]
            coords += [(t, i) for i in range(0, t.size, max(1, t.size // 4))]
        assert finite_diff_scalar_fn(loss, coords) < 1e-4


def make_cross(ca=4, cb=4, seed=0):
    store = ParamStore()
    p = B.init_cross_attention(store, "x", ca, cb, np.random.default_rng(seed))
    return store, p


class TestCrossAttention:
    def test_single_token_b(self):
        store, p = make_cross()
        a = rng_tensor((1, 4, 1, 1), seed=1)
        bm = rng_tensor((1, 4, 1, 1), seed=2)
        fused, w = B.cross_attention_fuse(a, bm, p, return_weights=True)
        assert np.allclose(w.data, 1.0, atol=0)
        tok_b = bm.data.reshape(1, 4)
        expect = tok_b + tok_b @ p.wv_b.data
        assert np.allclose(fused.data.reshape(1, 4), expect, atol=1e-12)

    def test_rows_sum_to_one(self):
        store, p = make_cross()
        _, w = B.cross_attention_fuse(rng_tensor((2, 4, 4, 4), 3),
                                      rng_tensor((2, 4, 4, 4), 4), p,
                                      return_weights=True)
        assert np.abs(w.data.sum(axis=-1) - 1.0).max() < 1e-6

    @pytest.mark.parametrize("c", [0.5, 2.0, 7.3])
    def test_positive_k_scaling_preserves_row_argmax(self, c):
        store, p = make_cross(seed=5)
        a = rng_tensor((1, 4, 4, 4), 6)
        bm = rng_tensor((1, 4, 4, 4), 7)
        _, w1 = B.cross_attention_fuse(a, bm, p, return_weights=True)
        store["x.wk_b"].data *= c
        _, w2 = B.cross_attention_fuse(a, bm, p, return_weights=True)
        assert np.array_equal(np.argmax(w1.data, axis=-1), np.argmax(w2.data, axis=-1))

    @given(st.integers(0, 2 ** 31))
    @settings(max_examples=20, deadline=None)
    def test_joint_permutation_equivariance(self, seed):
        """Permuting A and B tokens together permutes the fused rows."""
        store, p = make_cross(seed=8)
        rng = np.random.default_rng(seed)
        n = 4  # 2x2 spatial layout, tokens along H*W
        a = rng.standard_normal((1, 4, 2, 2))
        bm = rng.standard_normal((1, 4, 2, 2))
        perm = rng.permutation(n)

        def tokens(x):
            return x.reshape(1, 4, n).transpose(0, 2, 1)

        def from_tokens(tok):
            return tok.transpose(0, 2, 1).reshape(1, 4, 2, 2)

        base = B.cross_attention_fuse(Tensor(a), Tensor(bm), p)
        pa = from_tokens(tokens(a)[:, perm])
        pb = from_tokens(tokens(bm)[:, perm])
        permuted = B.cross_attention_fuse(Tensor(pa), Tensor(pb), p)
        assert np.allclose(tokens(permuted.data), tokens(base.data)[:, perm],
                           atol=1e-12)

    def test_b_token_permutation_invariance_for_constant_queries(self):
        # when every A token is identical, attention rows cannot depend on
        # the ordering of B's tokens
        store, p = make_cross(seed=9)
        a = Tensor(np.ones((1, 4, 2, 2)))
        rng = np.random.default_rng(10)
        bm = rng.standard_normal((1, 4, 2, 2))
        out1 = B.cross_attention_fuse(a, Tensor(bm), p).data - bm
        perm = [2, 0, 3, 1]
        bp = bm.reshape(1, 4, 4)[:, :, perm].reshape(1, 4, 2, 2)
        out2 = B.cross_attention_fuse(a, Tensor(bp), p).data - bp
        assert np.allclose(out1, out2, atol=1e-12)

    def test_spatial_mismatch_rejected(self):
        store, p = make_cross()
        with pytest.raises(ShapeError):
            B.cross_attention_fuse(rng_tensor((1, 4, 2, 2)), rng_tensor((1, 4, 4, 4)), p)

    def test_gradients_match_finite_differences(self):
        store, p = make_cross(seed=13)
        a = Tensor(np.random.default_rng(14).standard_normal((1, 4, 2, 2)),
                   requires_grad=True)
        bm = Tensor(np.random.default_rng(15).standard_normal((1, 4, 2, 2)),
                    requires_grad=True)
        proj = np.random.default_rng(16).standard_normal((1, 4, 2, 2))

        def loss():
            return (B.cross_attention_fuse(a, bm, p) * Tensor(proj)).sum()

        coords = [(a, i) for i in range(16)] + [(bm, i) for i in range(16)]
        for name in ("x.wq_a", "x.wk_b", "x.wv_b"):
            t = store[name]
            coords += [(t, i) for i in range(0, t.size, 3)]
        assert finite_diff_scalar_fn(loss, coords) < 1e-4


class TestProjector:
    def test_zero_params_give_identity(self):
        store = ParamStore()
        p = B.init_projector(store, "p", 8, 4, np.random.default_rng(0))
        store["p.w_down"].data[:] = 0.0  # up-projection already zero at init
        x = rng_tensor((2, 8, 3, 3), seed=1)
        assert np.array_equal(B.projector_forward(x, p).data, x.data)

    def test_shape_preserved_and_hidden_dim(self):
        store = ParamStore()
        p = B.init_projector(store, "p", 32, 4, np.random.default_rng(0))
        assert store["p.w_down"].shape == (32, 8)
        x = rng_tensor((1, 32, 2, 2), seed=2)
        assert B.projector_forward(x, p).shape == x.shape

    def test_non_divisible_ratio_rejected(self):
        store = ParamStore()
        with pytest.raises(ValueError):
            B.init_projector(store, "p", 6, 4, np.random.default_rng(0))


class TestTimeEmbedding:
    def test_t0_sin_zero_cos_one(self):
        e = B.time_embedding(0, 8)
        assert np.array_equal(e[:4], np.zeros(4))
        assert np.array_equal(e[4:], np.ones(4))

    @given(st.integers(0, 1000), st.sampled_from([4, 8, 16, 64]))
    @settings(max_examples=50, deadline=None)
    def test_components_bounded(self, t, dim):
        e = B.time_embedding(t, dim)
        assert np.all(np.abs(e) <= 1.0)

    def test_distinct_over_horizon(self):
        # direct-evaluation oracle: embeddings for t = 0..100 pairwise differ
        embs = B.time_embedding(np.arange(101), 8)
        assert len(np.unique(embs.round(12), axis=0)) == 101

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            B.time_embedding(3, 7)

    def test_batch_shape(self):
        assert B.time_embedding(np.array([1, 2, 3]), 6).shape == (3, 6)
