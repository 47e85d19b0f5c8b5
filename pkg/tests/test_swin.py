import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvsr import tensor as T
from tvsr.swin import (
    ConfigError,
    StlConfig,
    count_params,
    default_heads,
    init_stl_params,
    make_plan,
    merge_windows,
    partition_windows,
    relative_position_index,
    stl_forward,
    stl_param_count,
    window_attention,
    attention_probs,
)


def rand_params(cfg, seed=0, std=0.3):
    rng = np.random.default_rng(seed)
    p = init_stl_params(cfg, rng)
    for name, t in p.named_tensors():
        t.data = (t.data + rng.standard_normal(t.shape) * std).astype(t.data.dtype)
    return p


def zero_params(cfg):
    p = init_stl_params(cfg, np.random.default_rng(0))
    for name, t in p.named_tensors():
        if not name.startswith("norm"):
            t.data = np.zeros_like(t.data)
    return p


class TestWindowPlan:
    def test_even_grid(self):
        x = T.zeros((1, 16, 16, 3))
        plan = make_plan((16, 16), (8, 8))
        assert partition_windows(x, plan).shape == (4, 64, 3)

    def test_shift_keeps_count_and_masks_wrap(self):
        plan = make_plan((16, 16), (8, 8), (4, 4))
        assert partition_windows(T.zeros((2, 16, 16, 3)), plan).shape == (8, 64, 3)
        mask = plan.mask()
        assert mask.shape == (4, 64, 64)
        # only the top-left window is free of wrapped tokens
        assert np.all(mask[0] == 0)
        assert all(np.isinf(mask[i]).any() for i in (1, 2, 3))
        assert make_plan((16, 16), (8, 8)).mask() is None

    def test_padded_roundtrip(self):
        rng = np.random.default_rng(1)
        x = T.tensor(rng.standard_normal((1, 10, 10, 2)))
        plan = make_plan((10, 10), (8, 8))
        assert plan.padded == (16, 16)
        w = partition_windows(x, plan)
        assert w.shape == (4, 64, 2)
        assert np.array_equal(merge_windows(w, plan).data, x.data)

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(1, 13), st.integers(1, 13), st.integers(1, 6), st.integers(1, 6), st.booleans(), st.integers(1, 3)
    )
    def test_roundtrip_property(self, gy, gx, wy, wx, shifted, b):
        rng = np.random.default_rng(gy * 100 + gx)
        x = T.tensor(rng.standard_normal((b, gy, gx, 2)))
        shift = (wy // 2, wx // 2) if shifted else (0, 0)
        plan = make_plan((gy, gx), (wy, wx), shift)
        assert np.array_equal(merge_windows(partition_windows(x, plan), plan).data, x.data)

    @pytest.mark.parametrize("shift", [(0, 0), (2, 3)])
    def test_every_token_in_exactly_one_window(self, shift):
        plan = make_plan((10, 13), (4, 6), shift)
        members = np.concatenate(plan.windows())
        py, px = plan.padded
        assert np.array_equal(np.sort(members), np.arange(py * px))

    def test_plan_mismatch(self):
        with pytest.raises(T.DimensionError):
            partition_windows(T.zeros((1, 8, 8, 1)), make_plan((8, 9), (4, 4)))

    def test_mask_matches_window_membership(self):
        # mask is zero exactly for pairs that were contiguous before the roll
        plan = make_plan((8, 8), (4, 4), (2, 2))
        mask = plan.mask()
        py, px = plan.padded
        for wi, members in enumerate(plan.windows()):
            ys, xs = np.divmod(members, px)
            ys, xs = (ys - 2) % py, (xs - 2) % px  # position after the roll
            # region label along each axis: 0 body, 1 last window, 2 wrapped around
            ry = np.digitize(ys, [py - 4, py - 2])
            rx = np.digitize(xs, [px - 4, px - 2])
            region = ry * 3 + rx
            same = region[:, None] == region[None, :]
            assert np.array_equal(mask[wi] == 0, same)


class TestRelativeIndex:
    def test_bijection_on_offsets(self):
        wy, wx = 4, 8
        idx = relative_position_index(wy, wx)
        coords = np.stack(np.meshgrid(np.arange(wy), np.arange(wx), indexing="ij")).reshape(2, -1)
        offsets = {}
        for i in range(wy * wx):
            for j in range(wy * wx):
                off = (coords[0, i] - coords[0, j], coords[1, i] - coords[1, j])
                assert offsets.setdefault(off, idx[i, j]) == idx[i, j]
        assert len(offsets) == (2 * wy - 1) * (2 * wx - 1)
        assert sorted(offsets.values()) == list(range((2 * wy - 1) * (2 * wx - 1)))


class TestWindowAttention:
    def test_single_token_window(self):
        cfg = StlConfig(channels=4, window=(1, 1), num_heads=2)
        p = rand_params(cfg)
        rng = np.random.default_rng(2)
        tok = T.tensor(rng.standard_normal((5, 1, 4)))
        out = window_attention(tok, p, cfg).data
        v = tok.data @ p.qkv_w.data[:, 8:] + p.qkv_b.data[8:]
        np.testing.assert_allclose(out, v @ p.proj_w.data + p.proj_b.data, rtol=1e-5, atol=1e-6)

    def test_zero_query_key_gives_uniform(self):
        cfg = StlConfig(channels=4, window=(2, 3), num_heads=1)
        p = rand_params(cfg)
        p.qkv_w.data[:, :8] = 0
        p.qkv_b.data[:8] = 0
        p.rel_bias.data[:] = 0
        rng = np.random.default_rng(3)
        tok = T.tensor(rng.standard_normal((2, 6, 4)))
        out = window_attention(tok, p, cfg).data
        v = tok.data @ p.qkv_w.data[:, 8:] + p.qkv_b.data[8:]
        expect = v.mean(axis=1, keepdims=True) @ p.proj_w.data + p.proj_b.data
        np.testing.assert_allclose(out, np.broadcast_to(expect, out.shape), rtol=1e-5, atol=1e-6)

    def test_masked_pair_is_ignored(self):
        cfg = StlConfig(channels=4, window=(2, 2), num_heads=2)
        p = rand_params(cfg)
        mask = np.zeros((1, 4, 4), np.float32)
        mask[0, 0, 3] = -np.inf
        rng = np.random.default_rng(4)
        a = rng.standard_normal((1, 4, 4))
        b = a.copy()
        b[0, 3] += 5.0
        oa = window_attention(T.tensor(a), p, cfg, mask).data
        ob = window_attention(T.tensor(b), p, cfg, mask).data
        np.testing.assert_array_equal(oa[0, 0], ob[0, 0])
        qkv = a @ p.qkv_w.data + p.qkv_b.data
        q = T.tensor(qkv[..., :4].reshape(1, 4, 2, 2).transpose(0, 2, 1, 3) * 2 ** -0.5)
        k = T.tensor(qkv[..., 4:8].reshape(1, 4, 2, 2).transpose(0, 2, 1, 3))
        probs = attention_probs(q, k, p, cfg, mask).data
        assert np.all(probs[0, :, 0, 3] < 1e-6)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)

    def test_rows_sum_to_one_with_shift_mask(self):
        cfg = StlConfig(channels=4, window=(4, 4), num_heads=1, shifted=True)
        p = rand_params(cfg)
        plan = make_plan((8, 8), cfg.window, cfg.shift)
        rng = np.random.default_rng(5)
        tok = partition_windows(T.tensor(rng.standard_normal((1, 8, 8, 4))), plan)
        q = T.tensor(rng.standard_normal((4, 1, 16, 4)) * 3)
        probs = attention_probs(q, q, p, cfg, plan.mask()).data
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)
        assert np.all(probs[np.isinf(np.broadcast_to(plan.mask()[:, None], probs.shape))] < 1e-6)
        assert tok.shape == (4, 16, 4)

    def test_permutation_equivariance_without_bias(self):
        cfg = StlConfig(channels=6, window=(3, 3), num_heads=2)
        p = rand_params(cfg)
        p.rel_bias.data[:] = 0
        rng = np.random.default_rng(6)
        tok = rng.standard_normal((1, 9, 6))
        perm = rng.permutation(9)
        out = window_attention(T.tensor(tok), p, cfg).data
        out_p = window_attention(T.tensor(tok[:, perm]), p, cfg).data
        np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-5, atol=1e-6)

    def test_channel_mismatch(self):
        cfg = StlConfig(channels=4, window=(2, 2), num_heads=2)
        with pytest.raises(ConfigError):
            window_attention(T.zeros((1, 4, 6)), init_stl_params(cfg, np.random.default_rng(0)), cfg)

    def test_bad_head_split(self):
        with pytest.raises(ConfigError):
            StlConfig(channels=6, window=(2, 2), num_heads=4)


class TestStlForward:
    @pytest.mark.parametrize("grid", [(8, 8), (16, 16), (10, 12)])
    @pytest.mark.parametrize("shifted", [False, True])
    def test_shape_preserved(self, grid, shifted):
        cfg = StlConfig(channels=8, window=(8, 8), num_heads=2, shifted=shifted)
        p = init_stl_params(cfg, np.random.default_rng(0))
        x = T.tensor(np.random.default_rng(1).standard_normal((2, *grid, 8)))
        assert stl_forward(x, p, cfg).shape == (2, *grid, 8)

    @pytest.mark.parametrize("shifted", [False, True])
    def test_zero_params_is_residual_plus_biases(self, shifted):
        cfg = StlConfig(channels=4, window=(4, 4), num_heads=1, shifted=shifted)
        p = zero_params(cfg)
        x = T.tensor(np.random.default_rng(2).standard_normal((1, 6, 5, 4)))
        assert np.array_equal(stl_forward(x, p, cfg).data, x.data)
        p.proj_b.data[:] = [1, 2, 3, 4]
        p.fc2_b.data[:] = [0.5, 0.5, 0.5, 0.5]
        p.fc1_b.data[:] = 0.3
        np.testing.assert_allclose(stl_forward(x, p, cfg).data, x.data + [1.5, 2.5, 3.5, 4.5], rtol=1e-6)

    @pytest.mark.parametrize(
        "cfg,grid",
        [
            (StlConfig(channels=4, window=(2, 2), num_heads=2), (4, 4)),
            (StlConfig(channels=4, window=(2, 4), num_heads=1, shifted=True), (3, 6)),
        ],
    )
    def test_grad_check_qkv(self, cfg, grid):
        with T.precision(np.float64):
            p = rand_params(cfg)
            x = T.tensor(np.random.default_rng(3).standard_normal((1, *grid, 4)))
            probe = T.tensor(np.random.default_rng(4).standard_normal((1, *grid, 4)))

            def f(w):
                p.qkv_w = w
                return T.sum(T.mul(stl_forward(x, p, cfg), probe))

            assert T.grad_check(f, p.qkv_w.data.copy()) < 1e-3

    def test_grad_check_input_and_bias_table(self):
        cfg = StlConfig(channels=4, window=(2, 2), num_heads=2, shifted=True)
        with T.precision(np.float64):
            p = rand_params(cfg)
            x0 = np.random.default_rng(5).standard_normal((2, 4, 4, 4))
            probe = T.tensor(np.random.default_rng(6).standard_normal(x0.shape))
            assert T.grad_check(lambda x: T.sum(T.mul(stl_forward(x, p, cfg), probe)), x0) < 1e-3

            def f(tab):
                p.rel_bias = tab
                return T.sum(T.mul(stl_forward(T.tensor(x0), p, cfg), probe))

            assert T.grad_check(f, p.rel_bias.data.copy()) < 1e-3


class TestParamCount:
    def test_hand_value(self):
        cfg = StlConfig(channels=8, window=(4, 8), num_heads=1, mlp_ratio=4)
        # qkv 192+24, proj 64+8, norms 32, mlp 256+32+256+8, bias table 7*15
        assert stl_param_count(cfg) == 216 + 72 + 32 + 552 + 105 == 977
        assert count_params(init_stl_params(cfg, np.random.default_rng(0))) == 977

    def test_enumeration_matches_formula(self):
        for c, h, win in [(4, 1, (2, 2)), (32, 2, (8, 8)), (128, 8, (8, 8)), (8, 1, (4, 8))]:
            cfg = StlConfig(channels=c, window=win, num_heads=h)
            p = init_stl_params(cfg, np.random.default_rng(0))
            assert count_params(p) == stl_param_count(cfg)
            assert sum(t.data.size for _, t in p.named_tensors()) == stl_param_count(cfg)

    def test_quadratic_growth(self):
        a = stl_param_count(StlConfig(channels=64, window=(8, 8), num_heads=4))
        b = stl_param_count(StlConfig(channels=128, window=(8, 8), num_heads=4))
        assert 3.8 < b / a < 4.1

    def test_init_statistics(self):
        cfg = StlConfig(channels=64, window=(8, 8), num_heads=4)
        p = init_stl_params(cfg, np.random.default_rng(0))
        w = p.qkv_w.data
        assert np.abs(w).max() <= 0.04 + 1e-7
        assert abs(w.std() - 0.02) < 0.003
        assert np.all(p.rel_bias.data == 0) and np.all(p.qkv_b.data == 0)


class TestDefaultHeads:
    @pytest.mark.parametrize("c,h", [(8, 1), (32, 2), (45, 1), (48, 3), (96, 6), (100, 5)])
    def test_examples(self, c, h):
        assert default_heads(c) == h

    @given(st.integers(1, 512))
    def test_always_divides(self, c):
        h = default_heads(c)
        assert 1 <= h <= max(1, c // 16) and c % h == 0
