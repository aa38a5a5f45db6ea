"""Oracle and property tests for the four sequence layers."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridlm import blocks, tape
from hybridlm.blocks import (
    AttentionConfig,
    AttentionMemory,
    FeedForward,
    FeedForwardConfig,
    QRNN,
    QRNNConfig,
    QRNNState,
    RelativeAttention,
    dropout,
    fo_pool,
    linear_scan,
    qrnn_gates,
    rnn_dropout,
)
from hybridlm.errors import ConfigError, ShapeError
from hybridlm.tape import Parameter, Tensor

from oracles import (
    assert_grads_match,
    attention_rescore,
    check_block_gradients,
    finite_difference,
    fo_pool_sequential,
)


def rng64(seed):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# feed-forward boom block


class TestFeedForward:
    def test_zero_weights_zero_input_gives_zeros(self):
        cfg = FeedForwardConfig(embed_dim=3, boom_dim=5)
        block = FeedForward(cfg, rng64(0))
        for p in (block.core.w1, block.core.b1, block.core.w2, block.core.b2, block.bias):
            p.data[...] = 0.0
        y = block(np.zeros((2, 1, 3), dtype=np.float32))
        np.testing.assert_array_equal(y.data, 0.0)

    def test_zero_rate_training_equals_eval(self):
        cfg = FeedForwardConfig(embed_dim=4, boom_dim=8, dropout_rate=0.0)
        block = FeedForward(cfg, rng64(1))
        x = rng64(2).standard_normal((3, 2, 4)).astype(np.float32)
        y_eval = block(x)
        y_train = block(x, training=True, rng=rng64(3))
        np.testing.assert_array_equal(y_eval.data, y_train.data)

    def test_hand_computed_small_case(self):
        cfg = FeedForwardConfig(embed_dim=3, boom_dim=5)
        block = FeedForward(cfg, rng64(4), dtype=np.float64)
        # small fixed weights so the expected value can be written out directly
        block.core.w1.data = 0.1 * np.arange(15, dtype=np.float64).reshape(3, 5) - 0.7
        block.core.b1.data = np.array([0.1, -0.2, 0.3, 0.0, 0.05])
        block.core.w2.data = 0.05 * np.arange(15, dtype=np.float64).reshape(5, 3) - 0.2
        block.core.b2.data = np.array([0.02, -0.01, 0.0])
        x = np.array([[[0.5, -1.0, 2.0]], [[-0.3, 0.7, 0.1]]])

        inner = np.maximum(x @ block.core.w1.data + block.core.b1.data, 0.0)
        pre = x + inner @ block.core.w2.data + block.core.b2.data
        mu = pre.mean(axis=-1, keepdims=True)
        var = pre.var(axis=-1, keepdims=True)
        expect = (pre - mu) / np.sqrt(var + 1e-5)

        y = block(x)
        np.testing.assert_allclose(y.data, expect, rtol=1e-12)

    def test_output_shape_matches_input(self):
        cfg = FeedForwardConfig(embed_dim=6, boom_dim=12, dropout_rate=0.2)
        block = FeedForward(cfg, rng64(5))
        x = rng64(6).standard_normal((4, 3, 6)).astype(np.float32)
        y = block(x, training=True, rng=rng64(7))
        assert y.shape == x.shape

    def test_layer_norm_moments(self):
        cfg = FeedForwardConfig(embed_dim=32, boom_dim=64)
        block = FeedForward(cfg, rng64(8), dtype=np.float64)
        # gain 1 / bias 0 leaves the normalized pre-activation visible
        x = rng64(9).standard_normal((3, 2, 32)) * 5 + 1
        y = block(x).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            FeedForwardConfig(embed_dim=8, boom_dim=4)
        with pytest.raises(ConfigError):
            FeedForwardConfig(embed_dim=4, boom_dim=8, dropout_rate=1.0)

    def test_shape_mismatch_rejected(self):
        block = FeedForward(FeedForwardConfig(4, 8), rng64(10))
        with pytest.raises(ShapeError):
            block(np.zeros((2, 1, 5), dtype=np.float32))

    def test_gradients_match_finite_differences(self):
        cfg = FeedForwardConfig(embed_dim=3, boom_dim=6)
        ref = FeedForward(cfg, rng64(11), dtype=np.float64)
        shapes = {"x": (2, 2, 3), "w1": (3, 6), "b1": (6,), "w2": (6, 3), "b2": (3,),
                  "gain": (3,), "bias": (3,)}
        rng = rng64(12)
        arrays = [rng.standard_normal(s) for s in shapes.values()]

        def build(arrs):
            block = FeedForward(cfg, rng64(0), dtype=np.float64)
            x = Tensor(arrs[0], requires_grad=True)
            for p, a in zip([block.core.w1, block.core.b1, block.core.w2, block.core.b2, block.gain, block.bias],
                            arrs[1:]):
                p.data = a
            out = block(x)
            loss = tape.tsum(tape.mul(out, Tensor(np.arange(out.data.size, dtype=np.float64)
                                                  .reshape(out.data.shape) / out.data.size)))
            return loss, [x, block.core.w1, block.core.b1, block.core.w2, block.core.b2, block.gain, block.bias]

        check_block_gradients(build, arrays, rtol=1e-4, label="feed_forward")


# ---------------------------------------------------------------------------
# relative attention


def make_attention(seed, embed=4, heads=2, attn_length=4, dtype=np.float64, rate=0.0):
    cfg = AttentionConfig(embed_dim=embed, num_heads=heads,
                          attn_length=attn_length, dropout_rate=rate)
    return RelativeAttention(cfg, rng64(seed), dtype=dtype)


class TestRelativeAttention:
    def test_uniform_scores_average_values(self):
        block = make_attention(0, embed=3, heads=1, attn_length=8)
        block.wq.data[...] = 0.0
        block.wk.data[...] = 0.0
        block.wr.data[...] = 0.0
        block.wv.data = np.eye(3)
        block.wo.data = np.eye(3)
        x = np.array([[[1.0, 2.0, 3.0]], [[4.0, 5.0, 6.0]], [[7.0, 8.0, 9.0]]])
        context, _ = block.attend(x)
        for t in range(3):
            np.testing.assert_allclose(context.data[t, 0], x[: t + 1, 0].mean(axis=0),
                                       rtol=1e-12)

    def test_causality_bit_identical(self):
        block = make_attention(1, embed=4, heads=2, attn_length=4)
        x = rng64(2).standard_normal((2, 1, 4))
        y1, _ = block(x)
        x2 = x.copy()
        x2[1] += 10.0
        y2, _ = block(x2)
        np.testing.assert_array_equal(y1.data[0], y2.data[0])

    def test_matches_naive_per_position_oracle(self):
        block = make_attention(3, embed=4, heads=2, attn_length=4)
        # nonzero biases so both score terms are exercised
        block.u.data = rng64(4).standard_normal(block.u.shape) * 0.3
        block.v.data = rng64(5).standard_normal(block.v.shape) * 0.3
        x = rng64(6).standard_normal((4, 1, 4))
        context, _ = block.attend(x)

        T, D, H = 4, 4, 2
        dh = D // H
        q = (x[:, 0] @ block.wq.data).reshape(T, H, dh)
        k = (x[:, 0] @ block.wk.data).reshape(T, H, dh)
        v = (x[:, 0] @ block.wv.data).reshape(T, H, dh)
        codes = blocks.relative_encoding(4, D, np.float64)
        r = (codes @ block.wr.data).reshape(4, H, dh)
        valid = np.array([[0 <= t - j < 4 for j in range(T)] for t in range(T)])
        mixed = attention_rescore(q, k, v, r, block.u.data, block.v.data,
                                  1.0 / np.sqrt(dh), valid)
        expect = mixed.reshape(T, D) @ block.wo.data
        np.testing.assert_allclose(context.data[:, 0], expect, rtol=1e-6, atol=1e-9)

    def test_window_excludes_older_positions(self):
        # attn_length 2: position t sees only t-1 and t
        block = make_attention(7, embed=4, heads=1, attn_length=2)
        x = rng64(8).standard_normal((5, 1, 4))
        y1, _ = block(x)
        x2 = x.copy()
        x2[0] += 5.0  # outside the window of positions 2..4
        y2, _ = block(x2)
        np.testing.assert_array_equal(y1.data[2:], y2.data[2:])

    def test_two_windows_with_memory_match_single_pass(self):
        block = make_attention(9, embed=6, heads=2, attn_length=4)
        x = rng64(10).standard_normal((8, 2, 6))
        full, _ = block.attend(x)
        first, memory = block.attend(x[:4])
        second, _ = block.attend(x[4:], memory)
        np.testing.assert_allclose(first.data, full.data[:4], rtol=1e-10)
        np.testing.assert_allclose(second.data, full.data[4:], rtol=1e-10)

    def test_new_memory_holds_last_inputs(self):
        block = make_attention(11, embed=4, heads=1, attn_length=3)
        x = rng64(12).standard_normal((5, 2, 4))
        _, memory = block.attend(x)
        assert memory.length == 2  # attn_length - 1
        np.testing.assert_array_equal(memory.data, x[-2:])
        assert memory.valid.all()

    def test_invalidated_memory_column_acts_like_no_history(self):
        block = make_attention(13, embed=4, heads=2, attn_length=6)
        past = rng64(14).standard_normal((3, 2, 4))
        x = rng64(15).standard_normal((2, 2, 4))
        memory = AttentionMemory(past.copy())
        memory = memory.reset_columns([False, True])
        with_memory, _ = block.attend(x, memory)
        bare, _ = block.attend(x)
        # column 1 lost its history, so it must match the memory-free pass
        np.testing.assert_allclose(with_memory.data[:, 1], bare.data[:, 1], rtol=1e-12)
        # column 0 kept its history and must differ
        assert not np.allclose(with_memory.data[:, 0], bare.data[:, 0])

    def test_dropout_rate_zero_train_equals_eval(self):
        block = make_attention(16, embed=4, heads=2)
        x = rng64(17).standard_normal((3, 1, 4))
        ye, _ = block(x)
        yt, _ = block(x, training=True, rng=rng64(18))
        np.testing.assert_array_equal(ye.data, yt.data)

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            AttentionConfig(embed_dim=5, num_heads=2, attn_length=4)
        with pytest.raises(ConfigError):
            AttentionConfig(embed_dim=4, num_heads=2, attn_length=0)

    def test_memory_shape_mismatch_rejected(self):
        block = make_attention(19, embed=4, heads=1)
        with pytest.raises(ShapeError):
            block.attend(np.zeros((2, 1, 4)), AttentionMemory(np.zeros((2, 2, 4))))

    def test_gradient_wrt_query_projection(self):
        cfg = AttentionConfig(embed_dim=4, num_heads=2, attn_length=4)
        rng = rng64(20)
        arrays = [rng.standard_normal((3, 1, 4)), rng.standard_normal((4, 4))]

        def build(arrs):
            block = RelativeAttention(cfg, rng64(0), dtype=np.float64)
            block.u.data = 0.1 * np.ones_like(block.u.data)
            block.v.data = -0.1 * np.ones_like(block.v.data)
            x = Tensor(arrs[0], requires_grad=True)
            block.wq.data = arrs[1]
            y, _ = block(x)
            loss = tape.tsum(tape.mul(y, Tensor(np.arange(y.data.size, dtype=np.float64)
                                                .reshape(y.data.shape) / y.data.size)))
            return loss, [x, block.wq]

        check_block_gradients(build, arrays, rtol=1e-4, label="attention")

    def test_gradient_with_memory_and_all_params(self):
        cfg = AttentionConfig(embed_dim=4, num_heads=2, attn_length=3)
        rng = rng64(21)
        x0 = rng.standard_normal((3, 2, 4))
        past = rng.standard_normal((2, 2, 4))

        def build(arrs):
            block = RelativeAttention(cfg, rng64(1), dtype=np.float64)
            x = Tensor(arrs[0], requires_grad=True)
            y, _ = block(x, AttentionMemory(past))
            loss = tape.tsum(tape.mul(y, Tensor(np.linspace(0.2, 1.7, y.data.size)
                                                .reshape(y.data.shape))))
            params = [x, block.wk, block.wv, block.wr, block.wo, block.u, block.v,
                      block.gain, block.bias]
            return loss, params

        loss, params = build([x0])
        loss.backward()
        numeric, masks = finite_difference(lambda arrs: float(build(arrs)[0].data), [x0],
                                           rng=rng64(22))
        assert_grads_match(params[0].grad, numeric[0], masks[0], rtol=1e-4, label="x")
        # parameters get nonzero gradients through both score terms
        for p in params[1:7]:
            assert p.grad is not None and np.abs(p.grad).max() > 0


# ---------------------------------------------------------------------------
# qrnn gates and fo-pooling


def gate_weights(cfg, seed, dtype=np.float64):
    rng = rng64(seed)
    d, w = cfg.embed_dim, cfg.conv_width
    ws = [Parameter(tape.uniform_fan_in(rng, (w, d, d), dtype)) for _ in range(3)]
    bs = [Parameter(np.zeros(d, dtype=dtype)) for _ in range(3)]
    return (*ws, *bs)


class TestQRNNGates:
    def test_zero_weights_give_neutral_gates(self):
        cfg = QRNNConfig(embed_dim=3, conv_width=1)
        weights = gate_weights(cfg, 0)
        for w in weights:
            w.data[...] = 0.0
        x = rng64(1).standard_normal((4, 2, 3))
        z, f, o = qrnn_gates(x, cfg, weights)
        np.testing.assert_array_equal(z.data, 0.0)
        np.testing.assert_array_equal(f.data, 0.5)
        np.testing.assert_array_equal(o.data, 0.5)

    def test_all_ones_masks_equal_unmasked(self):
        cfg = QRNNConfig(embed_dim=3, conv_width=2)
        weights = gate_weights(cfg, 2)
        x = rng64(3).standard_normal((4, 2, 3))
        plain = qrnn_gates(x, cfg, weights)
        ones = [np.ones((2, 3, 3)) for _ in range(3)]
        masked = qrnn_gates(x, cfg, weights, weight_masks=ones)
        for a, b in zip(plain, masked):
            np.testing.assert_array_equal(a.data, b.data)

    def test_width_two_hand_computed(self):
        # one feature dim, explicit taps: step 0 sees (0, x0), step 1 sees (x0, x1)
        cfg = QRNNConfig(embed_dim=1, conv_width=2)
        wz = Parameter(np.array([[[0.5]], [[2.0]]]))
        wf = Parameter(np.array([[[1.0]], [[-1.0]]]))
        wo = Parameter(np.array([[[0.0]], [[1.0]]]))
        bz = Parameter(np.array([0.1]))
        bf = Parameter(np.array([0.2]))
        bo = Parameter(np.array([-0.3]))
        x = np.array([[[0.4]], [[-0.6]]])
        z, f, o = qrnn_gates(x, cfg, (wz, wf, wo, bz, bf, bo))

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        np.testing.assert_allclose(z.data[0, 0, 0], np.tanh(2.0 * 0.4 + 0.1), rtol=1e-12)
        np.testing.assert_allclose(z.data[1, 0, 0], np.tanh(0.5 * 0.4 + 2.0 * -0.6 + 0.1),
                                   rtol=1e-12)
        np.testing.assert_allclose(f.data[0, 0, 0], sig(-1.0 * 0.4 + 0.2), rtol=1e-12)
        np.testing.assert_allclose(f.data[1, 0, 0], sig(1.0 * 0.4 + -1.0 * -0.6 + 0.2),
                                   rtol=1e-12)
        np.testing.assert_allclose(o.data[0, 0, 0], sig(1.0 * 0.4 - 0.3), rtol=1e-12)
        np.testing.assert_allclose(o.data[1, 0, 0], sig(0.0 * 0.4 + 1.0 * -0.6 - 0.3),
                                   rtol=1e-12)

    def test_bad_width_rejected(self):
        with pytest.raises(ConfigError):
            QRNNConfig(embed_dim=3, conv_width=3)


class TestFoPool:
    def test_forget_zero_passes_through(self):
        rng = rng64(0)
        z = Tensor(rng.standard_normal((4, 2, 3)))
        f = Tensor(np.zeros((4, 2, 3)))
        o = Tensor(np.ones((4, 2, 3)))
        h, _ = fo_pool(z, f, o)
        np.testing.assert_allclose(h.data, z.data, rtol=1e-12)

    def test_forget_one_carries_start_cell(self):
        rng = rng64(1)
        z = Tensor(rng.standard_normal((4, 2, 3)))
        f = Tensor(np.ones((4, 2, 3)))
        o = Tensor(rng.random((4, 2, 3)))
        c0 = rng.standard_normal((2, 3))
        h, last = fo_pool(z, f, o, c0)
        np.testing.assert_allclose(h.data, o.data * c0, rtol=1e-12)
        np.testing.assert_allclose(last.cell, c0, rtol=1e-12)

    def test_matches_sequential_loop(self):
        rng = rng64(2)
        z = np.tanh(rng.standard_normal((5, 2, 3)))
        f = 1.0 / (1.0 + np.exp(-rng.standard_normal((5, 2, 3))))
        o = 1.0 / (1.0 + np.exp(-rng.standard_normal((5, 2, 3))))
        c0 = rng.standard_normal((2, 3))
        h, last = fo_pool(Tensor(z), Tensor(f), Tensor(o), c0)
        h_ref, c_ref = fo_pool_sequential(z, f, o, c0)
        np.testing.assert_allclose(h.data, h_ref, rtol=1e-7)
        np.testing.assert_allclose(last.cell, c_ref, rtol=1e-7)

    def test_parallel_equals_sequential_many_instances(self):
        rng = rng64(3)
        for _ in range(1000):
            t = int(rng.integers(1, 9))
            b = int(rng.integers(1, 4))
            d = int(rng.integers(1, 5))
            z = np.tanh(rng.standard_normal((t, b, d)))
            f = 1.0 / (1.0 + np.exp(-rng.standard_normal((t, b, d))))
            o = 1.0 / (1.0 + np.exp(-rng.standard_normal((t, b, d))))
            c0 = rng.standard_normal((b, d))
            h, last = fo_pool(Tensor(z), Tensor(f), Tensor(o), c0)
            h_ref, c_ref = fo_pool_sequential(z, f, o, c0)
            np.testing.assert_allclose(h.data, h_ref, rtol=1e-7, atol=1e-12)
            np.testing.assert_allclose(last.cell, c_ref, rtol=1e-7, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            fo_pool(Tensor(np.zeros((2, 1, 3))), Tensor(np.zeros((2, 1, 2))),
                    Tensor(np.zeros((2, 1, 3))))

    def test_gradient_wrt_forget_gate_three_steps(self):
        rng = rng64(4)
        zd = rng.standard_normal((3, 1, 1))
        fd = rng.random((3, 1, 1)) * 0.8 + 0.1
        od = rng.random((3, 1, 1))
        c0 = rng.standard_normal((1, 1))

        def build(arrs):
            z, f, o = (Tensor(a, requires_grad=True) for a in arrs)
            h, _ = fo_pool(z, f, o, c0)
            loss = tape.tsum(tape.mul(h, Tensor(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))))
            return loss, [z, f, o]

        loss, ts = build([zd, fd, od])
        loss.backward()
        numeric, masks = finite_difference(lambda a: float(build(a)[0].data),
                                           [zd, fd, od], h=1e-5)
        for t, n, m, name in zip(ts, numeric, masks, "zfo"):
            assert_grads_match(t.grad, n, m, rtol=1e-5, atol=1e-9, label=f"fo_pool[{name}]")

    def test_gradient_randomized_shapes(self):
        for seed in range(5):
            rng = rng64(100 + seed)
            t, b, d = int(rng.integers(1, 6)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
            zd = rng.standard_normal((t, b, d))
            fd = rng.random((t, b, d)) * 0.9 + 0.05
            od = rng.random((t, b, d))
            c0 = rng.standard_normal((b, d))
            w = rng.standard_normal((t, b, d))

            def build(arrs):
                z, f, o = (Tensor(a, requires_grad=True) for a in arrs)
                h, _ = fo_pool(z, f, o, c0)
                return tape.tsum(tape.mul(h, Tensor(w))), [z, f, o]

            loss, ts = build([zd, fd, od])
            loss.backward()
            numeric, masks = finite_difference(lambda a: float(build(a)[0].data),
                                               [zd, fd, od], rng=rng64(seed))
            for tns, n, m in zip(ts, numeric, masks):
                assert_grads_match(tns.grad, n, m, rtol=1e-4, atol=1e-9)


class TestQRNNLayer:
    def test_state_carry_matches_single_pass(self):
        cfg = QRNNConfig(embed_dim=4, conv_width=1)
        layer = QRNN(cfg, rng64(0), dtype=np.float64)
        x = rng64(1).standard_normal((6, 2, 4))
        full, _ = layer(x)
        first, state = layer(x[:3])
        second, _ = layer(x[3:], state)
        np.testing.assert_allclose(first.data, full.data[:3], rtol=1e-10)
        np.testing.assert_allclose(second.data, full.data[3:], rtol=1e-10)

    def test_final_state_is_detached_copy(self):
        layer = QRNN(QRNNConfig(embed_dim=3, conv_width=2), rng64(2), dtype=np.float64)
        x = rng64(3).standard_normal((4, 1, 3))
        h, state = layer(x)
        assert isinstance(state, QRNNState)
        assert not state.fresh
        state.cell[...] = 99.0  # mutating the carry must not touch the graph
        np.testing.assert_array_less(np.abs(h.data), 10.0)

    def test_state_reset_columns(self):
        state = QRNNState(np.arange(6, dtype=np.float64).reshape(2, 3), fresh=False)
        reset = state.reset_columns([True, False])
        np.testing.assert_array_equal(reset.cell[0], 0.0)
        np.testing.assert_array_equal(reset.cell[1], state.cell[1])

    def test_weight_drop_changes_output_but_not_weights(self):
        cfg = QRNNConfig(embed_dim=4, conv_width=1, weight_drop_rate=0.5)
        layer = QRNN(cfg, rng64(4), dtype=np.float64)
        x = rng64(5).standard_normal((3, 2, 4))
        before = layer.wz.data.copy()
        y1, _ = layer(x, training=True, rng=rng64(6))
        y2, _ = layer(x, training=True, rng=rng64(7))
        np.testing.assert_array_equal(layer.wz.data, before)
        assert not np.array_equal(y1.data, y2.data)

    def test_eval_ignores_weight_drop(self):
        cfg = QRNNConfig(embed_dim=4, conv_width=1, weight_drop_rate=0.9)
        layer = QRNN(cfg, rng64(8), dtype=np.float64)
        x = rng64(9).standard_normal((3, 1, 4))
        y1, _ = layer(x)
        y2, _ = layer(x)
        np.testing.assert_array_equal(y1.data, y2.data)

    def test_gradients_full_layer(self):
        cfg = QRNNConfig(embed_dim=3, conv_width=2)
        x0 = rng64(10).standard_normal((4, 2, 3))

        def build(arrs):
            layer = QRNN(cfg, rng64(11), dtype=np.float64)
            x = Tensor(arrs[0], requires_grad=True)
            h, _ = layer(x)
            loss = tape.tsum(tape.mul(h, Tensor(np.linspace(-1, 1, h.data.size)
                                                .reshape(h.data.shape))))
            return loss, [x, layer.wz, layer.wf, layer.wo, layer.bz, layer.bf, layer.bo]

        loss, ts = build([x0])
        loss.backward()
        numeric, masks = finite_difference(lambda a: float(build(a)[0].data), [x0])
        assert_grads_match(ts[0].grad, numeric[0], masks[0], rtol=1e-4, label="qrnn x")
        for p in ts[1:]:
            assert p.grad is not None

    def test_gradient_through_carried_state_is_blocked(self):
        # the carried cell is a constant: grads flow only within the window
        cfg = QRNNConfig(embed_dim=2, conv_width=1)
        layer = QRNN(cfg, rng64(12), dtype=np.float64)
        x1 = Tensor(rng64(13).standard_normal((2, 1, 2)), requires_grad=True)
        _, state = layer(x1)
        x2 = Tensor(rng64(14).standard_normal((2, 1, 2)), requires_grad=True)
        h2, _ = layer(x2, state)
        tape.tsum(h2).backward()
        assert x1.grad is None
        assert x2.grad is not None


# ---------------------------------------------------------------------------
# dropout family


class TestRnnDropout:
    def test_rate_zero_identity(self):
        x = rng64(0).standard_normal((3, 2, 4))
        y = rnn_dropout(x, 0.0, True, rng64(1))
        np.testing.assert_array_equal(y.data, x)

    def test_eval_identity(self):
        x = rng64(2).standard_normal((3, 2, 4))
        y = rnn_dropout(x, 0.7, False, None)
        np.testing.assert_array_equal(y.data, x)

    def test_lanes_all_or_nothing_across_time(self):
        x = np.ones((4, 3, 8), dtype=np.float64)
        y = rnn_dropout(x, 0.5, True, rng64(3)).data
        for b in range(3):
            for d in range(8):
                lane = y[:, b, d]
                assert np.all(lane == 0.0) or np.all(lane == 2.0)
        assert (y == 0.0).any() and (y == 2.0).any()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.05, 0.9))
    def test_mask_constant_over_time(self, seed, rate):
        x = np.abs(rng64(seed).standard_normal((5, 2, 6))) + 0.5
        y = rnn_dropout(x, rate, True, rng64(seed + 1)).data
        zero_pattern = (y == 0.0)
        for t in range(1, 5):
            np.testing.assert_array_equal(zero_pattern[t], zero_pattern[0])

    def test_expectation_preserved(self):
        # one call draws >= 1e5 independent lane masks
        b, d = 400, 256
        x = np.ones((2, b, d), dtype=np.float64)
        y = rnn_dropout(x, 0.5, True, rng64(4)).data
        n = b * d
        se = 1.0 / np.sqrt(n)  # entries are 0 or 2, std 1
        assert abs(y[0].mean() - 1.0) < 3 * se

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            rnn_dropout(np.ones((2, 1, 3)), 1.0, True, rng64(5))

    def test_gradient_uses_same_mask(self):
        x = Tensor(np.ones((3, 2, 4)), requires_grad=True)
        y = rnn_dropout(x, 0.5, True, rng64(6))
        tape.tsum(y).backward()
        # gradient is exactly the mask: zero where dropped, 2 where kept
        np.testing.assert_array_equal(x.grad, np.where(y.data == 0.0, 0.0, 2.0))


class TestElementwiseDropout:
    def test_expectation_preserved(self):
        x = np.ones((1, 500, 256), dtype=np.float64)
        y = dropout(x, 0.3, True, rng64(0)).data
        n = x.size
        std = np.sqrt(0.3 / 0.7)  # entries are 0 or 1/0.7
        assert abs(y.mean() - 1.0) < 3 * std / np.sqrt(n)

    def test_eval_identity(self):
        x = rng64(1).standard_normal((2, 3, 4))
        np.testing.assert_array_equal(dropout(x, 0.9, False, None).data, x)

    def test_missing_rng_rejected(self):
        with pytest.raises(ConfigError):
            dropout(np.ones((2, 1, 3)), 0.5, True, None)


# ---------------------------------------------------------------------------
# cross-block properties


def build_each_block(dtype=np.float64):
    ff = FeedForward(FeedForwardConfig(4, 8), rng64(0), dtype=dtype)
    attn = RelativeAttention(AttentionConfig(4, 2, 4), rng64(1), dtype=dtype)
    qrnn = QRNN(QRNNConfig(4, conv_width=2), rng64(2), dtype=dtype)
    return ff, attn, qrnn


class TestCausality:
    @pytest.mark.parametrize("cut", [1, 2, 3])
    def test_all_blocks_ignore_future(self, cut):
        ff, attn, qrnn = build_each_block()
        x = rng64(3).standard_normal((4, 2, 4))
        bumped = x.copy()
        bumped[cut:] += 7.0

        np.testing.assert_array_equal(ff(x).data[:cut], ff(bumped).data[:cut])
        np.testing.assert_array_equal(attn(x)[0].data[:cut], attn(bumped)[0].data[:cut])
        np.testing.assert_array_equal(qrnn(x)[0].data[:cut], qrnn(bumped)[0].data[:cut])


class TestDeterminism:
    def test_training_forward_bit_identical_under_same_seed(self):
        ff = FeedForward(FeedForwardConfig(4, 8, dropout_rate=0.3), rng64(0))
        attn = RelativeAttention(AttentionConfig(4, 2, 4, dropout_rate=0.3), rng64(1))
        qrnn = QRNN(QRNNConfig(4, conv_width=1, weight_drop_rate=0.4), rng64(2))
        x = rng64(3).standard_normal((3, 2, 4)).astype(np.float32)

        a1 = ff(x, training=True, rng=rng64(42)).data
        a2 = ff(x, training=True, rng=rng64(42)).data
        np.testing.assert_array_equal(a1, a2)

        b1, _ = attn(x, training=True, rng=rng64(42))
        b2, _ = attn(x, training=True, rng=rng64(42))
        np.testing.assert_array_equal(b1.data, b2.data)

        c1, _ = qrnn(x, training=True, rng=rng64(42))
        c2, _ = qrnn(x, training=True, rng=rng64(42))
        np.testing.assert_array_equal(c1.data, c2.data)


class TestLinearLayerGradientClosedForm:
    def test_quadratic_loss_gradient(self):
        # loss = 0.5 ||x @ w - y||^2 has dW = x^T (x @ w - y)
        rng = rng64(0)
        x = rng.standard_normal((5, 3))
        w = Parameter(rng.standard_normal((3, 2)))
        y = rng.standard_normal((5, 2))
        pred = tape.matmul(Tensor(x), w)
        delta = tape.add(pred, Tensor(-y))
        loss = tape.mul(tape.tsum(tape.mul(delta, delta)), 0.5)
        loss.backward()
        np.testing.assert_allclose(w.grad, x.T @ (x @ w.data - y), rtol=1e-10)


class TestLinearScan:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 17))
    def test_matches_loop(self, seed, t):
        rng = rng64(seed)
        a = rng.standard_normal((t, 2)) * 0.9
        b = rng.standard_normal((t, 2))
        got = linear_scan(a, b)
        expect = np.empty_like(b)
        acc = np.zeros(2)
        for i in range(t):
            acc = a[i] * acc + b[i] if i else b[i]
            expect[i] = acc
        np.testing.assert_allclose(got, expect, rtol=1e-9, atol=1e-12)
