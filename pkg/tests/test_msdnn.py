"""BLSTM recurrence, softmax head, exact gradients, training and checkpoints."""
from __future__ import annotations

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icschain.msdnn import (
    BLOCKS,
    CHECKPOINT_MAGIC,
    HIDDEN,
    PROB_FLOOR,
    BlstmModel,
    LstmParams,
    Prediction,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    backward,
    block_shapes,
    blstm_forward,
    clip_gradients,
    cross_entropy,
    decode_model,
    encode_model,
    forward,
    forward_batch,
    global_norm,
    gradient_check,
    init_model,
    load_model,
    lstm_cell_step,
    predict,
    save_model,
    smoothed,
    softmax,
    train,
    zero_model,
)


def scalar_step(p: LstmParams, x, h, c):
    """Element-by-element LSTM step in plain Python floats."""
    H, D = len(h), len(x)

    def pre(row):
        return (sum(p.W[row, j] * x[j] for j in range(D))
                + sum(p.U[row, j] * h[j] for j in range(H)) + p.b[row])

    sig = lambda z: 1.0 / (1.0 + math.exp(-z))  # noqa: E731
    h_new, c_new = [], []
    for k in range(H):
        i = sig(pre(k))
        f = sig(pre(H + k))
        g = math.tanh(pre(2 * H + k))
        o = sig(pre(3 * H + k))
        ck = f * c[k] + i * g
        c_new.append(ck)
        h_new.append(o * math.tanh(ck))
    return h_new, c_new


def mirrored(model: BlstmModel) -> BlstmModel:
    """Same model with the backward direction replaced by the forward one."""
    f = model.fwd
    return BlstmModel(f, LstmParams(f.W.copy(), f.U.copy(), f.b.copy()), model.dense_W, model.dense_b)


def toy_data(n: int, D: int = 4, seed: int = 0):
    """Variable-length sequences; class k > 0 shifts feature k by one."""
    rng = np.random.default_rng(seed)
    X, y = [], []
    for _ in range(n):
        T = int(rng.integers(3, 10))
        x = rng.normal(0, 0.1, (T, D))
        label = int(rng.integers(0, 3))
        if label:
            x[:, label] += 1.0
        X.append(x)
        y.append(label)
    return X, np.array(y)


class TestInit:
    def test_shapes_and_forget_bias(self):
        m = init_model(24, 3, seed=1)
        assert m.H == HIDDEN == 100 and m.D == 24 and m.C == 3
        for name, shape in block_shapes(100, 24, 3).items():
            assert m.blocks()[name].shape == shape
        for lstm in (m.fwd, m.bwd):
            assert (lstm.b[100:200] == 1).all()
            others = np.concatenate([lstm.b[:100], lstm.b[200:]])
            for v in (lstm.W, lstm.U, others):
                assert np.abs(v).max() <= 0.1
        assert m.all_finite()

    def test_seeded(self):
        a, b = init_model(5, 2, 4, seed=3), init_model(5, 2, 4, seed=3)
        assert encode_model(a) == encode_model(b)
        assert encode_model(a) != encode_model(init_model(5, 2, 4, seed=4))

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            init_model(5, 1)


class TestCell:
    def test_all_zero(self):
        p = zero_model(3, 2, 4).fwd
        h, c = lstm_cell_step(p, np.zeros(3), np.zeros(4), np.zeros(4))
        assert not h.any() and not c.any()

    def test_saturated_forget_keeps_cell(self):
        m = zero_model(3, 2, 2)
        m.fwd.b[:2] = -50.0      # input gate closed
        m.fwd.b[2:4] = 50.0      # forget gate open
        c_prev = np.array([0.7, -1.3])
        h, c = lstm_cell_step(m.fwd, np.ones(3), np.zeros(2), c_prev)
        assert np.allclose(c, c_prev, atol=1e-12)
        assert np.allclose(h, 0.5 * np.tanh(c_prev), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        m = init_model(3, 2, 2, seed=seed)
        for v in m.blocks().values():
            v += rng.normal(0, 0.5, v.shape)
        x, h0, c0 = rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
        h, c = lstm_cell_step(m.fwd, x, h0, c0)
        hs, cs = scalar_step(m.fwd, x.tolist(), h0.tolist(), c0.tolist())
        assert np.allclose(h, hs, rtol=0, atol=1e-14)
        assert np.allclose(c, cs, rtol=0, atol=1e-14)

    def test_shape_mismatch(self):
        p = zero_model(3, 2, 4).fwd
        with pytest.raises(ValueError):
            lstm_cell_step(p, np.zeros(2), np.zeros(4), np.zeros(4))
        with pytest.raises(ValueError):
            lstm_cell_step(p, np.zeros(3), np.zeros(3), np.zeros(4))


class TestBlstm:
    def test_output_shape_and_summary(self):
        m = init_model(4, 3, 5, seed=0)
        seq = np.random.default_rng(0).normal(size=(6, 4))
        out, summary = blstm_forward(m, seq)
        assert out.shape == (6, 10) and summary.shape == (10,)
        assert np.array_equal(summary[:5], out[-1, :5])
        assert np.array_equal(summary[5:], out[0, 5:])

    def test_forward_half_is_cell_recurrence(self):
        m = init_model(4, 3, 5, seed=2)
        seq = np.random.default_rng(2).normal(size=(4, 4))
        h, c = np.zeros(5), np.zeros(5)
        for x in seq:
            h, c = lstm_cell_step(m.fwd, x, h, c)
        assert np.allclose(blstm_forward(m, seq)[1][:5], h, atol=1e-14)

    def test_single_step_halves_equal(self):
        m = mirrored(init_model(4, 3, 5, seed=1))
        _, s = blstm_forward(m, np.random.default_rng(1).normal(size=(1, 4)))
        assert np.array_equal(s[:5], s[5:])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 10**6))
    def test_reversal_swaps_halves(self, T, seed):
        m = mirrored(init_model(4, 3, 5, seed=seed % 97))
        seq = np.random.default_rng(seed).normal(size=(T, 4))
        _, s = blstm_forward(m, seq)
        _, r = blstm_forward(m, seq[::-1])
        assert np.allclose(s[:5], r[5:], atol=1e-13)
        assert np.allclose(s[5:], r[:5], atol=1e-13)

    def test_zero_parameters_zero_outputs(self):
        out, s = blstm_forward(zero_model(4, 3, 5), np.random.default_rng(0).normal(size=(7, 4)))
        assert not out.any() and not s.any()

    def test_empty_sequence(self):
        with pytest.raises(ValueError):
            blstm_forward(init_model(4, 3, 5), np.zeros((0, 4)))

    def test_padding_does_not_change_result(self):
        m = init_model(4, 3, 5, seed=0)
        rng = np.random.default_rng(0)
        short, long = rng.normal(size=(3, 4)), rng.normal(size=(9, 4))
        alone = forward_batch(m, [short])[0]
        padded = forward_batch(m, [short, long])[0]
        assert np.allclose(alone, padded, rtol=0, atol=1e-14)


class TestSoftmaxHead:
    def test_zero_model_uniform(self):
        p = forward(zero_model(6, 4, 3), np.ones((5, 6)))
        assert np.allclose(p.probabilities, 0.25)
        assert p.decision == 0

    def test_crafted_logits(self):
        m = zero_model(6, 3, 3)
        m.dense_b[:] = (10.0, 0.0, 0.0)
        p = forward(m, np.ones((2, 6))).probabilities
        assert p[0] > 0.999
        assert p[0] == pytest.approx(math.exp(10) / (math.exp(10) + 2), rel=1e-12)

    def test_crafted_decision(self):
        m = zero_model(6, 4, 3)
        m.dense_b[:] = (0.0, 0.5, 3.0, 0.1)
        assert predict(m, np.ones((2, 6))) == 2

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(0)
        for k in range(100):
            D, C = int(rng.integers(1, 8)), int(rng.integers(2, 6))
            m = init_model(D, C, 4, seed=k)
            for v in m.blocks().values():
                v += rng.normal(0, 2.0, v.shape)
            p = forward(m, rng.normal(0, 3, (int(rng.integers(1, 10)), D))).probabilities
            assert (p >= 0).all()
            assert abs(p.sum() - 1) <= 1e-9

    @given(st.lists(st.floats(-700, 700), min_size=2, max_size=8))
    def test_softmax_finite(self, logits):
        p = softmax(np.array(logits))
        assert np.isfinite(p).all() and abs(p.sum() - 1) <= 1e-9

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(-1e3, 1e3))
    def test_argmax_shift_invariant(self, bias, shift):
        m = zero_model(3, len(bias), 2)
        m.dense_b[:] = bias
        seq = np.ones((2, 3))
        before = predict(m, seq)
        m.dense_b[:] += shift
        assert predict(m, seq) == before

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward(zero_model(6, 3, 3), np.ones((2, 5)))


class TestCrossEntropy:
    def test_certain(self):
        assert cross_entropy(np.array([0.0, 1.0]), 1) == 0.0

    def test_uniform(self):
        assert cross_entropy(Prediction(np.full(4, 0.25), 0), 3) == pytest.approx(1.3863, abs=1e-4)

    def test_floor(self):
        v = cross_entropy(np.array([1.0, 0.0]), 1)
        assert math.isfinite(v) and v <= -math.log(PROB_FLOOR)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.array([0.5, 0.5]), 2)
        with pytest.raises(ValueError):
            cross_entropy(np.array([0.5, 0.5]), -1)


class TestGradients:
    def test_finite_difference_check(self):
        report = gradient_check((3, 4, 5, 3), tolerance=1e-4)
        assert report.passed, str(report)
        assert set(report.block_errors) == set(BLOCKS)

    def test_tolerance_floor(self):
        assert not gradient_check((3, 4, 5, 3), tolerance=1e-12).passed

    @pytest.mark.parametrize("block", ["dense_W", "dense_b"])
    def test_corrupted_block_named(self, block):
        report = gradient_check((3, 4, 5, 3), corrupt={block: 2.0})
        assert not report.passed
        assert report.worst_block == block
        assert block in str(report)

    def test_too_large(self):
        with pytest.raises(ValueError):
            gradient_check((30, 12, 5, 3))

    def test_duplicate_sample_invariance(self):
        m = init_model(4, 3, 5, seed=0)
        x = np.random.default_rng(0).normal(size=(6, 4))
        one = backward(m, [(x, 1)]).grads
        two = backward(m, [(x, 1), (x, 1)]).grads
        for k in BLOCKS:
            assert np.allclose(one[k], two[k], rtol=1e-12, atol=1e-15)

    def test_saturated_batch(self):
        m = init_model(4, 3, 5, seed=0)
        m.dense_b[:] = (60.0, 0.0, 0.0)
        rng = np.random.default_rng(1)
        res = backward(m, [(rng.normal(size=(5, 4)), 0) for _ in range(3)])
        assert res.loss < 1e-12
        assert global_norm(res.grads) < 1e-6

    def test_clipping(self):
        g = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}
        clipped = clip_gradients(g, 6.5)
        assert global_norm(g) == 13.0
        assert global_norm(clipped) == pytest.approx(6.5)
        assert np.allclose(clipped["a"], [1.5, 2.0])
        assert clip_gradients(g, 20.0) is g

    def test_clip_applied_in_backward(self):
        m = init_model(4, 3, 5, seed=0)
        for v in m.blocks().values():
            v *= 20
        batch = [(np.random.default_rng(0).normal(0, 5, (6, 4)), 2)]
        assert global_norm(backward(m, batch).grads) > 1.0
        assert global_norm(backward(m, batch, clip_norm=1.0).grads) == pytest.approx(1.0)


TOY_CONFIG = TrainConfig(learning_rate=0.05, batch_size=16, max_iterations=300, seed=2)


@pytest.fixture(scope="module")
def trained():
    X, y = toy_data(160)
    return X, y, train(init_model(4, 3, 8, seed=0), X, y, TOY_CONFIG)


class TestTraining:
    config = TOY_CONFIG

    def test_learns_toy_problem(self, trained):
        X, y, res = trained
        Xt, yt = toy_data(60, seed=1)
        assert accuracy(res.model, X, y) == 1.0
        assert accuracy(res.model, Xt, yt) >= 0.95

    def test_trace(self, trained):
        _, _, res = trained
        assert [r.iteration for r in res.trace] == list(range(1, 301))
        s = smoothed([r.loss for r in res.trace])
        assert s[-1] < s[0] / 5
        assert res.trace_csv().splitlines()[0] == "iteration,loss,accuracy"
        assert len(res.trace_csv().splitlines()) == 301

    def test_deterministic(self, trained):
        X, y, res = trained
        again = train(init_model(4, 3, 8, seed=0), X, y, self.config)
        assert encode_model(again.model) == encode_model(res.model)
        assert again.trace_csv() == res.trace_csv()

    def test_input_model_untouched(self):
        X, y = toy_data(20)
        m = init_model(4, 3, 4, seed=0)
        before = encode_model(m)
        train(m, X, y, TrainConfig(max_iterations=5))
        assert encode_model(m) == before

    def test_zero_learning_rate(self):
        X, y = toy_data(40)
        m = init_model(4, 3, 4, seed=0)
        res = train(m, X, y, TrainConfig(learning_rate=0.0, max_iterations=20))
        assert encode_model(res.model) == encode_model(m)
        assert len(res.trace) == 20

    def test_nan_loss_aborts(self):
        X, y = toy_data(20)
        X[3][0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            train(init_model(4, 3, 4), X, y, TrainConfig(batch_size=20, max_iterations=3))

    def test_empty_training_set(self):
        with pytest.raises(ValueError):
            train(init_model(4, 3, 4), [], [])

    @pytest.mark.parametrize("kwargs", [
        dict(learning_rate=-0.1), dict(gradient_clip_norm=0.0), dict(batch_size=0),
    ])
    def test_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_smoothed(self):
        assert list(smoothed(range(4), 2)) == [0.5, 1.5, 2.5]
        assert list(smoothed([1.0, 2.0], 50)) == [1.0, 2.0]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = init_model(7, 4, 6, seed=5)
        save_model(m, tmp_path / "m.bin")
        back = load_model(tmp_path / "m.bin")
        assert encode_model(back) == encode_model(m)
        for k in BLOCKS:
            assert np.array_equal(back.blocks()[k], m.blocks()[k])

    def test_layout(self):
        m = init_model(7, 4, 6, seed=5)
        data = encode_model(m)
        assert data[:8] == CHECKPOINT_MAGIC
        assert data[8:24] == bytes.fromhex("00000006" "00000007" "00000004" "00000001")
        n = sum(int(np.prod(s)) for s in block_shapes(6, 7, 4).values())
        assert len(data) == 24 + 8 * n
        assert data[24:32] == struct.pack(">d", m.fwd.W[0, 0])

    @pytest.mark.parametrize("mangle", [
        lambda d: b"XXXXXXXX" + d[8:],
        lambda d: d[:20] + b"\x00\x00\x00\x02" + d[24:],
        lambda d: d[:-8],
        lambda d: d + b"\x00",
    ])
    def test_rejects_damage(self, mangle):
        with pytest.raises(ValueError):
            decode_model(mangle(encode_model(init_model(3, 2, 2))))
