import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aelstm.core import (Checkpoint, DeterminismError, DimensionError, NumericError, OptimizerState, Param,
                         Tape, TapeStateError, activation_forward, affine_forward, config_hash, grad_check,
                         init_linear, optimizer_step, sigmoid, softmax)


def scalar_affine(x, W, b):
    # independent scalar-loop oracle
    out = []
    for j in range(len(b)):
        acc = b[j]
        for i in range(len(x)):
            acc += x[i] * W[i][j]
        out.append(acc)
    return out


class TestAffine:
    def test_identity(self):
        np.testing.assert_array_equal(affine_forward([[1, 2]], np.eye(2), [[0, 0]]), [[1, 2]])

    def test_zero_input_gives_bias(self):
        W = np.random.default_rng(0).normal(size=(2, 2))
        np.testing.assert_array_equal(affine_forward([[0, 0]], W, [[3, 4]]), [[3, 4]])

    def test_hand_value(self):
        got = affine_forward([[1, 1]], [[2, 0], [0, 3]], [[1, 1]])
        assert got.tolist() == [[3.0, 4.0]] == [scalar_affine([1, 1], [[2, 0], [0, 3]], [1, 1])]

    def test_shape_error_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
            affine_forward([[1, 2, 3]], np.eye(2), [[0, 0]])

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**16))
    def test_matches_scalar_oracle(self, n, m, seed):
        r = np.random.default_rng(seed)
        x, W, b = r.normal(size=n), r.normal(size=(n, m)), r.normal(size=m)
        got = affine_forward(x[None], W, b[None])[0]
        np.testing.assert_allclose(got, scalar_affine(x, W, b), rtol=1e-12, atol=1e-12)


class TestActivations:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(activation_forward([0, 0, 0, 0], "softmax"), [[0.25] * 4])

    def test_sigmoid_zero(self):
        assert activation_forward([0.0], "sigmoid")[0, 0] == 0.5

    def test_softmax_large_logits(self):
        a = activation_forward([1000.0, 0.0], "softmax")
        assert np.all(np.isfinite(a))
        assert a[0, 0] == 1.0 and a[0, 1] < 1e-300

    def test_softmax_needs_single_row(self):
        with pytest.raises(DimensionError):
            activation_forward(np.zeros((2, 3)), "softmax")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activation_forward([1.0], "relu")

    def test_sigmoid_extremes_finite(self):
        s = sigmoid(np.array([-1e4, 1e4]))
        assert s.tolist() == [0.0, 1.0]

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
    def test_softmax_simplex_and_shift_invariance(self, logits, c):
        x = np.array([logits])
        a = softmax(x)
        assert np.all(a >= 0)
        assert abs(a.sum() - 1.0) < 1e-9
        np.testing.assert_allclose(softmax(x + c), a, atol=1e-9)


class TestTape:
    def test_backward_without_forward(self):
        with pytest.raises(TapeStateError):
            Tape().backward(Tape().const([[1.0]]))

    def test_backward_twice(self):
        p = Param("p", [[1.0]])
        t = Tape()
        loss = t.weighted_sse(t.param(p), [[0.0]], [1.0])
        t.backward(loss)
        with pytest.raises(TapeStateError):
            t.backward(loss)

    def test_quadratic(self):
        th = Param("theta", [[3.0]])

        def loss(t):
            n = t.param(th)
            return t.weighted_sse(n, [[0.0]], [1.0])

        t = Tape()
        t.backward(loss(t))
        assert th.grad[0, 0] == 6.0
        th.zero_grad()
        rep = grad_check(loss, [th])
        assert rep.max_rel_error < 1e-8

    def test_nondeterministic_loss_rejected(self):
        p = Param("p", [[1.0]])
        rng = np.random.default_rng(0)

        def loss(t):
            return t.weighted_sse(t.param(p), [[rng.normal()]], [1.0])

        with pytest.raises(DeterminismError):
            grad_check(loss, [p])

    def test_epsilon_range(self):
        p = Param("p", [[1.0]])
        with pytest.raises(ValueError):
            grad_check(lambda t: t.weighted_sse(t.param(p), [[0.0]], [1.0]), [p], epsilon=1e-3)

    def test_lstm_cell_matches_unfused_chain(self):
        r = np.random.default_rng(3)
        n = 5
        z = r.normal(size=(2, 4 * n))
        c0 = r.normal(size=(2, n))
        t = Tape()
        h, c = t.lstm_cell(t.const(z), t.const(c0))
        i, f, o = (sigmoid(z[:, k * n:(k + 1) * n]) for k in range(3))
        g = np.tanh(z[:, 3 * n:])
        c_ref = f * c0 + i * g
        np.testing.assert_allclose(c.value, c_ref, rtol=1e-14)
        np.testing.assert_allclose(h.value, o * np.tanh(c_ref), rtol=1e-14)

    def test_block_scale_matches_expand_mul(self):
        r = np.random.default_rng(4)
        x = Param("x", r.normal(size=(3, 7)))
        a = Param("a", r.normal(size=(3, 3)))
        w = [2, 4, 1]

        def fused(t):
            return t.weighted_sse(t.block_scale(t.param(x), t.param(a), w), np.zeros((3, 7)), np.ones(7))

        def chain(t):
            return t.weighted_sse(t.mul(t.param(x), t.expand(t.param(a), w)), np.zeros((3, 7)), np.ones(7))

        grads = []
        for fn in (fused, chain):
            t = Tape()
            t.backward(fn(t))
            grads.append((x.grad.copy(), a.grad.copy()))
            x.zero_grad(), a.zero_grad()
        np.testing.assert_allclose(grads[0][0], grads[1][0], rtol=1e-13)
        np.testing.assert_allclose(grads[0][1], grads[1][1], rtol=1e-13)
        assert grad_check(fused, [x, a]).passed

    def test_lstm_cell_grad_8dim(self):
        r = np.random.default_rng(5)
        W, b = init_linear(r, "cell", 8 + 8, 32)
        x = r.normal(size=(1, 8))
        h0 = r.normal(size=(1, 8)) * 0.5
        c0 = r.normal(size=(1, 8))

        def loss(t):
            z = t.affine(t.concat([t.const(x), t.const(h0)]), t.param(W), t.param(b))
            h, c = t.lstm_cell(z, t.const(c0))
            return t.total([t.weighted_sse(h, np.zeros((1, 8)), np.ones(8)),
                            t.weighted_sse(c, np.ones((1, 8)), np.ones(8))])

        assert grad_check(loss, [W, b]).max_rel_error < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.sampled_from(["sigmoid", "tanh", "softmax"]),
           st.integers(0, 2**16))
    def test_random_composition_grad(self, rows, n, m, kind, seed):
        r = np.random.default_rng(seed)
        W1, b1 = init_linear(r, "l1", n, m)
        W2, b2 = init_linear(r, "l2", m + n, 3)
        x = r.normal(size=(rows, n))
        tgt = r.normal(size=(rows, 3))
        w = r.uniform(0.5, 2.0, size=3)

        def loss(t):
            xc = t.const(x)
            a = t.activation(t.affine(xc, t.param(W1), t.param(b1)), kind)
            z = t.affine(t.concat([a, t.slice(t.concat([xc, a]), 0, n)]), t.param(W2), t.param(b2))
            y = t.sub(t.mul(z, z), t.scale(t.tanh(z), 0.5))
            return t.total([t.weighted_sse(y, tgt, w), t.sq_dist(t.rows(t.stack_rows([z, z]), 0, rows), z)])

        rep = grad_check(loss, [W1, b1, W2, b2], epsilon=1e-5)
        assert rep.max_rel_error < 1e-4, rep


class TestOptimizer:
    def test_nan_grad_names_param(self):
        p = Param("layer.W", [[1.0, 2.0]])
        p.grad[0, 1] = np.nan
        with pytest.raises(NumericError, match="layer.W"):
            optimizer_step([p], OptimizerState())

    def test_adam_first_step_is_lr_sign(self):
        # bias-corrected first step moves every entry by lr * sign(grad)
        p = Param("p", [[1.0, -1.0, 0.5]])
        p.grad[:] = [[3.0, -0.2, 1e-3]]
        st_ = OptimizerState(1e-3)
        optimizer_step([p], st_)
        np.testing.assert_allclose(p.value, [[1.0 - 1e-3, -1.0 + 1e-3, 0.5 - 1e-3]], rtol=0, atol=1e-8)
        assert st_.step_count == 1 and np.all(p.grad == 0)

    def test_adam_two_steps_frozen(self):
        # independent re-derivation of two Adam steps with g1=2, g2=-1
        p = Param("p", [[0.0]])
        s = OptimizerState(0.1)
        for g in (2.0, -1.0):
            p.grad[:] = g
            optimizer_step([p], s)
        m1, v1 = 0.2, 0.004
        x1 = -0.1 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
        m2, v2 = 0.9 * m1 - 0.1, 0.999 * v1 + 0.001
        x2 = x1 - 0.1 * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
        assert p.value[0, 0] == pytest.approx(x2, abs=1e-15)

    def test_sgd(self):
        p = Param("p", [[1.0]])
        p.grad[:] = 2.0
        optimizer_step([p], OptimizerState(0.1, "sgd"))
        assert p.value[0, 0] == pytest.approx(0.8)

    def test_determinism(self):
        def run():
            r = np.random.default_rng(11)
            W, b = init_linear(r, "l", 3, 2)
            s = OptimizerState()
            x = r.normal(size=(4, 3))
            for _ in range(20):
                t = Tape()
                t.backward(t.weighted_sse(t.tanh(t.affine(t.const(x), t.param(W), t.param(b))),
                                          np.zeros((4, 2)), np.ones(2)))
                optimizer_step([W, b], s)
            return W.value.tobytes() + b.value.tobytes()

        assert run() == run()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        r = np.random.default_rng(0)
        W, b = init_linear(r, "fc", 3, 4)
        s = OptimizerState()
        W.grad[:] = 1.0
        b.grad[:] = -1.0
        optimizer_step([W, b], s)
        ck = Checkpoint.from_params([W, b], "abc123", {"kind": "test"}, s)
        ck.save(tmp_path / "m.ckpt")
        back = Checkpoint.load(tmp_path / "m.ckpt")
        assert back.config_hash == "abc123" and back.meta == {"kind": "test"}
        W2, b2 = Param("fc.W", np.zeros((3, 4))), Param("fc.b", np.zeros((1, 4)))
        back.load_into([W2, b2])
        assert W2.value.tobytes() == W.value.tobytes() and b2.value.tobytes() == b.value.tobytes()
        st2 = back.optimizer_state()
        assert st2.step_count == 1
        np.testing.assert_array_equal(st2.moments["fc.W"][0], s.moments["fc.W"][0])

    def test_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            Checkpoint.load(tmp_path / "x")

    def test_shape_mismatch(self):
        ck = Checkpoint({"p": np.zeros((2, 2))})
        with pytest.raises(DimensionError):
            ck.load_into([Param("p", np.zeros((1, 2)))])


def test_config_hash_stable():
    assert config_hash({"b": 1, "a": [1, 2]}) == config_hash({"a": [1, 2], "b": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16
