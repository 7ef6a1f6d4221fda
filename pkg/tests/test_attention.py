import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aelstm.attention import (AttentionParams, ModalityLayout, apply_attention, attention_forward, tape_attention,
                              trace_rows)
from aelstm.core import DimensionError, Tape, grad_check
from aelstm.policy import PolicyConfig

LAYOUT = ModalityLayout.build(10, 8)


def scalar_gate(x, A, widths):
    out, k = [], 0
    for block, w in enumerate(widths):
        for _ in range(w):
            out.append(x[k] * A[block])
            k += 1
    return out


class TestLayout:
    def test_desk_widths(self):
        assert LAYOUT.width == 36
        assert LAYOUT.names == ["whole", "thumb", "joints", "torques"]
        assert ModalityLayout.build(10, 8, thumb=False).width == 26

    def test_full_scale_widths(self):
        assert PolicyConfig(n_joints=16).layout.width == 52
        assert PolicyConfig(n_joints=16, attention=False).layout.width == 42

    def test_gap_rejected(self):
        with pytest.raises(DimensionError):
            ModalityLayout((("a", 0, 2), ("b", 3, 2)))

    def test_needs_four_blocks(self):
        with pytest.raises(DimensionError):
            AttentionParams(8, ModalityLayout.build(10, 8, thumb=False))


class TestForward:
    def test_zero_params_uniform(self):
        p = AttentionParams(16, LAYOUT, 8, rng=0)
        for q in p.params:
            q.value[:] = 0
        A = attention_forward(np.ones(16), np.ones(36), p)
        np.testing.assert_array_equal(A, [[0.25] * 4])

    def test_dominant_bias(self):
        p = AttentionParams(16, LAYOUT, 8, rng=0)
        p.W2.value[:] = 0
        p.b2.value[:] = [10, -10, -10, -10]
        A = attention_forward(np.random.default_rng(0).normal(size=16), np.full(36, 0.5), p)
        np.testing.assert_allclose(A, [[1, 0, 0, 0]], atol=1e-4)

    def test_bit_reproducible(self):
        r = np.random.default_rng(9)
        h, x = r.uniform(-1, 1, 64), r.uniform(0.1, 0.9, 36)
        a = attention_forward(h, x, AttentionParams(64, LAYOUT, 32, rng=4))
        b = attention_forward(h, x, AttentionParams(64, LAYOUT, 32, rng=4))
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=40)
    @given(st.integers(0, 2**16), st.floats(0.1, 50))
    def test_simplex(self, seed, scale):
        r = np.random.default_rng(seed)
        p = AttentionParams(12, LAYOUT, 6, rng=r)
        p.W2.value *= scale
        A = attention_forward(r.uniform(-1, 1, (3, 12)), r.uniform(0.1, 0.9, (3, 36)), p)
        assert np.all(A >= 0)
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-9)


class TestGate:
    def test_uniform_scales_by_quarter(self):
        x = np.random.default_rng(0).uniform(0.1, 0.9, 36)
        np.testing.assert_array_equal(apply_attention(x, [0.25] * 4, LAYOUT), [0.25 * x])

    def test_one_hot_joints(self):
        x = np.random.default_rng(1).uniform(0.1, 0.9, 36)
        out = apply_attention(x, [0, 0, 1, 0], LAYOUT)[0]
        js = LAYOUT.slice("joints")
        np.testing.assert_array_equal(out[js], x[js])
        mask = np.ones(36, bool)
        mask[js] = False
        assert np.all(out[mask] == 0)

    @given(st.integers(0, 2**16))
    def test_matches_scalar_loop(self, seed):
        r = np.random.default_rng(seed)
        x = r.uniform(0.1, 0.9, 36)
        A = r.dirichlet(np.ones(4))
        np.testing.assert_array_equal(apply_attention(x, A, LAYOUT)[0], scalar_gate(x, A, LAYOUT.widths))

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            apply_attention(np.ones(30), [0.25] * 4, LAYOUT)


def test_tape_matches_numpy():
    r = np.random.default_rng(2)
    p = AttentionParams(16, LAYOUT, 8, rng=r)
    h, x = r.uniform(-1, 1, (2, 16)), r.uniform(0.1, 0.9, (2, 36))
    t = Tape()
    A, xl = tape_attention(t, t.const(h), t.const(x), p)
    np.testing.assert_allclose(A.value, attention_forward(h, x, p), rtol=1e-14)
    np.testing.assert_allclose(xl.value, apply_attention(x, A.value, LAYOUT), rtol=1e-14)


def test_two_step_grad_check():
    # attention MLP and gate over two chained steps; h(1) depends on the gated input
    r = np.random.default_rng(7)
    H = 6
    p = AttentionParams(H, LAYOUT, 8, rng=r)
    p.W2.value *= 5
    X = r.uniform(0.1, 0.9, (2, 1, 36))
    Wh = r.normal(0, 0.3, (36, H))
    tgt = r.uniform(0.1, 0.9, (1, 36))

    def loss(t):
        h = t.const(np.zeros((1, H)))
        for k in range(2):
            _, xl = tape_attention(t, h, t.const(X[k]), p)
            h = t.tanh(t.affine(xl, t.const(Wh), t.const(np.zeros((1, H)))))
        return t.total([t.weighted_sse(xl, tgt, np.ones(36)), t.weighted_sse(h, np.zeros((1, H)), np.ones(H))])

    assert grad_check(loss, p.params).max_rel_error < 1e-4


def test_trace_rows_export_order():
    A = np.array([[0.1, 0.2, 0.3, 0.4]])
    assert trace_rows(A, np.array([3]), LAYOUT) == [[0, 0.3, 0.4, 0.1, 0.2, 3]]
