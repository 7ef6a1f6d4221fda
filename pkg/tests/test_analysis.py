from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aelstm.analysis import (attention_claims, attention_summary, build_table, knn_accuracy, loop_gap, pca_fit,
                             pca_project, pca_reconstruct, post_attempt_mask)
from aelstm.env import Phase, Result


class TestPCA:
    def test_axis_aligned(self):
        r = np.random.default_rng(0)
        X = np.c_[r.normal(0, 3.0, 500), r.normal(0, 0.5, 500)]
        X -= X.mean(axis=0)
        X[:, 1] -= X[:, 0] * (X[:, 0] @ X[:, 1]) / (X[:, 0] @ X[:, 0])  # exactly uncorrelated
        m = pca_fit(X)
        np.testing.assert_allclose(np.abs(m.axes), np.eye(2), atol=1e-12)
        np.testing.assert_allclose(m.explained_variance, X.var(axis=0, ddof=1), rtol=1e-10)

    def test_full_reconstruction(self):
        X = np.random.default_rng(1).normal(size=(50, 6))
        m = pca_fit([X[:20], X[20:]])
        np.testing.assert_allclose(pca_reconstruct(m, pca_project(m, X, k=6)), X, atol=1e-9)

    @settings(max_examples=25)
    @given(st.integers(0, 2**16), st.integers(2, 8))
    def test_orthonormal_and_sorted(self, seed, d):
        r = np.random.default_rng(seed)
        X = r.normal(size=(30, d)) @ r.normal(size=(d, d))
        m = pca_fit(X)
        np.testing.assert_allclose(m.axes @ m.axes.T, np.eye(d), atol=1e-9)
        assert np.all(np.diff(m.explained_variance) <= 1e-12)

    @settings(max_examples=25)
    @given(st.integers(0, 2**16))
    def test_row_order_invariance(self, seed):
        r = np.random.default_rng(seed)
        X = r.normal(size=(40, 5)) * [5, 4, 3, 2, 1]
        a = pca_fit(X)
        b = pca_fit(X[r.permutation(40)])
        np.testing.assert_allclose(pca_project(a, X), pca_project(b, X), atol=1e-9)

    def test_sign_rule(self):
        X = np.random.default_rng(2).normal(size=(60, 4))
        for row in pca_fit(X).axes:
            assert row[np.flatnonzero(np.abs(row) > 1e-12)[0]] > 0


class TestKNN:
    def test_separated_clusters(self):
        r = np.random.default_rng(0)
        pts = np.concatenate([r.normal(c, 0.1, (20, 2)) for c in (0, 5, 10)])
        lab = np.repeat([0, 1, 2], 20)
        assert knn_accuracy(pts, lab) == 1.0

    def test_leave_one_out(self):
        # a lone point surrounded by another class is always misclassified
        pts = np.array([[0.0, 0.0], [1, 0], [-1, 0], [0, 1], [0, -1], [2, 0], [0, 0.5]])
        lab = np.array([0, 1, 1, 1, 1, 1, 1])
        assert knn_accuracy(pts, lab) == pytest.approx(6 / 7)

    def test_tie_goes_to_nearer_class(self):
        # k=2: points 0 and 1 each see one neighbour per class and the nearer (class 1) wins
        pts = np.array([[0.0], [1.0], [-2.0], [10.0], [-10.0]])
        lab = np.array([1, 1, 2, 1, 2])
        assert knn_accuracy(pts[:3], lab[:3], k=2) == pytest.approx(2 / 3)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            knn_accuracy(np.zeros((3, 2)), np.zeros(3), k=5)


def test_loop_gap():
    H = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.0]])
    assert loop_gap([H, H], [[(0, 1)], [(0, 2), (1, 2)]]) == pytest.approx((2 + 0.25 + 1.25) / 3)
    with pytest.raises(ValueError):
        loop_gap([H], [[]])


class TestAttention:
    def test_post_attempt_mask(self):
        lab = np.array([0, 1, 1, 2, 3, 3, 1, 5, 5, 5])
        assert post_attempt_mask(lab, 2).tolist() == [0, 0, 0, 1, 1, 0, 0, 1, 1, 0]

    def test_summary_and_claims(self):
        lab = np.array([0, 1, 2, 3, 1, 5])
        A = np.array([[0.4, 0.1, 0.3, 0.2]] * 6)  # columns whole, thumb, joints, torques
        A[2] = [0.1, 0.7, 0.1, 0.1]
        A[3] = [0.1, 0.1, 0.7, 0.1]
        s = attention_summary([A], [lab])
        np.testing.assert_allclose(s[Phase.SLIDE_LEFT], A[3])
        c = attention_claims([A], [lab], {"thumb": 1, "joints": 2}, window=1)
        assert c["thumb_post_attempt"] == pytest.approx((0.7 + 0.1) / 2)
        assert c["joints_sliding"] == 0.7
        assert c["thumb_post_attempt"] > c["thumb_mean"] and c["joints_sliding"] > c["joints_mean"]


class TestTable:
    def results(self):
        C, P, F = Result.COMPLETE, Result.PARTIAL, Result.FAILURE
        trained = [C] * 26 + [P] * 5 + [F]
        untrained = [C] * 25 + [P] * 9 + [F] * 2
        return {"I": [(True, r) for r in trained] + [(False, r) for r in untrained],
                "IV": [(True, F)] * 32 + [(False, P)] * 36}

    def test_counts_and_exact_rates(self):
        t = build_table(self.results())
        c = t.cells[("I", "trained")]
        assert (c.trials, c.complete, c.partial) == (32, 26, 31)
        assert c.complete_rate == Fraction(13, 16)
        u = t.cells[("I", "untrained")]
        assert u.complete_rate == Fraction(25, 36) and u.partial_rate == Fraction(17, 18)
        for cell in t.cells.values():
            assert cell.complete <= cell.partial <= cell.trials
        assert sum(c.trials for (m, o), c in t.cells.items() if o == "trained") == 64

    def test_csv(self, tmp_path):
        t = build_table(self.results())
        t.write_csv(tmp_path / "t.csv", "config abc")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "# config abc"
        assert lines[2] == "I,trained,32,26,31,81.2,96.9"
        assert lines[3] == "I,untrained,36,25,34,69.4,94.4"
        assert lines[-1].startswith("IV,untrained,36,0,36")
