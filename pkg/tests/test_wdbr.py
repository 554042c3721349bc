import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from staterect.errors import AllNullified, IndexOutOfRange, NullifiedClass
from staterect.model import SurrogateBank, logits
from staterect.wdbr import (MpiStats, RectifierConfig, accumulate_counts, boundary_residual,
                            diagnostic_line, map_posterior, mpi, multi_state_rectifier,
                            rectified_assign, rectified_assign_batch, rectified_scores, rectifier)

from conftest import random_unit

HARD = RectifierConfig(math.inf, 0.95)


def brute_posterior(bank, x):
    """Posterior by direct evaluation of p_k exp(scale x.mu_k), no log-space tricks."""
    w = np.array([bank.p[k] * math.exp(bank.scale * float(x @ bank.mu[k])) for k in range(bank.K)])
    return w / w.sum()


class TestCounts:
    def test_direct_counting(self):
        st_ = accumulate_counts(MpiStats.empty(2, 2), [1, 1, 2], [1, 2, 2])
        assert st_.counts.tolist() == [[1, 1], [0, 1]]
        assert st_.member_sizes.tolist() == [2, 1]

    def test_additive(self):
        st_ = MpiStats.empty(3, 2)
        accumulate_counts(st_, [1, 3], [2, 2])
        accumulate_counts(st_, [1, 3], [2, 2])
        assert st_.counts.tolist() == [[0, 2], [0, 0], [0, 2]]

    def test_empty_batch(self):
        st_ = accumulate_counts(MpiStats.empty(2, 3), [], [])
        assert st_.counts.sum() == 0

    def test_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            accumulate_counts(MpiStats.empty(2, 2), [3], [1])
        with pytest.raises(IndexOutOfRange):
            accumulate_counts(MpiStats.empty(2, 2), [1], [0])


class TestMpi:
    def test_by_definition(self):
        R = mpi(MpiStats(np.array([[2, 1], [0, 0]])))
        assert R[0] == pytest.approx(2 / 3)
        assert R[1] == 0.0

    def test_single_state_class(self):
        assert mpi(MpiStats(np.array([[5, 0, 0]])))[0] == 1.0

    @given(st.lists(st.lists(st.integers(0, 20), min_size=3, max_size=3), min_size=1, max_size=6))
    def test_range(self, rows):
        counts = np.array(rows)
        R = mpi(MpiStats(counts))
        for k, row in enumerate(counts):
            if row.sum():
                assert 1 / 3 - 1e-12 <= R[k] <= 1.0
            else:
                assert R[k] == 0.0


class TestRectifier:
    def test_soft_midpoint(self):
        assert rectifier(0.7, RectifierConfig(5.0, 0.7)) == pytest.approx(0.5)

    def test_soft_formula(self):
        assert rectifier(0.9, RectifierConfig(5.0, 0.5)) == pytest.approx(1 / (1 + math.exp(2.0)))

    def test_hard_above_threshold(self):
        assert rectifier(0.96, HARD) == 0.0

    def test_hard_boundary_inclusive(self):
        assert rectifier(0.95, HARD) == 1.0

    def test_zero_strength_is_half(self):
        assert rectifier(0.2, RectifierConfig(0.0, 0.9)) == 0.5

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 50), st.floats(0, 1))
    def test_monotone_nonincreasing(self, r1, r2, a, b):
        lo, hi = sorted((r1, r2))
        for cfg in (RectifierConfig(a, b), RectifierConfig(math.inf, b)):
            assert rectifier(lo, cfg) >= rectifier(hi, cfg)
            assert 0.0 <= rectifier(hi, cfg) <= 1.0

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_hard_is_limit_of_soft(self, R, b):
        if abs(R - b) < 1e-3:
            return
        assert rectifier(R, RectifierConfig(1e7, b)) == pytest.approx(rectifier(R, RectifierConfig(math.inf, b)), abs=1e-9)

    def test_vectorized(self):
        out = rectifier(np.array([0.5, 0.99]), HARD)
        assert out.tolist() == [1.0, 0.0]

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            RectifierConfig(1.0, 1.5)
        with pytest.raises(ValueError):
            RectifierConfig(-1.0, 0.5)


class TestMultiState:
    def test_neutral(self):
        assert multi_state_rectifier([0.3, 0.4], [HARD, HARD]) == 1.0

    def test_annihilator(self):
        assert multi_state_rectifier([0.3, 0.99], [RectifierConfig(5, 0.5), HARD]) == 0.0

    def test_two_soft_midpoints(self):
        cfg = RectifierConfig(5.0, 0.6)
        assert multi_state_rectifier([0.6, 0.6], [cfg, cfg]) == pytest.approx(0.25)


class TestAssignment:
    def test_neutral_rectifier_is_plain_argmax(self, rng):
        bank = SurrogateBank(random_unit(rng, 7, 5))
        X = random_unit(rng, 50, 5)
        y, fb = rectified_assign_batch(bank, X)
        assert fb == 0
        assert np.array_equal(y, np.argmax(logits(bank, X), axis=1) + 1)

    def test_prior_breaks_tie(self):
        bank = SurrogateBank(np.array([[1.0, 0.0], [0.0, 1.0]]), p=np.array([0.9, 0.1]))
        assert rectified_assign(bank, np.array([1.0, 1.0]) / math.sqrt(2)) == 1

    def test_exact_tie_lowest_index(self):
        bank = SurrogateBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert rectified_assign(bank, np.array([1.0, 1.0]) / math.sqrt(2)) == 1

    def test_nullified_never_wins(self, rng):
        bank = SurrogateBank(random_unit(rng, 4, 3), p=np.array([0.0, 1.0, 0.0, 0.2]))
        y, _ = rectified_assign_batch(bank, random_unit(rng, 500, 3))
        assert set(np.unique(y)) <= {2, 4}

    def test_total_nullification_falls_back(self, rng):
        bank = SurrogateBank(random_unit(rng, 4, 3), p=np.zeros(4))
        X = random_unit(rng, 10, 3)
        y, fb = rectified_assign_batch(bank, X)
        assert fb == 10
        assert np.array_equal(y, np.argmax(logits(bank, X), axis=1) + 1)

    def test_plain_argmax_scale_invariant(self, rng):
        bank = SurrogateBank(random_unit(rng, 6, 4))
        X = random_unit(rng, 40, 4)
        scaled = SurrogateBank(bank.mu, scale=0.37)
        assert np.array_equal(rectified_assign_batch(bank, X)[0], rectified_assign_batch(scaled, X)[0])


class TestPosterior:
    def test_symmetric(self):
        bank = SurrogateBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_allclose(map_posterior(bank, np.array([1.0, 1.0]) / math.sqrt(2)), [0.5, 0.5])

    def test_nullified_gets_zero(self):
        bank = SurrogateBank(np.array([[1.0, 0.0], [0.0, 1.0]]), p=np.array([1.0, 0.0]))
        np.testing.assert_array_equal(map_posterior(bank, np.array([0.0, 1.0])), [1.0, 0.0])

    def test_all_nullified(self):
        with pytest.raises(AllNullified):
            map_posterior(SurrogateBank(np.eye(2), p=np.zeros(2)), np.array([1.0, 0.0]))

    def test_matches_brute_force(self, rng):
        for _ in range(50):
            K = int(rng.integers(2, 8))
            bank = SurrogateBank(random_unit(rng, K, 4), p=rng.random(K))
            x = random_unit(rng, 4)
            post = map_posterior(bank, x)
            np.testing.assert_allclose(post, brute_posterior(bank, x), rtol=1e-10, atol=1e-300)
            assert post.sum() == pytest.approx(1.0, abs=1e-12)

    def test_map_equivalence(self, rng):
        for _ in range(300):
            K = int(rng.integers(2, 10))
            d = int(rng.integers(2, 9))
            p = rng.random(K)
            p[rng.random(K) < 0.3] = 0.0
            if not np.any(p > 0):
                p[0] = 1.0
            bank = SurrogateBank(random_unit(rng, K, d), p=p)
            x = random_unit(rng, d)
            assert rectified_assign(bank, x) == int(np.argmax(brute_posterior(bank, x))) + 1


class TestBoundary:
    def test_bisector(self):
        mu1, mu2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert boundary_residual(mu1, mu2, 0.4, 0.4, np.array([1.0, 1.0]) / math.sqrt(2)) == pytest.approx(0.0, abs=1e-14)

    def test_hand_solved(self):
        # mu1 - mu2 = e1/30, p1/p2 = e, x = -e1: 30 * (1/30) * (-1) + 1 = 0
        h = 1 / 60
        mu1 = np.array([h, math.sqrt(1 - h * h)])
        mu2 = np.array([-h, math.sqrt(1 - h * h)])
        assert boundary_residual(mu1, mu2, math.e, 1.0, np.array([-1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)

    def test_zero_residual_means_equal_scores(self, rng):
        for _ in range(100):
            mu = random_unit(rng, 2, 6)
            p = rng.uniform(0.05, 1.0, 2)
            delta = mu[0] - mu[1]
            c = -math.log(p[0] / p[1]) / 30.0
            v = rng.standard_normal(6)
            v -= delta * (v @ delta) / (delta @ delta)
            v /= np.linalg.norm(v)
            x = c * delta / (delta @ delta) + math.sqrt(1 - c * c / (delta @ delta)) * v
            assert boundary_residual(mu[0], mu[1], p[0], p[1], x) == pytest.approx(0.0, abs=1e-9)
            s = rectified_scores(SurrogateBank(mu, p=p), x)
            assert abs(s[0] - s[1]) < 1e-9

    def test_nullified_raises(self):
        with pytest.raises(NullifiedClass):
            boundary_residual(np.eye(2)[0], np.eye(2)[1], 0.0, 1.0, np.eye(2)[0])


def test_diagnostic_line():
    import json

    bank = SurrogateBank(np.eye(3), p=np.array([1.0, 0.0, 1.0]))
    rec = json.loads(diagnostic_line(40, bank, np.array([0.5, 1.0, 0.3]), bins=4))
    assert rec == {"iter": 40, "active_K": 2, "R_histogram": [0, 1, 1, 1]}
