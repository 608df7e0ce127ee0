import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taglasso.model import (NotPositiveDefiniteError, SampleCovariance, as_symmetric,
                            is_positive_definite, neg_log_likelihood, sample_covariance)
from taglasso.simulation import DesignSpec, design_precision

from oracles import covariance_loops, det_cofactor


def random_pd(rng, p):
    b = rng.standard_normal((p, p))
    return b @ b.T + p * np.eye(p)


class TestSampleCovariance:
    def test_two_rows(self):
        with pytest.warns(RuntimeWarning):
            s = sample_covariance([[1, 0], [-1, 0]])
        np.testing.assert_array_equal(s.matrix, [[1, 0], [0, 0]])
        assert s.centered and s.n == 2

    def test_identical_rows_give_zero(self):
        with pytest.warns(RuntimeWarning, match="constant"):
            s = sample_covariance(np.tile([3.0, -1.0, 2.0], (6, 1)))
        np.testing.assert_array_equal(s.matrix, np.zeros((3, 3)))

    def test_matches_loop_oracle(self):
        x = np.random.default_rng(0).standard_normal((10, 4))
        np.testing.assert_allclose(sample_covariance(x).matrix, covariance_loops(x), atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError, match="at least 2 rows"):
            sample_covariance([[1.0, 2.0]])
        with pytest.raises(ValueError, match="at least 2 columns"):
            sample_covariance([[1.0], [2.0]])
        with pytest.raises(ValueError, match="non-finite"):
            sample_covariance([[1.0, np.nan], [2.0, 3.0]])

    @settings(max_examples=30, deadline=None)
    @given(arrays(float, (7, 3), elements=st.floats(-10, 10)),
           arrays(float, 3, elements=st.floats(-100, 100)))
    def test_shift_invariance(self, x, shift):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = sample_covariance(x).matrix
            b = sample_covariance(x + shift).matrix
        np.testing.assert_allclose(a, b, atol=1e-12 * max(1.0, np.abs(x).max() + np.abs(shift).max()) ** 2)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="semidefinite"):
            SampleCovariance(np.array([[1.0, 2.0], [2.0, 1.0]]), n=5)


class TestPositiveDefinite:
    def test_identity(self):
        assert is_positive_definite(np.eye(4), 1e-10)

    def test_singular(self):
        assert not is_positive_definite(np.array([[1.0, 1.0], [1.0, 1.0]]), 1e-10)

    def test_chain_design(self):
        omega = design_precision(DesignSpec("chain", p=15)).omega
        assert is_positive_definite(omega)
        # the within-block contrast directions have eigenvalue 1 - 0.5
        assert np.linalg.eigvalsh(omega)[0] == pytest.approx(0.5, abs=1e-12)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            is_positive_definite(np.array([[np.inf, 0], [0, 1]]))


class TestNegLogLikelihood:
    def test_identity(self):
        assert neg_log_likelihood(np.eye(3), np.eye(3)) == pytest.approx(3.0)

    def test_scaled(self):
        assert neg_log_likelihood(2 * np.eye(2), np.eye(2)) == pytest.approx(-2 * math.log(2) + 4, abs=1e-12)
        assert neg_log_likelihood(2 * np.eye(2), np.eye(2)) == pytest.approx(2.61371, abs=1e-5)

    def test_cofactor_oracle(self):
        rng = np.random.default_rng(3)
        omega, s = random_pd(rng, 5), random_pd(rng, 5)
        expected = -math.log(det_cofactor(omega)) + sum(
            s[i, j] * omega[j, i] for i in range(5) for j in range(5))
        assert neg_log_likelihood(omega, s) == pytest.approx(expected, abs=1e-10)

    def test_not_pd(self):
        with pytest.raises(NotPositiveDefiniteError):
            neg_log_likelihood(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2))

    def test_accepts_sample_covariance(self):
        s = SampleCovariance(np.eye(2), n=10)
        assert neg_log_likelihood(np.eye(2), s) == pytest.approx(2.0)

    def test_minimised_at_inverse(self):
        rng = np.random.default_rng(5)
        sigma = random_pd(rng, 4)
        best = neg_log_likelihood(np.linalg.inv(sigma), sigma)
        for _ in range(200):
            e = rng.standard_normal((4, 4)) * 0.05
            cand = np.linalg.inv(sigma) + (e + e.T) / 2
            if is_positive_definite(cand):
                assert neg_log_likelihood(cand, sigma) >= best - 1e-12


def test_as_symmetric_upper_authoritative():
    m = np.array([[1.0, 2.0], [2.0 + 1e-14, 1.0]])
    out = as_symmetric(m)
    assert out[1, 0] == out[0, 1] == 2.0
    with pytest.raises(ValueError, match="not symmetric"):
        as_symmetric([[1.0, 2.0], [3.0, 1.0]])
