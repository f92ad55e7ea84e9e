"""
Tests for matrix_kernel.py
Eigendecomposition, square roots, inversion and sample moments
"""

import numpy as np
import pandas as pd
import pytest

from errors import DegenerateInputError, InputError, SingularityError
from matrix_kernel import (
    MomentMode,
    SymMatrix,
    condition_number,
    sample_moment_matrix,
    sym_eigen,
    sym_inverse,
    sym_sqrt,
)


def random_spd(rng, p, condition=None):
    """Random SPD matrix, optionally with a prescribed condition number"""
    q, _ = np.linalg.qr(rng.normal(size=(p, p)))
    if condition is None:
        values = rng.uniform(0.5, 3.0, size=p)
    else:
        values = np.geomspace(1.0, 1.0 / condition, p)
    return (q * values) @ q.T


@pytest.fixture
def rng():
    return np.random.default_rng(20210514)


class TestSymMatrix:
    """Tests for the labelled symmetric matrix"""

    def test_symmetrized_exactly(self):
        """Entries are stored exactly symmetric"""
        a = np.array([[2.0, 1.0 + 1e-12], [1.0, 2.0]])
        m = SymMatrix(a)
        assert m.values[0, 1] == m.values[1, 0]
        assert m.labels == ("X1", "X2")
        assert m.order == 2

    def test_rejects_asymmetric(self):
        """Clearly asymmetric input is an input error"""
        with pytest.raises(InputError):
            SymMatrix([[1.0, 0.5], [0.1, 1.0]])

    def test_rejects_non_finite(self):
        with pytest.raises(InputError):
            SymMatrix([[1.0, np.nan], [np.nan, 1.0]])

    def test_correlation_requires_unit_diagonal(self):
        """Correlation mode checks the diagonal"""
        with pytest.raises(InputError):
            SymMatrix([[1.1, 0.2], [0.2, 1.0]], mode=MomentMode.CORRELATION)

    def test_read_only(self):
        m = SymMatrix(np.eye(2))
        with pytest.raises(ValueError):
            m.values[0, 0] = 5.0

    def test_to_frame_uses_labels(self):
        m = SymMatrix(np.eye(2), labels=("a", "b"))
        frame = m.to_frame()
        assert list(frame.columns) == ["a", "b"]
        assert list(frame.index) == ["a", "b"]


class TestSymEigen:
    """Tests for sym_eigen"""

    def test_identity(self):
        eig = sym_eigen(np.eye(3))
        np.testing.assert_allclose(eig.values, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(eig.vectors.T @ eig.vectors, np.eye(3), atol=1e-10)

    def test_diagonal(self):
        """diag(4,1) has the identity as eigenvectors up to sign"""
        eig = sym_eigen(np.diag([4.0, 1.0]))
        np.testing.assert_allclose(eig.values, [4.0, 1.0])
        np.testing.assert_allclose(np.abs(eig.vectors), np.eye(2), atol=1e-12)

    def test_two_by_two(self):
        """[[2,1],[1,2]] has eigenvalues 3 and 1"""
        eig = sym_eigen([[2.0, 1.0], [1.0, 2.0]])
        np.testing.assert_allclose(eig.values, [3.0, 1.0])
        s = 1.0 / np.sqrt(2.0)
        np.testing.assert_allclose(np.abs(eig.vectors[:, 0]), [s, s], atol=1e-12)
        np.testing.assert_allclose(np.abs(eig.vectors[:, 1]), [s, s], atol=1e-12)
        assert eig.vectors[0, 1] * eig.vectors[1, 1] < 0

    def test_reconstruction_ill_conditioned(self, rng):
        """Reconstruction error stays below 1e-8 up to condition number 1e8"""
        a = random_spd(rng, 8, condition=1e8)
        eig = sym_eigen(a)
        assert np.all(np.diff(eig.values) <= 0)
        rel = np.linalg.norm(eig.reconstruct() - a) / np.linalg.norm(a)
        assert rel < 1e-8

    def test_deterministic_signs(self, rng):
        """Repeated calls give identical vectors"""
        a = random_spd(rng, 5)
        first = sym_eigen(a).vectors
        second = sym_eigen(a.copy()).vectors
        np.testing.assert_array_equal(first, second)

    def test_non_finite_is_input_error(self):
        with pytest.raises(InputError):
            sym_eigen([[1.0, np.inf], [np.inf, 1.0]])


class TestSymSqrt:
    """Tests for sym_sqrt"""

    def test_diagonal_plus_half(self):
        np.testing.assert_allclose(sym_sqrt(np.diag([4.0, 9.0]), "plus_half"), np.diag([2.0, 3.0]))

    def test_diagonal_minus_half(self):
        np.testing.assert_allclose(
            sym_sqrt(np.diag([4.0, 9.0]), "minus_half"), np.diag([0.5, 1.0 / 3.0])
        )

    def test_square_reproduces_input(self):
        a = np.array([[2.0, 1.0], [1.0, 2.0]])
        root = sym_sqrt(a)
        np.testing.assert_allclose(root @ root, a, atol=1e-12)
        np.testing.assert_allclose(root, root.T)

    def test_minus_half_whitens(self, rng):
        """R a R is the identity for the inverse square root"""
        a = random_spd(rng, 6)
        r = sym_sqrt(a, "minus_half")
        np.testing.assert_allclose(r @ a @ r, np.eye(6), atol=1e-8)

    def test_minus_half_matches_inverse_of_root(self, rng):
        a = random_spd(rng, 6)
        np.testing.assert_allclose(
            sym_sqrt(a, "minus_half"), sym_inverse(sym_sqrt(a, "plus_half")), atol=1e-8
        )

    def test_plus_half_relative_error(self, rng):
        for _ in range(10):
            a = random_spd(rng, 7)
            root = sym_sqrt(a)
            assert np.linalg.norm(root @ root - a) / np.linalg.norm(a) < 1e-8

    def test_singular_minus_half_reports_eigenvalue(self):
        with pytest.raises(SingularityError) as excinfo:
            sym_sqrt(np.diag([1.0, 0.0]), "minus_half")
        assert excinfo.value.eigenvalue == pytest.approx(0.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            sym_sqrt(np.eye(2), "cube_root")


class TestSymInverse:
    """Tests for sym_inverse"""

    def test_identity(self):
        np.testing.assert_allclose(sym_inverse(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        np.testing.assert_allclose(sym_inverse(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]))

    def test_random_spd(self, rng):
        a = random_spd(rng, 5)
        np.testing.assert_allclose(a @ sym_inverse(a), np.eye(5), atol=1e-8)

    def test_near_singular(self, rng):
        """Condition number beyond 1e12 is a singularity error"""
        a = random_spd(rng, 4, condition=1e13)
        with pytest.raises(SingularityError):
            sym_inverse(a)

    def test_condition_number(self):
        assert condition_number(np.diag([10.0, 1.0])) == pytest.approx(10.0)
        assert condition_number(np.diag([1.0, 0.0])) == float("inf")


class TestSampleMomentMatrix:
    """Tests for sample_moment_matrix"""

    def test_perfect_correlation(self):
        data = np.array([[1.0, 2.0], [2.0, 4.1], [3.0, 6.0], [4.0, 8.1]])
        data[:, 1] = 2.0 * data[:, 0]
        s = sample_moment_matrix(data, MomentMode.CORRELATION)
        assert s.values[0, 1] == pytest.approx(1.0)

    def test_two_rows_covariance(self):
        """Divisor n - 1 on the two-row example"""
        s = sample_moment_matrix([[1.0, 2.0], [-1.0, -2.0]], "covariance")
        np.testing.assert_allclose(s.values, [[2.0, 4.0], [4.0, 8.0]])

    def test_unit_diagonal_exact(self, rng):
        s = sample_moment_matrix(rng.normal(size=(50, 4)) * [1.0, 3.0, 0.1, 7.0])
        assert np.all(np.diag(s.values) == 1.0)
        assert s.mode == MomentMode.CORRELATION

    def test_constant_column_named(self):
        """Correlation mode names the constant column"""
        frame = pd.DataFrame({"a": [1.0, 2.0, 3.0], "flat": [5.0, 5.0, 5.0]})
        with pytest.raises(DegenerateInputError) as excinfo:
            sample_moment_matrix(frame)
        assert excinfo.value.column == "flat"
        assert "flat" in str(excinfo.value)

    def test_constant_column_allowed_for_covariance(self):
        s = sample_moment_matrix([[1.0, 5.0], [2.0, 5.0], [4.0, 5.0]], "covariance")
        assert s.values[1, 1] == 0.0

    def test_too_few_rows(self):
        with pytest.raises(InputError):
            sample_moment_matrix([[1.0, 2.0]])

    def test_dataframe_labels(self):
        frame = pd.DataFrame({"x": [1.0, 2.0, 4.0], "y": [0.0, 1.0, 3.0]})
        assert sample_moment_matrix(frame).labels == ("x", "y")

    def test_population_recovery(self, rng):
        """n=1000 sample correlations sit within sampling noise of LL' + Psi^2"""
        lam = np.array([[0.8], [0.7], [0.6], [0.5]])
        psi = np.sqrt(1.0 - np.sum(lam**2, axis=1))
        f = rng.normal(size=(1000, 1))
        u = rng.normal(size=(1000, 4))
        s = sample_moment_matrix(f @ lam.T + u * psi)
        sigma = lam @ lam.T + np.diag(psi**2)
        assert np.max(np.abs(s.values - sigma)) < 0.1
