import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geostack.kernel import (
    JITTER_MAX,
    DuplicateLocationError,
    MaternParams,
    NotPositiveDefiniteError,
    _matern_general,
    build_corr_matrix,
    build_cross_corr,
    factorize_corr,
    matern_corr,
)

from conftest import matern_scipy

# Matérn correlation at 40 digits (mpmath)
MPMATH_MATERN = [
    (3, 1.0, 0.2, 0.7817009638581013),
    (14, 1.75, 0.05, 0.8750154835833709),
    (25, 0.5, 0.1, 0.08208499862389877),
    (36, 1.5, 0.03, 0.7063586933414734),
    (7, 1.0, 0.1, 0.7351984747190425),
    (20, 2.5, 0.07, 0.7529427299017051),
    (3, 0.3, 1.2, 0.014111585285663395),
]


class TestMaternCorr:
    @pytest.mark.parametrize("phi,nu,d,expected", MPMATH_MATERN)
    def test_reference_values(self, phi, nu, d, expected):
        assert matern_corr(MaternParams(phi, nu), d) == pytest.approx(expected, rel=1e-13)

    def test_exponential_special_case(self):
        d = np.linspace(0, 1, 30)
        np.testing.assert_allclose(matern_corr(MaternParams(7, 0.5), d), np.exp(-7 * d),
                                   rtol=1e-15)

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
    def test_half_integer_closed_forms_vs_bessel(self, nu):
        d = np.geomspace(1e-6, 2.0, 300)
        k = MaternParams(9.0, nu)
        np.testing.assert_allclose(matern_corr(k, d), _matern_general(k, d), rtol=1e-10,
                                   atol=1e-300)

    def test_matches_scipy(self):
        d = np.geomspace(1e-5, 1.5, 100)
        for phi in (3, 14, 25, 36):
            for nu in (0.5, 1.0, 1.5, 1.75):
                np.testing.assert_allclose(matern_corr(MaternParams(phi, nu), d),
                                           matern_scipy(phi, nu, d), rtol=1e-11, atol=1e-300)

    def test_zero_distance_is_one(self):
        assert matern_corr(MaternParams(3, 1.75), 0.0) == 1.0
        assert matern_corr(MaternParams(3, 1.75), 1e-60) == 1.0

    def test_large_distance_underflows_to_zero(self):
        assert matern_corr(MaternParams(36, 1.75), 1e3) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(phi=st.floats(0.5, 40), nu=st.floats(0.2, 3.0), d=st.floats(1e-4, 2.0))
    def test_bounded_and_monotone(self, phi, nu, d):
        k = MaternParams(phi, nu)
        r1, r2 = matern_corr(k, d), matern_corr(k, d * 1.05)
        assert 0.0 <= r2 <= r1 <= 1.0

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            MaternParams(0.0, 1.0)
        with pytest.raises(ValueError):
            MaternParams(1.0, -1.0)
        with pytest.raises(ValueError):
            matern_corr(MaternParams(1, 1), -0.1)


class TestCorrMatrix:
    def test_structure(self, rng):
        chi = rng.uniform(size=(30, 2))
        C = build_corr_matrix(MaternParams(7, 1.0), chi)
        R = C.values
        np.testing.assert_array_equal(np.diag(R), 1.0)
        np.testing.assert_array_equal(R, R.T)
        np.testing.assert_allclose(C.chol @ C.chol.T, R, atol=1e-12)
        assert C.jitter == 0.0
        np.testing.assert_allclose(C.inverse() @ R, np.eye(30), atol=1e-8)
        assert C.logdet() == pytest.approx(np.linalg.slogdet(R)[1], rel=1e-10)

    def test_rigid_motion_invariance(self, rng):
        chi = rng.uniform(size=(20, 2))
        t = 0.7
        Q = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        k = MaternParams(14, 1.75)
        np.testing.assert_allclose(build_corr_matrix(k, chi, factor=False),
                                   build_corr_matrix(k, chi @ Q.T + 3.0, factor=False),
                                   atol=1e-12)

    def test_duplicates_rejected(self):
        chi = np.array([[0.1, 0.2], [0.5, 0.5], [0.1, 0.2]])
        with pytest.raises(DuplicateLocationError):
            build_corr_matrix(MaternParams(3, 0.5), chi)
        C = build_corr_matrix(MaternParams(3, 0.5), chi, allow_duplicates=True)
        assert 0 < C.jitter <= JITTER_MAX
        assert C.rank_deficient

    def test_jitter_escalation_fails_beyond_cap(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(NotPositiveDefiniteError):
            factorize_corr(bad)

    def test_cross_corr_shape_and_values(self, rng):
        chi, new = rng.uniform(size=(8, 2)), rng.uniform(size=(3, 2))
        k = MaternParams(7, 1.0)
        J = build_cross_corr(k, chi, new)
        assert J.shape == (8, 3)
        d = np.linalg.norm(chi[:, None] - new[None], axis=-1)
        np.testing.assert_allclose(J, matern_scipy(7, 1.0, d), rtol=1e-11)

    def test_one_dimensional_input(self):
        C = build_corr_matrix(MaternParams(7, 0.5), np.array([0.0, 0.1, 0.3]), factor=False)
        assert C[0, 1] == pytest.approx(np.exp(-0.7))
