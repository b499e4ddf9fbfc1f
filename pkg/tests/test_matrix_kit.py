import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ouexec.matrix_kit import integrated_covariance, matrix_exp, psd_factor, psd_leq, sqrtm_psd
from ouexec.model import NumericalError, OUParams, SpecError


@settings(max_examples=60, deadline=None)
@given(arrays(float, (3, 3), elements=st.floats(-6, 6)))
def test_matrix_exp_matches_scipy(M):
    np.testing.assert_allclose(matrix_exp(M), sla.expm(M), rtol=1e-10, atol=1e-12 * np.exp(np.abs(M).sum()))


def test_matrix_exp_basic():
    assert np.array_equal(matrix_exp(np.zeros((2, 2))), np.eye(2))
    np.testing.assert_allclose(matrix_exp(np.diag([1.0, -2.0])), np.diag(np.exp([1.0, -2.0])), rtol=1e-14)
    with pytest.raises(SpecError):
        matrix_exp(np.ones((2, 3)))
    with pytest.raises(NumericalError):
        matrix_exp(np.array([[1e6]]))


def _van_loan(R, Sigma, tau):
    # e^{-Ru} Sigma e^{-R'u} integrated via the block exponential of [[-R, Sigma], [0, R']]
    d = R.shape[0]
    M = np.block([[-R, Sigma], [np.zeros((d, d)), R.T]]) * tau
    E = sla.expm(M)
    return E[:d, d:] @ E[:d, :d].T


@pytest.mark.parametrize("tau", [1e-3, 0.1, 1.0])
def test_integrated_covariance_van_loan(tau):
    R = np.array([[0.33, 3.95], [-2.52, 10.23]])
    Sig = np.array([[0.47, 0.2], [0.2, 0.14]])
    got = integrated_covariance(OUParams(R, [0.0, 0.0], Sig), tau).value
    np.testing.assert_allclose(got, _van_loan(R, Sig, tau), rtol=1e-9)


def test_integrated_covariance_scalar_formula():
    r, s2, tau = 5.1, 243.67**2, 1 / 840
    got = integrated_covariance(OUParams([[r]], [0.0], [[s2]]), tau).value[0, 0]
    assert got == pytest.approx(s2 * (1 - np.exp(-2 * r * tau)) / (2 * r), rel=1e-12)


def test_integrated_covariance_brownian_and_zero():
    ou = OUParams(np.zeros((2, 2)), [0.0, 0.0], np.eye(2))
    np.testing.assert_allclose(integrated_covariance(ou, 0.3).value, 0.3 * np.eye(2), rtol=1e-13)
    assert not np.any(integrated_covariance(ou, 0.0).value)


def test_psd_order():
    assert psd_leq(np.eye(2), 2 * np.eye(2))
    assert not psd_leq(2 * np.eye(2), np.eye(2))
    assert psd_leq(np.eye(2), np.eye(2) - 1e-9, tol=1e-8)


def test_psd_factor_semidefinite():
    v = np.array([1.0, 2.0])
    S = np.outer(v, v)
    L = psd_factor(S)
    np.testing.assert_allclose(L @ L.T, S, atol=1e-12)
    with pytest.raises(NumericalError):
        psd_factor(np.diag([1.0, -0.5]))


def test_sqrtm_psd():
    M = np.array([[4.0, 1.0], [1.0, 3.0]])
    r = sqrtm_psd(M)
    np.testing.assert_allclose(r @ r, M, rtol=1e-13)
