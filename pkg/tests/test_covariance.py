import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spikelab.covariance import (
    GroupResolvent,
    L_covariance,
    SpectralSummary,
    both_spectra,
    centered_gram,
    centering_projection,
    check_z,
    estimate_ab,
    group_centered_cov_gram,
    renormalized_gram,
    sesquilinear_centering,
    sesquilinear_panel,
    spectral_summary,
)
from spikelab.datagen import PopulationModel, Sigma0, four_group_model, generate, null_model, two_block_sigma0
from spikelab.errors import DimensionMismatchError, InputError, GroupTooSmallError, NonPositiveBhatError, PoleViolationError
from spikelab.montecarlo import sesquilinear_model
from spikelab.spectrum import semicircle_stieltjes


def test_centering_n2():
    assert np.allclose(centering_projection(2), [[0.5, -0.5], [-0.5, 0.5]])


@given(n=st.integers(2, 60))
def test_centering_projection_properties(n):
    P = centering_projection(n)
    assert np.allclose(P, P.T)
    assert np.allclose(P @ P, P, atol=1e-12)
    assert np.allclose(P @ np.ones(n), 0.0, atol=1e-12)
    assert np.trace(P) == pytest.approx(n - 1)


def test_centering_rejects_single_column():
    with pytest.raises(InputError):
        centering_projection(1)


def test_estimate_ab_zero_matrix():
    with pytest.raises(NonPositiveBhatError):
        estimate_ab(np.zeros((5, 4)))


def test_estimate_ab_naive_formula():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 8))
    p, n = X.shape
    S = np.cov(X)  # p x p, divides by n - 1
    a, b = estimate_ab(X)
    assert a == pytest.approx(np.trace(S) / p)
    assert b == pytest.approx(np.trace(S @ S) / p - np.trace(S) ** 2 / ((n - 1) * p))


def test_estimate_ab_identity_median():
    m = null_model(10_000)
    vals = np.array([estimate_ab(generate(m, 100, seed=s).X) for s in range(50)])
    a_med, b_med = np.median(vals, axis=0)
    assert a_med == pytest.approx(1.0, rel=0.05)
    assert b_med == pytest.approx(1.0, rel=0.05)


def test_estimate_ab_two_block():
    p = 20_000
    m = PopulationModel(np.zeros((p, 1)), two_block_sigma0(p), [1.0])
    vals = np.array([estimate_ab(generate(m, 200, seed=s).X) for s in range(50)])
    assert np.median(vals[:, 0]) == pytest.approx(1.5, rel=0.02)
    assert np.median(vals[:, 1]) == pytest.approx(2.5, rel=0.05)


def test_renormalized_gram_zero():
    assert np.allclose(renormalized_gram(np.zeros((5, 4)), 0.0, 1.0), 0.0)


def test_renormalized_gram_shape_check():
    with pytest.raises(DimensionMismatchError):
        renormalized_gram(np.ones((5, 4)), 0.0, 1.0, cgram=np.eye(3))


def _naive_A(X, a, b):
    p, n = X.shape
    P = np.eye(n) - np.ones((n, n)) / n
    return math.sqrt(p / (n * b)) * (P @ X.T @ X @ P / p - a * P)


@given(p=st.integers(2, 60), n=st.integers(3, 40), seed=st.integers(0, 10_000))
def test_gram_side_matches_naive(p, n, seed):
    X = np.random.default_rng(seed).normal(size=(p, n)) + 0.3
    a, b = 1.2, 1.7
    assert np.allclose(renormalized_gram(X, a, b), _naive_A(X, a, b), atol=1e-10)
    P = np.eye(n) - np.ones((n, n)) / n
    assert np.allclose(centered_gram(X), P @ X.T @ X @ P, atol=1e-9)


@given(p=st.integers(2, 60), n=st.integers(3, 40), seed=st.integers(0, 10_000))
def test_eigenvalue_identity_with_sample_covariance(p, n, seed):
    # the nonzero spectrum of Phi X^T X Phi equals that of the p x p matrix X Phi X^T
    X = np.random.default_rng(seed).normal(size=(p, n))
    a, b = 1.0, 1.0
    A = np.sort(np.linalg.eigvalsh(renormalized_gram(X, a, b)))
    P = np.eye(n) - np.ones((n, n)) / n
    Sn = np.linalg.eigvalsh(X @ P @ X.T)
    Sn = np.sort(Sn)[-min(p, n - 1):]
    scale = math.sqrt(p / (n * b))
    mapped = scale * (Sn / p - a)
    # remaining directions of range(Phi) map to -scale * a, plus the structural zero
    rest = np.full(n - 1 - Sn.size, -scale * a)
    expected = np.sort(np.concatenate([mapped, rest, [0.0]]))
    assert np.allclose(A, expected, rtol=1e-8, atol=1e-8 * max(1.0, np.abs(expected).max()))


def test_spectral_summary_and_oracle():
    X = generate(four_group_model(40, 400), 40, seed=3).X
    s = spectral_summary(X)
    assert np.all(np.diff(s.eigenvalues) <= 0)
    assert s.c_n == 10.0 and not s.oracle
    hat, orc = both_spectra(X, 1.5, 2.5)
    assert np.allclose(hat.eigenvalues, s.eigenvalues)
    assert np.allclose(orc.eigenvalues, spectral_summary(X, 1.5, 2.5).eigenvalues)
    assert orc.oracle
    back = SpectralSummary.from_dict(s.to_dict())
    assert np.allclose(back.eigenvalues, s.eigenvalues) and back.b_hat == s.b_hat


def test_hat_equals_oracle_when_estimates_are_plugged_in():
    X = generate(null_model(300), 30, seed=1).X
    a, b = estimate_ab(X)
    hat, orc = both_spectra(X, a, b)
    assert np.allclose(hat.eigenvalues, orc.eigenvalues)


def test_group_resolvent_matches_dense():
    rng = np.random.default_rng(0)
    p, n = 30, 12
    X = rng.normal(size=(p, n))
    lab = np.repeat([0, 1, 2], 4)
    R = group_centered_cov_gram(X, lab)
    Xc = X.copy()
    for g in range(3):
        Xc[:, lab == g] -= Xc[:, lab == g].mean(axis=1, keepdims=True)
    B = Xc @ Xc.T / n
    for z in (5.0 + 0.5j, -2.0, 40.0):
        D = np.linalg.inv(B - z * np.eye(p))
        V, U = rng.normal(size=(p, 3)), rng.normal(size=(p, 2))
        assert np.allclose(R.forms(V, z, U), V.T @ D @ U, atol=1e-12)
        assert np.allclose(R.apply(V, z), D @ V, atol=1e-12)


def test_group_resolvent_small_group():
    with pytest.raises(GroupTooSmallError):
        GroupResolvent(np.ones((3, 4)), [0, 0, 0, 1])


def test_sbar_limit_single_group():
    m = null_model(10_000)
    lim = sesquilinear_centering(m, 100, [1.0], 3.0, limit="infinite")
    assert lim[0, 0] == pytest.approx(-10.38197, abs=1e-5)
    # mean block is zero for zero means
    assert lim[1, 1] == 0.0


def test_cross_limits_are_zero():
    n = 50
    m = sesquilinear_model(n, n * n)
    for limit in ("finite", "infinite"):
        lim = sesquilinear_centering(m, n, [0.5, 0.5], 3.0, limit=limit)
        assert np.all(lim[:2, 2:] == 0) and np.all(lim[2:, :2] == 0)


def test_mean_block_infinite_limit():
    n = 50
    p = n * n
    m = sesquilinear_model(n, p)
    lim = sesquilinear_centering(m, n, [0.5, 0.5], 3.0, limit="infinite")
    c = p / n
    expect = -(m.means.T @ m.means) / math.sqrt(c)
    assert np.allclose(lim[2:, 2:], expect)


def test_real_z_inside_support_rejected():
    m = null_model(400)
    with pytest.raises(PoleViolationError):
        check_z(m, 20, 1.0)
    with pytest.raises(PoleViolationError):
        check_z(m, 20, 2.0 + 1 / math.sqrt(20) + 0.01)
    assert check_z(m, 20, 1.0 + 0.5j) == 1.0 + 0.5j


def test_panel_matches_dense_forms():
    n, p = 20, 60
    m = sesquilinear_model(n, p)
    d = generate(m, n, seed=4)
    z = 4.0
    panel = sesquilinear_panel(d.X, d.labels, m, z)
    Xc = d.X.copy()
    for g in range(2):
        Xc[:, d.labels == g] -= Xc[:, d.labels == g].mean(axis=1, keepdims=True)
    B = Xc @ Xc.T / n
    c = p / n
    zt = c * m.a + math.sqrt(c * m.b) * z
    xbar = np.stack([d.X[:, d.labels == g].mean(axis=1) for g in range(2)], axis=1)
    M = np.concatenate([xbar - m.means, m.means], axis=1)
    F = M.T @ np.linalg.inv(B - zt * np.eye(p)) @ M * zt / math.sqrt(c * m.b)
    assert np.allclose(panel.forms, F, atol=1e-10)
    assert np.allclose(panel.L, math.sqrt(n) * (panel.forms - panel.centering))


def test_L_covariance_semicircle_identity():
    s = semicircle_stieltjes(3.0)
    sp = s**2 / (1 - s**2)
    assert (sp - s**2) / s**4 == pytest.approx(1 / (1 - s**2))


def test_L_covariance_structure():
    n = 60
    m = sesquilinear_model(n, 400 * n)
    C = np.real(L_covariance(m, 3.0, n))
    s = semicircle_stieltjes(3.0).real
    # sbar block approaches the infinite-ratio pattern
    assert C[0, 0, 0, 0] == pytest.approx(2 / (1 - s * s) / 0.25, rel=0.1)
    assert C[0, 1, 0, 1] == pytest.approx(1 / (1 - s * s) / 0.25, rel=0.1)
    # entries without a shared index vanish
    assert C[0, 0, 1, 1] == 0.0
    assert C[0, 1, 0, 0] == 0.0
    # symmetric as a covariance
    assert np.allclose(C, C.transpose(2, 3, 0, 1))
