import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spikelab.datagen import (
    CASE2_T,
    NoiseLaw,
    PopulationModel,
    Sigma0,
    apportion,
    four_group_model,
    generate,
    null_model,
    sigma_mu_spikes,
    sigma_x_spikes,
    three_group_model,
    tridiag_four_group_model,
    two_group_shift_model,
)
from spikelab.errors import GroupTooSmallError, InputError, SchemaError, SingleGroupError


@pytest.mark.parametrize(
    "law,v3,v4",
    [
        (NoiseLaw("gaussian"), 0.0, 3.0),
        (NoiseLaw("rademacher"), 0.0, 1.0),
        (NoiseLaw("exp_centered"), 2.0, 9.0),
        (NoiseLaw("bernoulli_t"), -math.sqrt(2.0), 3.0),
    ],
)
def test_noise_stored_moments(law, v3, v4):
    assert law.v3 == pytest.approx(v3)
    assert law.v4 == pytest.approx(v4)


@pytest.mark.parametrize("kind", ["gaussian", "rademacher", "exp_centered", "bernoulli_t"])
def test_noise_empirical_moments(kind):
    law = NoiseLaw(kind)
    z = law.sample(np.random.default_rng(123), 1_000_000)
    assert abs(z.mean()) < 5e-3
    assert abs(z.var() - 1.0) < 1e-2
    m3, m4 = np.mean(z**3), np.mean(z**4)
    assert abs(m3 - law.v3) <= 0.05 * max(abs(law.v3), 1.0)
    assert m4 == pytest.approx(law.v4, rel=0.05)


def test_case_two_parameter():
    assert NoiseLaw("bernoulli_t").t == pytest.approx((math.sqrt(3) + 3) / 6)
    assert CASE2_T == pytest.approx(0.7886751345948129)
    with pytest.raises(InputError):
        NoiseLaw("bernoulli_t", 1.5)
    with pytest.raises(InputError):
        NoiseLaw("cauchy")


def _sigma_mu_dense(model):
    k = model.fractions
    mbar = model.means @ k
    D = model.means - mbar[:, None]
    return (D * k[None, :]) @ D.T


def test_sigma_mu_rank_one():
    p = 5
    v = np.arange(1.0, p + 1)
    means = np.stack([np.zeros(p), v], axis=1)
    m = PopulationModel(means, Sigma0.identity(p), [0.3, 0.7])
    assert sigma_mu_spikes(m) == pytest.approx([0.3 * 0.7 * v @ v])


def test_sigma_mu_fig2_values():
    m = three_group_model(10)
    assert sigma_mu_spikes(m) == pytest.approx([400.0 / 3.0, 400.0 / 9.0])


def test_sigma_mu_identical_means():
    means = np.ones((4, 2))
    m = PopulationModel(means, Sigma0.identity(4), [0.5, 0.5])
    assert sigma_mu_spikes(m) == pytest.approx([0.0], abs=1e-12)
    with pytest.raises(SingleGroupError):
        sigma_mu_spikes(null_model(4))


@given(
    tau=st.integers(2, 4),
    seed=st.integers(0, 2**32 - 1),
)
def test_trace_identity(tau, seed):
    rng = np.random.default_rng(seed)
    p = 7
    means = rng.normal(size=(p, tau))
    k = rng.dirichlet(np.ones(tau)) * 0.9 + 0.1 / tau
    k /= k.sum()
    m = PopulationModel(means, Sigma0.identity(p), k)
    pair = sum(k[i] * k[j] * np.sum((means[:, i] - means[:, j]) ** 2) for i in range(tau) for j in range(i + 1, tau))
    assert np.sum(sigma_mu_spikes(m)) == pytest.approx(pair, rel=1e-10)
    assert np.sort(sigma_mu_spikes(m)) == pytest.approx(np.sort(np.linalg.eigvalsh(_sigma_mu_dense(m)))[-(tau - 1):], abs=1e-9)


def test_sigma_x_spikes_section_five_model():
    n = 100
    alphas = sigma_x_spikes(four_group_model(n, 500 * n), n)
    e = math.sqrt(2 / 2500)
    assert alphas == pytest.approx([3 + e, 3 + e, 2 + e], abs=1e-9)


def test_sigma_x_spikes_fig2():
    n = 300
    alphas = sigma_x_spikes(three_group_model(n * n), n)
    assert alphas == pytest.approx([(1 + 400 / 3) / math.sqrt(300), (1 + 400 / 9) / math.sqrt(300)])
    # the rounded values quoted for this model; 134.333/sqrt(300) is 7.7557
    assert alphas == pytest.approx([7.757, 2.624], abs=2e-3)


def test_sigma_x_spikes_no_separation():
    n, p = 10, 40
    m = PopulationModel(np.ones((p, 2)), Sigma0.identity(p), [0.5, 0.5])
    assert sigma_x_spikes(m, n) == pytest.approx([math.sqrt(n / p)])


@pytest.mark.parametrize("kind", ["diag", "tridiag"])
def test_sigma_x_spikes_match_dense_eigensolve(kind):
    rng = np.random.default_rng(5)
    p, n, tau = 40, 10, 3
    if kind == "diag":
        sig = Sigma0.from_variances(rng.uniform(0.5, 2.0, p))
    else:
        sig = Sigma0("tridiag", p, d=1.0, e=0.3)
    means = rng.normal(size=(p, tau)) * 3
    m = PopulationModel(means, sig, [0.2, 0.3, 0.5])
    dense = np.linalg.eigvalsh(sig.dense() + _sigma_mu_dense(m))[::-1][: tau - 1]
    assert sigma_x_spikes(m, n) == pytest.approx(dense / math.sqrt((p / n) * m.b), rel=1e-9)


def test_tridiag_root_matches_dense():
    s = Sigma0("tridiag", 12, d=1.0, e=0.5)
    R = np.diag(np.ones(12)) + 0.5 * (np.eye(12, k=1) + np.eye(12, k=-1))
    Z = np.random.default_rng(0).normal(size=(12, 3))
    assert np.allclose(s.apply_root(Z), R @ Z)
    assert np.allclose(s.dense(), R @ R)
    assert np.allclose(np.sort(s.eigenvalues), np.linalg.eigvalsh(R @ R))
    assert np.allclose(s.from_eigenbasis(s.to_eigenbasis(Z)), Z)


@given(n=st.integers(1, 500), k=st.lists(st.floats(0.05, 1.0), min_size=1, max_size=6))
def test_apportion_sums_to_n(n, k):
    k = np.asarray(k) / np.sum(k)
    sizes = apportion(n, k)
    assert sizes.sum() == n
    assert np.all(np.abs(sizes - n * k) < 1.0 + 1e-9)


def test_generate_pure_noise():
    d = generate(null_model(3), 4, seed=9)
    assert d.X.shape == (3, 4)
    assert d.labels.tolist() == [0, 0, 0, 0]
    big = generate(null_model(200), 400, seed=9).X
    assert abs(big.mean()) < 0.01
    assert big.var() == pytest.approx(1.0, rel=0.02)


def test_generate_groups_and_labels():
    n = 40
    d = generate(four_group_model(n, 200), n, seed=1)
    assert d.n_per_group.tolist() == [10, 10, 10, 10]
    assert d.labels.tolist() == sum(([g] * 10 for g in range(4)), [])


def test_generate_deterministic():
    m = four_group_model(20, 60, "exp_centered")
    a = generate(m, 20, seed=42, replicate=3).X
    b = generate(m, 20, seed=42, replicate=3).X
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, generate(m, 20, seed=43, replicate=3).X)
    assert not np.array_equal(a, generate(m, 20, seed=42, replicate=4).X)


def test_generate_column_means_follow_model():
    m = three_group_model(4, shift=20.0)
    d = generate(m, 3000, seed=2)
    for g in range(3):
        assert d.X[:, d.labels == g].mean(axis=1) == pytest.approx(m.means[:, g], abs=0.15)


def test_generate_rejects_tiny_groups():
    with pytest.raises(GroupTooSmallError):
        generate(four_group_model(4, 20), 4, seed=0)


@pytest.mark.parametrize(
    "model",
    [
        four_group_model(40, 400, "bernoulli_t"),
        tridiag_four_group_model(20, 100),
        two_group_shift_model(20, 100, 0.3),
        three_group_model(50, noise="rademacher"),
    ],
)
def test_model_json_round_trip(model):
    back = PopulationModel.from_json(model.to_json())
    assert np.array_equal(back.means, model.means)
    assert np.allclose(back.sigma0.eigenvalues, model.sigma0.eigenvalues)
    assert back.noise == model.noise
    assert np.array_equal(back.fractions, model.fractions)
    assert back.to_json() == model.to_json()


def test_model_schema_errors():
    with pytest.raises(SchemaError):
        PopulationModel.from_json("{not json")
    with pytest.raises(SchemaError):
        PopulationModel.from_dict({"p": 3, "fractions": [1.0]})
    with pytest.raises(SchemaError):
        PopulationModel.from_dict({"p": 3, "fractions": [1.0], "means": [[0.0, 0.0]]})
    with pytest.raises(SchemaError):
        PopulationModel.from_dict({"schema": "other/v9", "p": 1, "fractions": [1], "means": [[0]]})


def test_model_sparse_means_and_scale():
    d = {"p": 5, "fractions": [0.5, 0.5], "means": [{}, {"2": 1.5}], "mean_scale": 2.0,
         "sigma0": {"kind": "blocks", "values": [1, 2], "counts": [2, 3]}}
    m = PopulationModel.from_dict(d)
    assert m.means[2, 1] == 3.0
    assert m.a == pytest.approx((2 + 6) / 5)


def test_model_validates_fractions():
    with pytest.raises(InputError):
        PopulationModel(np.zeros((3, 2)), Sigma0.identity(3), [0.5, 0.6])


def test_section_five_model_has_b_two_and_a_half():
    m = four_group_model(200, 2000)
    assert m.b == pytest.approx(2.5)
    assert m.a == pytest.approx(1.5)
