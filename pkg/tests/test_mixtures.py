import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from conec.errors import InvalidInputError, NumericError
from conec.mixtures import GmmModel, export_csv, fit_em, gaussian_logpdf, sample
from conec.numkit import make_rng


def test_logpdf_analytic_values():
    assert gaussian_logpdf([0.0, 0.0], [0.0, 0.0], np.eye(2)) == pytest.approx(-1.8378770664, abs=1e-10)
    assert gaussian_logpdf([1.0, 0.0], [0.0, 0.0], np.eye(2)) == pytest.approx(-2.3378770664, abs=1e-10)


@given(st.integers(0, 2**31))
def test_logpdf_against_explicit_inverse(seed):
    rng = make_rng(seed)
    d = 4
    m = rng.standard_normal((d, d))
    cov = m @ m.T + 0.5 * np.eye(d)
    mean = rng.standard_normal(d)
    z = rng.standard_normal((3, d))
    inv = np.linalg.inv(cov)
    diff = z - mean
    direct = -0.5 * (d * np.log(2 * np.pi) + np.log(np.linalg.det(cov)) + np.einsum("ni,ij,nj->n", diff, inv, diff))
    assert np.allclose(gaussian_logpdf(z, mean, cov), direct, atol=1e-9)
    assert np.allclose(gaussian_logpdf(z, mean, cov), multivariate_normal(mean, cov).logpdf(z), atol=1e-9)


def test_logpdf_non_pd():
    with pytest.raises(NumericError):
        gaussian_logpdf([0.0, 0.0], [0.0, 0.0], -np.eye(2))


def test_single_component_closed_form():
    x = make_rng(0).standard_normal((200, 3)) * [1.0, 2.0, 0.5] + 4
    g = fit_em(x, 1)
    s = np.cov(x.T, bias=True)
    eps = 1e-6 * np.trace(s) / 3
    assert np.abs(g.means[0] - x.mean(axis=0)).max() < 1e-10
    assert np.abs(g.covs[0] - (s + eps * np.eye(3))).max() < 1e-10
    assert g.weights[0] == 1.0


def test_two_cluster_recovery():
    rng = make_rng(1)
    x = np.concatenate([rng.standard_normal((300, 2)) + [5, 0], rng.standard_normal((300, 2)) - [5, 0]])
    g = fit_em(x, 2, make_rng(2))
    order = np.argsort(g.means[:, 0])
    assert np.abs(g.means[order] - [[-5, 0], [5, 0]]).max() < 0.2
    assert np.abs(g.weights - 0.5).max() < 0.1
    # oracle: per-cluster empirical statistics from the known labels
    assert np.allclose(g.means[order[1]], x[:300].mean(axis=0), atol=1e-2)


@given(st.integers(0, 2**31), st.integers(1, 4))
def test_em_objective_monotone(seed, c):
    rng = make_rng(seed)
    x = rng.standard_normal((60, 3)) @ rng.standard_normal((3, 3))
    g = fit_em(x, c, make_rng(seed + 1))
    assert np.all(np.diff(g.history) >= -1e-9)
    assert abs(g.weights.sum() - 1) < 1e-12


def test_em_deterministic_and_degenerate():
    x = make_rng(3).standard_normal((50, 4))
    a, b = fit_em(x, 2, make_rng(9)), fit_em(x, 2, make_rng(9))
    assert np.array_equal(a.means, b.means) and np.array_equal(a.covs, b.covs)
    # rank-deficient data stays factorizable
    flat = np.zeros((40, 3))
    flat[:, 0] = make_rng(4).standard_normal(40)
    g = fit_em(flat, 2, make_rng(0))
    assert np.all(np.isfinite(g.logpdf(flat)))
    with pytest.raises(InvalidInputError):
        fit_em(x[:1], 2)


def test_duplicate_points_reseed_dead_components():
    x = np.repeat([[0.0, 0.0], [1.0, 1.0]], 20, axis=0)
    g = fit_em(x, 4, make_rng(0))
    assert abs(g.weights.sum() - 1) < 1e-12
    assert np.all(np.isfinite(g.covs))


def test_sampling_frequencies_and_moments():
    rng = make_rng(5)
    g = GmmModel(np.array([0.3, 0.7]), np.array([[-10.0, 0.0], [10.0, 0.0]]), np.array([np.eye(2), np.eye(2)]))
    s = sample(g, 100_000, rng)
    frac = np.mean(s[:, 0] < 0)
    assert abs(frac - 0.3) < 3 * np.sqrt(0.3 * 0.7 / 100_000)
    cov = np.array([[2.0, 0.6], [0.6, 1.0]])
    one = GmmModel(np.array([1.0]), np.array([[3.0, -2.0]]), cov[None])
    s = sample(one, 100_000, rng)
    assert np.all(np.abs(s.mean(axis=0) - [3.0, -2.0]) <= 0.05 * np.abs([3.0, -2.0]))
    assert np.linalg.norm(np.cov(s.T) - cov) / np.linalg.norm(cov) < 0.05


def test_tiny_covariance_sampling():
    g = GmmModel(np.array([1.0]), np.array([[1.0, 2.0]]), np.array([1e-12 * np.eye(2)]))
    assert np.abs(sample(g, 3, make_rng(0)) - [1.0, 2.0]).max() < 1e-3


def test_pdf_self_normalizes():
    # importance sampling from a wide proposal: E_q[p/q] = 1
    rng = make_rng(6)
    g = GmmModel(np.array([0.4, 0.6]), np.array([[0.0, 0.0], [2.0, 1.0]]),
                 np.array([np.eye(2), [[1.0, 0.3], [0.3, 0.5]]]))
    prop = multivariate_normal([1.0, 0.5], 9 * np.eye(2))
    z = prop.rvs(50_000, random_state=np.random.RandomState(0))
    w = np.exp(g.logpdf(z) - prop.logpdf(z))
    assert abs(w.mean() - 1) < 0.03


def test_simplex_validation_and_export(tmp_path):
    with pytest.raises(InvalidInputError):
        GmmModel(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))
    g = fit_em(make_rng(0).standard_normal((30, 2)), 2, make_rng(0), layer=3, domain=2)
    export_csv([g], tmp_path / "g.csv")
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows[0] == ["domain", "layer", "component", "weight", "mean_0", "mean_1", "var_0", "var_1"]
    assert rows[1][:3] == ["2", "3", "0"] and float(rows[1][3]) == g.weights[0]
