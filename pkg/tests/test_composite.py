import numpy as np
import pytest
import scipy.optimize

from blockgmm import composite, partition, simstudy
from blockgmm.errors import NumericDomainError, SolverError

from conftest import make_ar1_design, random_dataset


def one_block(data):
    plan = partition.make_plan(data.M, data.N, 1, 1, strategy="contiguous")
    return partition.split(data, plan)[(0, 0)]


def pairwise_loglik(block, theta, sigma2, rho):
    """Direct mean pairwise bivariate-normal log-likelihood (oracle)."""
    resid = block.y - block.design @ theta
    total = 0.0
    m = block.m
    npairs = m * (m - 1) / 2
    for r in range(m - 1):
        for t in range(r + 1, m):
            c = rho ** (t - r)
            a, b = resid[:, r], resid[:, t]
            q = a * a - 2 * c * a * b + b * b
            ll = (
                -np.log(2 * np.pi)
                - np.log(sigma2)
                - 0.5 * np.log(1 - c * c)
                - q / (2 * sigma2 * (1 - c * c))
            )
            total += ll.mean()
    return total / npairs


class TestClScores:
    def test_score_is_gradient_of_pairwise_loglik(self):
        data, _ = random_dataset(N=25, M=5, p=2, seed=13)
        block = one_block(data)
        theta = np.array([0.4, 0.9])
        sigma2, rho = 1.3, 0.35
        scores = composite.cl_scores(block, theta, np.array([sigma2, rho]))
        mean_score = scores.mean(axis=0)

        h = 1e-6
        grad = np.empty(4)
        params = np.array([theta[0], theta[1], sigma2, rho])

        def ll(v):
            return pairwise_loglik(block, v[:2], v[2], v[3])

        for a in range(4):
            up, um = params.copy(), params.copy()
            up[a] += h
            um[a] -= h
            grad[a] = (ll(up) - ll(um)) / (2 * h)
        np.testing.assert_allclose(mean_score, grad, rtol=1e-5, atol=1e-7)

    def test_domain_violations_raise(self):
        data, _ = random_dataset(N=10, M=4, p=2, seed=14)
        block = one_block(data)
        with pytest.raises(NumericDomainError):
            composite.cl_scores(block, np.zeros(2), np.array([-1.0, 0.1]))
        with pytest.raises(NumericDomainError):
            composite.cl_scores(block, np.zeros(2), np.array([1.0, 1.0]))


class TestFitClBlock:
    def test_m2_matches_exact_bivariate_mle(self):
        design = make_ar1_design(N=120, M=2, J=1, K=1, sigma=1.5, rho=0.4, seed=31)
        block = one_block(simstudy.generate(design, 0))
        theta, zeta, converged, _, _ = composite.fit_cl_block(block)
        assert converged

        # oracle: direct maximization of the exact bivariate log-likelihood
        def negll(u):
            sigma2 = np.exp(2 * u[3])
            rho = np.tanh(u[4])
            return -pairwise_loglik(block, u[:3], sigma2, rho)

        u0 = np.concatenate(
            [theta + 0.05, [0.5 * np.log(zeta[0]) + 0.1, np.arctanh(zeta[1]) - 0.1]]
        )
        res = scipy.optimize.minimize(
            negll, u0, method="Nelder-Mead",
            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000},
        )
        np.testing.assert_allclose(theta, res.x[:3], atol=1e-6)

    def test_rho_zero_data_agrees_with_ols(self):
        design = make_ar1_design(N=400, M=6, J=1, K=1, sigma=2.0, rho=0.0, seed=32)
        block = one_block(simstudy.generate(design, 0))
        theta, zeta, converged, _, _ = composite.fit_cl_block(block)
        assert converged
        x = block.design.reshape(-1, 3)
        y = block.y.reshape(-1)
        ols = np.linalg.solve(x.T @ x, x.T @ y)
        se = np.sqrt(
            np.mean((y - x @ ols) ** 2) * np.diag(np.linalg.inv(x.T @ x))
        )
        assert np.all(np.abs(theta - ols) <= 3 * se)
        assert abs(zeta[1]) < 0.1

    def test_root_property_at_solution(self, ar1_dataset):
        block = one_block(ar1_dataset)
        theta, zeta, converged, _, _ = composite.fit_cl_block(block)
        assert converged
        scores = composite.cl_scores(block, theta, zeta)
        # the solver works on the rescaled (log sigma, atanh rho) score;
        # both vanish together at an interior root
        assert np.linalg.norm(scores.mean(axis=0)) <= 1e-6

    def test_recovers_true_parameters(self):
        design = make_ar1_design(N=300, M=8, J=1, K=1, sigma=2.0, rho=0.6, seed=33)
        block = one_block(simstudy.generate(design, 0))
        theta, zeta, converged, _, _ = composite.fit_cl_block(block)
        assert converged
        np.testing.assert_allclose(theta, design.theta0, atol=0.15)
        assert abs(zeta[0] - 4.0) < 0.6
        assert abs(zeta[1] - 0.6) < 0.08

    def test_too_few_subjects_raises(self):
        data, _ = random_dataset(N=4, M=4, p=3, seed=15)
        with pytest.raises(SolverError, match="too small"):
            composite.fit_cl_block(one_block(data))
