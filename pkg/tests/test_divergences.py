import numpy as np
import pytest

from sparsegp import (
    BlockDiagonal,
    Dense,
    InducingPoints,
    Matern32,
    RngState,
    SeparateIndependent,
    SharedIndependentInducingVariables,
    SquaredExponential,
    VariationalGaussian,
    densify,
    gauss_kl,
    kuu,
    prior_kl,
    standard_normal,
)
from sparsegp.errors import ShapeMismatch

from conftest import make_spd, random_lower


def mc_kl_oracle(mu, s, kuu_dense, num_samples, seed):
    """Monte Carlo estimate of E_q[log q(u) - log p(u)] with its SE."""
    rng = np.random.default_rng(seed)
    l_s = np.linalg.cholesky(s)
    draws = mu + (l_s @ rng.standard_normal((mu.shape[0], num_samples))).T

    def logpdf(x, mean, cov):
        d = x - mean
        chol = np.linalg.cholesky(cov)
        alpha = np.linalg.solve(chol, d.T)
        return (
            -0.5 * mu.shape[0] * np.log(2 * np.pi)
            - np.sum(np.log(np.diag(chol)))
            - 0.5 * np.sum(alpha**2, axis=0)
        )

    diff = logpdf(draws, mu, s) - logpdf(draws, 0.0, kuu_dense)
    return diff.mean(), diff.std(ddof=1) / np.sqrt(num_samples)


class TestGaussKl:
    def test_zero_when_q_equals_prior(self, rng):
        k = make_spd(rng, 4)
        q = VariationalGaussian(np.zeros(4), np.linalg.cholesky(k), whiten=False)
        assert gauss_kl(q, Dense(k)) == pytest.approx(0.0, abs=1e-10)

    def test_zero_for_whitened_standard_normal(self):
        q = VariationalGaussian(np.zeros(5), np.eye(5), whiten=True)
        assert gauss_kl(q) == pytest.approx(0.0, abs=1e-12)

    def test_matches_monte_carlo_oracle(self, rng):
        k = make_spd(rng, 2)
        mu = standard_normal(rng, 2)
        sqrt = random_lower(rng, 2)
        q = VariationalGaussian(mu, sqrt, whiten=False)
        exact = gauss_kl(q, Dense(k))
        estimate, se = mc_kl_oracle(mu, sqrt @ sqrt.T, k, 10**6, seed=0)
        assert abs(exact - estimate) < 3.0 * se

    def test_whitened_matches_monte_carlo_oracle(self, rng):
        mu = standard_normal(rng, 2)
        sqrt = random_lower(rng, 2)
        q = VariationalGaussian(mu, sqrt, whiten=True)
        exact = gauss_kl(q)
        estimate, se = mc_kl_oracle(mu, sqrt @ sqrt.T, np.eye(2), 10**6, seed=1)
        assert abs(exact - estimate) < 3.0 * se

    def test_nonnegative_on_random_instances(self):
        for seed in range(100):
            rng = RngState(seed)
            k = make_spd(rng, 3)
            q = VariationalGaussian(
                standard_normal(rng, 3), random_lower(rng, 3), whiten=False
            )
            assert gauss_kl(q, Dense(k)) >= -1e-10

    def test_whitening_invariance(self):
        for seed in range(50):
            rng = RngState(seed)
            k = make_spd(rng, 4)
            luu = np.linalg.cholesky(k)
            m_v = standard_normal(rng, 4)
            s_v = random_lower(rng, 4)
            white = gauss_kl(VariationalGaussian(m_v, s_v, whiten=True))
            plain = gauss_kl(
                VariationalGaussian(
                    luu @ m_v,
                    np.linalg.cholesky(luu @ s_v @ s_v.T @ luu.T),
                    whiten=False,
                ),
                Dense(k),
            )
            assert white == pytest.approx(plain, abs=1e-9)

    def test_block_additivity_is_exact(self, rng):
        blocks = (make_spd(rng, 3), make_spd(rng, 2))
        sqrts = (random_lower(rng, 3), random_lower(rng, 2))
        mu = standard_normal(rng, 5)
        q = VariationalGaussian(mu, sqrts, whiten=False)
        total = gauss_kl(q, BlockDiagonal(blocks))
        parts = sum(
            gauss_kl(
                VariationalGaussian(mu_part, sqrt, whiten=False), Dense(block)
            )
            for mu_part, sqrt, block in zip((mu[:3], mu[3:]), sqrts, blocks)
        )
        assert total == parts  # bitwise: same per-block computations

    def test_block_path_matches_densified_dense_path(self, rng):
        blocks = (make_spd(rng, 3), make_spd(rng, 3))
        sqrts = (random_lower(rng, 3), random_lower(rng, 3))
        mu = standard_normal(rng, 6)
        block_value = gauss_kl(
            VariationalGaussian(mu, sqrts, whiten=False), BlockDiagonal(blocks)
        )
        dense_sqrt = np.zeros((6, 6))
        dense_sqrt[:3, :3] = sqrts[0]
        dense_sqrt[3:, 3:] = sqrts[1]
        dense_value = gauss_kl(
            VariationalGaussian(mu, dense_sqrt, whiten=False),
            Dense(densify(BlockDiagonal(blocks))),
        )
        assert block_value == pytest.approx(dense_value, abs=1e-9)

    def test_unwhitened_needs_kuu(self):
        q = VariationalGaussian(np.zeros(2), np.eye(2), whiten=False)
        with pytest.raises(ShapeMismatch):
            gauss_kl(q, None)

    def test_rectangular_factor_rejected(self):
        q = VariationalGaussian(np.zeros(3), np.ones((3, 1)), whiten=True)
        with pytest.raises(ShapeMismatch):
            gauss_kl(q)


class TestPriorKl:
    def test_whitened_is_kernel_independent(self, rng):
        z = standard_normal(rng, (4, 1))
        iv = InducingPoints(z)
        mu = standard_normal(rng, 4)
        sqrt = random_lower(rng, 4)
        q = VariationalGaussian(mu, sqrt, whiten=True)
        a = prior_kl(iv, SquaredExponential(1.0, 0.5), q)
        b = prior_kl(iv, Matern32(7.0, 2.0), q)
        assert a == b

    def test_unwhitened_uses_dispatched_kuu(self, rng):
        z = standard_normal(rng, (3, 1))
        iv = SharedIndependentInducingVariables(InducingPoints(z))
        kernel = SeparateIndependent([SquaredExponential(), Matern32()])
        mu = standard_normal(rng, 6)
        sqrts = (random_lower(rng, 3), random_lower(rng, 3))
        q = VariationalGaussian(mu, sqrts, whiten=False)
        via_dispatch = prior_kl(iv, kernel, q, jitter=1e-8)
        direct = gauss_kl(q, kuu(iv, kernel, 1e-8))
        assert via_dispatch == direct

    def test_imc_shared_block_kl_matches_densified(self, rng):
        from sparsegp import IntrinsicCoregionalization

        z = standard_normal(rng, (3, 1))
        iv = SharedIndependentInducingVariables(InducingPoints(z))
        kernel = IntrinsicCoregionalization(
            SquaredExponential(1.0, 0.8), standard_normal(rng.derive(1), (4, 2))
        )
        mu = standard_normal(rng.derive(2), 6)
        sqrts = tuple(random_lower(rng.derive(3 + i), 3) for i in range(2))
        q = VariationalGaussian(mu, sqrts, whiten=False)
        block_value = prior_kl(iv, kernel, q, jitter=1e-8)

        kuu_dense = densify(kuu(iv, kernel, 1e-8))
        dense_sqrt = np.zeros((6, 6))
        dense_sqrt[:3, :3], dense_sqrt[3:, 3:] = sqrts
        dense_value = gauss_kl(
            VariationalGaussian(mu, dense_sqrt, whiten=False), Dense(kuu_dense)
        )
        assert block_value == pytest.approx(dense_value, abs=1e-9)

    def test_zero_at_prior_through_dispatch(self, rng):
        z = standard_normal(rng, (4, 1))
        iv = InducingPoints(z)
        kernel = SquaredExponential(1.0, 0.8)
        k = densify(kuu(iv, kernel, 1e-8))
        q = VariationalGaussian(np.zeros(4), np.linalg.cholesky(k), whiten=False)
        assert prior_kl(iv, kernel, q, jitter=1e-8) == pytest.approx(0.0, abs=1e-10)
