import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsegp import (
    BlockDiagonal,
    Dense,
    DiagPlusLowRank,
    RngState,
    allocation_probe,
    cholesky,
    densify,
    gauss_hermite_nodes,
    standard_normal,
    structured_logdet,
    structured_solve,
    tri_solve,
)
from sparsegp.errors import (
    AsymmetricInput,
    DimensionMismatch,
    NonSquare,
    NotPositiveDefinite,
    ZeroDiagonal,
)
from sparsegp.numerics import default_jitter

from conftest import make_spd, random_lower


class TestCholesky:
    def test_identity(self):
        assert np.array_equal(cholesky(np.eye(2), jitter=0.0), np.eye(2))

    def test_hand_checked_2x2(self):
        a = np.array([[4.0, 2.0], [2.0, 3.0]])
        expected = np.array([[2.0, 0.0], [1.0, np.sqrt(2.0)]])
        np.testing.assert_allclose(cholesky(a, jitter=0.0), expected, atol=1e-14)

    def test_reconstructs_random_spd(self, rng):
        a = make_spd(rng, 5)
        l = cholesky(a, jitter=0.0)
        assert np.linalg.norm(l @ l.T - a) < 1e-10

    def test_refactorizing_product_recovers_factor(self, rng):
        l = random_lower(rng, 6)
        again = cholesky(l @ l.T, jitter=0.0)
        np.testing.assert_allclose(again, l, atol=1e-12)

    def test_jitter_added_relative_to_mean_diagonal(self):
        a = 4.0 * np.eye(3)
        l = cholesky(a, jitter=0.25)
        # + 0.25 * mean(diag) = +1 on the diagonal
        np.testing.assert_allclose(l @ l.T, a + np.eye(3), atol=1e-12)

    def test_retry_escalation_rescues_indefinite_input(self):
        a = np.diag([1.0, -1e-9])
        l = cholesky(a, jitter=1e-10)
        assert np.all(np.isfinite(l))

    def test_non_square_rejected(self):
        with pytest.raises(NonSquare):
            cholesky(np.ones((2, 3)), jitter=0.0)

    def test_asymmetric_rejected(self):
        with pytest.raises(AsymmetricInput):
            cholesky(np.array([[1.0, 0.5], [0.1, 1.0]]), jitter=0.0)

    def test_hopeless_matrix_fails_after_retries(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky(np.diag([1.0, -1e6]), jitter=1e-12)

    def test_default_jitter_env_override(self, monkeypatch):
        assert default_jitter() == 1e-6
        monkeypatch.setenv("SPARSEGP_JITTER", "1e-3")
        assert default_jitter() == 1e-3


class TestTriSolve:
    def test_identity_factor(self, rng):
        b = standard_normal(rng, (3, 2))
        np.testing.assert_array_equal(tri_solve(np.eye(3), b), b)

    def test_hand_checked_2x2(self):
        l = np.array([[2.0, 0.0], [1.0, 1.0]])
        b = np.array([[2.0], [2.0]])
        np.testing.assert_allclose(tri_solve(l, b), [[1.0], [1.0]])

    def test_round_trip(self, rng):
        l = random_lower(rng, 7)
        x = standard_normal(rng, (7, 3))
        np.testing.assert_allclose(tri_solve(l, l @ x), x, atol=1e-12)

    def test_transpose_round_trip(self, rng):
        l = random_lower(rng, 5)
        x = standard_normal(rng, (5, 2))
        np.testing.assert_allclose(tri_solve(l, l.T @ x, transpose=True), x, atol=1e-12)

    def test_zero_diagonal_rejected(self):
        with pytest.raises(ZeroDiagonal):
            tri_solve(np.diag([1.0, 0.0]), np.ones(2))

    def test_dim_mismatch_rejected(self):
        with pytest.raises(DimensionMismatch):
            tri_solve(np.eye(2), np.ones((3, 1)))


def _random_structured(rng, variant, dim=8):
    if variant == "dense":
        return Dense(make_spd(rng, dim))
    if variant == "block":
        return BlockDiagonal((make_spd(rng, 3), make_spd(rng, 5)))
    return DiagPlusLowRank(
        rng.generator.uniform(0.5, 2.0, dim), standard_normal(rng, (dim, 2))
    )


class TestStructuredSolve:
    def test_block_diagonal_of_identical_blocks(self):
        block = np.array([[2.0, 0.5], [0.5, 1.0]])
        k = BlockDiagonal((block,), repeats=(2,))
        x = structured_solve(k, np.eye(4))
        expected = np.kron(np.eye(2), np.linalg.inv(block))
        np.testing.assert_allclose(x, expected, atol=1e-12)

    def test_zero_rank_low_rank_is_elementwise_inverse(self, rng):
        d = rng.generator.uniform(0.5, 2.0, 4)
        k = DiagPlusLowRank(d, np.zeros((4, 0)))
        b = standard_normal(rng, (4, 2))
        np.testing.assert_allclose(structured_solve(k, b), b / d[:, None])

    @pytest.mark.parametrize("variant", ["dense", "block", "lowrank"])
    def test_matches_densified_solve(self, rng, variant):
        k = _random_structured(rng, variant)
        b = standard_normal(rng, (k.dim, 3))
        expected = np.linalg.solve(densify(k), b)
        np.testing.assert_allclose(structured_solve(k, b), expected, atol=1e-10)

    def test_vector_rhs_keeps_shape(self, rng):
        k = Dense(make_spd(rng, 4))
        b = standard_normal(rng, 4)
        assert structured_solve(k, b).shape == (4,)

    def test_rhs_dim_checked(self, rng):
        with pytest.raises(DimensionMismatch):
            structured_solve(Dense(np.eye(3)), np.ones((4, 1)))


class TestStructuredLogdet:
    def test_identity_is_zero(self):
        assert structured_logdet(Dense(np.eye(4))) == pytest.approx(0.0)

    def test_diagonal_two_by_two(self):
        assert structured_logdet(Dense(np.diag([2.0, 2.0]))) == pytest.approx(
            2.0 * np.log(2.0)
        )

    @pytest.mark.parametrize("variant", ["dense", "block", "lowrank"])
    def test_matches_densified_logdet(self, rng, variant):
        k = _random_structured(rng, variant)
        _, expected = np.linalg.slogdet(densify(k))
        assert structured_logdet(k) == pytest.approx(expected, abs=1e-10)

    def test_shared_block_counts_every_repeat(self, rng):
        block = make_spd(rng, 3)
        shared = BlockDiagonal((block,), repeats=(4,))
        _, expected = np.linalg.slogdet(densify(shared))
        assert structured_logdet(shared) == pytest.approx(expected, abs=1e-10)

    def test_indefinite_rejected(self):
        with pytest.raises(NotPositiveDefinite):
            structured_logdet(Dense(np.diag([1.0, -1e5])))


class TestGaussHermite:
    def test_single_node(self):
        x, w = gauss_hermite_nodes(1)
        np.testing.assert_allclose(x, [0.0])
        np.testing.assert_allclose(w, [1.0])

    def test_second_moment(self):
        x, w = gauss_hermite_nodes(20)
        assert w @ x**2 == pytest.approx(1.0, abs=1e-12)

    def test_fourth_moment(self):
        x, w = gauss_hermite_nodes(20)
        assert w @ x**4 == pytest.approx(3.0, abs=1e-10)

    def test_weights_sum_to_one(self):
        for n in (1, 5, 64, 200):
            _, w = gauss_hermite_nodes(n)
            assert w.sum() == pytest.approx(1.0, abs=1e-14)

    @pytest.mark.parametrize("n", [2, 3, 5, 8])
    def test_exact_for_low_degree_polynomials(self, n):
        # Gaussian moments: E[x^k] = (k-1)!! for even k, 0 for odd k.
        x, w = gauss_hermite_nodes(n)
        for degree in range(2 * n):
            if degree % 2 == 1:
                expected = 0.0
            else:
                expected = float(np.prod(np.arange(degree - 1, 0, -2))) if degree else 1.0
            assert w @ x**degree == pytest.approx(expected, rel=1e-10, abs=1e-10), degree

    def test_node_count_bounds(self):
        with pytest.raises(ValueError):
            gauss_hermite_nodes(0)
        with pytest.raises(ValueError):
            gauss_hermite_nodes(201)


class TestRng:
    def test_fixed_seed_reproduces_stream(self):
        a = standard_normal(RngState(42), (3, 4))
        b = standard_normal(RngState(42), (3, 4))
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = standard_normal(RngState(0), (8,))
        b = standard_normal(RngState(1), (8,))
        assert not np.allclose(a, b)

    def test_derived_streams_are_independent_but_reproducible(self):
        a = standard_normal(RngState(5).derive(3), (4,))
        b = standard_normal(RngState(5).derive(3), (4,))
        c = standard_normal(RngState(5).derive(4), (4,))
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    def test_large_sample_moments(self):
        draws = standard_normal(RngState(9), 10**6)
        assert abs(draws.mean()) < 5.0 / np.sqrt(10**6)
        assert abs(draws.var() - 1.0) < 5.0 * np.sqrt(2.0 / 10**6)


class TestAllocationProbe:
    def test_records_factorization_shapes(self):
        with allocation_probe() as shapes:
            cholesky(np.eye(3), jitter=0.0)
        assert (3, 3) in shapes

    def test_inactive_outside_context(self):
        with allocation_probe() as shapes:
            pass
        cholesky(np.eye(4), jitter=0.0)
        assert (4, 4) not in shapes


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10**6))
def test_cholesky_idempotent_on_random_factors(seed):
    l = random_lower(RngState(seed), 4)
    np.testing.assert_allclose(cholesky(l @ l.T, jitter=0.0), l, atol=1e-12)
