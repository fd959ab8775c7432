"""KL divergence between the variational posterior and the prior.

The unwhitened divergence for q(u) = N(m, S) against p(u) = N(0, Kuu) is

    KL = -1/2 log|S| - M/2 + 1/2 log|Kuu| + 1/2 Tr(Kuu⁻¹ (S + m mᵀ)),

with log|S| read off the factor diagonal.  Whitening removes Kuu entirely:

    KL = -1/2 log|S_v| - M/2 + 1/2 m_vᵀ m_v + 1/2 Tr(S_v).

Block-diagonal Kuu with per-latent q factors decomposes into a sum of
independent per-block divergences.
"""

from __future__ import annotations

import numpy as np

from .covariances import kuu
from .errors import ShapeMismatch
from .numerics import (
    BlockDiagonal,
    Dense,
    StructuredPSD,
    as_structured,
    block_cholesky_factors,
    cholesky,
    densify,
    tri_solve,
)


def _require_square_factor(sqrt: np.ndarray, m: int) -> np.ndarray:
    if sqrt is None:
        raise ShapeMismatch("KL needs a full-rank covariance factor, got none")
    if sqrt.shape != (m, m):
        raise ShapeMismatch(
            f"KL needs a square [{m}, {m}] factor, got shape {sqrt.shape}"
        )
    return sqrt


def _whitened_block_kl(mu: np.ndarray, sqrt: np.ndarray) -> float:
    m = mu.shape[0]
    sqrt = _require_square_factor(sqrt, m)
    logdet_s = 2.0 * float(np.sum(np.log(np.abs(np.diag(sqrt)))))
    return 0.5 * (
        -logdet_s - m + float(mu @ mu) + float(np.sum(sqrt * sqrt))
    )


def _unwhitened_block_kl(mu: np.ndarray, sqrt: np.ndarray, luu: np.ndarray) -> float:
    m = mu.shape[0]
    sqrt = _require_square_factor(sqrt, m)
    logdet_s = 2.0 * float(np.sum(np.log(np.abs(np.diag(sqrt)))))
    logdet_k = 2.0 * float(np.sum(np.log(np.diag(luu))))
    alpha = tri_solve(luu, mu)  # Kuu⁻¹ enters only through triangular solves
    beta = tri_solve(luu, sqrt)
    trace = float(np.sum(beta * beta))
    return 0.5 * (-logdet_s - m + logdet_k + trace + float(alpha @ alpha))


def gauss_kl(q, kuu_matrix: StructuredPSD | None = None) -> float:
    """KL(q(u) || p(u)); pass ``kuu_matrix=None`` for whitened parameters."""
    mu = q.mean_vector
    if q.whiten:
        if q.is_block:
            total, offset = 0.0, 0
            for block in q.q_sqrt:
                m = block.shape[0]
                total += _whitened_block_kl(mu[offset : offset + m], block)
                offset += m
            if offset != mu.shape[0]:
                raise ShapeMismatch("q_sqrt blocks do not cover q_mu")
            return total
        return _whitened_block_kl(mu, q.q_sqrt)

    if kuu_matrix is None:
        raise ShapeMismatch("unwhitened KL needs the inducing covariance")
    kuu_matrix = as_structured(kuu_matrix)

    if q.is_block:
        if not isinstance(kuu_matrix, BlockDiagonal):
            raise ShapeMismatch(
                "per-latent q_sqrt blocks need a block-diagonal inducing covariance"
            )
        factors = block_cholesky_factors(kuu_matrix)
        if len(factors) != len(q.q_sqrt):
            raise ShapeMismatch(
                f"{len(q.q_sqrt)} q_sqrt blocks for {len(factors)} covariance blocks"
            )
        total, offset = 0.0, 0
        for luu, block in zip(factors, q.q_sqrt):
            m = luu.shape[0]
            total += _unwhitened_block_kl(mu[offset : offset + m], block, luu)
            offset += m
        return total

    dense = kuu_matrix.matrix if isinstance(kuu_matrix, Dense) else densify(kuu_matrix)
    luu = cholesky(dense, jitter=0.0)
    return _unwhitened_block_kl(mu, q.q_sqrt, luu)


def prior_kl(iv, kernel, q, jitter: float | None = None) -> float:
    """KL against the prior, resolving Kuu by dispatch when it is needed."""
    if q.whiten:
        return gauss_kl(q, None)
    return gauss_kl(q, kuu(iv, kernel, jitter))
