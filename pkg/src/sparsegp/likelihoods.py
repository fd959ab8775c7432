"""Observation models and expected log-likelihoods under the posterior.

``variational_expectations`` integrates log p(y | f) against the marginal
posterior N(f; Fmu, Fvar) per data point.  Factorized likelihoods take
per-output variances Fvar of shape [N, P]; the correlated Gaussian takes
full per-point covariances [N, P, P].  Closed forms are used where they
exist; otherwise evaluation falls back to one-dimensional Gauss-Hermite
quadrature or Monte Carlo, selected by the likelihood's strategy.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp, ndtr

from .errors import EmptySubset, ShapeMismatch, UnsupportedCombination
from .numerics import (
    RngState,
    cholesky,
    gauss_hermite_nodes,
    standard_normal,
    tri_solve,
)

DEFAULT_QUADRATURE_NODES = 20


class ClosedForm:
    """Use the analytic expectation; errors if the likelihood has none."""


class GaussHermite:
    """One-dimensional quadrature per output dimension."""

    def __init__(self, num_nodes: int = DEFAULT_QUADRATURE_NODES):
        self.num_nodes = int(num_nodes)


class MonteCarlo:
    """Unbiased sampling estimate with a derived, reproducible stream."""

    def __init__(self, num_samples: int, rng: RngState):
        self.num_samples = int(num_samples)
        self.rng = rng


class Likelihood:
    requires_full_output_cov = False

    def __init__(self, strategy=None):
        self.strategy = strategy if strategy is not None else self.default_strategy()

    def default_strategy(self):
        return ClosedForm()

    def log_density(self, f, y):
        """Pointwise log p(y | f), broadcasting elementwise."""
        raise NotImplementedError

    def closed_form_expectations(self, fmu, fvar, y):
        """Analytic E[log p(y|f)] summed over outputs, or None."""
        return None


def _as_rows(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ShapeMismatch(f"{name} must be [N, P], got shape {a.shape}")
    return a


class Gaussian(Likelihood):
    def __init__(self, variance: float = 1.0, strategy=None):
        variance = float(variance)
        if variance <= 0:
            raise ValueError("noise variance must be positive")
        self.variance = variance
        super().__init__(strategy)

    def log_density(self, f, y):
        return -0.5 * np.log(2.0 * np.pi * self.variance) - (y - f) ** 2 / (
            2.0 * self.variance
        )

    def closed_form_expectations(self, fmu, fvar, y):
        per_output = (
            -0.5 * np.log(2.0 * np.pi * self.variance)
            - ((y - fmu) ** 2 + fvar) / (2.0 * self.variance)
        )
        return per_output.sum(axis=1)

    def predict_moments(self, fmu, fvar):
        return fmu, fvar + self.variance

    def predictive_log_density(self, fmu, fvar, y):
        var = fvar + self.variance
        return (-0.5 * np.log(2.0 * np.pi * var) - (y - fmu) ** 2 / (2.0 * var)).sum(
            axis=1
        )


class CorrelatedGaussian(Likelihood):
    """Gaussian observation noise correlated across the P outputs."""

    requires_full_output_cov = True

    def __init__(self, cov, strategy=None):
        cov = np.asarray(cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ShapeMismatch(f"noise covariance must be [P, P], got {cov.shape}")
        self.cov = cov
        self._chol = cholesky(cov, jitter=0.0)
        super().__init__(strategy)

    @property
    def num_outputs(self) -> int:
        return self.cov.shape[0]

    def log_density(self, f, y):
        diff = np.asarray(y, dtype=float) - np.asarray(f, dtype=float)
        alpha = tri_solve(self._chol, diff.T)
        logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        p = self.cov.shape[0]
        return -0.5 * (p * np.log(2.0 * np.pi) + logdet + np.sum(alpha * alpha, axis=0))

    def _precision(self) -> np.ndarray:
        eye = np.eye(self.cov.shape[0])
        return tri_solve(self._chol, tri_solve(self._chol, eye), transpose=True)

    def closed_form_expectations(self, fmu, fvar, y):
        # -1/2 log|2 pi S| - 1/2 (y-mu)ᵀS⁻¹(y-mu) - 1/2 Tr(S⁻¹ V_n)
        diff = y - fmu
        alpha = tri_solve(self._chol, diff.T)  # [P, N]
        p = self.cov.shape[0]
        logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        traces = np.einsum("pq,npq->n", self._precision(), fvar)
        quad = np.sum(alpha * alpha, axis=0)
        return -0.5 * (p * np.log(2.0 * np.pi) + logdet + quad + traces)

    def predict_moments(self, fmu, fvar):
        if fvar.ndim != 3:
            raise ShapeMismatch("correlated noise needs [N, P, P] covariances")
        return fmu, fvar + self.cov[None, :, :]

    def predictive_log_density(self, fmu, fvar, y):
        out = np.empty(fmu.shape[0])
        p = self.cov.shape[0]
        for n in range(fmu.shape[0]):
            total = fvar[n] + self.cov
            l = cholesky(total, jitter=0.0)
            alpha = tri_solve(l, y[n] - fmu[n])
            out[n] = -0.5 * (
                p * np.log(2.0 * np.pi)
                + 2.0 * np.sum(np.log(np.diag(l)))
                + alpha @ alpha
            )
        return out


class Bernoulli(Likelihood):
    """Binary observations in {0, 1} through a probit link."""

    def default_strategy(self):
        return GaussHermite()

    def log_density(self, f, y):
        sign = 2.0 * np.asarray(y, dtype=float) - 1.0
        return log_ndtr(sign * np.asarray(f, dtype=float))

    def predict_moments(self, fmu, fvar):
        prob = ndtr(fmu / np.sqrt(1.0 + fvar))
        return prob, prob * (1.0 - prob)

    def predictive_log_density(self, fmu, fvar, y):
        prob, _ = self.predict_moments(fmu, fvar)
        return np.log(np.where(y > 0.5, prob, 1.0 - prob)).sum(axis=1)


class Poisson(Likelihood):
    """Count observations with an exponential link, rate = exp(f)."""

    def log_density(self, f, y):
        f = np.asarray(f, dtype=float)
        y = np.asarray(y, dtype=float)
        return y * f - np.exp(f) - gammaln(y + 1.0)

    def closed_form_expectations(self, fmu, fvar, y):
        per_output = y * fmu - np.exp(fmu + 0.5 * fvar) - gammaln(y + 1.0)
        return per_output.sum(axis=1)

    def predict_moments(self, fmu, fvar):
        mean = np.exp(fmu + 0.5 * fvar)
        var = mean + (np.exp(fvar) - 1.0) * np.exp(2.0 * fmu + fvar)
        return mean, var

    def predictive_log_density(self, fmu, fvar, y):
        nodes, weights = gauss_hermite_nodes(DEFAULT_QUADRATURE_NODES)
        f = fmu[..., None] + np.sqrt(fvar)[..., None] * nodes
        logp = self.log_density(f, y[..., None])
        return logsumexp(logp + np.log(weights), axis=-1).sum(axis=1)


# ---------------------------------------------------------------------------
# Operations


def _validate_factorized(lik, fmu, fvar, y):
    fmu = _as_rows(fmu, "Fmu")
    y = _as_rows(y, "Y")
    fvar = np.asarray(fvar, dtype=float)
    if fvar.ndim == 1:
        fvar = fvar[:, None]
    if fvar.ndim == 3:
        raise ShapeMismatch(
            f"{type(lik).__name__} factorizes over outputs and needs [N, P] "
            "variances, not per-point covariance matrices"
        )
    if fmu.shape != fvar.shape or fmu.shape != y.shape:
        raise ShapeMismatch(
            f"Fmu {fmu.shape}, Fvar {fvar.shape} and Y {y.shape} must agree"
        )
    return fmu, fvar, y


def _quadrature_expectations(lik, fmu, fvar, y, num_nodes):
    nodes, weights = gauss_hermite_nodes(num_nodes)
    f = fmu[..., None] + np.sqrt(fvar)[..., None] * nodes  # [N, P, Q]
    values = lik.log_density(f, y[..., None])
    return (values @ weights).sum(axis=1)


def variational_expectations(lik: Likelihood, fmu, fvar, y) -> np.ndarray:
    """E[log p(y_n | f_n)] under N(f_n; Fmu_n, Fvar_n), one value per point."""
    if isinstance(lik, CorrelatedGaussian):
        fmu = _as_rows(fmu, "Fmu")
        y = _as_rows(y, "Y")
        fvar = np.asarray(fvar, dtype=float)
        p = lik.num_outputs
        if fvar.shape != (fmu.shape[0], p, p):
            raise ShapeMismatch(
                f"correlated Gaussian needs [N, {p}, {p}] covariances, "
                f"got {fvar.shape}"
            )
        if not isinstance(lik.strategy, ClosedForm):
            raise UnsupportedCombination(
                "correlated output covariances cannot use a factorized "
                "quadrature or sampling strategy"
            )
        return lik.closed_form_expectations(fmu, fvar, y)

    fmu, fvar, y = _validate_factorized(lik, fmu, fvar, y)
    strategy = lik.strategy
    if isinstance(strategy, ClosedForm):
        closed = lik.closed_form_expectations(fmu, fvar, y)
        if closed is None:
            raise UnsupportedCombination(
                f"{type(lik).__name__} has no closed-form expectation; "
                "use GaussHermite or MonteCarlo"
            )
        return closed
    if isinstance(strategy, GaussHermite):
        return _quadrature_expectations(lik, fmu, fvar, y, strategy.num_nodes)
    if isinstance(strategy, MonteCarlo):
        values, _ = variational_expectations_mc(
            lik, fmu, fvar, y, strategy.num_samples, strategy.rng
        )
        return values
    raise UnsupportedCombination(f"unknown strategy {type(strategy).__name__}")


def variational_expectations_mc(
    lik: Likelihood, fmu, fvar, y, num_samples: int, rng: RngState
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo estimate with its standard error, per data point."""
    if isinstance(lik, CorrelatedGaussian):
        raise UnsupportedCombination(
            "sampling strategy is defined for factorized likelihoods only"
        )
    fmu, fvar, y = _validate_factorized(lik, fmu, fvar, y)
    eps = standard_normal(rng, (num_samples,) + fmu.shape)
    f = fmu[None] + np.sqrt(fvar)[None] * eps
    values = lik.log_density(f, y[None]).sum(axis=2)  # [S, N]
    mean = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / np.sqrt(num_samples)
    return mean, se


def marginalize_outputs(lik: Likelihood, observed):
    """Restrict the likelihood to a subset of observed output indices."""
    observed = tuple(int(i) for i in observed)
    if not observed:
        raise EmptySubset("at least one output must be observed")
    if isinstance(lik, CorrelatedGaussian):
        idx = np.asarray(observed)
        sub = lik.cov[np.ix_(idx, idx)]
        if len(observed) == 1:
            return Gaussian(float(sub[0, 0]))
        return CorrelatedGaussian(sub)
    # Factorized likelihoods marginalize trivially.
    return lik


def predict_observation_moments(lik: Likelihood, fmu, fvar):
    """Mean and variance of y given the posterior moments of f."""
    fmu = _as_rows(fmu, "Fmu")
    fvar = np.asarray(fvar, dtype=float)
    if fvar.ndim == 1:
        fvar = fvar[:, None]
    return lik.predict_moments(fmu, fvar)


def predictive_log_density(lik: Likelihood, fmu, fvar, y) -> np.ndarray:
    """log E[p(y_n | f_n)] under the posterior marginal, per data point."""
    fmu = _as_rows(fmu, "Fmu")
    y = _as_rows(y, "Y")
    fvar = np.asarray(fvar, dtype=float)
    if fvar.ndim == 1:
        fvar = fvar[:, None]
    return lik.predictive_log_density(fmu, fvar, y)
