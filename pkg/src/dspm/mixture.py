"""Two-component Laplace mixture: closed-form density, CDF, inverse CDF,
sampling, and the equal-mass perturbation binning.

The scale convention is p(y) = 1/(sqrt(2) sigma) exp(-sqrt(2)|y - mu|/sigma),
i.e. sigma is sqrt(2) times the classical Laplace diversity b. Both mixture
components share the mean; the narrow component (fixed sigma1) models
accurate predictions and the wide one (sigma2 > sigma1) models outliers.

Everything here is plain float64 numpy; the differentiable twins used in
training live with the matcher.
"""

from __future__ import annotations

import math

import numpy as np

_SQRT2 = math.sqrt(2.0)


def laplace_pdf(y, mu, sigma):
    y, mu, sigma = (np.asarray(v, dtype=np.float64) for v in (y, mu, sigma))
    return np.exp(-_SQRT2 * np.abs(y - mu) / sigma) / (_SQRT2 * sigma)


def laplace_cdf(y, mu, sigma):
    y, mu, sigma = (np.asarray(v, dtype=np.float64) for v in (y, mu, sigma))
    z = _SQRT2 * (y - mu) / sigma
    return np.where(z < 0, 0.5 * np.exp(z), 1.0 - 0.5 * np.exp(-z))


def laplace_inv_cdf(q, mu, sigma):
    """Quantile function; q strictly inside (0, 1)."""
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0.0) or np.any(q >= 1.0):
        raise ValueError("cumulative probability must lie strictly in (0, 1)")
    mu, sigma = np.asarray(mu, dtype=np.float64), np.asarray(sigma, dtype=np.float64)
    lo = mu + sigma / _SQRT2 * np.log(2.0 * q)
    hi = mu - sigma / _SQRT2 * np.log(2.0 * (1.0 - q))
    return np.where(q < 0.5, lo, hi)


def mixture_pdf(y, mu, alpha1, alpha2, sigma1, sigma2):
    return alpha1 * laplace_pdf(y, mu, sigma1) + alpha2 * laplace_pdf(y, mu, sigma2)


def mixture_cdf(y, mu, alpha1, alpha2, sigma1, sigma2):
    return alpha1 * laplace_cdf(y, mu, sigma1) + alpha2 * laplace_cdf(y, mu, sigma2)


def mixture_log_pdf(y, mu, alpha1, alpha2, sigma1, sigma2):
    a = np.log(alpha1) - np.log(_SQRT2 * sigma1) - _SQRT2 * np.abs(y - mu) / sigma1
    b = np.log(alpha2) - np.log(_SQRT2 * sigma2) - _SQRT2 * np.abs(y - mu) / sigma2
    return np.logaddexp(a, b)


def interval_mass(r, mu, alpha1, alpha2, sigma1, sigma2, squared=False):
    """P(|y - mu| < r) under the mixture.

    The exact mass is alpha1(1 - e^{-sqrt2 r/sigma1}) + alpha2(1 - ...);
    squared=True squares each bracket instead (a non-probabilistic variant
    kept for comparison experiments).
    """
    b1 = 1.0 - np.exp(-_SQRT2 * np.asarray(r, dtype=np.float64) / np.asarray(sigma1, dtype=np.float64))
    b2 = 1.0 - np.exp(-_SQRT2 * np.asarray(r, dtype=np.float64) / np.asarray(sigma2, dtype=np.float64))
    if squared:
        b1, b2 = b1 * b1, b2 * b2
    return alpha1 * b1 + alpha2 * b2


def sample_mixture(n, mu, alpha1, alpha2, sigma1, sigma2, rng):
    """Draw n samples (component choice, then inverse-CDF transform)."""
    pick2 = rng.random(n) < alpha2
    sigma = np.where(pick2, sigma2, sigma1)
    q = rng.uniform(1e-12, 1.0 - 1e-12, n)
    return laplace_inv_cdf(q, mu, sigma)


def perturbation_coefficients(eps, m2):
    """Bin-midpoint offsets for equal-mass binning of [mu - eps*sigma,
    mu + eps*sigma] under Laplace(mu, sigma).

    The covered mass P~ = 1 - e^{-sqrt2 eps} does not depend on sigma, so
    the j-th candidate is mu + sigma * c_j with sigma-free coefficients
    c_j = (phi(q_{j-1}) + phi(q_j))/2, phi the standard quantile function
    and q_j = j/m2 * P~ + (1 - P~)/2. Returns (c, covered_mass).
    """
    if eps <= 0 or m2 < 1:
        raise ValueError("need eps > 0 and m2 >= 1")
    p_cov = 1.0 - math.exp(-_SQRT2 * eps)
    q = (np.arange(m2 + 1) / m2) * p_cov + (1.0 - p_cov) / 2.0
    edges = laplace_inv_cdf(q, 0.0, 1.0)
    return 0.5 * (edges[:-1] + edges[1:]), p_cov


def perturb_candidates(mu, sigma, eps, m2):
    """Numpy reference of the uncertainty-scaled candidate generator."""
    c, _ = perturbation_coefficients(eps, m2)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return mu[None, ...] + sigma[None, ...] * c.reshape((m2,) + (1,) * mu.ndim)
