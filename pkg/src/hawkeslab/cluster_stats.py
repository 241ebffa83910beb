"""Exact cluster-size laws for subcritical univariate branching.

A cluster started by one immigrant is a Galton-Watson tree whose offspring
count is mixed Poisson with mean ``rho * B``.  Closed forms exist for
deterministic marks (Borel law) and gamma marks (negative binomial offspring);
any offspring law can be handled with the hitting-time identity
``P(size = n) = P(S_n = n - 1) / n`` where ``S_n`` sums n offspring counts.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from .errors import RhoOutOfRangeError, SubcriticalityError, TruncationTooSmallError, UnsupportedMarkKindError
from .model import MarkDistribution


def _as_n(n):
    n = np.asarray(n)
    if np.any(n < 1) or np.any(np.asarray(n, dtype=float) != np.floor(n)):
        raise ValueError("cluster sizes are integers >= 1")
    return n.astype(np.int64)


def borel_pmf(n, rho: float):
    """Borel law ``exp(-rho n) (rho n)**(n-1) / n!``, evaluated in log space."""
    if not (0.0 < rho < 1.0):
        raise RhoOutOfRangeError(f"rho = {rho} must lie in (0, 1)")
    n = _as_n(n)
    nf = n.astype(float)
    logp = -rho * nf + (nf - 1.0) * np.log(rho * nf) - gammaln(nf + 1.0)
    return np.exp(logp)


def gamma_cluster_pmf(n, alpha: float, c: float, rho: float):
    """Cluster-size law for Gamma(alpha, rate c) marks and kernel mass rho.

    ``(1/n) C((alpha+1)n - 2, n - 1) (c/(c+rho))**(alpha n) (rho/(c+rho))**(n-1)``
    with the binomial coefficient taken through gamma functions.
    """
    if alpha <= 0 or c <= 0 or rho <= 0:
        raise ValueError("alpha, c and rho must be positive")
    # the critical case (mean one, e.g. the Catalan law) still has finite clusters a.s.
    if rho * alpha / c > 1.0 + 1e-12:
        raise SubcriticalityError(f"mean offspring rho*alpha/c = {rho * alpha / c:.4g} > 1")
    n = _as_n(n)
    nf = n.astype(float)
    top = (alpha + 1.0) * nf - 2.0
    # C(top, n-1) = Gamma(top+1) / (Gamma(n) Gamma(top-n+2)); top-n+2 = alpha n > 0
    log_binom = gammaln(top + 1.0) - gammaln(nf) - gammaln(alpha * nf)
    logp = (log_binom - np.log(nf) + alpha * nf * math.log(c / (c + rho))
            + (nf - 1.0) * math.log(rho / (c + rho)))
    return np.exp(logp)


def offspring_pmf(mark: MarkDistribution, rho: float, K: int) -> np.ndarray:
    """Offspring probabilities ``P(k)`` for ``k = 0..K`` of a Poisson(rho B) count."""
    k = np.arange(K + 1, dtype=float)
    if mark.kind == "deterministic":
        m = rho * mark.value
        return np.exp(-m + k * math.log(m) - gammaln(k + 1.0)) if m > 0 else (k == 0).astype(float)
    if mark.kind == "exponential":
        p = mark.rate / (mark.rate + rho)
        return p * (1.0 - p) ** k
    if mark.kind == "gamma":
        a = mark.shape
        p = mark.rate / (mark.rate + rho)
        return np.exp(gammaln(k + a) - gammaln(a) - gammaln(k + 1.0) + a * math.log(p) + k * math.log1p(-p))
    raise UnsupportedMarkKindError(f"no closed offspring law for {mark.kind} marks")


def hitting_time_pmf(offspring, n, K=None) -> np.ndarray:
    """``P(size = n) = P(S_n = n - 1) / n`` with ``S_n`` the n-fold offspring sum.

    ``offspring`` is the pmf on ``0..K``; ``K`` defaults to ``4 * max(n)``.
    Only ``K >= n - 1`` is needed for exactness since larger counts cannot
    contribute to ``S_n = n - 1``.
    """
    n_arr = _as_n(n)
    scalar = n_arr.ndim == 0
    n_arr = np.atleast_1d(n_arr)
    offspring = np.asarray(offspring, dtype=float)
    if K is None:
        K = len(offspring) - 1
    if K < int(n_arr.max()) - 1 or len(offspring) < int(n_arr.max()):
        raise TruncationTooSmallError(f"truncation K = {K} < n - 1 = {int(n_arr.max()) - 1}")
    nmax = int(n_arr.max())
    base = offspring[:nmax]  # counts above n-1 are irrelevant
    out = np.empty(len(n_arr))
    conv = np.array([1.0])
    have = 0
    for pos in np.argsort(n_arr):
        target = int(n_arr[pos])
        while have < target:
            conv = np.convolve(conv, base)[:nmax]
            have += 1
        out[pos] = conv[target - 1] / target if target - 1 < len(conv) else 0.0
    return out[0] if scalar else out


def cluster_size_pmf(mark: MarkDistribution, rho: float, n) -> np.ndarray:
    """Cluster-size pmf via the closed form when one exists, else the hitting-time identity."""
    if mark.kind == "deterministic":
        return borel_pmf(n, rho * mark.value)
    if mark.kind == "exponential":
        return gamma_cluster_pmf(n, 1.0, mark.rate, rho)
    if mark.kind == "gamma":
        return gamma_cluster_pmf(n, mark.shape, mark.rate, rho)
    raise UnsupportedMarkKindError(f"no cluster-size law for {mark.kind} marks")
