"""Observation log-likelihoods with analytic first and second derivatives in
the linear predictor."""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

__all__ = ["poisson_loglik", "zip_loglik", "gaussian_loglik", "make_likelihood"]


class LikelihoodError(ValueError):
    pass


def poisson_loglik(y, eta, log_e):
    """Poisson log likelihood of counts with mean E * exp(eta).

    Returns (value, d/deta, d2/deta2); all arguments broadcast elementwise.
    """
    y = np.asarray(y, dtype=float)
    mu = np.exp(np.asarray(log_e, dtype=float) + np.asarray(eta, dtype=float))
    value = y * (log_e + eta) - mu - gammaln(y + 1.0)
    return value, y - mu, -mu


def zip_loglik(y, eta, log_e, pi):
    """Zero-inflated Poisson log likelihood: a point mass at zero with
    probability pi mixed with Poisson(E * exp(eta)).

    Returns (value, d/deta, d2/deta2).  pi = 1 with a positive count is an
    impossible observation and is rejected.
    """
    if not (0.0 <= pi <= 1.0):
        raise LikelihoodError(f"zero probability pi={pi} outside [0, 1]")
    scalar = np.isscalar(y) and np.isscalar(eta) and np.isscalar(log_e)
    y, eta, log_e = np.broadcast_arrays(
        np.atleast_1d(np.asarray(y, dtype=float)),
        np.atleast_1d(np.asarray(eta, dtype=float)),
        np.atleast_1d(np.asarray(log_e, dtype=float)),
    )
    if pi == 1.0 and np.any(y > 0):
        raise LikelihoodError("impossible observation: pi = 1 with positive count")

    mu = np.exp(log_e + eta)
    value = np.empty_like(mu)
    grad = np.empty_like(mu)
    hess = np.empty_like(mu)

    zero = y == 0
    pos = ~zero
    if np.any(pos):
        v, g, h = poisson_loglik(y[pos], eta[pos], log_e[pos])
        value[pos] = np.log1p(-pi) + v
        grad[pos] = g
        hess[pos] = h
    if np.any(zero):
        mz = mu[zero]
        if pi == 0.0:
            value[zero] = -mz
            grad[zero] = -mz
            hess[zero] = -mz
        else:
            # ln(pi + (1-pi) e^{-mu}), computed in log space for stability
            log_p0 = np.logaddexp(np.log(pi), np.log1p(-pi) - mz)
            g = mz * np.exp(np.log1p(-pi) - mz - log_p0)  # (1-pi) mu e^{-mu} / p0
            value[zero] = log_p0
            grad[zero] = -g
            hess[zero] = g * (mz - 1.0) - g * g
    if scalar:
        return float(value[0]), float(grad[0]), float(hess[0])
    return value, grad, hess


def gaussian_loglik(y, eta, log_e, precision):
    """Gaussian log likelihood with mean log_e + eta and fixed precision.

    Validation hook: the Laplace machinery is exact for this likelihood.
    """
    if precision <= 0:
        raise LikelihoodError("observation precision must be positive")
    y = np.asarray(y, dtype=float)
    resid = y - (np.asarray(log_e, dtype=float) + np.asarray(eta, dtype=float))
    value = 0.5 * np.log(precision / (2.0 * np.pi)) - 0.5 * precision * resid**2
    grad = precision * resid
    hess = np.full_like(resid, -precision)
    return value, grad, hess


class _Likelihood:
    """Bound likelihood: response and offsets fixed, evaluated at eta."""

    def __init__(self, kind, y, log_e, pi=None, precision=None):
        self.kind = kind
        self.y = np.asarray(y, dtype=float)
        self.log_e = np.asarray(log_e, dtype=float)
        self.pi = pi
        self.precision = precision

    def evaluate(self, eta):
        if self.kind == "poisson":
            return poisson_loglik(self.y, eta, self.log_e)
        if self.kind == "zip":
            return zip_loglik(self.y, eta, self.log_e, self.pi)
        return gaussian_loglik(self.y, eta, self.log_e, self.precision)

    def value(self, eta) -> float:
        return float(np.sum(self.evaluate(eta)[0]))

    def deviance(self, eta) -> float:
        return -2.0 * self.value(eta)


def make_likelihood(assembly, theta) -> _Likelihood:
    """Bind the assembly's likelihood at one hyperparameter point."""
    kind = assembly.spec.likelihood
    if kind == "zip":
        return _Likelihood("zip", assembly.response, assembly.offset, pi=assembly.zip_pi(theta))
    if kind == "gaussian":
        return _Likelihood(
            "gaussian",
            assembly.response,
            assembly.offset,
            precision=assembly.spec.gaussian_obs_precision,
        )
    return _Likelihood("poisson", assembly.response, assembly.offset)
