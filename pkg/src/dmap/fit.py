"""Hyperparameter exploration, posterior summarization, and model scoring.

The hyperparameter posterior is explored by a derivative-free simplex search
for its mode, a central composite design scaled by the numeric Hessian around
it, and weights proportional to the Laplace-approximated marginal at each
design point.  Posterior quantities are mixtures of the per-point Gaussian
marginals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import minimize
from scipy.stats import norm

from .laplace import GaussianApprox, NumericalError, log_marginal, mode_for, sample_latent
from .likelihoods import make_likelihood
from .model import ModelAssembly

__all__ = [
    "FitResult",
    "DicResult",
    "explore_hyper",
    "fit_model",
    "fit_at",
    "posterior_summary",
    "linear_summaries",
    "compute_dic",
    "select_by_dic",
]

MAX_MARGINAL_EVALS = 500
CCD_SCALE = 1.1
HESSIAN_STEP = 0.1


class ExploreError(RuntimeError):
    """Hyperparameter search failed; carries the best point found so far."""

    def __init__(self, message, best_theta=None, best_value=None):
        super().__init__(message)
        self.best_theta = best_theta
        self.best_value = best_value


@dataclass(frozen=True)
class HyperPoint:
    theta: np.ndarray
    log_marginal: float
    weight: float
    approx: GaussianApprox


@dataclass(frozen=True)
class FitResult:
    """Weighted hyperparameter design points with their Gaussian approximations."""

    assembly: ModelAssembly
    points: tuple[HyperPoint, ...]
    theta_mode: np.ndarray
    n_evaluations: int

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.points])

    def posterior_mean_latent(self) -> np.ndarray:
        out = np.zeros_like(self.points[0].approx.mode)
        for p in self.points:
            out += p.weight * p.approx.mode
        return out

    def posterior_mean_theta(self) -> np.ndarray:
        out = np.zeros_like(self.theta_mode)
        for p in self.points:
            out += p.weight * p.theta
        return out


@dataclass(frozen=True)
class DicResult:
    mean_deviance: float
    effective_params: float
    dic: float


class _MarginalCache:
    """Evaluates the Laplace marginal with warm-started modes."""

    def __init__(self, assembly):
        self.assembly = assembly
        self.last_mode = None
        self.evaluations = 0
        self.best = None  # (value, theta)

    def __call__(self, theta, keep_approx=False):
        theta = np.asarray(theta, dtype=float)
        approx = mode_for(self.assembly, theta, x0=self.last_mode)
        if not approx.converged:
            raise NumericalError("mode finding did not converge during exploration")
        value = log_marginal(self.assembly, theta, approx=approx)
        self.last_mode = approx.mode
        self.evaluations += 1
        if self.best is None or value > self.best[0]:
            self.best = (value, theta.copy())
        return (value, approx) if keep_approx else value


def _ccd_points(dim: int, scale: float = CCD_SCALE) -> np.ndarray:
    """Central composite design in standardized coordinates: the centre, 2*dim
    axial points, and the factorial corners, all non-centre points on the
    sphere of radius scale * sqrt(dim)."""
    if dim == 0:
        return np.zeros((1, 0))
    radius = scale * math.sqrt(dim)
    rows = [np.zeros(dim)]
    for i in range(dim):
        for sign in (+1.0, -1.0):
            z = np.zeros(dim)
            z[i] = sign * radius
            rows.append(z)
    if dim > 1:
        for code in range(2**dim):
            corner = np.array(
                [scale if (code >> i) & 1 == 0 else -scale for i in range(dim)]
            )
            rows.append(corner)
    unique = []
    seen = set()
    for z in rows:
        key = tuple(np.round(z, 12))
        if key not in seen:
            seen.add(key)
            unique.append(z)
    return np.array(unique)


def _hyper_hessian(evaluate, theta0, f0, step=HESSIAN_STEP):
    """Central-difference Hessian of the log marginal at its mode."""
    d = len(theta0)
    hess = np.zeros((d, d))
    plus = np.zeros(d)
    minus = np.zeros(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        plus[i] = evaluate(theta0 + e)
        minus[i] = evaluate(theta0 - e)
        hess[i, i] = (plus[i] - 2.0 * f0 + minus[i]) / step**2
    for i in range(d):
        for j in range(i + 1, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = step
            ej[j] = step
            fpp = evaluate(theta0 + ei + ej)
            fpm = evaluate(theta0 + ei - ej)
            fmp = evaluate(theta0 - ei + ej)
            fmm = evaluate(theta0 - ei - ej)
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * step**2)
    return hess


def explore_hyper(assembly: ModelAssembly, max_evals: int = MAX_MARGINAL_EVALS) -> FitResult:
    """Locate the hyperparameter posterior mode by simplex search, lay a
    central composite design scaled by the local curvature around it, and
    weight the points by their Laplace marginal values."""
    d = assembly.n_hyper
    cache = _MarginalCache(assembly)

    if d == 0:
        theta = np.zeros(0)
        value, approx = cache(theta, keep_approx=True)
        point = HyperPoint(theta=theta, log_marginal=value, weight=1.0, approx=approx)
        return FitResult(
            assembly=assembly,
            points=(point,),
            theta_mode=theta,
            n_evaluations=cache.evaluations,
        )

    theta0 = assembly.default_theta()
    simplex = np.vstack([theta0] + [theta0 + 0.75 * e for e in np.eye(d)])
    result = minimize(
        lambda th: -cache(th),
        theta0,
        method="Nelder-Mead",
        options={
            "initial_simplex": simplex,
            "maxfev": max_evals,
            "xatol": 5e-3,
            "fatol": 5e-3,
        },
    )
    if not result.success:
        best_value, best_theta = cache.best
        raise ExploreError(
            f"hyperparameter search did not converge within {max_evals} evaluations",
            best_theta=best_theta,
            best_value=best_value,
        )
    theta_star = np.asarray(result.x, dtype=float)
    f_star = cache(theta_star)

    hess = _hyper_hessian(cache, theta_star, f_star)
    curvature = -hess  # positive definite at a proper maximum
    eigval, eigvec = np.linalg.eigh(0.5 * (curvature + curvature.T))
    eigval = np.maximum(eigval, 1e-4)
    directions = eigvec @ np.diag(1.0 / np.sqrt(eigval))

    points = []
    values = []
    for z in _ccd_points(d):
        theta = theta_star + directions @ z
        value, approx = cache(theta, keep_approx=True)
        points.append((theta, value, approx))
        values.append(value)

    values = np.array(values)
    raw = np.exp(values - values.max())
    weights = raw / raw.sum()
    hyper_points = tuple(
        HyperPoint(theta=theta, log_marginal=value, weight=float(w), approx=approx)
        for (theta, value, approx), w in zip(points, weights)
    )
    return FitResult(
        assembly=assembly,
        points=hyper_points,
        theta_mode=theta_star,
        n_evaluations=cache.evaluations,
    )


def fit_at(assembly: ModelAssembly, theta) -> FitResult:
    """Single-point fit at a fixed hyperparameter value (validation hook)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    approx = mode_for(assembly, theta)
    value = log_marginal(assembly, theta, approx=approx)
    point = HyperPoint(theta=theta, log_marginal=value, weight=1.0, approx=approx)
    return FitResult(assembly=assembly, points=(point,), theta_mode=theta, n_evaluations=1)


def fit_model(assembly: ModelAssembly, max_evals: int = MAX_MARGINAL_EVALS) -> FitResult:
    """Full fit: hyperparameter exploration with CCD integration."""
    return explore_hyper(assembly, max_evals=max_evals)


def _resolve_quantity(assembly: ModelAssembly, quantity) -> sparse.csr_matrix:
    """Turn a quantity id or coefficient vector into a 1-row functional."""
    if isinstance(quantity, str):
        name, bracket, rest = quantity.partition("[")
        name = name.strip()
        if name not in assembly.layout:
            raise KeyError(f"unknown quantity id {quantity!r}")
        sl = assembly.layout[name]
        if bracket:
            idx = int(rest.rstrip("]"))
        else:
            if sl.stop - sl.start != 1:
                raise KeyError(f"quantity {quantity!r} needs an index")
            idx = 0
        if not 0 <= idx < sl.stop - sl.start:
            raise KeyError(f"index out of range in {quantity!r}")
        vec = sparse.csr_matrix(
            ([1.0], ([0], [sl.start + idx])), shape=(1, assembly.latent_dim)
        )
        return vec
    arr = np.asarray(quantity, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    return sparse.csr_matrix(arr)


def _mixture_quantiles(means, sds, weights, probs, tol=1e-11, max_iter=120):
    """Quantiles of a Gaussian mixture, vectorized over rows, by bisection."""
    means = np.asarray(means)
    sds = np.maximum(np.asarray(sds), 1e-300)
    lo = np.min(means - 10.0 * sds, axis=1)
    hi = np.max(means + 10.0 * sds, axis=1)
    out = np.empty((means.shape[0], len(probs)))
    for pi, p in enumerate(probs):
        a, b = lo.copy(), hi.copy()
        for _ in range(max_iter):
            mid = 0.5 * (a + b)
            cdf = np.einsum(
                "j,ij->i", weights, norm.cdf((mid[:, None] - means) / sds)
            )
            below = cdf < p
            a = np.where(below, mid, a)
            b = np.where(below, b, mid)
            if np.max(b - a) < tol:
                break
        out[:, pi] = 0.5 * (a + b)
    return out


def linear_summaries(fit: FitResult, functionals, transform: str = "identity"):
    """Mixture posterior summaries of linear functionals of the latent field.

    Returns (mean, sd, q025, q975) arrays, one entry per functional row.  With
    transform="exp" the quantiles are exponentiated (monotone equivariance)
    and the mean and sd use the per-component lognormal moment formulas.
    """
    f = sparse.csr_matrix(functionals)
    weights = fit.weights
    comp_means = np.empty((f.shape[0], len(fit.points)))
    comp_vars = np.empty_like(comp_means)
    for j, point in enumerate(fit.points):
        m, v = point.approx.functional_moments(f)
        comp_means[:, j] = m
        comp_vars[:, j] = v
    comp_sds = np.sqrt(comp_vars)

    quants = _mixture_quantiles(comp_means, comp_sds, weights, (0.025, 0.975))
    if transform == "identity":
        mean = comp_means @ weights
        second = (comp_vars + comp_means**2) @ weights
        sd = np.sqrt(np.maximum(second - mean**2, 0.0))
        return mean, sd, quants[:, 0], quants[:, 1]
    if transform == "exp":
        mean = np.exp(comp_means + 0.5 * comp_vars) @ weights
        second = np.exp(2.0 * comp_means + 2.0 * comp_vars) @ weights
        sd = np.sqrt(np.maximum(second - mean**2, 0.0))
        return mean, sd, np.exp(quants[:, 0]), np.exp(quants[:, 1])
    raise ValueError(f"unknown transform {transform!r}")


def posterior_summary(fit: FitResult, quantity, transform: str = "identity"):
    """Posterior (mean, sd, q0.025, q0.975) of one latent functional.

    ``quantity`` is a layout id like ``"beta0"`` or ``"gamma[3]"``, or an
    explicit coefficient vector over the latent field.
    """
    f = _resolve_quantity(fit.assembly, quantity)
    mean, sd, q025, q975 = linear_summaries(fit, f, transform=transform)
    return float(mean[0]), float(sd[0]), float(q025[0]), float(q975[0])


def compute_dic(assembly: ModelAssembly, fit: FitResult, n_draws: int = 1000, seed: int = 0) -> DicResult:
    """Deviance information criterion from weighted posterior draws.

    The mean deviance is a Monte Carlo average over draws from the mixture of
    Gaussian approximations (seeded, fixed order); the plug-in deviance uses
    the weighted posterior means of the latent field and hyperparameters.
    """
    rng = np.random.default_rng(seed)
    weights = fit.weights
    counts = rng.multinomial(n_draws, weights)
    total = 0.0
    for point, count in zip(fit.points, counts):
        if count == 0:
            continue
        lik = make_likelihood(assembly, point.theta)
        draws = sample_latent(point.approx, rng, count)
        etas = (assembly.design @ draws.T).T  # (count, n_obs)
        values, _, _ = lik.evaluate(etas)
        total += float(-2.0 * values.sum())
    mean_deviance = total / n_draws

    theta_bar = fit.posterior_mean_theta()
    x_bar = fit.posterior_mean_latent()
    lik_bar = make_likelihood(assembly, theta_bar)
    plugin = lik_bar.deviance(assembly.design @ x_bar)
    p_d = mean_deviance - plugin
    return DicResult(
        mean_deviance=mean_deviance, effective_params=p_d, dic=mean_deviance + p_d
    )


def select_by_dic(candidates) -> str:
    """Name of the lowest-DIC candidate; ties break toward the earlier entry.

    ``candidates`` maps names to DIC values (dict or sequence of pairs);
    values may be DicResult or plain numbers.
    """
    if hasattr(candidates, "items"):
        items = list(candidates.items())
    else:
        items = list(candidates)
    if not items:
        raise ValueError("no candidates to select from")
    best_name, best_value = None, None
    for name, value in items:
        dic = value.dic if isinstance(value, DicResult) else float(value)
        if best_value is None or dic < best_value:
            best_name, best_value = name, dic
    return best_name
