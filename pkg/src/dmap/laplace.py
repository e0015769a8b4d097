"""Newton mode finding for the latent field, the Laplace-approximated
hyperparameter marginal, and sampling from the constrained Gaussian
approximation.

The latent posterior at a fixed hyperparameter point is approximated by the
Gaussian centred at the constrained mode with precision Q(theta) plus the
negated likelihood curvature.  Sum-to-zero constraints are enforced by
conditioning after each solve, which keeps the sparse pattern untouched.
Densities on the constraint subspace are expressed in an orthonormal basis of
{Cx = 0}; the prior and posterior normalizers then share every constant, so
the marginal is exact for Gaussian likelihoods.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import splu, spsolve_triangular

from .likelihoods import make_likelihood
from .model import (
    ModelAssembly,
    joint_latent_precision,
    log_hyper_prior,
    prior_logdet_star,
)

__all__ = ["GaussianApprox", "find_mode", "mode_for", "log_marginal", "sample_latent"]

GRAD_TOL = 1e-8
MAX_NEWTON = 50
MAX_HALVINGS = 30
CURVATURE_FLOOR = 1e-12


class NumericalError(RuntimeError):
    """Factorization failure or Newton breakdown; carries the iteration trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class SparseFactor:
    """LDL'-style factorization of a sparse SPD matrix under a fixed
    fill-reducing symmetric permutation.

    Uses SuperLU with natural column order and diagonal pivoting on the
    permuted matrix; for SPD input this yields U = D L', giving the log
    determinant and a Gaussian sampler from the triangular factor.
    """

    def __init__(self, mat: sparse.spmatrix, order: np.ndarray):
        self.order = order
        m = mat.shape[0]
        permuted = mat.tocsr()[order][:, order].tocsc()
        self._permuted = permuted
        self.lu = splu(
            permuted,
            permc_spec="NATURAL",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
        diag_u = self.lu.U.diagonal()
        if np.any(diag_u <= 0):
            raise NumericalError("matrix is not positive definite")
        self.log_det = float(np.sum(np.log(diag_u)))
        identity = np.arange(m)
        self._plain = np.array_equal(self.lu.perm_r, identity) and np.array_equal(
            self.lu.perm_c, identity
        )
        self._sqrt_d = np.sqrt(diag_u)
        self._u_csr = None
        self._dense_root = None

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        bp = b[self.order]
        xp = self.lu.solve(bp)
        x = np.empty_like(xp)
        x[self.order] = xp
        return x

    def sample(self, z: np.ndarray) -> np.ndarray:
        """Map standard normals (columns of z, shape m x s) to draws with
        covariance equal to the factored matrix's inverse."""
        if self._plain:
            if self._u_csr is None:
                self._u_csr = self.lu.U.tocsr()
            xp = spsolve_triangular(
                self._u_csr, self._sqrt_d[:, None] * z, lower=False
            )
        else:
            # Diagonal pivoting declined a pivot; fall back to a dense root.
            if self._dense_root is None:
                self._dense_root = cholesky(self._permuted.toarray(), lower=False)
            xp = solve_triangular(self._dense_root, z, lower=False)
        x = np.empty_like(xp)
        x[self.order] = xp
        return x


@dataclass
class GaussianApprox:
    """Gaussian approximation of the latent posterior at one theta."""

    mode: np.ndarray
    factor: SparseFactor
    log_det: float  # of the constraint-restricted posterior precision
    converged: bool
    iterations: int
    loglik_at_mode: float
    constraints: sparse.csr_matrix
    corr: np.ndarray | None  # Qt^{-1} C', dense (m, k)
    s_chol: tuple | None  # Cholesky of C Qt^{-1} C'

    @property
    def n_constraints(self) -> int:
        return self.constraints.shape[0]

    def apply_constraint_correction(self, x: np.ndarray) -> np.ndarray:
        """Condition draws or means on Cx = 0 (kriging correction).

        Accepts a vector (m,) or a batch (m, s).
        """
        if self.n_constraints == 0:
            return x
        cx = self.constraints @ x
        return x - self.corr @ cho_solve(self.s_chol, cx)

    def functional_moments(self, functionals: sparse.spmatrix) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance of linear functionals (rows) of the latent field
        under the constrained Gaussian."""
        f = sparse.csr_matrix(functionals)
        means = f @ self.mode
        rhs = np.asarray(f.T.todense(), dtype=float)
        solved = self.factor.solve(rhs)
        variances = np.asarray(f.multiply(solved.T).sum(axis=1)).ravel()
        if self.n_constraints:
            t = self.constraints @ solved  # (k, q)
            half = solve_triangular(self.s_chol[0], t, lower=True)
            variances = variances - np.sum(half**2, axis=0)
        return means, np.maximum(variances, 0.0)


def _fill_order(q, a, c=None):
    pattern = q + a.T @ a + sparse.identity(q.shape[0])
    if c is not None and c.shape[0]:
        pattern = pattern + c.T @ c
    return np.asarray(reverse_cuthill_mckee(pattern.tocsr(), symmetric_mode=True))


def find_mode(
    q,
    a,
    c,
    lik,
    x0=None,
    order=None,
    max_iter=MAX_NEWTON,
    grad_tol=GRAD_TOL,
    constraint_reg=None,
):
    """Newton mode finding on the constrained latent posterior.

    q: prior precision (m x m sparse); a: observation design (n x m sparse);
    c: constraint rows (k x m sparse, possibly empty); lik: bound likelihood
    with an ``evaluate(eta) -> (value, grad, hess)`` method.

    Each step solves the curvature-corrected system with a symmetric sparse
    factorization under a fixed fill-reducing order, then conditions on the
    constraints.  Intrinsic priors make the unconstrained system singular
    along the constraint rows, so those directions are stiffened by
    ``constraint_reg`` before factorization; conditioning on Cx = 0 cancels
    the addition exactly (it vanishes on the constraint subspace), leaving
    mode, covariance, and the restricted log-determinant unchanged.  Steps
    that reduce the posterior are halved up to 30 times.
    """
    m = q.shape[0]
    q = q.tocsr()
    a = a.tocsr()
    c = sparse.csr_matrix(c) if c is not None else sparse.csr_matrix((0, m))
    k = c.shape[0]
    if order is None:
        order = _fill_order(q, a, c)
    gram_chol = cho_factor((c @ c.T).toarray()) if k else None
    if k:
        reg = np.ones(k) if constraint_reg is None else np.asarray(constraint_reg, dtype=float)
        q_solve = (q + c.T @ sparse.diags(reg) @ c).tocsr()
    else:
        q_solve = q

    def project(g):
        if not k:
            return g
        return g - c.T @ cho_solve(gram_chol, c @ g)

    x = np.zeros(m) if x0 is None else project(np.asarray(x0, dtype=float).copy())
    trace = []
    converged = False
    factor = corr = s_chol = None
    value = grad = None
    iterations = 0

    for it in range(max_iter + 1):
        eta = a @ x
        value, grad, hess = lik.evaluate(eta)
        qx = q @ x
        objective = float(np.sum(value)) - 0.5 * float(x @ qx)
        grad_full = a.T @ grad - qx
        grad_norm = float(np.max(np.abs(project(grad_full)))) if m else 0.0
        trace.append((it, objective, grad_norm))

        # Non-log-concave likelihoods (zero-inflation) can turn single cells
        # convex; far from the mode their curvature is floored to keep the
        # system positive definite, and near the mode the true curvature is
        # tried first (quadratic convergence) with the floored surrogate as
        # fallback when the factorization detects indefiniteness.
        clamped = np.maximum(-hess, CURVATURE_FLOOR)
        candidates = [clamped]
        if np.any(hess > 0.0) and grad_norm < 1.0:
            candidates.insert(0, -hess)
        factor = None
        for weights in candidates:
            qt = (q_solve + (a.T @ sparse.diags(weights) @ a)).tocsr()
            try:
                factor = SparseFactor(qt, order)
                break
            except NumericalError:
                continue
        if factor is None:
            raise NumericalError(
                f"posterior precision not positive definite at iteration {it}",
                trace=trace,
            )
        if k:
            corr = factor.solve(np.asarray(c.T.todense(), dtype=float))
            s_chol = cho_factor(np.asarray(c @ corr), lower=True)
        iterations = it
        if grad_norm < grad_tol:
            converged = True
            break
        if it == max_iter:
            break

        b = a.T @ (weights * eta + grad)
        x_new = factor.solve(b)
        if k:
            x_new = x_new - corr @ cho_solve(s_chol, c @ x_new)

        delta = x_new - x
        step = 1.0
        for _ in range(MAX_HALVINGS + 1):
            x_try = x + step * delta
            v_try, _, _ = lik.evaluate(a @ x_try)
            obj_try = float(np.sum(v_try)) - 0.5 * float(x_try @ (q @ x_try))
            if obj_try >= objective - 1e-10 * (1.0 + abs(objective)):
                break
            step *= 0.5
        else:
            raise NumericalError(
                f"step halving exhausted at iteration {it}", trace=trace
            )
        x = x + step * delta

    log_det = factor.log_det
    if k:
        log_det += 2.0 * float(np.sum(np.log(np.diag(s_chol[0]))))
        sign, gram_logdet = np.linalg.slogdet((c @ c.T).toarray())
        log_det -= float(gram_logdet)

    return GaussianApprox(
        mode=x,
        factor=factor,
        log_det=log_det,
        converged=converged,
        iterations=iterations,
        loglik_at_mode=float(np.sum(value)),
        constraints=c,
        corr=corr,
        s_chol=s_chol,
    )


def mode_for(assembly: ModelAssembly, theta, x0=None) -> GaussianApprox:
    """Constrained posterior mode of the assembly's latent field at theta."""
    q, c = joint_latent_precision(assembly, theta)
    lik = make_likelihood(assembly, theta)
    return find_mode(
        q,
        assembly.design,
        c,
        lik,
        x0=x0,
        order=assembly.fill_order,
        constraint_reg=assembly.constraint_regularization(theta),
    )


def log_marginal(assembly: ModelAssembly, theta, approx: GaussianApprox | None = None, x0=None) -> float:
    """Laplace approximation of the log posterior density of theta (up to the
    evidence constant): hyper prior plus prior, likelihood, and curvature
    terms at the constrained mode.

    Deterministic: identical inputs give bit-identical output.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if approx is None:
        approx = mode_for(assembly, theta, x0=x0)
    if not approx.converged:
        raise NumericalError("mode finding did not converge", trace=None)
    q, _ = joint_latent_precision(assembly, theta)
    quad = float(approx.mode @ (q @ approx.mode))
    # Prior and posterior subspace densities share the orthonormal-basis
    # convention, so their 2*pi factors cancel; the prior side needs only the
    # generalized determinant because the constraints span its null space.
    prior_part = 0.5 * prior_logdet_star(assembly, theta) - 0.5 * quad
    posterior_part = -0.5 * approx.log_det
    return (
        log_hyper_prior(assembly, theta)
        + prior_part
        + approx.loglik_at_mode
        + posterior_part
    )


def sample_latent(approx: GaussianApprox, rng: np.random.Generator, n_draws: int) -> np.ndarray:
    """Draws from the constrained Gaussian approximation, shape (n_draws, m)."""
    m = approx.mode.shape[0]
    z = rng.standard_normal((m, n_draws))
    draws = approx.mode[:, None] + approx.factor.sample(z)
    draws = approx.apply_constraint_correction(draws)
    return draws.T
