"""Gradient-informed MCMC used as an independent check on the Laplace
machinery: a Langevin proposal over the constrained latent field with adapted
step size, optionally alternated with random-walk Metropolis moves over the
hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .likelihoods import make_likelihood
from .model import (
    ModelAssembly,
    joint_latent_precision,
    log_hyper_prior,
    prior_logdet_star,
)

__all__ = ["McmcResult", "mala_chain", "mcmc_oracle"]

TARGET_ACCEPT_LATENT = 0.574
TARGET_ACCEPT_HYPER = 0.234
MIN_ACCEPT = 0.05
MAX_LATENT_DIM = 500


class OracleError(RuntimeError):
    pass


@dataclass
class McmcResult:
    samples: np.ndarray  # (n_kept, m) thinned post-burn-in latent draws
    theta_samples: np.ndarray | None
    accept_latent: float
    accept_hyper: float | None
    step_size: float


def mala_chain(
    logpdf_and_grad,
    x0,
    n_iter,
    rng,
    burn_in=None,
    thin=1,
    step0=0.1,
    project=None,
    target_accept=TARGET_ACCEPT_LATENT,
    callback=None,
):
    """Metropolis-adjusted Langevin chain with Robbins-Monro step adaptation.

    ``logpdf_and_grad(x) -> (float, array)``; ``project`` restricts drift and
    noise to a linear subspace (the chain then never leaves it).  The step
    size adapts toward ``target_accept`` during burn-in and is frozen after.
    ``callback(i, x)``, when given, may return a replacement state (used for
    interleaved hyperparameter moves).
    """
    x = np.asarray(x0, dtype=float).copy()
    if project is not None:
        x = project(x)
    burn_in = n_iter // 5 if burn_in is None else burn_in
    log_eps = np.log(step0)
    lp, grad = logpdf_and_grad(x)
    if project is not None:
        grad = project(grad)

    kept = []
    accepted_post = 0
    post_steps = 0
    for it in range(n_iter):
        eps = np.exp(log_eps)
        noise = rng.standard_normal(x.shape)
        if project is not None:
            noise = project(noise)
        prop = x + 0.5 * eps**2 * grad + eps * noise
        lp_prop, grad_prop = logpdf_and_grad(prop)
        if project is not None:
            grad_prop = project(grad_prop)
        fwd = prop - x - 0.5 * eps**2 * grad
        bwd = x - prop - 0.5 * eps**2 * grad_prop
        log_q_fwd = -float(fwd @ fwd) / (2.0 * eps**2)
        log_q_bwd = -float(bwd @ bwd) / (2.0 * eps**2)
        log_alpha = (lp_prop - lp) + (log_q_bwd - log_q_fwd)
        accept = np.log(rng.uniform()) < log_alpha
        if accept:
            x, lp, grad = prop, lp_prop, grad_prop

        if it < burn_in:
            rate = min(1.0, np.exp(min(log_alpha, 0.0)))
            # constant gain over the first half of burn-in, then decaying;
            # frozen afterwards so the post-burn-in kernel is fixed
            gain = 0.05 if it < burn_in // 2 else 5.0 / (1.0 + it) ** 0.6
            log_eps += min(0.1, gain) * (rate - target_accept)
        else:
            post_steps += 1
            accepted_post += bool(accept)
            if (it - burn_in) % thin == 0:
                kept.append(x.copy())

        if callback is not None:
            replacement = callback(it, x)
            if replacement is not None:
                x = replacement
                lp, grad = logpdf_and_grad(x)
                if project is not None:
                    grad = project(grad)

    accept_rate = accepted_post / max(post_steps, 1)
    return np.array(kept), accept_rate, float(np.exp(log_eps))


def mcmc_oracle(
    assembly: ModelAssembly,
    theta,
    n_iter=20000,
    seed=0,
    thin=5,
    burn_in=None,
    sample_theta=False,
    theta_step=0.25,
    theta_every=5,
    x0=None,
) -> McmcResult:
    """Sample the latent posterior (and optionally the hyperparameters) for
    cross-validation of the Laplace results.

    With ``sample_theta`` the hyperparameters get a random-walk Metropolis
    move every ``theta_every`` latent steps, targeting the joint posterior.
    Raises when post-adaptation acceptance falls below 5%.
    """
    if assembly.latent_dim > MAX_LATENT_DIM:
        raise OracleError(
            f"latent dimension {assembly.latent_dim} exceeds oracle guard "
            f"{MAX_LATENT_DIM}"
        )
    rng = np.random.default_rng(seed)
    theta = np.atleast_1d(np.asarray(theta, dtype=float)).copy()
    burn_in = n_iter // 4 if burn_in is None else burn_in

    state = {"theta": theta.copy()}
    q, _ = joint_latent_precision(assembly, theta)
    state["q"] = q
    state["lik"] = make_likelihood(assembly, theta)
    a = assembly.design

    def logpdf_and_grad(x):
        eta = a @ x
        value, grad, _ = state["lik"].evaluate(eta)
        qx = state["q"] @ x
        lp = float(np.sum(value)) - 0.5 * float(x @ qx)
        return lp, a.T @ grad - qx

    def theta_logpost(th, x):
        q_th, _ = joint_latent_precision(assembly, th)
        lik_th = make_likelihood(assembly, th)
        lp = log_hyper_prior(assembly, th)
        lp += 0.5 * prior_logdet_star(assembly, th)
        lp -= 0.5 * float(x @ (q_th @ x))
        lp += float(np.sum(lik_th.evaluate(a @ x)[0]))
        return lp, q_th, lik_th

    hyper_accepts = []
    hyper_scale = {"log": np.log(theta_step)}
    theta_kept = []

    def hyper_move(it, x):
        if not sample_theta or assembly.n_hyper == 0 or (it + 1) % theta_every:
            return None
        th_cur = state["theta"]
        lp_cur, _, _ = theta_logpost(th_cur, x)
        scale = np.exp(hyper_scale["log"])
        th_prop = th_cur + scale * rng.standard_normal(th_cur.shape)
        lp_prop, q_prop, lik_prop = theta_logpost(th_prop, x)
        log_alpha = lp_prop - lp_cur
        accept = np.log(rng.uniform()) < log_alpha
        if accept:
            state["theta"] = th_prop
            state["q"] = q_prop
            state["lik"] = lik_prop
        if it < burn_in:
            rate = min(1.0, np.exp(min(log_alpha, 0.0)))
            hyper_scale["log"] += min(0.1, 5.0 / (1.0 + it) ** 0.6) * (
                rate - TARGET_ACCEPT_HYPER
            )
        else:
            hyper_accepts.append(bool(accept))
            theta_kept.append(state["theta"].copy())
        # latent target changed; force gradient refresh by returning the state
        return x if accept else None

    start = np.zeros(assembly.latent_dim) if x0 is None else np.asarray(x0, dtype=float)
    samples, accept_latent, eps = mala_chain(
        logpdf_and_grad,
        start,
        n_iter,
        rng,
        burn_in=burn_in,
        thin=thin,
        project=assembly.project_out_constraints,
        callback=hyper_move if sample_theta else None,
    )
    if accept_latent < MIN_ACCEPT:
        raise OracleError(
            f"oracle failed to mix: latent acceptance {accept_latent:.3f}"
        )
    accept_hyper = float(np.mean(hyper_accepts)) if hyper_accepts else None
    if sample_theta and accept_hyper is not None and accept_hyper < MIN_ACCEPT:
        raise OracleError(
            f"oracle failed to mix: hyper acceptance {accept_hyper:.3f}"
        )
    return McmcResult(
        samples=samples,
        theta_samples=np.array(theta_kept) if theta_kept else None,
        accept_latent=accept_latent,
        accept_hyper=accept_hyper,
        step_size=eps,
    )
