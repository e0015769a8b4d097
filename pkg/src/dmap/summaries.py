"""Relative-risk summaries of fitted models: temporal curves, area-week
surfaces, the covariate effect, and the per-week covariate series from
independent weekly spatial fits."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .fit import ExploreError, FitResult, fit_model, linear_summaries, posterior_summary
from .laplace import NumericalError
from .model import ModelSpec, assemble
from .panel import CauseClass, EpiPanel, select_week
from .rates import expected_counts

__all__ = [
    "RRTable",
    "CovariateRR",
    "WeeklySeries",
    "temporal_rr",
    "spatiotemporal_rr",
    "covariate_rr",
    "weekly_covariate_series",
    "detect_sign_flip",
]

WEEKLY_EFFECTS = ("intercept", "covariate", "bym2_spatial")


class SummaryError(ValueError):
    """Requested summary needs an effect the fitted model does not carry."""


@dataclass(frozen=True)
class RRTable:
    """Relative-risk rows indexed by area and/or week."""

    area_col: tuple[str, ...] | None
    week_col: tuple[int, ...] | None
    rr_mean: np.ndarray
    rr_sd: np.ndarray
    rr_q025: np.ndarray
    rr_q975: np.ndarray
    baseline_note: str

    def __post_init__(self):
        if np.any(self.rr_mean <= 0) or np.any(self.rr_q025 <= 0):
            raise SummaryError("relative risks must be positive")
        if np.any(self.rr_q025 > self.rr_q975):
            raise SummaryError("lower quantile exceeds upper quantile")

    def __len__(self) -> int:
        return len(self.rr_mean)


@dataclass(frozen=True)
class CovariateRR:
    rr_mean: float
    rr_q025: float
    rr_q975: float
    rr_sd: float


def _require(fit: FitResult, effect: str):
    if not fit.assembly.spec.has(effect):
        raise SummaryError(f"fit has no {effect} effect")


def temporal_rr(fit: FitResult, structured_only: bool = False) -> RRTable:
    """Weekly relative risk exp(gamma_t + phi_t) against the period baseline.

    ``structured_only`` drops the iid weekly component and maps the
    random-walk effect alone.
    """
    _require(fit, "rw1_temporal")
    assembly = fit.assembly
    t_weeks = assembly.n_weeks
    m = assembly.latent_dim
    rows, cols, vals = [], [], []
    for t in range(t_weeks):
        rows.append(t)
        cols.append(assembly.layout["gamma"].start + t)
        vals.append(1.0)
    if not structured_only:
        _require(fit, "iid_temporal")
        for t in range(t_weeks):
            rows.append(t)
            cols.append(assembly.layout["phi"].start + t)
            vals.append(1.0)
    f = sparse.csr_matrix((vals, (rows, cols)), shape=(t_weeks, m))
    mean, sd, q025, q975 = linear_summaries(fit, f, transform="exp")
    return RRTable(
        area_col=None,
        week_col=assembly.week_labels,
        rr_mean=mean,
        rr_sd=sd,
        rr_q025=q025,
        rr_q975=q975,
        baseline_note="weekly risk relative to the whole-period city rates",
    )


def spatiotemporal_rr(fit: FitResult) -> RRTable:
    """Relative risk of every observed (area, week) cell: the exponentiated
    full linear predictor, i.e. risk relative to the expected counts."""
    _require(fit, "bym2_spatial")
    assembly = fit.assembly
    mean, sd, q025, q975 = linear_summaries(fit, assembly.design, transform="exp")
    areas = tuple(assembly.area_ids[i] for i in assembly.obs_area)
    weeks = tuple(assembly.week_labels[t] for t in assembly.obs_week)
    return RRTable(
        area_col=areas,
        week_col=weeks,
        rr_mean=mean,
        rr_sd=sd,
        rr_q025=q025,
        rr_q975=q975,
        baseline_note="area-week risk relative to expected counts "
        "from whole-period city rates",
    )


def covariate_rr(fit: FitResult) -> CovariateRR:
    """Relative risk per unit increase of the covariate: exp(beta1)."""
    _require(fit, "covariate")
    mean, sd, q025, q975 = posterior_summary(fit, "beta1", transform="exp")
    return CovariateRR(rr_mean=mean, rr_q025=q025, rr_q975=q975, rr_sd=sd)


@dataclass(frozen=True)
class WeeklySeries:
    """Per-week covariate RR from independent single-week spatial fits."""

    weeks: tuple[int, ...]
    estimates: tuple[CovariateRR, ...]
    skipped: tuple[int, ...]  # weeks with zero city-wide deaths
    failed: tuple[tuple[int, str], ...]

    def rr_means(self) -> np.ndarray:
        return np.array([e.rr_mean for e in self.estimates])


def _fit_single_week(args):
    panel, spec, cause, week, max_evals = args
    week_panel = select_week(panel, week)
    expected = expected_counts(week_panel, cause, basis="period")
    assembly = assemble(spec, week_panel, expected)
    fit = fit_model(assembly, max_evals=max_evals)
    return covariate_rr(fit)


def weekly_covariate_series(
    panel: EpiPanel,
    spec: ModelSpec,
    cause: CauseClass = CauseClass.CONFIRMED,
    threads: int = 1,
    max_evals: int = 500,
) -> WeeklySeries:
    """Covariate RR per epidemiological week from independent spatial fits
    (intercept + covariate + mixed spatial effect), each offset by that week's
    city-wide rates.

    Weeks with zero city-wide deaths are skipped; a week whose fit fails is
    reported in ``failed`` and the series continues.  Output order is by week
    regardless of execution order.
    """
    weekly_spec = replace(spec, effects=WEEKLY_EFFECTS)
    weekly_deaths = panel.deaths_for(cause).sum(axis=(0, 2))
    candidates = []
    skipped = []
    for t, week in enumerate(panel.weeks):
        if weekly_deaths[t] == 0:
            skipped.append(int(week))
        else:
            candidates.append(int(week))

    jobs = [(panel, weekly_spec, cause, week, max_evals) for week in candidates]
    results: list = [None] * len(jobs)
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for k, outcome in enumerate(pool.map(_fit_single_week_safe, jobs)):
                results[k] = outcome
    else:
        for k, job in enumerate(jobs):
            results[k] = _fit_single_week_safe(job)

    weeks_kept, estimates, failed = [], [], []
    for week, outcome in zip(candidates, results):
        if isinstance(outcome, CovariateRR):
            weeks_kept.append(week)
            estimates.append(outcome)
        else:
            failed.append((week, outcome))
    return WeeklySeries(
        weeks=tuple(weeks_kept),
        estimates=tuple(estimates),
        skipped=tuple(skipped),
        failed=tuple(failed),
    )


def _fit_single_week_safe(args):
    try:
        return _fit_single_week(args)
    except (NumericalError, ExploreError, ValueError) as exc:
        return f"{type(exc).__name__}: {exc}"


def detect_sign_flip(series: np.ndarray, reference: float = 1.0) -> int:
    """Index where a series of relative risks most plausibly switches from
    above the reference to below it.

    Fits a two-segment constant model to log(series/reference) (least
    squares over all split points, each segment clipped to its side of
    zero) and returns the first index of the lower segment; ties take the
    earliest split.
    """
    values = np.log(np.asarray(series, dtype=float) / reference)
    n = len(values)
    best_k, best_cost = 0, np.inf
    for k in range(n + 1):
        head, tail = values[:k], values[k:]
        mean_head = max(head.mean(), 0.0) if k else 0.0
        mean_tail = min(tail.mean(), 0.0) if k < n else 0.0
        cost = float(np.sum((head - mean_head) ** 2) + np.sum((tail - mean_tail) ** 2))
        if cost < best_cost - 1e-12:
            best_k, best_cost = k, cost
    return best_k
