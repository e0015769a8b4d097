"""Mortality rates and expected counts by indirect standardization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .panel import CauseClass, EpiPanel

__all__ = [
    "ExpectedCounts",
    "period_rate",
    "weekly_rates",
    "stratum_rates",
    "expected_counts",
    "zero_fraction",
]

PER_100K = 1e5


class RateError(ValueError):
    """Rates undefined for the given counts (zero population)."""


@dataclass(frozen=True)
class ExpectedCounts:
    """Expected deaths per (area, week) from city-wide reference rates.

    ``basis`` is ``"period"`` (whole-period rates spread evenly over weeks) or
    ``"per-week"`` (each week standardized by that week's city rates).
    """

    values: np.ndarray
    basis: str
    cause: CauseClass

    def __post_init__(self):
        if self.basis not in ("period", "per-week"):
            raise ValueError(f"unknown basis {self.basis!r}")
        if np.any(self.values < 0):
            raise ValueError("expected counts must be nonnegative")


def period_rate(total_deaths: float, total_population: float) -> float:
    """Deaths per 100,000 inhabitants over the study period."""
    if total_population <= 0:
        raise RateError("population must be positive")
    if total_deaths < 0:
        raise RateError("deaths must be nonnegative")
    return total_deaths / total_population * PER_100K


def weekly_rates(panel: EpiPanel, cause: CauseClass) -> np.ndarray:
    """City-wide rate per 100,000 inhabitants-week, one entry per week."""
    total_pop = panel.population.sum()
    weekly = panel.deaths_for(cause).sum(axis=(0, 2))
    return weekly / total_pop * PER_100K


def stratum_rates(panel: EpiPanel, cause: CauseClass) -> np.ndarray:
    """Whole-period city-wide death rate per stratum (plain proportion).

    A stratum with zero city-wide population is allowed only when it also has
    zero deaths, in which case its rate is 0.
    """
    deaths_s = panel.deaths_for(cause).sum(axis=(0, 1))
    pop_s = panel.population.sum(axis=0)
    rates = np.zeros_like(deaths_s, dtype=float)
    for s in range(len(rates)):
        if pop_s[s] > 0:
            rates[s] = deaths_s[s] / pop_s[s]
        elif deaths_s[s] > 0:
            raise RateError(
                f"stratum {panel.strata[s]} has deaths but zero population"
            )
    return rates


def _weekly_stratum_rates(panel: EpiPanel, cause: CauseClass) -> np.ndarray:
    """Per-week city-wide rate per stratum, shape (n_weeks, n_strata)."""
    deaths_ts = panel.deaths_for(cause).sum(axis=0).astype(float)  # (T, S)
    pop_s = panel.population.sum(axis=0)
    rates = np.zeros_like(deaths_ts)
    for s in range(deaths_ts.shape[1]):
        if pop_s[s] > 0:
            rates[:, s] = deaths_ts[:, s] / pop_s[s]
        elif np.any(deaths_ts[:, s] > 0):
            raise RateError(
                f"stratum {panel.strata[s]} has deaths but zero population"
            )
    return rates


def expected_counts(panel: EpiPanel, cause: CauseClass, basis: str = "period") -> ExpectedCounts:
    """Expected deaths per (area, week) by indirect standardization.

    ``period``: E_it = sum_s pop(i,s) * rate_s / T, so the period total per
    area spreads evenly across weeks and sum(E) equals the observed total.
    ``per-week``: E_it = sum_s pop(i,s) * rate_{s,t} with rates from week t's
    city-wide deaths only.
    """
    if basis == "period":
        rates = stratum_rates(panel, cause)
        per_area = panel.population @ rates
        values = np.tile(per_area[:, None] / panel.n_weeks, (1, panel.n_weeks))
    elif basis == "per-week":
        rates_ts = _weekly_stratum_rates(panel, cause)
        values = panel.population @ rates_ts.T
    else:
        raise ValueError(f"unknown basis {basis!r}")
    return ExpectedCounts(values=values, basis=basis, cause=cause)


def zero_fraction(panel: EpiPanel, cause: CauseClass, per_week: bool = False):
    """Percentage of (area, week) cells with zero deaths, overall or per week."""
    cells = panel.deaths_for(cause).sum(axis=2)  # (n_areas, n_weeks)
    if per_week:
        return 100.0 * (cells == 0).mean(axis=0)
    return 100.0 * (cells == 0).mean()
