"""Synthetic spatiotemporal count panels with known ground truth, plus the
recovery and shift experiments that validate the fitting pipeline."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .fit import ExploreError, fit_model, posterior_summary, compute_dic, select_by_dic
from .graph import ArealGraph
from .laplace import NumericalError
from .model import ModelSpec, assemble, parse_keyvalue
from .panel import CauseClass, EpiPanel, IngestReport
from .rates import expected_counts
from .structure import icar_structure, rw1_structure, scale_gv
from .summaries import detect_sign_flip, weekly_covariate_series

__all__ = [
    "SimScenario",
    "lattice_graph",
    "random_geometric_graph",
    "simulate_panel",
    "recovery_experiment",
    "shift_experiment",
    "parse_scenario_config",
]

# Period death rates per stratum modeled on published city-wide aggregates
# (per person over the whole period), and a plausible age pyramid.
DEFAULT_STRATA = (
    ("female", "00-19"),
    ("female", "20-39"),
    ("female", "40-59"),
    ("female", "60+"),
    ("male", "00-19"),
    ("male", "20-39"),
    ("male", "40-59"),
    ("male", "60+"),
)
DEFAULT_SHARES = (0.125, 0.165, 0.13, 0.08, 0.125, 0.165, 0.13, 0.08)
DEFAULT_RATES = tuple(
    r / 1e5 for r in (0.5, 5.0, 30.0, 200.0, 0.7, 7.5, 41.0, 290.0)
)


class SimulationError(ValueError):
    pass


class RecoveryError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimScenario:
    """Generative configuration: graph, horizon, true effects, and data scale."""

    graph_kind: str = "lattice"  # lattice | rgg
    rows: int = 5
    cols: int = 10
    n_units: int = 50  # rgg only
    radius: float = 0.25  # rgg only
    n_weeks: int = 13
    beta0: float = 0.0
    beta1: float = math.log(0.75)
    beta1_schedule: tuple[float, ...] | None = None
    tau_b: float = 16.0
    phi_mix: float = 0.5
    tau_gamma: float = 4.0
    tau_phi: float = 25.0
    tau_delta: float = 25.0
    likelihood: str = "poisson"
    zip_pi: float = 0.1
    covariate_kind: str = "iid"  # iid | gradient
    pop_median: float = 60000.0
    pop_sigma: float = 0.4
    strata: tuple[tuple[str, str], ...] = DEFAULT_STRATA
    strata_shares: tuple[float, ...] = DEFAULT_SHARES
    strata_rates: tuple[float, ...] = DEFAULT_RATES
    seed: int = 0
    fixed_gamma: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n_weeks < 2:
            raise SimulationError("scenario needs at least 2 weeks")
        for tau in (self.tau_b, self.tau_gamma, self.tau_phi, self.tau_delta):
            if tau <= 0:
                raise SimulationError("precisions must be positive")
        if not (0.0 < self.phi_mix < 1.0):
            raise SimulationError("mixing proportion must lie in (0, 1)")
        if self.graph_kind == "lattice" and self.rows * self.cols < 4:
            raise SimulationError("lattice too small")
        if self.graph_kind == "rgg" and self.n_units < 4:
            raise SimulationError("graph too small")
        if len(self.strata_shares) != len(self.strata) or len(self.strata_rates) != len(self.strata):
            raise SimulationError("strata shares/rates length mismatch")
        if self.beta1_schedule is not None and len(self.beta1_schedule) != self.n_weeks:
            raise SimulationError("beta1 schedule length must equal n_weeks")
        if self.likelihood not in ("poisson", "zip"):
            raise SimulationError(f"unknown likelihood {self.likelihood!r}")

    @property
    def n_areas(self) -> int:
        return self.rows * self.cols if self.graph_kind == "lattice" else self.n_units

    def beta1_by_week(self) -> np.ndarray:
        if self.beta1_schedule is not None:
            return np.asarray(self.beta1_schedule, dtype=float)
        return np.full(self.n_weeks, self.beta1)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(likelihood=self.likelihood)


def lattice_graph(rows: int, cols: int) -> ArealGraph:
    """Rook-adjacency grid with zero-padded lexicographic unit ids."""
    width = len(str(rows * cols - 1))
    ids = tuple(f"a{k:0{width}d}" for k in range(rows * cols))
    edges = set()
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges.add((k, k + 1))
            if r + 1 < rows:
                edges.add((k, k + cols))
    return ArealGraph(unit_ids=ids, edges=frozenset(edges))


def random_geometric_graph(n: int, radius: float, rng: np.random.Generator) -> tuple[ArealGraph, np.ndarray]:
    """Units at uniform points in the unit square, adjacent within ``radius``."""
    coords = rng.uniform(size=(n, 2))
    width = len(str(n - 1))
    ids = tuple(f"a{k:0{width}d}" for k in range(n))
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if np.hypot(*(coords[i] - coords[j])) <= radius:
                edges.add((i, j))
    return ArealGraph(unit_ids=ids, edges=frozenset(edges)), coords


def _intrinsic_draw(struct_dense: np.ndarray, multiplier: float, rng: np.random.Generator) -> np.ndarray:
    """One draw from the intrinsic GMRF with precision multiplier * structure,
    constrained to the orthogonal complement of the null space (which makes the
    per-component sums exactly zero)."""
    eigval, eigvec = np.linalg.eigh(struct_dense)
    tol = struct_dense.shape[0] * np.finfo(float).eps * max(eigval.max(), 1.0)
    keep = eigval > tol
    z = rng.standard_normal(int(keep.sum()))
    return eigvec[:, keep] @ (z / np.sqrt(eigval[keep] * multiplier))


def _spatial_structure(scenario: SimScenario, rng: np.random.Generator):
    if scenario.graph_kind == "lattice":
        graph = lattice_graph(scenario.rows, scenario.cols)
        xs = np.tile(np.linspace(-1.0, 1.0, scenario.cols), scenario.rows)
    elif scenario.graph_kind == "rgg":
        graph, coords = random_geometric_graph(scenario.n_units, scenario.radius, rng)
        xs = 2.0 * coords[:, 0] - 1.0
    else:
        raise SimulationError(f"unknown graph kind {scenario.graph_kind!r}")
    return graph, xs


def simulate_panel(scenario: SimScenario, rng: np.random.Generator | None = None):
    """Draw a synthetic panel from the generative model and return it with the
    ground-truth latent fields.

    Deterministic for a fixed (scenario, seed): the same draws in the same
    order every time.
    """
    rng = np.random.default_rng(scenario.seed) if rng is None else rng
    graph, gradient = _spatial_structure(scenario, rng)
    n, t_weeks = graph.n_units, scenario.n_weeks
    n_strata = len(scenario.strata)

    if scenario.covariate_kind == "iid":
        covariate = rng.uniform(-1.0, 1.0, size=n)
    elif scenario.covariate_kind == "gradient":
        covariate = gradient
    else:
        raise SimulationError(f"unknown covariate kind {scenario.covariate_kind!r}")

    area_size = rng.lognormal(mean=math.log(scenario.pop_median), sigma=scenario.pop_sigma, size=n)
    shares = np.asarray(scenario.strata_shares)
    population = np.maximum(np.round(area_size[:, None] * shares[None, :]), 1.0)

    scaled = scale_gv(icar_structure(graph))
    u = _intrinsic_draw(scaled.toarray(), scenario.tau_b / scenario.phi_mix, rng)
    v = rng.standard_normal(n) / math.sqrt(scenario.tau_b / (1.0 - scenario.phi_mix))
    if scenario.fixed_gamma is not None:
        gamma = np.asarray(scenario.fixed_gamma, dtype=float)
        gamma = gamma - gamma.mean()
    else:
        rw1 = rw1_structure(t_weeks)
        gamma = _intrinsic_draw(rw1.toarray(), scenario.tau_gamma, rng)
    phi = rng.standard_normal(t_weeks) / math.sqrt(scenario.tau_phi)
    delta = rng.standard_normal((n, t_weeks)) / math.sqrt(scenario.tau_delta)

    beta1_t = scenario.beta1_by_week()
    eta = (
        scenario.beta0
        + covariate[:, None] * beta1_t[None, :]
        + (u + v)[:, None]
        + gamma[None, :]
        + phi[None, :]
        + delta
    )

    rates = np.asarray(scenario.strata_rates)
    expected_strata = population * rates[None, :] / t_weeks  # (n, s) per week
    expected_cell = expected_strata.sum(axis=1)  # (n,) per week

    deaths = np.zeros((n, t_weeks, n_strata, 2))
    split_p = expected_strata / expected_cell[:, None]
    for i in range(n):
        for t in range(t_weeks):
            mean = expected_cell[i] * math.exp(eta[i, t])
            if scenario.likelihood == "zip" and rng.uniform() < scenario.zip_pi:
                total = 0
            else:
                total = int(rng.poisson(mean))
            if total:
                deaths[i, t, :, 0] = rng.multinomial(total, split_p[i])

    panel = EpiPanel(
        graph=graph,
        weeks=np.arange(12, 12 + t_weeks),
        strata=scenario.strata,
        deaths=deaths,
        population=population,
        covariate=covariate,
        report=IngestReport(0),
    )
    truth = {
        "u": u,
        "v": v,
        "gamma": gamma,
        "phi": phi,
        "delta": delta,
        "eta": eta,
        "beta0": scenario.beta0,
        "beta1_by_week": beta1_t,
        "expected_per_week": np.tile(expected_cell[:, None], (1, t_weeks)),
    }
    return panel, truth


@dataclass(frozen=True)
class ReplicateResult:
    replicate: int
    ok: bool
    beta1_mean: float = math.nan
    beta1_q025: float = math.nan
    beta1_q975: float = math.nan
    covered: bool = False
    abs_error: float = math.nan
    dic_winner: str | None = None
    error: str = ""


@dataclass(frozen=True)
class RecoveryReport:
    scenario: SimScenario
    results: tuple[ReplicateResult, ...]
    coverage: float
    mean_abs_error: float
    n_failed: int

    def dic_poisson_share(self) -> float | None:
        winners = [r.dic_winner for r in self.results if r.ok and r.dic_winner]
        if not winners:
            return None
        return sum(1 for w in winners if w == "poisson") / len(winners)


def _run_replicate(args) -> ReplicateResult:
    scenario, seed, rep, compare_likelihoods, max_evals = args
    rng = np.random.default_rng([seed, rep])
    try:
        panel, _ = simulate_panel(scenario, rng=rng)
        expected = expected_counts(panel, CauseClass.CONFIRMED, basis="period")
        assembly = assemble(scenario.model_spec(), panel, expected)
        fit = fit_model(assembly, max_evals=max_evals)
        mean, _, q025, q975 = posterior_summary(fit, "beta1")
        dic_winner = None
        if compare_likelihoods:
            dic_here = compute_dic(assembly, fit, seed=rep)
            other_spec = replace(scenario.model_spec(), likelihood="zip")
            other_assembly = assemble(other_spec, panel, expected)
            other_fit = fit_model(other_assembly, max_evals=max_evals)
            dic_other = compute_dic(other_assembly, other_fit, seed=rep)
            dic_winner = select_by_dic({"poisson": dic_here, "zip": dic_other})
        true_beta1 = float(scenario.beta1_by_week()[0])
        return ReplicateResult(
            replicate=rep,
            ok=True,
            beta1_mean=mean,
            beta1_q025=q025,
            beta1_q975=q975,
            covered=bool(q025 <= true_beta1 <= q975),
            abs_error=abs(mean - true_beta1),
            dic_winner=dic_winner,
        )
    except (NumericalError, ExploreError, ValueError) as exc:
        return ReplicateResult(replicate=rep, ok=False, error=f"{type(exc).__name__}: {exc}")


def recovery_experiment(
    scenario: SimScenario,
    replicates: int,
    seed: int = 0,
    threads: int = 1,
    compare_likelihoods: bool = False,
    max_evals: int = 500,
) -> RecoveryReport:
    """Simulate-and-refit replicates; report interval coverage and bias of the
    covariate effect.

    Individual fit failures are recorded; more than 20% failures aborts the
    experiment.  Replicates derive their seeds from (seed, index), so results
    do not depend on the degree of parallelism.
    """
    if replicates < 20:
        raise SimulationError("recovery experiment needs at least 20 replicates")
    jobs = [
        (scenario, seed, rep, compare_likelihoods, max_evals)
        for rep in range(replicates)
    ]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_replicate, jobs))
    else:
        results = [_run_replicate(job) for job in jobs]

    good = [r for r in results if r.ok]
    n_failed = replicates - len(good)
    if n_failed > 0.2 * replicates:
        raise RecoveryError(f"{n_failed}/{replicates} replicate fits failed")
    coverage = sum(r.covered for r in good) / len(good)
    mean_abs_error = float(np.mean([r.abs_error for r in good]))
    return RecoveryReport(
        scenario=scenario,
        results=tuple(results),
        coverage=coverage,
        mean_abs_error=mean_abs_error,
        n_failed=n_failed,
    )


@dataclass(frozen=True)
class ShiftReplicate:
    replicate: int
    ok: bool
    detected_week: int = -1
    true_week: int = -1
    within_one: bool = False
    error: str = ""


@dataclass(frozen=True)
class ShiftReport:
    results: tuple[ShiftReplicate, ...]
    hit_rate: float
    n_failed: int


def _run_shift_replicate(args) -> ShiftReplicate:
    scenario, seed, rep, max_evals = args
    rng = np.random.default_rng([seed, rep])
    try:
        panel, _ = simulate_panel(scenario, rng=rng)
        series = weekly_covariate_series(
            panel, scenario.model_spec(), cause=CauseClass.CONFIRMED, max_evals=max_evals
        )
        if len(series.weeks) < scenario.n_weeks // 2:
            raise RecoveryError("too few weeks retained for detection")
        schedule = scenario.beta1_by_week()
        flips = np.flatnonzero(schedule < 0)
        if flips.size == 0 or flips[0] == 0:
            raise SimulationError("shift scenario needs a mid-series sign flip")
        true_week = int(panel.weeks[flips[0]])
        detected_pos = detect_sign_flip(series.rr_means())
        if detected_pos >= len(series.weeks):
            detected_week = int(series.weeks[-1]) + 1
        else:
            detected_week = int(series.weeks[detected_pos])
        return ShiftReplicate(
            replicate=rep,
            ok=True,
            detected_week=detected_week,
            true_week=true_week,
            within_one=abs(detected_week - true_week) <= 1,
        )
    except (NumericalError, ExploreError, RecoveryError, ValueError) as exc:
        return ShiftReplicate(replicate=rep, ok=False, error=f"{type(exc).__name__}: {exc}")


def shift_experiment(
    scenario: SimScenario,
    replicates: int,
    seed: int = 0,
    threads: int = 1,
    max_evals: int = 500,
) -> ShiftReport:
    """How often the per-week covariate series localizes a mid-series sign
    flip of the covariate effect to within one week of the truth."""
    if scenario.beta1_schedule is None:
        raise SimulationError("shift experiment needs a beta1 schedule")
    jobs = [(scenario, seed, rep, max_evals) for rep in range(replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_shift_replicate, jobs))
    else:
        results = [_run_shift_replicate(job) for job in jobs]
    good = [r for r in results if r.ok]
    n_failed = replicates - len(good)
    if n_failed > 0.2 * replicates:
        raise RecoveryError(f"{n_failed}/{replicates} shift replicates failed")
    hit_rate = sum(r.within_one for r in good) / len(good)
    return ShiftReport(results=tuple(results), hit_rate=hit_rate, n_failed=n_failed)


_SCENARIO_FIELDS = {
    "graph_kind": str,
    "rows": int,
    "cols": int,
    "n_units": int,
    "radius": float,
    "n_weeks": int,
    "beta0": float,
    "beta1": float,
    "tau_b": float,
    "phi_mix": float,
    "tau_gamma": float,
    "tau_phi": float,
    "tau_delta": float,
    "likelihood": str,
    "zip_pi": float,
    "covariate_kind": str,
    "pop_median": float,
    "pop_sigma": float,
    "seed": int,
}


def parse_scenario_config(text: str) -> SimScenario:
    """Build a scenario from a key=value file; unknown keys are rejected."""
    values = parse_keyvalue(text)
    kwargs = {}
    for key, raw in values.items():
        if key == "beta1_schedule":
            kwargs[key] = tuple(float(v) for v in raw.split(","))
            continue
        if key not in _SCENARIO_FIELDS:
            raise SimulationError(f"unknown scenario key {key!r}")
        kwargs[key] = _SCENARIO_FIELDS[key](raw)
    return SimScenario(**kwargs)
