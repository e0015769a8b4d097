"""Command-line front door: ingestion, rate tables, expected counts, model
fits, RR summaries, simulation, and recovery experiments, each leaving a run
manifest with input and artifact digests."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .fit import ExploreError, compute_dic, fit_model, posterior_summary
from .graph import GraphError, load_edge_list
from .laplace import NumericalError
from .mcmc import OracleError
from .model import ModelError, ModelSpec, assemble, parse_keyvalue, parse_model_config
from .panel import CauseClass, IngestError, ingest_panel
from .rates import RateError, expected_counts, period_rate, weekly_rates, zero_fraction
from .simulate import (
    RecoveryError,
    SimulationError,
    parse_scenario_config,
    recovery_experiment,
    simulate_panel,
)
from .summaries import (
    SummaryError,
    covariate_rr,
    spatiotemporal_rr,
    temporal_rr,
    weekly_covariate_series,
)

log = logging.getLogger("dmap.cli")

INPUT_ERRORS = (
    IngestError,
    GraphError,
    ModelError,
    RateError,
    SimulationError,
    SummaryError,
    FileNotFoundError,
    ValueError,
)
NUMERICAL_ERRORS = (NumericalError, ExploreError, OracleError, RecoveryError)


class _Parser(argparse.ArgumentParser):
    """Argparse with input errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _fmt(x) -> str:
    """Shortest round-trip decimal form; deterministic across runs."""
    if isinstance(x, (np.floating, float)):
        return repr(float(x))
    return str(x)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


class RunContext:
    """Collects artifacts and emits the run manifest."""

    def __init__(self, args, command):
        self.args = args
        self.command = command
        self.started = time.monotonic()
        self.out = Path(args.out)
        if self.out.exists() and any(self.out.iterdir()) and not args.force:
            raise IngestError(
                f"output directory {self.out} is not empty (use --force to overwrite)"
            )
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: dict[str, str] = {}
        self.inputs: dict[str, str] = {}

    def record_input(self, label, path):
        if path:
            self.inputs[label] = _sha256(Path(path))

    def write_csv(self, name, header, rows):
        path = self.out / name
        _write_csv(path, header, rows)
        self.artifacts[name] = _sha256(path)
        return path

    def write_text(self, name, text):
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        self.artifacts[name] = _sha256(path)
        return path

    def finish(self):
        manifest = {
            "command": self.command,
            "argv": sys.argv[1:],
            "tool_version": __version__,
            "seed": getattr(self.args, "seed", None),
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "duration_seconds": round(time.monotonic() - self.started, 3),
        }
        with open(self.out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _add_data_flags(p):
    p.add_argument("--deaths", required=True, help="deaths CSV")
    p.add_argument("--population", required=True, help="population CSV")
    p.add_argument("--covariate", required=True, help="covariate CSV")
    p.add_argument("--edges", required=True, help="edge list CSV")


def _add_run_flags(p, seed=True):
    p.add_argument("--out", default="dmap_out", help="output directory")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--threads",
        type=int,
        default=os.cpu_count() or 1,
        help="parallel workers; results are identical for any value",
    )


def _add_model_flags(p):
    p.add_argument("--model", help="model configuration file (key=value)")
    p.add_argument("--cause", choices=["confirmed", "suspected", "total"])
    p.add_argument("--basis", choices=["period", "per-week"])


def build_parser() -> _Parser:
    parser = _Parser(prog="dmap", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dmap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate inputs and report panel shape")
    _add_data_flags(p)
    _add_run_flags(p, seed=False)

    p = sub.add_parser("rates", help="period and weekly mortality-rate tables")
    _add_data_flags(p)
    p.add_argument("--cause", choices=["confirmed", "suspected", "total"])
    _add_run_flags(p, seed=False)

    p = sub.add_parser("expected", help="expected counts by indirect standardization")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_run_flags(p, seed=False)

    p = sub.add_parser("fit", help="fit the latent Gaussian model")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_run_flags(p)

    p = sub.add_parser("summarize", help="fit and write relative-risk tables")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--per-week", action="store_true", help="also fit the per-week covariate series")
    _add_run_flags(p)

    p = sub.add_parser("simulate", help="draw a synthetic panel from a scenario")
    p.add_argument("--scenario", help="scenario configuration file (key=value)")
    _add_run_flags(p)

    p = sub.add_parser("recover", help="coverage experiment on simulated panels")
    p.add_argument("--scenario", help="scenario configuration file (key=value)")
    p.add_argument("--replicates", type=int, default=100)
    _add_run_flags(p)
    return parser


def _load_panel(args, ctx):
    for label in ("deaths", "population", "covariate", "edges"):
        ctx.record_input(label, getattr(args, label))
    graph = load_edge_list(args.edges)
    return ingest_panel(args.deaths, args.population, args.covariate, graph)


def _load_model(args, ctx):
    spec = ModelSpec()
    cause = CauseClass.CONFIRMED
    basis = "period"
    if getattr(args, "model", None):
        ctx.record_input("model", args.model)
        text = Path(args.model).read_text(encoding="utf-8")
        spec = parse_model_config(text)
        keys = parse_keyvalue(text)
        if "cause" in keys:
            cause = CauseClass.parse(keys["cause"])
        if "basis" in keys:
            basis = keys["basis"]
    if getattr(args, "cause", None):
        cause = CauseClass.parse(args.cause)
    if getattr(args, "basis", None):
        basis = args.basis
    return spec, cause, basis


def cmd_ingest(args) -> int:
    ctx = RunContext(args, "ingest")
    panel = _load_panel(args, ctx)
    lines = [
        f"areas: {panel.n_areas}",
        f"weeks: {panel.weeks[0]}..{panel.weeks[-1]} ({panel.n_weeks})",
        f"strata: {len(panel.strata)}",
        f"total population: {int(panel.population.sum())}",
        f"deaths confirmed: {int(panel.deaths[..., 0].sum())}",
        f"deaths suspected: {int(panel.deaths[..., 1].sum())}",
        f"dropped rows with unknown sex/age: {panel.report.dropped_unknown_stratum}",
    ]
    ctx.write_text("ingest_report.txt", "\n".join(lines) + "\n")
    ctx.finish()
    return 0


def cmd_rates(args) -> int:
    ctx = RunContext(args, "rates")
    panel = _load_panel(args, ctx)
    causes = (
        [CauseClass.parse(args.cause)]
        if args.cause
        else [CauseClass.CONFIRMED, CauseClass.SUSPECTED, CauseClass.TOTAL]
    )
    total_pop = float(panel.population.sum())

    weekly_rows = []
    for cause in causes:
        series = weekly_rates(panel, cause)
        for week, value in zip(panel.weeks, series):
            weekly_rows.append((int(week), cause.value, value))
    ctx.write_csv("weekly_rates.csv", ["week", "cause", "rate_per_100k_week"], weekly_rows)

    sexes = sorted({s for s, _ in panel.strata})
    ages = sorted({a for _, a in panel.strata})
    period_rows = []
    for cause in causes:
        deaths = panel.deaths_for(cause)
        period_rows.append(
            ("all", "all", cause.value, int(deaths.sum()), period_rate(deaths.sum(), total_pop))
        )
        for sex in sexes:
            idx = [k for k, (s, _) in enumerate(panel.strata) if s == sex]
            d = deaths[:, :, idx].sum()
            p = panel.population[:, idx].sum()
            period_rows.append(("sex", sex, cause.value, int(d), period_rate(d, p)))
        for age in ages:
            idx = [k for k, (_, a) in enumerate(panel.strata) if a == age]
            d = deaths[:, :, idx].sum()
            p = panel.population[:, idx].sum()
            period_rows.append(("age", age, cause.value, int(d), period_rate(d, p)))
    ctx.write_csv(
        "period_rates.csv",
        ["group_type", "group", "cause", "deaths", "rate_per_100k"],
        period_rows,
    )

    zero_rows = [
        (int(week), value)
        for week, value in zip(panel.weeks, zero_fraction(panel, causes[0], per_week=True))
    ]
    ctx.write_csv("zero_fraction.csv", ["week", "percent_zero_cells"], zero_rows)
    ctx.finish()
    return 0


def cmd_expected(args) -> int:
    ctx = RunContext(args, "expected")
    panel = _load_panel(args, ctx)
    _, cause, basis = _load_model(args, ctx)
    exp = expected_counts(panel, cause, basis=basis)
    rows = [
        (panel.graph.unit_ids[i], int(panel.weeks[t]), exp.values[i, t])
        for i in range(panel.n_areas)
        for t in range(panel.n_weeks)
    ]
    ctx.write_csv("expected.csv", ["area_id", "week", "expected"], rows)
    ctx.finish()
    return 0


def _run_fit(args, ctx):
    panel = _load_panel(args, ctx)
    spec, cause, basis = _load_model(args, ctx)
    exp = expected_counts(panel, cause, basis=basis)
    assembly = assemble(spec, panel, exp)
    if assembly.excluded_cells:
        log.warning(
            "%d cells with zero expected counts excluded from the fit",
            len(assembly.excluded_cells),
        )
    fit = fit_model(assembly)
    return panel, spec, cause, basis, assembly, fit


def _write_fit_reports(ctx, assembly, fit, seed):
    hyper_rows = []
    for k, point in enumerate(fit.points):
        for name, value in zip(assembly.hyper_names, point.theta):
            hyper_rows.append((k, name, value, point.log_marginal, point.weight))
        if not assembly.hyper_names:
            hyper_rows.append((k, "", "", point.log_marginal, point.weight))
    ctx.write_csv(
        "hyper_points.csv",
        ["point", "hyper", "value", "log_marginal", "weight"],
        hyper_rows,
    )

    fixed_rows = []
    for name in ("beta0", "beta1"):
        if name in assembly.layout:
            mean, sd, q025, q975 = posterior_summary(fit, name)
            fixed_rows.append((name, mean, sd, q025, q975))
    ctx.write_csv(
        "fixed_effects.csv", ["effect", "mean", "sd", "q025", "q975"], fixed_rows
    )

    dic = compute_dic(assembly, fit, seed=seed)
    ctx.write_csv(
        "dic.csv",
        ["mean_deviance", "effective_params", "dic"],
        [(dic.mean_deviance, dic.effective_params, dic.dic)],
    )

    conv_rows = [
        (k, point.approx.converged, point.approx.iterations)
        for k, point in enumerate(fit.points)
    ]
    ctx.write_csv("convergence.csv", ["point", "converged", "newton_iterations"], conv_rows)

    if assembly.excluded_cells:
        ctx.write_csv(
            "excluded_cells.csv",
            ["area_id", "week"],
            list(assembly.excluded_cells),
        )


def cmd_fit(args) -> int:
    ctx = RunContext(args, "fit")
    _, _, _, _, assembly, fit = _run_fit(args, ctx)
    _write_fit_reports(ctx, assembly, fit, args.seed)
    ctx.finish()
    return 0


def cmd_summarize(args) -> int:
    ctx = RunContext(args, "summarize")
    panel, spec, cause, basis, assembly, fit = _run_fit(args, ctx)
    _write_fit_reports(ctx, assembly, fit, args.seed)

    note = ""
    if spec.has("rw1_temporal") and spec.has("iid_temporal"):
        table = temporal_rr(fit)
        note = table.baseline_note
        ctx.write_csv(
            "temporal_rr.csv",
            ["week", "rr_mean", "rr_sd", "rr_q025", "rr_q975"],
            [
                (w, m, s, lo, hi)
                for w, m, s, lo, hi in zip(
                    table.week_col, table.rr_mean, table.rr_sd, table.rr_q025, table.rr_q975
                )
            ],
        )
    if spec.has("bym2_spatial"):
        table = spatiotemporal_rr(fit)
        ctx.write_csv(
            "spatiotemporal_rr.csv",
            ["area_id", "week", "rr_mean", "rr_sd", "rr_q025", "rr_q975"],
            [
                (a, w, m, s, lo, hi)
                for a, w, m, s, lo, hi in zip(
                    table.area_col,
                    table.week_col,
                    table.rr_mean,
                    table.rr_sd,
                    table.rr_q025,
                    table.rr_q975,
                )
            ],
        )
    if spec.has("covariate"):
        rr = covariate_rr(fit)
        ctx.write_csv(
            "covariate_rr.csv",
            ["rr_mean", "rr_sd", "rr_q025", "rr_q975"],
            [(rr.rr_mean, rr.rr_sd, rr.rr_q025, rr.rr_q975)],
        )
    if args.per_week:
        series = weekly_covariate_series(panel, spec, cause=cause, threads=args.threads)
        ctx.write_csv(
            "weekly_covariate_rr.csv",
            ["week", "rr_mean", "rr_sd", "rr_q025", "rr_q975"],
            [
                (w, e.rr_mean, e.rr_sd, e.rr_q025, e.rr_q975)
                for w, e in zip(series.weeks, series.estimates)
            ],
        )
        if series.skipped or series.failed:
            lines = [f"skipped (no deaths): {list(series.skipped)}"] + [
                f"failed week {w}: {msg}" for w, msg in series.failed
            ]
            ctx.write_text("weekly_covariate_rr_issues.txt", "\n".join(lines) + "\n")

    ctx.write_text(
        "summary_info.txt",
        "\n".join(
            [
                f"model: likelihood={spec.likelihood} effects={','.join(spec.effects)}",
                f"cause: {cause.value}",
                f"basis: {basis}",
                f"seed: {args.seed}",
                f"baseline: {note}",
            ]
        )
        + "\n",
    )
    ctx.finish()
    return 0


def cmd_simulate(args) -> int:
    ctx = RunContext(args, "simulate")
    scenario = _load_scenario(args, ctx)
    scenario = replace(scenario, seed=args.seed)
    panel, truth = simulate_panel(scenario)

    death_rows = []
    for i in range(panel.n_areas):
        for t in range(panel.n_weeks):
            for s, (sex, age) in enumerate(panel.strata):
                for c, code in ((0, "B34.2"), (1, "U04.9")):
                    count = int(panel.deaths[i, t, s, c])
                    if count:
                        death_rows.append(
                            (panel.graph.unit_ids[i], int(panel.weeks[t]), sex, age, code, count)
                        )
    ctx.write_csv(
        "deaths.csv", ["area_id", "week", "sex", "age_group", "cause", "count"], death_rows
    )
    ctx.write_csv(
        "population.csv",
        ["area_id", "sex", "age_group", "count"],
        [
            (panel.graph.unit_ids[i], sex, age, int(panel.population[i, s]))
            for i in range(panel.n_areas)
            for s, (sex, age) in enumerate(panel.strata)
        ],
    )
    ctx.write_csv(
        "covariate.csv",
        ["area_id", "value"],
        [(panel.graph.unit_ids[i], float(panel.covariate[i])) for i in range(panel.n_areas)],
    )
    ctx.write_csv(
        "edges.csv",
        ["src", "dst"],
        [
            (panel.graph.unit_ids[i], panel.graph.unit_ids[j])
            for i, j in sorted(panel.graph.edges)
        ],
    )
    truth_rows = [
        (panel.graph.unit_ids[i], int(panel.weeks[t]), truth["eta"][i, t])
        for i in range(panel.n_areas)
        for t in range(panel.n_weeks)
    ]
    ctx.write_csv("truth_eta.csv", ["area_id", "week", "eta"], truth_rows)
    ctx.finish()
    return 0


def _load_scenario(args, ctx):
    if getattr(args, "scenario", None):
        ctx.record_input("scenario", args.scenario)
        return parse_scenario_config(Path(args.scenario).read_text(encoding="utf-8"))
    from .simulate import SimScenario

    return SimScenario()


def cmd_recover(args) -> int:
    ctx = RunContext(args, "recover")
    scenario = _load_scenario(args, ctx)
    report = recovery_experiment(
        scenario, args.replicates, seed=args.seed, threads=args.threads
    )
    ctx.write_csv(
        "recovery.csv",
        ["replicate", "ok", "beta1_mean", "beta1_q025", "beta1_q975", "covered", "abs_error", "error"],
        [
            (r.replicate, r.ok, r.beta1_mean, r.beta1_q025, r.beta1_q975, r.covered, r.abs_error, r.error)
            for r in report.results
        ],
    )
    ctx.write_text(
        "recovery_summary.txt",
        "\n".join(
            [
                f"replicates: {args.replicates}",
                f"failed: {report.n_failed}",
                f"coverage of true covariate effect: {report.coverage:.3f}",
                f"mean absolute error: {report.mean_abs_error:.4f}",
            ]
        )
        + "\n",
    )
    ctx.finish()
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "rates": cmd_rates,
    "expected": cmd_expected,
    "fit": cmd_fit,
    "summarize": cmd_summarize,
    "simulate": cmd_simulate,
    "recover": cmd_recover,
}


def _configure_logging():
    level = os.environ.get("DMAP_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NUMERICAL_ERRORS as exc:
        log.error("numerical failure: %s", exc)
        return 2
    except INPUT_ERRORS as exc:
        log.error("input error: %s", exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
