"""Ingestion of death counts, stratified populations, and the per-area
socio-economic covariate into a dense panel."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .graph import ArealGraph

__all__ = ["CauseClass", "EpiPanel", "IngestReport", "ingest_panel", "select_week"]

log = logging.getLogger("dmap.panel")

# ICD-10 codes used in the death table's cause column.
CAUSE_CODES = {"B34.2": 0, "U04.9": 1}

UNKNOWN_LABELS = {"", "na", "ignored", "unknown"}


class CauseClass(Enum):
    CONFIRMED = "confirmed"
    SUSPECTED = "suspected"
    TOTAL = "total"

    @classmethod
    def parse(cls, text: str) -> "CauseClass":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise IngestError(f"unknown cause class {text!r}") from None


class IngestError(ValueError):
    """Malformed or inconsistent input tables."""


@dataclass(frozen=True)
class IngestReport:
    dropped_unknown_stratum: int
    excluded_rows: tuple[str, ...] = ()


@dataclass(frozen=True)
class EpiPanel:
    """Dense panel of death counts, populations, and a covariate.

    ``deaths`` has shape (n_areas, n_weeks, n_strata, 2) with the last axis
    holding the raw confirmed/suspected classes; the total class is always
    derived as their sum.  ``population`` has shape (n_areas, n_strata) and
    ``covariate`` shape (n_areas,).  Weeks are contiguous integer labels.
    """

    graph: ArealGraph
    weeks: np.ndarray
    strata: tuple[tuple[str, str], ...]
    deaths: np.ndarray
    population: np.ndarray
    covariate: np.ndarray
    report: IngestReport = field(default=IngestReport(0), compare=False)

    def __post_init__(self):
        n, t, s = self.graph.n_units, len(self.weeks), len(self.strata)
        if self.deaths.shape != (n, t, s, 2):
            raise IngestError(f"deaths shape {self.deaths.shape} != {(n, t, s, 2)}")
        if self.population.shape != (n, s):
            raise IngestError(f"population shape {self.population.shape} != {(n, s)}")
        if self.covariate.shape != (n,):
            raise IngestError(f"covariate shape {self.covariate.shape} != {(n,)}")
        if np.any(self.deaths < 0) or np.any(self.population < 0):
            raise IngestError("negative counts")
        if self.population.sum() <= 0:
            raise IngestError("total population must be positive")
        if not np.all(np.isfinite(self.covariate)):
            raise IngestError("covariate values must be finite")
        if len(self.weeks) > 1 and not np.all(np.diff(self.weeks) == 1):
            raise IngestError("weeks must be contiguous and strictly increasing")

    @property
    def n_areas(self) -> int:
        return self.graph.n_units

    @property
    def n_weeks(self) -> int:
        return len(self.weeks)

    def deaths_for(self, cause: CauseClass) -> np.ndarray:
        """Counts of shape (n_areas, n_weeks, n_strata) for one cause class."""
        if cause is CauseClass.CONFIRMED:
            return self.deaths[..., 0]
        if cause is CauseClass.SUSPECTED:
            return self.deaths[..., 1]
        return self.deaths.sum(axis=3)


def select_week(panel: EpiPanel, week_label: int) -> EpiPanel:
    """Single-week view of a panel (used by the per-week spatial fits)."""
    matches = np.flatnonzero(panel.weeks == week_label)
    if matches.size != 1:
        raise IngestError(f"week {week_label} not in panel")
    t = int(matches[0])
    return EpiPanel(
        graph=panel.graph,
        weeks=panel.weeks[t : t + 1],
        strata=panel.strata,
        deaths=panel.deaths[:, t : t + 1],
        population=panel.population,
        covariate=panel.covariate,
        report=panel.report,
    )


def _open_rows(source, expected_header):
    if hasattr(source, "read"):
        fh, close = source, False
    elif isinstance(source, str) and "\n" in source:
        fh, close = io.StringIO(source), False
    else:
        fh, close = open(source, "r", encoding="utf-8", newline=""), True
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected_header:
            raise IngestError(
                f"expected header {','.join(expected_header)!r}, "
                f"got {','.join(header or [])!r}"
            )
        rows = [row for row in reader if any(cell.strip() for cell in row)]
    finally:
        if close:
            fh.close()
    return rows


def _parse_count(text, rownum, table):
    try:
        value = int(text)
    except ValueError:
        raise IngestError(f"{table} row {rownum}: bad count {text!r}") from None
    if value < 0:
        raise IngestError(f"{table} row {rownum}: negative count {value}")
    return value


def ingest_panel(deaths_table, population_table, covariate_table, graph: ArealGraph) -> EpiPanel:
    """Assemble an :class:`EpiPanel` from the three CSV tables.

    Missing (area, week, stratum) death cells become explicit zeros.  Rows
    whose sex or age-group label is unknown are dropped and counted in the
    ingest report.  Unknown area ids, negative counts, and duplicate keys are
    rejected.
    """
    pop_rows = _open_rows(population_table, ["area_id", "sex", "age_group", "count"])
    strata_seen: dict[tuple[str, str], None] = {}
    pop_cells: dict[tuple[int, tuple[str, str]], int] = {}
    for rownum, row in enumerate(pop_rows, start=2):
        area, sex, age, count = (c.strip() for c in row[:4])
        if sex.lower() in UNKNOWN_LABELS or age.lower() in UNKNOWN_LABELS:
            raise IngestError(f"population row {rownum}: unknown stratum label")
        i = graph.index_of(area)
        key = (i, (sex, age))
        if key in pop_cells:
            raise IngestError(f"population row {rownum}: duplicate key {(area, sex, age)}")
        pop_cells[key] = _parse_count(count, rownum, "population")
        strata_seen.setdefault((sex, age))
    strata = tuple(sorted(strata_seen))
    if not strata:
        raise IngestError("population table defines no strata")
    stratum_index = {s: k for k, s in enumerate(strata)}

    n = graph.n_units
    population = np.zeros((n, len(strata)))
    for (i, s), count in pop_cells.items():
        population[i, stratum_index[s]] = count

    death_rows = _open_rows(deaths_table, ["area_id", "week", "sex", "age_group", "cause", "count"])
    weeks_seen = []
    parsed = []
    dropped = 0
    for rownum, row in enumerate(death_rows, start=2):
        area, week, sex, age, cause, count = (c.strip() for c in row[:6])
        i = graph.index_of(area)
        try:
            w = int(week)
        except ValueError:
            raise IngestError(f"deaths row {rownum}: bad week {week!r}") from None
        value = _parse_count(count, rownum, "deaths")
        if sex.lower() in UNKNOWN_LABELS or age.lower() in UNKNOWN_LABELS:
            dropped += value
            continue
        if (sex, age) not in stratum_index:
            raise IngestError(
                f"deaths row {rownum}: stratum {(sex, age)} absent from population table"
            )
        if cause not in CAUSE_CODES:
            raise IngestError(f"deaths row {rownum}: unknown cause code {cause!r}")
        parsed.append((rownum, i, w, stratum_index[(sex, age)], CAUSE_CODES[cause], value))
        weeks_seen.append(w)
    if not weeks_seen:
        raise IngestError("deaths table contains no usable rows")

    weeks = np.arange(min(weeks_seen), max(weeks_seen) + 1)
    week_index = {int(w): k for k, w in enumerate(weeks)}
    deaths = np.zeros((n, len(weeks), len(strata), 2))
    filled = set()
    for rownum, i, w, s, c, value in parsed:
        key = (i, w, s, c)
        if key in filled:
            raise IngestError(f"deaths row {rownum}: duplicate key")
        filled.add(key)
        deaths[i, week_index[w], s, c] = value

    cov_rows = _open_rows(covariate_table, ["area_id", "value"])
    covariate = np.full(n, np.nan)
    cov_seen = set()
    for rownum, row in enumerate(cov_rows, start=2):
        area, value = row[0].strip(), row[1].strip()
        i = graph.index_of(area)
        if i in cov_seen:
            raise IngestError(f"covariate row {rownum}: duplicate area {area!r}")
        cov_seen.add(i)
        covariate[i] = float(value)
    missing = [graph.unit_ids[i] for i in range(n) if i not in cov_seen]
    if missing:
        raise IngestError(f"covariate missing for units: {', '.join(missing[:5])}")

    if dropped:
        log.info("dropped %d deaths with unknown sex or age group", dropped)
    return EpiPanel(
        graph=graph,
        weeks=weeks,
        strata=strata,
        deaths=deaths,
        population=population,
        covariate=covariate,
        report=IngestReport(dropped_unknown_stratum=dropped),
    )
