"""Latent Gaussian model declaration and assembly.

A model is a likelihood (Poisson, zero-inflated Poisson, or a Gaussian
validation hook) over observed area-week counts, whose log relative risk is a
sum of optional effects: intercept, covariate slope, a mixed spatial effect
(variance-scaled intrinsic CAR plus iid, with a total precision and a mixing
proportion), a first-order random-walk weekly effect, an iid weekly effect,
and an iid area-week interaction.  Expected counts enter as a log offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.special import expit

from .panel import EpiPanel
from .rates import ExpectedCounts
from .structure import StructureMatrix, icar_structure, rw1_structure, scale_gv

__all__ = [
    "EFFECTS",
    "PriorSpec",
    "ModelSpec",
    "ModelAssembly",
    "pc_precision_rate",
    "assemble",
    "joint_latent_precision",
    "log_hyper_prior",
    "parse_model_config",
]

EFFECTS = (
    "intercept",
    "covariate",
    "bym2_spatial",
    "rw1_temporal",
    "iid_temporal",
    "iid_interaction",
)

RANDOM_EFFECTS = ("bym2_spatial", "rw1_temporal", "iid_temporal", "iid_interaction")

LIKELIHOODS = ("poisson", "zip", "gaussian")

# Vague-but-proper precision on fixed effects keeps the joint precision
# invertible while being practically flat.
FIXED_EFFECT_PRECISION = 1e-6

# Mixing proportions are clamped into the open interval for invertibility;
# the boundary limits are then represented by a numerically pinned component.
MIX_EPS = 1e-12


class ModelError(ValueError):
    """Inconsistent model specification or assembly input."""


def pc_precision_rate(u: float, alpha: float) -> float:
    """Rate of the exponential prior on a random-effect standard deviation
    calibrated so that P(sigma > u) = alpha."""
    if not (u > 0):
        raise ModelError(f"threshold u must be positive, got {u}")
    if not (0 < alpha < 1):
        raise ModelError(f"tail probability alpha must be in (0, 1), got {alpha}")
    return -math.log(alpha) / u


@dataclass(frozen=True)
class PriorSpec:
    """Penalized-complexity (u, alpha) settings per random effect.

    Precisions get an exponential prior on the standard deviation with rate
    -ln(alpha)/u; the spatial mixing proportion and the zero-inflation
    probability get uniform priors on (0, 1).
    """

    pc: dict[str, tuple[float, float]] = field(default_factory=dict)

    def resolved(self) -> dict[str, tuple[float, float]]:
        out = {name: (1.0, 0.01) for name in RANDOM_EFFECTS}
        for name, ua in self.pc.items():
            if name not in RANDOM_EFFECTS:
                raise ModelError(f"unknown random effect {name!r} in prior spec")
            out[name] = (float(ua[0]), float(ua[1]))
        return out

    def rates(self) -> dict[str, float]:
        return {k: pc_precision_rate(u, a) for k, (u, a) in self.resolved().items()}


@dataclass(frozen=True)
class ModelSpec:
    likelihood: str = "poisson"
    effects: tuple[str, ...] = EFFECTS
    priors: PriorSpec = field(default_factory=PriorSpec)
    gaussian_obs_precision: float = 1.0  # validation hook only

    def __post_init__(self):
        if self.likelihood not in LIKELIHOODS:
            raise ModelError(f"unknown likelihood {self.likelihood!r}")
        unknown = [e for e in self.effects if e not in EFFECTS]
        if unknown:
            raise ModelError(f"unknown effects {unknown}")
        if "intercept" not in self.effects:
            raise ModelError("intercept effect is required")
        if len(set(self.effects)) != len(self.effects):
            raise ModelError("duplicate effects")

    def has(self, effect: str) -> bool:
        return effect in self.effects


# Hyperparameter slots in layout order; each tied to the effect that owns it.
_HYPER_SLOTS = (
    ("log_tau_b", "bym2_spatial"),
    ("logit_phi_mix", "bym2_spatial"),
    ("log_tau_gamma", "rw1_temporal"),
    ("log_tau_phi", "iid_temporal"),
    ("log_tau_delta", "iid_interaction"),
)


@dataclass(frozen=True)
class _Block:
    """One latent block: structural matrix plus its theta-dependent multiplier."""

    name: str
    sl: slice
    matrix: sparse.csr_matrix
    rank: int
    logdet_star: float
    kind: str  # fixed | bym2_struct | bym2_iid | rw1 | iid


def _logdet_star(dense: np.ndarray, null_dim: int) -> float:
    """Sum of log nonzero eigenvalues, with the null-space dimension known."""
    eigvals = np.linalg.eigvalsh(dense)
    if null_dim:
        kept = eigvals[null_dim:]
        if eigvals[null_dim - 1] > 1e-8 * max(eigvals[-1], 1.0):
            raise ModelError("structure matrix null space smaller than expected")
    else:
        kept = eigvals
    if np.any(kept <= 0):
        raise ModelError("structure matrix has unexpected nonpositive eigenvalues")
    return float(np.sum(np.log(kept)))


@dataclass(frozen=True)
class ModelAssembly:
    """Fully indexed latent model ready for inference.

    ``design`` maps the latent vector to per-observation linear predictors
    (log relative risks); ``offset`` holds log expected counts.  Constraint
    rows impose sum-to-zero on the structured spatial blocks (per connected
    component) and on the random-walk block.
    """

    spec: ModelSpec
    n_areas: int
    n_weeks: int
    week_labels: tuple[int, ...]
    area_ids: tuple[str, ...]
    layout: dict[str, slice]
    blocks: tuple[_Block, ...]
    design: sparse.csr_matrix
    offset: np.ndarray
    response: np.ndarray
    obs_area: np.ndarray
    obs_week: np.ndarray
    covariate: np.ndarray
    constraints: sparse.csr_matrix  # (k, m); k may be 0
    constraint_kinds: tuple[str, ...]  # block kind each constraint row acts on
    hyper_names: tuple[str, ...]
    pc_rates: dict[str, float]
    excluded_cells: tuple[tuple[str, int], ...]
    spatial_structure: StructureMatrix | None
    fill_order: np.ndarray
    _proj: object = field(repr=False, compare=False, default=None)

    @property
    def latent_dim(self) -> int:
        return self.design.shape[1]

    @property
    def n_obs(self) -> int:
        return self.design.shape[0]

    @property
    def n_constraints(self) -> int:
        return self.constraints.shape[0]

    @property
    def n_hyper(self) -> int:
        return len(self.hyper_names)

    def constraint_gram_logdet(self) -> float:
        c = self.constraints
        if c.shape[0] == 0:
            return 0.0
        gram = (c @ c.T).toarray()
        sign, logdet = np.linalg.slogdet(gram)
        if sign <= 0:
            raise ModelError("constraint rows are linearly dependent")
        return float(logdet)

    def project_out_constraints(self, g: np.ndarray) -> np.ndarray:
        """Orthogonal projection of a latent-space vector onto {Cx = 0}."""
        c = self.constraints
        if c.shape[0] == 0:
            return g
        if self._proj is None:
            gram = cho_factor((c @ c.T).toarray())
            object.__setattr__(self, "_proj", gram)
        return g - c.T @ cho_solve(self._proj, c @ g)

    def hyper_dict(self, theta: np.ndarray) -> dict[str, float]:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (len(self.hyper_names),):
            raise ModelError(
                f"theta has shape {theta.shape}, expected ({len(self.hyper_names)},)"
            )
        return dict(zip(self.hyper_names, theta))

    def default_theta(self) -> np.ndarray:
        """Exploration start: all log precisions at ln 4, mixing at 0.5,
        zero-inflation at 0.1 (internal scales)."""
        start = {
            "log_tau_b": math.log(4.0),
            "logit_phi_mix": 0.0,
            "log_tau_gamma": math.log(4.0),
            "log_tau_phi": math.log(4.0),
            "log_tau_delta": math.log(4.0),
            "logit_pi": math.log(0.1 / 0.9),
        }
        return np.array([start[name] for name in self.hyper_names])

    def zip_pi(self, theta: np.ndarray) -> float | None:
        if "logit_pi" not in self.hyper_names:
            return None
        return float(expit(self.hyper_dict(theta)["logit_pi"]))

    def constraint_regularization(self, theta) -> np.ndarray:
        """Per-constraint-row stiffness used to regularize the posterior
        precision along its null directions before factorization; the
        conditioning step makes the constrained results exact for any
        positive value, and matching the owning block's multiplier keeps the
        factorization well conditioned at every theta."""
        th = self.hyper_dict(np.atleast_1d(np.asarray(theta, dtype=float)))
        return np.array([_block_multiplier(kind, th) for kind in self.constraint_kinds])


def _block_multiplier(kind: str, th: dict[str, float]) -> float:
    if kind == "fixed":
        return FIXED_EFFECT_PRECISION
    if kind == "bym2_struct":
        phi = min(max(expit(th["logit_phi_mix"]), MIX_EPS), 1.0 - MIX_EPS)
        return math.exp(th["log_tau_b"]) / phi
    if kind == "bym2_iid":
        phi = min(max(expit(th["logit_phi_mix"]), MIX_EPS), 1.0 - MIX_EPS)
        return math.exp(th["log_tau_b"]) / (1.0 - phi)
    if kind == "rw1":
        return math.exp(th["log_tau_gamma"])
    if kind == "iid_t":
        return math.exp(th["log_tau_phi"])
    if kind == "iid_st":
        return math.exp(th["log_tau_delta"])
    raise ModelError(f"unknown block kind {kind!r}")


def joint_latent_precision(assembly: ModelAssembly, theta) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """Prior precision of the latent field at one hyperparameter point,
    plus the sum-to-zero constraint rows."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if not np.all(np.isfinite(theta)):
        raise ModelError("non-finite hyperparameter vector")
    th = assembly.hyper_dict(theta)
    parts = [_block_multiplier(b.kind, th) * b.matrix for b in assembly.blocks]
    q = sparse.block_diag(parts, format="csr")
    return q, assembly.constraints


def prior_logdet_star(assembly: ModelAssembly, theta) -> float:
    """Generalized log-determinant of the prior precision (nonzero
    eigenvalues only; the null space is exactly removed by the constraints)."""
    th = assembly.hyper_dict(np.atleast_1d(np.asarray(theta, dtype=float)))
    total = 0.0
    for b in assembly.blocks:
        total += b.rank * math.log(_block_multiplier(b.kind, th)) + b.logdet_star
    return total


def log_hyper_prior(assembly: ModelAssembly, theta) -> float:
    """Log prior density of the hyperparameters on the internal scale
    (log precisions, logit mixing, logit zero probability), Jacobians included."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    th = assembly.hyper_dict(theta)
    total = 0.0
    for name, value in th.items():
        if name.startswith("log_tau"):
            effect = _TAU_EFFECT[name]
            lam = assembly.pc_rates[effect]
            sigma = math.exp(-0.5 * value)
            total += math.log(lam) - lam * sigma + math.log(sigma) - math.log(2.0)
        else:
            # uniform on (0, 1); only the logit-scale Jacobian ln p(1-p) remains
            total += -np.logaddexp(0.0, value) - np.logaddexp(0.0, -value)
    return float(total)


_TAU_EFFECT = {
    "log_tau_b": "bym2_spatial",
    "log_tau_gamma": "rw1_temporal",
    "log_tau_phi": "iid_temporal",
    "log_tau_delta": "iid_interaction",
}


def _embedded_spatial_structure(panel_graph) -> StructureMatrix:
    """Variance-scaled ICAR with isolated units given an independent unit
    variance slot (excluded from the scaling geometric mean)."""
    raw = icar_structure(panel_graph)
    scaled = scale_gv(raw)
    singletons = [c[0] for c in scaled.components if len(c) == 1]
    if singletons:
        entries = scaled.entries.tolil(copy=True)
        for i in singletons:
            entries[i, i] = 1.0
        scaled = StructureMatrix(
            entries=entries.tocsr(),
            rank_deficiency=scaled.rank_deficiency - len(singletons),
            scale_factor=scaled.scale_factor,
            components=scaled.components,
        )
    return scaled


def assemble(spec: ModelSpec, panel: EpiPanel, expected: ExpectedCounts) -> ModelAssembly:
    """Index the latent field, build the observation design and offsets, and
    precompute the structural matrices for inference.

    Observations with zero expected count are excluded (their log offset is
    undefined) and listed in ``excluded_cells``.
    """
    n, t_weeks = panel.n_areas, panel.n_weeks
    if expected.values.shape != (n, t_weeks):
        raise ModelError(
            f"expected counts shape {expected.values.shape} != {(n, t_weeks)}"
        )
    if spec.has("rw1_temporal") and t_weeks < 2:
        raise ModelError("rw1_temporal effect needs at least 2 weeks")

    layout: dict[str, slice] = {}
    blocks: list[_Block] = []
    cursor = 0

    def add_block(name, size, matrix, rank, logdet_star, kind):
        nonlocal cursor
        sl = slice(cursor, cursor + size)
        layout[name] = sl
        blocks.append(_Block(name, sl, sparse.csr_matrix(matrix), rank, logdet_star, kind))
        cursor += size

    add_block("beta0", 1, sparse.identity(1), 1, 0.0, "fixed")
    if spec.has("covariate"):
        add_block("beta1", 1, sparse.identity(1), 1, 0.0, "fixed")

    spatial = None
    constraint_rows = []
    constraint_kinds = []
    if spec.has("bym2_spatial"):
        spatial = _embedded_spatial_structure(panel.graph)
        n_big = sum(1 for c in spatial.components if len(c) >= 2)
        ld = _logdet_star(spatial.entries.toarray(), n_big)
        add_block("u", n, spatial.entries, n - n_big, ld, "bym2_struct")
        for comp in spatial.components:
            if len(comp) >= 2:
                constraint_rows.append(("u", comp))
                constraint_kinds.append("bym2_struct")
        add_block("v", n, sparse.identity(n), n, 0.0, "bym2_iid")
    if spec.has("rw1_temporal"):
        rw1 = rw1_structure(t_weeks)
        ld = _logdet_star(rw1.entries.toarray(), 1)
        add_block("gamma", t_weeks, rw1.entries, t_weeks - 1, ld, "rw1")
        constraint_rows.append(("gamma", tuple(range(t_weeks))))
        constraint_kinds.append("rw1")
    if spec.has("iid_temporal"):
        add_block("phi", t_weeks, sparse.identity(t_weeks), t_weeks, 0.0, "iid_t")
    if spec.has("iid_interaction"):
        add_block("delta", n * t_weeks, sparse.identity(n * t_weeks), n * t_weeks, 0.0, "iid_st")

    m = cursor
    hyper_names = [name for name, effect in _HYPER_SLOTS if spec.has(effect)]
    if spec.likelihood == "zip":
        hyper_names.append("logit_pi")

    deaths = panel.deaths_for(expected.cause).sum(axis=2)
    rows, cols, vals = [], [], []
    y_list, offset_list, obs_area, obs_week = [], [], [], []
    excluded = []
    row = 0
    for i in range(n):
        for t in range(t_weeks):
            e_it = expected.values[i, t]
            if e_it <= 0:
                excluded.append((panel.graph.unit_ids[i], int(panel.weeks[t])))
                continue
            cols_it = [layout["beta0"].start]
            vals_it = [1.0]
            if spec.has("covariate"):
                cols_it.append(layout["beta1"].start)
                vals_it.append(float(panel.covariate[i]))
            if spec.has("bym2_spatial"):
                cols_it += [layout["u"].start + i, layout["v"].start + i]
                vals_it += [1.0, 1.0]
            if spec.has("rw1_temporal"):
                cols_it.append(layout["gamma"].start + t)
                vals_it.append(1.0)
            if spec.has("iid_temporal"):
                cols_it.append(layout["phi"].start + t)
                vals_it.append(1.0)
            if spec.has("iid_interaction"):
                cols_it.append(layout["delta"].start + i * t_weeks + t)
                vals_it.append(1.0)
            rows += [row] * len(cols_it)
            cols += cols_it
            vals += vals_it
            y_list.append(deaths[i, t])
            offset_list.append(math.log(e_it))
            obs_area.append(i)
            obs_week.append(t)
            row += 1
    if row == 0:
        raise ModelError("all cells have zero expected counts")
    design = sparse.csr_matrix((vals, (rows, cols)), shape=(row, m))

    c_rows, c_cols, c_vals = [], [], []
    for k, (block_name, members) in enumerate(constraint_rows):
        base = layout[block_name].start
        for j in members:
            c_rows.append(k)
            c_cols.append(base + j)
            c_vals.append(1.0)
    constraints = sparse.csr_matrix(
        (c_vals, (c_rows, c_cols)), shape=(len(constraint_rows), m)
    )

    # Fill-reducing order for the posterior precision pattern, fixed once and
    # reused for every hyperparameter point (the pattern never changes).
    pattern = sparse.block_diag([b.matrix for b in blocks], format="csr")
    pattern = (
        pattern + design.T @ design + constraints.T @ constraints + sparse.identity(m)
    ).tocsr()
    fill_order = np.asarray(reverse_cuthill_mckee(pattern, symmetric_mode=True))

    return ModelAssembly(
        spec=spec,
        n_areas=n,
        n_weeks=t_weeks,
        week_labels=tuple(int(w) for w in panel.weeks),
        area_ids=panel.graph.unit_ids,
        layout=layout,
        blocks=tuple(blocks),
        design=design,
        offset=np.array(offset_list),
        response=np.array(y_list, dtype=float),
        obs_area=np.array(obs_area),
        obs_week=np.array(obs_week),
        covariate=np.asarray(panel.covariate, dtype=float),
        constraints=constraints,
        constraint_kinds=tuple(constraint_kinds),
        hyper_names=tuple(hyper_names),
        pc_rates=spec.priors.rates(),
        excluded_cells=tuple(excluded),
        spatial_structure=spatial,
        fill_order=fill_order,
    )


def with_response(assembly: ModelAssembly, response: np.ndarray) -> ModelAssembly:
    """Copy of the assembly with a replaced response vector (validation hook)."""
    response = np.asarray(response, dtype=float)
    if response.shape != assembly.response.shape:
        raise ModelError("response shape mismatch")
    from dataclasses import replace

    return replace(assembly, response=response, _proj=None)


def parse_model_config(text: str) -> ModelSpec:
    """Parse a key=value model configuration.

    Recognized keys: ``likelihood``, ``effects`` (comma-separated list), and
    ``pc_u.<effect>`` / ``pc_alpha.<effect>`` pairs.  ``cause`` and ``basis``
    keys are allowed here but consumed by the caller.
    """
    values = parse_keyvalue(text)
    likelihood = values.get("likelihood", "poisson").lower()
    if likelihood in ("zeroinflatedpoisson", "zero-inflated-poisson", "zipoisson"):
        likelihood = "zip"
    effects = tuple(
        e.strip() for e in values.get("effects", ",".join(EFFECTS)).split(",") if e.strip()
    )
    pc: dict[str, list[float]] = {}
    for key, raw in values.items():
        for prefix, pos in (("pc_u.", 0), ("pc_alpha.", 1)):
            if key.startswith(prefix):
                effect = key[len(prefix):]
                pc.setdefault(effect, [1.0, 0.01])[pos] = float(raw)
    priors = PriorSpec(pc={k: (v[0], v[1]) for k, v in pc.items()})
    return ModelSpec(likelihood=likelihood, effects=effects, priors=priors)


def parse_keyvalue(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment; blank lines skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ModelError(f"config line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
