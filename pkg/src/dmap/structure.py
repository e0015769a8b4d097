"""Sparse structure matrices for intrinsic spatial (ICAR) and temporal (RW1)
random effects, with generalized-variance scaling for the mixed spatial
parametrization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .graph import ArealGraph, connected_components

__all__ = ["StructureMatrix", "icar_structure", "rw1_structure", "scale_gv"]


@dataclass(frozen=True)
class StructureMatrix:
    """Sparse symmetric PSD precision structure of an intrinsic GMRF.

    ``rank_deficiency`` counts null-space dimensions (connected components for
    ICAR, 1 for RW1).  ``scale_factor`` is the generalized-variance factor the
    entries were multiplied by, 1.0 if unscaled; with several connected
    components it records the geometric mean of the per-component factors.
    ``components`` lists the index sets the matrix decomposes over.
    """

    entries: sparse.csr_matrix
    rank_deficiency: int
    scale_factor: float = 1.0
    components: tuple[tuple[int, ...], ...] = ()

    @property
    def dimension(self) -> int:
        return self.entries.shape[0]

    def toarray(self) -> np.ndarray:
        return self.entries.toarray()


def icar_structure(graph: ArealGraph) -> StructureMatrix:
    """Intrinsic CAR structure Q = D - W on the adjacency graph.

    Isolated units contribute a zero row and raise the rank deficiency.
    """
    n = graph.n_units
    if n < 2:
        raise ValueError("ICAR structure needs at least 2 units")
    rows, cols, vals = [], [], []
    degree = np.zeros(n)
    for i, j in graph.edges:
        rows += [i, j]
        cols += [j, i]
        vals += [-1.0, -1.0]
        degree[i] += 1.0
        degree[j] += 1.0
    rows += list(range(n))
    cols += list(range(n))
    vals += list(degree)
    q = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    comps = connected_components(graph)
    return StructureMatrix(
        entries=q,
        rank_deficiency=len(comps),
        components=tuple(tuple(c) for c in comps),
    )


def rw1_structure(n_times: int) -> StructureMatrix:
    """First-difference (random-walk order 1) structure on a time line."""
    if n_times < 2:
        raise ValueError("RW1 structure needs at least 2 time points")
    main = np.full(n_times, 2.0)
    main[0] = main[-1] = 1.0
    off = np.full(n_times - 1, -1.0)
    q = sparse.diags([off, main, off], offsets=[-1, 0, 1], format="csr")
    return StructureMatrix(
        entries=q,
        rank_deficiency=1,
        components=(tuple(range(n_times)),),
    )


def constrained_marginal_variances(q_dense: np.ndarray) -> np.ndarray:
    """Marginal variances of the GMRF with intrinsic precision ``q_dense``
    under a sum-to-zero constraint.

    The constraint spans the (one-dimensional, connected case) null space, so
    the constrained covariance is the Moore-Penrose pseudoinverse of Q;
    computed by eigendecomposition with the near-null modes dropped.
    """
    eigval, eigvec = np.linalg.eigh(q_dense)
    tol = q_dense.shape[0] * np.finfo(float).eps * max(eigval.max(), 1.0)
    keep = eigval > tol
    inv = np.zeros_like(eigval)
    inv[keep] = 1.0 / eigval[keep]
    return np.einsum("ij,j,ij->i", eigvec, inv, eigvec)


def scale_gv(q: StructureMatrix) -> StructureMatrix:
    """Scale an intrinsic structure so its typical marginal variance is one.

    Per connected component of size >= 2, the block is multiplied by the
    geometric mean of the marginal variances of the sum-to-zero-constrained
    GMRF on that block, making the scaled block's geometric-mean variance
    exactly 1.  Singleton components are left untouched and excluded from the
    recorded factor, which is the geometric mean of the per-component factors.
    """
    comps = q.components
    if not comps:
        raise ValueError("structure matrix carries no component information")
    scalable = [c for c in comps if len(c) >= 2]
    if not scalable:
        raise ValueError("all components are singletons; nothing to scale")

    out = q.entries.tolil(copy=True)
    log_factors = []
    for comp in scalable:
        idx = np.asarray(comp)
        block = q.entries[np.ix_(idx, idx)].toarray()
        variances = constrained_marginal_variances(block)
        factor = float(np.exp(np.mean(np.log(variances))))
        out[np.ix_(idx, idx)] = block * factor
        log_factors.append(np.log(factor))
    overall = float(np.exp(np.mean(log_factors)))
    return StructureMatrix(
        entries=out.tocsr(),
        rank_deficiency=q.rank_deficiency,
        scale_factor=overall,
        components=comps,
    )
