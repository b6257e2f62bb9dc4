"""Generalised-variance scaling of ICAR structure matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import Graph, besag_precision
from .linalg import ConstraintSet, SymSparseMatrix, constrained_marginal_variances, default_jitter


@dataclass(frozen=True, eq=False)
class ScaledStructure:
    """Scaled ICAR precision with unit geometric-mean marginal variance per component.

    Singleton components carry no structured effect: their rows of ``q_star``
    are zero and they appear in ``singleton_regions`` instead of ``constraints``.
    """

    graph: Graph
    q: SymSparseMatrix
    q_star: SymSparseMatrix
    scale_factors: np.ndarray      # one per entry of ``groups``
    groups: tuple                  # member arrays of the scaled (size >= 2) components
    constraints: ConstraintSet
    singleton_regions: np.ndarray

    @property
    def n(self) -> int:
        return self.graph.n_regions

    @property
    def rank_deficiency(self) -> int:
        return len(self.groups)

    @property
    def null_dimension(self) -> int:
        """Zero eigenvalues of ``q_star``, singletons included."""
        return len(self.groups) + len(self.singleton_regions)

    def full_constraints(self) -> ConstraintSet:
        """Scaled-component sum-to-zero rows plus a pinning row per singleton."""
        single = ConstraintSet.from_groups(self.n, [[i] for i in self.singleton_regions])
        return self.constraints.stack(single)

    def metadata(self) -> dict:
        return {
            "n_regions": self.n,
            "n_components": self.graph.n_components,
            "rank_deficiency": self.rank_deficiency,
            "scale_factors": [float(s) for s in self.scale_factors],
            "component_sizes": [int(len(g)) for g in self.groups],
            "singleton_regions": [int(i) for i in self.singleton_regions],
            "singleton_rule": "excluded from structured effect",
        }


def generalized_variance(q, c: ConstraintSet, jitter: float | None = None,
                         method: str = "sparse", extrapolate: bool = True) -> np.ndarray:
    """Geometric mean of the constrained marginal variances over each constraint row's support.

    Rows whose support is a single region have no structured variance and
    yield ``nan``. The jitter biases each variance by about ``jitter/lambda_2``;
    with ``extrapolate`` the variances at ``jitter`` and ``2 jitter`` are combined
    to cancel the first-order term.
    """
    if jitter is None:
        jitter = default_jitter(q)
    var = constrained_marginal_variances(q, c, jitter, method=method)
    if extrapolate:
        var = 2.0 * var - constrained_marginal_variances(q, c, 2.0 * jitter, method=method)
    out = np.full(c.k, np.nan)
    for r in range(c.k):
        members = np.flatnonzero(c.A[r])
        if len(members) >= 2:
            out[r] = np.exp(np.mean(np.log(var[members])))
    return out


def scale_structured(g: Graph, jitter: float | None = None, method: str = "sparse",
                     extrapolate: bool = True) -> ScaledStructure:
    """Scale each connected block of the Besag matrix by its generalised variance."""
    q = besag_precision(g)
    comps = g.components()
    groups = tuple(m for m in comps if len(m) >= 2)
    singletons = np.array(sorted(int(m[0]) for m in comps if len(m) == 1), dtype=int)
    c = ConstraintSet.from_groups(g.n_regions, groups)

    if groups:
        factors = generalized_variance(q, c, jitter, method, extrapolate)
    else:
        factors = np.zeros(0)

    row_scale = np.zeros(g.n_regions)
    for members, s in zip(groups, factors):
        row_scale[members] = s
    low = q.lower.tocoo()
    # entries only couple regions within one component
    data = low.data * row_scale[low.row]
    q_star = SymSparseMatrix(sp.csc_matrix((data, (low.row, low.col)), shape=low.shape))
    return ScaledStructure(g, q, q_star, factors, groups, c, singletons)
