"""Latent Gaussian models for areal log relative risks.

Each model expresses its precision as a hyperparameter-weighted sum of fixed
sparse matrices, ``Q(theta) = sum_j c_j(theta) T_j``, which lets the inference
code precompute the terms once. Hyperparameters live on internal scales:
``log tau`` for precisions and ``logit phi`` for mixing weights.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .graph import Graph, besag_precision
from .linalg import ConstraintSet, SymSparseMatrix, eigenvalues_sym
from .priors import (
    PHI_MAX,
    PHI_MIN,
    GammaPrecPrior,
    PCPhiPrior,
    PCPrecPrior,
    UniformPhiPrior,
    phi_eigenvalues,
)
from .scaling import ScaledStructure, scale_structured

MODEL_KINDS = ("iid", "besag", "bym", "leroux", "dean", "bym2")
LOGIT_PHI_BOUND = float(np.log(PHI_MAX / PHI_MIN))


def phi_from_logit(s):
    return np.clip(expit(s), PHI_MIN, PHI_MAX)


def _block(n_blocks, n, i, j, m):
    """Place ``m`` (n x n) at block (i, j) of an n_blocks x n_blocks layout, lower part only."""
    blocks = [[None] * n_blocks for _ in range(n_blocks)]
    blocks[i][j] = m
    for r in range(n_blocks):
        if blocks[r][r] is None:
            blocks[r][r] = sp.csc_matrix((n, n))
    return sp.bmat(blocks, format="csc")


class LatentModel:
    """Base class; subclasses fill in the term weights and hyperprior."""

    kind = "base"
    hyper_names: tuple = ()
    initial: tuple = ()

    def __init__(self, n, terms, constraints, predictor, rank):
        self.n = n
        self.terms = tuple(terms)
        self.constraints = constraints
        self.predictor = sp.csr_matrix(predictor)
        self.rank = rank

    @property
    def latent_dimension(self) -> int:
        return self.predictor.shape[1]

    @property
    def n_hyper(self) -> int:
        return len(self.hyper_names)

    def coefficients(self, theta) -> np.ndarray:
        raise NotImplementedError

    def log_det(self, theta) -> float:
        """Hyperparameter-dependent part of the log pseudo-determinant of ``Q(theta)``."""
        raise NotImplementedError

    def log_hyperprior(self, theta) -> float:
        raise NotImplementedError

    def user_hypers(self, theta) -> dict:
        raise NotImplementedError

    def precision(self, theta) -> SymSparseMatrix:
        coefs = self.coefficients(theta)
        total = sum(c * t.lower for c, t in zip(coefs, self.terms))
        return SymSparseMatrix(total)

    def prior_summary(self) -> dict:
        return {name: p.describe() for name, p in self.priors.items()}

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n}, latent_dimension={self.latent_dimension})"


class IIDModel(LatentModel):
    kind = "iid"
    hyper_names = ("log_prec",)
    initial = (4.0,)

    def __init__(self, n, prec_prior=None):
        eye = SymSparseMatrix.identity(n)
        super().__init__(n, [eye], ConstraintSet.empty(n), sp.identity(n), n)
        self.priors = {"prec": prec_prior or GammaPrecPrior(1.0, 0.01)}

    def coefficients(self, theta):
        return np.array([np.exp(theta[0])])

    def log_det(self, theta):
        return self.n * theta[0]

    def log_hyperprior(self, theta):
        return float(self.priors["prec"].log_density_internal(theta[0]))

    def user_hypers(self, theta):
        tau = float(np.exp(theta[0]))
        return {"precision": tau, "sigma": tau ** -0.5, "phi": 0.0}


class BesagModel(LatentModel):
    kind = "besag"
    hyper_names = ("log_prec",)
    initial = (4.0,)

    def __init__(self, graph: Graph, prec_prior=None):
        n = graph.n_regions
        c = ConstraintSet.from_groups(n, graph.components())
        super().__init__(n, [besag_precision(graph)], c, sp.identity(n), n - c.k)
        self.priors = {"prec": prec_prior or GammaPrecPrior(1.0, 0.02)}

    def coefficients(self, theta):
        return np.array([np.exp(theta[0])])

    def log_det(self, theta):
        return self.rank * theta[0]

    def log_hyperprior(self, theta):
        return float(self.priors["prec"].log_density_internal(theta[0]))

    def user_hypers(self, theta):
        tau = float(np.exp(theta[0]))
        return {"precision": tau, "sigma": tau ** -0.5, "phi": 1.0}


class BYMModel(LatentModel):
    """Unstructured ``v`` (precision tau_v) plus ICAR ``u`` (precision tau_u); eta = v + u."""

    kind = "bym"
    hyper_names = ("log_prec_iid", "log_prec_spatial")
    initial = (4.0, 4.0)

    def __init__(self, graph: Graph, prec_prior_iid=None, prec_prior_spatial=None):
        n = graph.n_regions
        q = besag_precision(graph)
        terms = [
            SymSparseMatrix(_block(2, n, 0, 0, sp.identity(n))),
            SymSparseMatrix(_block(2, n, 1, 1, q.lower)),
        ]
        c = ConstraintSet.from_groups(n, graph.components()).embed(2 * n, n)
        predictor = sp.hstack([sp.identity(n), sp.identity(n)])
        super().__init__(n, terms, c, predictor, 2 * n - c.k)
        self.priors = {
            "prec_iid": prec_prior_iid or GammaPrecPrior(1.0, 0.01),
            "prec_spatial": prec_prior_spatial or GammaPrecPrior(1.0, 0.02),
        }

    def coefficients(self, theta):
        return np.exp(np.asarray(theta[:2], dtype=float))

    def log_det(self, theta):
        return self.n * theta[0] + (self.n - self.constraints.k) * theta[1]

    def log_hyperprior(self, theta):
        return float(self.priors["prec_iid"].log_density_internal(theta[0])
                     + self.priors["prec_spatial"].log_density_internal(theta[1]))

    def user_hypers(self, theta):
        tv, tu = np.exp(theta[0]), np.exp(theta[1])
        return {"precision_iid": float(tv), "precision_spatial": float(tu),
                "sigma": float(np.sqrt(1 / tv + 1 / tu)), "phi": float("nan")}


class LerouxModel(LatentModel):
    """Precision ``tau ((1 - phi) I + phi Q)``; unconstrained."""

    kind = "leroux"
    hyper_names = ("log_prec", "logit_phi")
    initial = (4.0, 0.0)

    def __init__(self, graph: Graph, prec_prior=None, phi_prior=None):
        n = graph.n_regions
        q = besag_precision(graph)
        super().__init__(n, [SymSparseMatrix.identity(n), q], ConstraintSet.empty(n), sp.identity(n), n)
        self.q_eigenvalues = np.clip(eigenvalues_sym(q), 0.0, None)
        phi_prior = phi_prior or UniformPhiPrior()
        if not isinstance(phi_prior, UniformPhiPrior):
            raise ValueError("the Leroux model supports only a uniform prior on phi")
        self.priors = {"prec": prec_prior or GammaPrecPrior(1.0, 0.02), "phi": phi_prior.bind()}

    def coefficients(self, theta):
        tau, phi = np.exp(theta[0]), phi_from_logit(theta[1])
        return np.array([tau * (1 - phi), tau * phi])

    def log_det(self, theta):
        phi = phi_from_logit(theta[1])
        return self.n * theta[0] + float(np.sum(np.log1p(phi * (self.q_eigenvalues - 1.0))))

    def log_hyperprior(self, theta):
        return float(self.priors["prec"].log_density_internal(theta[0])
                     + self.priors["phi"].log_density_internal(theta[1]))

    def user_hypers(self, theta):
        tau = float(np.exp(theta[0]))
        return {"precision": tau, "sigma": tau ** -0.5, "phi": float(phi_from_logit(theta[1]))}


class MixedStructureModel(LatentModel):
    """Augmented ``(w1, w2)`` form with ``w1 | w2 ~ N(sqrt(phi/tau) w2, (1-phi)/tau I)``.

    ``w2`` has the intrinsic precision ``R`` (scaled for BYM2, raw for Dean);
    the predictor is ``w1``. The joint precision is sparse::

        [ tau/(1-phi) I          -sqrt(phi tau)/(1-phi) I ]
        [ -sqrt(phi tau)/(1-phi) I   R + phi/(1-phi) I    ]
    """

    hyper_names = ("log_prec", "logit_phi")
    initial = (4.0, -3.0)

    def __init__(self, kind, structure: ScaledStructure, scaled: bool, prec_prior, phi_prior):
        self.kind = kind
        self.structure = structure
        self.scaled = scaled
        n = structure.n
        r = structure.q_star if scaled else structure.q
        eye = sp.identity(n, format="csc")
        terms = [
            SymSparseMatrix(_block(2, n, 0, 0, eye)),
            SymSparseMatrix(_block(2, n, 1, 0, eye)),
            SymSparseMatrix(_block(2, n, 1, 1, eye)),
            SymSparseMatrix(_block(2, n, 1, 1, r.lower)),
        ]
        c = structure.full_constraints().embed(2 * n, n)
        predictor = sp.hstack([sp.identity(n), sp.csc_matrix((n, n))])
        super().__init__(n, terms, c, predictor, 2 * n - c.k)
        self.priors = {"prec": prec_prior, "phi": phi_prior.bind(phi_eigenvalues(r, c.k))}

    def coefficients(self, theta):
        tau, phi = np.exp(theta[0]), phi_from_logit(theta[1])
        one_m = 1.0 - phi
        return np.array([tau / one_m, -np.sqrt(phi * tau) / one_m, phi / one_m, 1.0])

    def log_det(self, theta):
        phi = phi_from_logit(theta[1])
        return self.n * (theta[0] - np.log1p(-phi))

    def log_hyperprior(self, theta):
        s = float(np.clip(theta[1], -LOGIT_PHI_BOUND, LOGIT_PHI_BOUND))
        return float(self.priors["prec"].log_density_internal(theta[0])
                     + self.priors["phi"].log_density_internal(s))

    def user_hypers(self, theta):
        tau = float(np.exp(theta[0]))
        return {"precision": tau, "sigma": tau ** -0.5, "phi": float(phi_from_logit(theta[1]))}


def build_latent_model(kind: str, structure, prec_prior=None, phi_prior=None,
                       scale_dean: bool = False, **extra) -> LatentModel:
    """Construct a latent model from a :class:`Graph` or :class:`ScaledStructure`.

    Default hyperpriors: Gamma(1, 0.01) on the iid precision, Gamma(1, 0.02) on
    precisions of models with a structured part, a uniform prior on phi for
    Leroux and Dean, and PC priors (U=1, alpha=0.01; U=0.5, alpha=2/3) for BYM2.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if isinstance(structure, ScaledStructure):
        graph, scaled = structure.graph, structure
    elif isinstance(structure, Graph):
        graph, scaled = structure, None
    elif kind == "iid" and isinstance(structure, (int, np.integer)):
        return IIDModel(int(structure), prec_prior)
    else:
        raise TypeError("structure must be a Graph or ScaledStructure")

    if kind == "iid":
        return IIDModel(graph.n_regions, prec_prior)
    if kind == "besag":
        return BesagModel(graph, prec_prior)
    if kind == "bym":
        return BYMModel(graph, prec_prior, extra.get("prec_prior_spatial"))
    if kind == "leroux":
        return LerouxModel(graph, prec_prior, phi_prior)
    if scaled is None:
        scaled = scale_structured(graph)
    if kind == "dean":
        return MixedStructureModel("dean", scaled, scale_dean,
                                   prec_prior or GammaPrecPrior(1.0, 0.02),
                                   phi_prior or UniformPhiPrior())
    return MixedStructureModel("bym2", scaled, True,
                               prec_prior or PCPrecPrior(1.0, 0.01),
                               phi_prior or PCPhiPrior(0.5, 2.0 / 3.0))
