"""scikit-learn style front end for areal Poisson smoothing."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .inference import Dataset, FixedEffects, GridConfig, fit
from .models import build_latent_model
from .priors import parse_phi_prior, parse_prec_prior
from .scaling import scale_structured
from .validation import check_counts, check_covariates, check_exposure, check_graph


class SpatialPoissonModel(BaseEstimator):
    """Latent Gaussian smoothing of region counts on a fixed adjacency graph.

    Parameters
    ----------
    graph : Graph
        Region adjacency; rows of ``X``/``y`` follow its region order.
    model : str
        One of ``iid``, ``besag``, ``bym``, ``leroux``, ``dean``, ``bym2``.
    prec_prior, phi_prior : str or None
        Prior strings such as ``"pc:1,0.01"``, ``"gamma:1,0.01"``,
        ``"pc:0.5,2/3"`` or ``"uniform"``; ``None`` keeps the model default.
    dz, diff_logdens : float
        Hyperparameter grid step and pruning threshold.
    fixed_prior_var : float
        Prior variance of intercept and covariate coefficients.

    Examples
    --------
    >>> from bym2.graph import Graph
    >>> est = SpatialPoissonModel(Graph.lattice(3, 3), dz=0.75, diff_logdens=6)
    >>> est.fit(None, [3, 5, 4, 6, 2, 5, 4, 3, 4], exposure=[4] * 9).predict().shape
    (9,)
    """

    def __init__(self, graph=None, model="bym2", prec_prior=None, phi_prior=None,
                 dz=0.2, diff_logdens=20.0, fixed_prior_var=100.0, scale_dean=False, n_jobs=1):
        self.graph = graph
        self.model = model
        self.prec_prior = prec_prior
        self.phi_prior = phi_prior
        self.dz = dz
        self.diff_logdens = diff_logdens
        self.fixed_prior_var = fixed_prior_var
        self.scale_dean = scale_dean
        self.n_jobs = n_jobs

    def _latent_model(self):
        prec = parse_prec_prior(self.prec_prior) if self.prec_prior else None
        phi = parse_phi_prior(self.phi_prior) if self.phi_prior else None
        return build_latent_model(self.model, scale_structured(self.graph),
                                  prec_prior=prec, phi_prior=phi, scale_dean=self.scale_dean)

    def fit(self, X, y, exposure=None):
        """Fit to counts ``y`` with expected counts ``exposure`` and optional covariates ``X``."""
        y = check_counts(y)
        n = y.shape[0]
        check_graph(self.graph, n)
        E = check_exposure(exposure, n)
        Z = check_covariates(X, n)
        self.latent_model_ = self._latent_model()
        self.result_ = fit(self.latent_model_, Dataset(y, E, Z),
                           GridConfig(self.dz, self.diff_logdens),
                           FixedEffects(self.fixed_prior_var), n_jobs=self.n_jobs)
        self.n_features_in_ = 0 if Z is None else Z.shape[1]
        self._X_fit = Z
        self.coef_ = np.array([self.result_.fixed_summary[k]["mean"]
                               for k in list(self.result_.fixed_summary)[1:]])
        self.intercept_ = self.result_.fixed_summary["intercept"]["mean"]
        return self

    def predict(self, X=None):
        """Posterior mean relative risk per region.

        Passing ``X`` replaces the covariates at their posterior-mean
        coefficients while keeping the fitted area effects.
        """
        check_is_fitted(self, "result_")
        if X is None or self.n_features_in_ == 0:
            return self.result_.theta_mean.copy()
        Z = check_covariates(X, self.result_.eta_mean.size)
        if Z is None or Z.shape[1] != self.n_features_in_:
            raise ValueError(f"X must have {self.n_features_in_} columns")
        shift = (Z - self._X_fit) @ self.coef_
        return np.exp(self.result_.eta_mean + shift + 0.5 * self.result_.eta_sd ** 2)
