"""Approximate Bayesian inference for Poisson counts over a latent Gaussian model.

For each hyperparameter value ``theta`` the latent vector ``x = (latent, mu, beta)``
is approximated by a Gaussian centred at its constrained conditional mode,
found by damped Newton iteration. The Laplace formula then gives the log
marginal posterior of ``theta``; a pruned regular grid in standardised
coordinates integrates over it.

Latent systems at desk scale have a few hundred unknowns, so the Newton
systems are solved densely. Constraints are handled by conditioning by
kriging; a penalty ``kappa * C^T C`` is added to the Hessian to remove the
intrinsic null space. It vanishes on the constraint set, so the constrained
Gaussian is unchanged.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from joblib import Parallel, delayed
from scipy.optimize import brentq, minimize
from scipy.special import gammaln, logsumexp
from scipy.stats import norm

from .linalg import NotPositiveDefinite
from .models import LOGIT_PHI_BOUND, LatentModel

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 30
LOG_PREC_BOUNDS = (-10.0, 15.0)
QUANTILES = (0.025, 0.5, 0.975)


class NonConvergence(RuntimeError):
    def __init__(self, message, last_increment=np.nan):
        super().__init__(message)
        self.last_increment = last_increment


class DataFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed counts ``y`` with expected counts ``E`` and optional covariates ``z``."""

    y: np.ndarray
    E: np.ndarray
    z: np.ndarray | None = None
    column_names: tuple = ("y", "E")

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        E = np.asarray(self.E, dtype=float).ravel()
        if y.shape != E.shape:
            raise ValueError(f"y has {y.size} entries but E has {E.size}")
        if y.size == 0:
            raise ValueError("empty dataset")
        if np.any(~np.isfinite(y)) or np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("counts must be finite non-negative integers")
        if np.any(~np.isfinite(E)) or np.any(E <= 0):
            raise ValueError("expected counts must be positive")
        z = self.z
        if z is not None:
            z = np.asarray(z, dtype=float)
            if z.ndim == 1:
                z = z[:, None]
            if z.shape[0] != y.size:
                raise ValueError("covariate rows must match the number of regions")
            if z.shape[1] == 0:
                z = None
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return 0 if self.z is None else self.z.shape[1]

    @property
    def smr(self) -> np.ndarray:
        return self.y / self.E


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def parse_data(text) -> Dataset:
    """Parse whitespace-separated ``y E [z1 ... zp]`` columns.

    A header line is optional. A column named ``SMR`` is dropped, as is an
    unnamed third column equal to ``y/E``. R-style tables whose data rows carry
    a leading row name (one more field than the header) are accepted.
    """
    if isinstance(text, bytes):
        text = text.decode("ascii")
    rows = []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        fields = line.split()
        if fields and not fields[0].startswith("#"):
            rows.append((lineno, fields))
    if not rows:
        raise DataFormatError("no data rows")

    header = None
    if not all(_is_number(t) for t in rows[0][1]):
        header = [t.strip("\"'") for t in rows[0][1]]
        rows = rows[1:]
    if not rows:
        raise DataFormatError("header without data rows")

    width = len(rows[0][1])
    if header is not None and width == len(header) + 1:
        rows = [(ln, f[1:]) for ln, f in rows]
        width -= 1
    values = np.empty((len(rows), width))
    for r, (lineno, fields) in enumerate(rows):
        if len(fields) != width:
            raise DataFormatError(f"expected {width} fields, found {len(fields)}", lineno)
        for c, tok in enumerate(fields):
            try:
                values[r, c] = float(tok)
            except ValueError:
                raise DataFormatError(f"malformed number {tok!r}", lineno) from None
    if width < 2:
        raise DataFormatError("need at least the y and E columns", rows[0][0])

    names = header if header is not None else ["y", "E"] + [f"z{j}" for j in range(1, width - 1)]
    if len(names) != width:
        raise DataFormatError(f"header names {len(names)} columns but rows have {width}")
    lower = [s.lower() for s in names]
    iy = lower.index("y") if "y" in lower else 0
    ie = lower.index("e") if "e" in lower else 1
    keep = []
    for c in range(width):
        if c in (iy, ie) or lower[c] == "smr":
            continue
        if header is None and c == 2 and np.allclose(values[:, c], values[:, iy] / values[:, ie], rtol=1e-3, atol=1e-6):
            continue
        keep.append(c)
    z = values[:, keep] if keep else None
    try:
        return Dataset(values[:, iy], values[:, ie], z,
                       tuple(["y", "E"] + [names[c] for c in keep]))
    except ValueError as exc:
        raise DataFormatError(str(exc)) from None


def read_data(path) -> Dataset:
    return parse_data(Path(path).read_text())


def write_data(data: Dataset, path, with_smr: bool = True) -> None:
    cols = [data.y, data.E]
    names = ["y", "E"]
    if data.z is not None:
        cols.extend(data.z.T)
        names.extend(data.column_names[2:] or [f"z{j + 1}" for j in range(data.p)])
    if with_smr:
        cols.append(data.smr)
        names.append("SMR")
    with open(path, "w") as fh:
        fh.write(" ".join(names) + "\n")
        for row in zip(*cols):
            fh.write(f"{int(row[0])} " + " ".join(f"{v:.10g}" for v in row[1:]) + "\n")


# ---------------------------------------------------------------------------
# likelihoods


class PoissonLikelihood:
    """``y_i ~ Poisson(E_i exp(eta_i))``."""

    def __init__(self, y, E):
        self.y = np.asarray(y, dtype=float)
        self.E = np.asarray(E, dtype=float)
        self._const = float(np.sum(self.y * np.log(self.E) - gammaln(self.y + 1)))

    def log_pointwise(self, eta):
        return self.y * (eta + np.log(self.E)) - self.E * np.exp(eta) - gammaln(self.y + 1)

    def loglik(self, eta) -> float:
        return float(self.y @ eta - self.E @ np.exp(eta)) + self._const

    def grad_hess(self, eta):
        mu = self.E * np.exp(eta)
        return self.y - mu, mu


class GaussianLikelihood:
    """Gaussian observations with known standard deviation; used for exactness checks."""

    def __init__(self, obs, sd=1.0):
        self.obs = np.asarray(obs, dtype=float)
        self.prec = np.broadcast_to(1.0 / np.asarray(sd, dtype=float) ** 2, self.obs.shape).copy()

    def log_pointwise(self, eta):
        return -0.5 * self.prec * (self.obs - eta) ** 2 + 0.5 * np.log(self.prec / (2 * np.pi))

    def loglik(self, eta) -> float:
        return float(np.sum(self.log_pointwise(eta)))

    def grad_hess(self, eta):
        return self.prec * (self.obs - eta), self.prec


@dataclass(frozen=True)
class FixedEffects:
    """Independent Gaussian priors on the intercept and covariate coefficients."""

    prior_var: float = 100.0
    intercept_mean: float = 0.0

    def __post_init__(self):
        if not self.prior_var > 0:
            raise ValueError("fixed-effect prior variance must be positive")


# ---------------------------------------------------------------------------
# Gaussian approximation


class _BlockFactor:
    """Factor of a dense SPD matrix whose ``S`` block is diagonal.

    The ``S`` unknowns are eliminated exactly and only the Schur complement on
    the remaining indices ``R`` is Cholesky-factored.
    """

    def __init__(self, h, S, R):
        self.N = h.shape[0]
        self.S, self.R = S, R
        self.dS = np.diag(h)[S].copy()
        if np.any(~(self.dS > 0)):
            raise NotPositiveDefinite("non-positive diagonal pivot")
        self.B = h[np.ix_(S, R)]
        self.Bs = self.B / self.dS[:, None]
        sch = h[np.ix_(R, R)] - self.B.T @ self.Bs
        try:
            self.L = sla.cholesky(sch, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from None
        self.logdet = float(np.sum(np.log(self.dS))) + 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        bS, bR = b[self.S], b[self.R]
        xR = sla.cho_solve((self.L, True), bR - self.Bs.T @ bS, check_finite=False)
        x = np.empty_like(b)
        x[self.R] = xR
        x[self.S] = (bS.T / self.dS).T - self.Bs @ xR
        return x

    def quad_diag(self, M):
        """Diagonal of ``M H^-1 M^T`` for a dense ``M`` with ``N`` columns."""
        MS, MR = M[:, self.S], M[:, self.R]
        V = MR - (MS / self.dS) @ self.B
        W = sla.solve_triangular(self.L, V.T, lower=True, check_finite=False)
        return np.sum(MS ** 2 / self.dS, axis=1) + np.sum(W ** 2, axis=0)


def _diagonal_block(pattern) -> np.ndarray:
    """Greedy set of indices that are mutually uncoupled in ``pattern``."""
    chosen = np.zeros(pattern.shape[0], dtype=bool)
    for i in range(pattern.shape[0]):
        row = pattern[i].copy()
        row[i] = False
        if not np.any(row & chosen):
            chosen[i] = True
    return np.flatnonzero(chosen)


class _Workspace:
    """Per (model, data) precomputations shared by all hyperparameter values."""

    def __init__(self, model: LatentModel, data: Dataset, fixed: FixedEffects, likelihood=None):
        if data.n != model.n:
            raise ValueError(f"data has {data.n} regions but the model has {model.n}")
        self.model = model
        self.data = data
        self.fixed = fixed
        self.lik = likelihood if likelihood is not None else PoissonLikelihood(data.y, data.E)
        m, p = model.latent_dimension, data.p
        self.m, self.p = m, p
        self.N = N = m + 1 + p
        pred = model.predictor.toarray()
        cols = [pred, np.ones((data.n, 1))]
        if p:
            cols.append(data.z)
        self.A = np.hstack(cols)
        self.terms = [t.to_dense() for t in model.terms]

        # scatter plan for A^T D A
        rows, js, ls, vals = [], [], [], []
        for i in range(data.n):
            nz = np.flatnonzero(self.A[i])
            jj, ll = np.meshgrid(nz, nz, indexing="ij")
            rows.append(np.full(jj.size, i))
            js.append(jj.ravel())
            ls.append(ll.ravel())
            vals.append(np.outer(self.A[i, nz], self.A[i, nz]).ravel())
        self._ad_rows = np.concatenate(rows)
        self._ad_flat = np.concatenate(js) * N + np.concatenate(ls)
        self._ad_vals = np.concatenate(vals)

        k = model.constraints.k
        self.C = np.zeros((k, N))
        self.C[:, :m] = model.constraints.A
        if k:
            self.C_tilde = self.C / np.sqrt(np.sum(self.C ** 2, axis=1))[:, None]
            self.CCt_inv = np.linalg.inv(self.C @ self.C.T)
            self.pen = self.C_tilde.T @ self.C_tilde
        self.fixed_prec = 1.0 / fixed.prior_var
        self.prior_mean = np.zeros(N)
        self.prior_mean[m] = fixed.intercept_mean

        pattern = np.zeros((N, N), dtype=bool)
        for t in self.terms:
            pattern[:m, :m] |= t != 0
        pattern.flat[self._ad_flat] = True
        if k:
            pattern |= self.pen != 0
        self.S = _diagonal_block(pattern)
        self.R = np.setdiff1d(np.arange(N), self.S)

    def latent_precision(self, theta) -> np.ndarray:
        coefs = self.model.coefficients(theta)
        q = coefs[0] * self.terms[0]
        for c, t in zip(coefs[1:], self.terms[1:]):
            q = q + c * t
        return q

    def prior_precision(self, theta) -> np.ndarray:
        q = np.zeros((self.N, self.N))
        q[:self.m, :self.m] = self.latent_precision(theta)
        idx = np.arange(self.m, self.N)
        q[idx, idx] = self.fixed_prec
        return q

    def add_curvature(self, h, d):
        h += np.bincount(self._ad_flat, weights=d[self._ad_rows] * self._ad_vals,
                         minlength=self.N * self.N).reshape(self.N, self.N)
        return h

    def eta(self, x):
        return self.A @ x

    def objective(self, x, q):
        dx = x - self.prior_mean
        return self.lik.loglik(self.eta(x)) - 0.5 * dx @ q @ dx

    def project(self, v):
        """Component of ``v`` orthogonal to the constraint rows."""
        if self.C.shape[0] == 0:
            return v
        return v - self.C.T @ (self.CCt_inv @ (self.C @ v))


@dataclass(eq=False)
class GaussianApprox:
    """Constrained Gaussian approximation of ``x | theta, y`` at its mode."""

    theta: np.ndarray
    mode: np.ndarray
    factor: _BlockFactor           # penalised Hessian
    logdet: float                  # log|H| + log|C H^-1 C^T|
    prior_precision: np.ndarray
    n_iter: int
    grad_norm: float
    loglik: float
    workspace: _Workspace = field(repr=False)

    @property
    def eta(self) -> np.ndarray:
        return self.workspace.eta(self.mode)

    def _constraint_parts(self):
        ws = self.workspace
        if ws.C.shape[0] == 0:
            return None, None
        G = self.factor.solve(ws.C.T)
        return G, np.linalg.inv(ws.C @ G)

    def covariance(self) -> np.ndarray:
        """Dense constrained covariance of ``x``."""
        ws = self.workspace
        cov = self.factor.solve(np.eye(ws.N))
        G, S = self._constraint_parts()
        if G is not None:
            cov -= G @ S @ G.T
        return cov

    def marginals(self):
        """Means and variances of the linear predictor and the fixed effects."""
        ws = self.workspace
        fidx = np.arange(ws.m, ws.N)
        var_eta = self.factor.quad_diag(ws.A)
        var_f = self.factor.quad_diag(np.eye(ws.N)[fidx])
        G, S = self._constraint_parts()
        if G is not None:
            AG = ws.A @ G
            var_eta -= np.einsum("ij,jk,ik->i", AG, S, AG)
            Gf = G[fidx]
            var_f -= np.einsum("ij,jk,ik->i", Gf, S, Gf)
        return self.eta, np.maximum(var_eta, 0.0), self.mode[fidx], np.maximum(var_f, 0.0)


def _newton(ws: _Workspace, theta, x0=None) -> GaussianApprox:
    q = ws.prior_precision(theta)
    k = ws.C.shape[0]
    if k:
        kappa = float(np.mean(np.diag(q)[:ws.m])) + 1.0
        q_pen = q + kappa * ws.pen
    else:
        q_pen = q
    qm = q @ ws.prior_mean
    x = np.zeros(ws.N) if x0 is None else np.array(x0, dtype=float)
    if k:
        x = ws.project(x)
    f_old = ws.objective(x, q)
    steps = 0
    last = np.inf
    for _ in range(NEWTON_MAX_ITER):
        eta = ws.eta(x)
        g, d = ws.lik.grad_hess(eta)
        F = _BlockFactor(ws.add_curvature(q_pen.copy(), d), ws.S, ws.R)
        xn = F.solve(ws.A.T @ (g + d * eta) + qm)
        G = None
        if k:
            G = F.solve(ws.C.T)
            xn -= G @ np.linalg.solve(ws.C @ G, ws.C @ xn)
        step = xn - x
        t = 1.0
        f_new = ws.objective(x + step, q)
        for _ in range(MAX_HALVINGS):
            if np.isfinite(f_new) and f_new >= f_old - 1e-10 * max(1.0, abs(f_old)):
                break
            t *= 0.5
            f_new = ws.objective(x + t * step, q)
        x = x + t * step
        f_old = f_new
        last = float(np.max(np.abs(t * step)))
        if last < NEWTON_TOL:
            break
        steps += 1
    else:
        raise NonConvergence(f"Newton iteration did not converge in {NEWTON_MAX_ITER} steps "
                             f"(last increment {last:.3g})", last)

    # the last increment is below tolerance, so F is the Hessian at the mode
    logdet = F.logdet
    if k:
        logdet += np.linalg.slogdet(ws.C @ G)[1]
    eta = ws.eta(x)
    g, _ = ws.lik.grad_hess(eta)
    grad = ws.project(ws.A.T @ g - q @ (x - ws.prior_mean))
    return GaussianApprox(np.asarray(theta, dtype=float), x, F, logdet, q, steps,
                          float(np.linalg.norm(grad)), ws.lik.loglik(eta), ws)


def gaussian_approx(model: LatentModel, data: Dataset, theta, fixed: FixedEffects | None = None,
                    x0=None, likelihood=None) -> GaussianApprox:
    """Constrained Gaussian approximation of the latent vector at ``theta`` (internal scale).

    Newton steps solve the working Gaussian model from a second-order expansion
    of the log-likelihood; each step is projected onto the constraint set by
    kriging and halved while the objective decreases. ``n_iter`` counts steps
    larger than the tolerance, so a quadratic problem reports one.
    """
    ws = _Workspace(model, data, fixed or FixedEffects(), likelihood)
    return _newton(ws, theta, x0)


def _log_marginal(ga: GaussianApprox) -> float:
    ws = ga.workspace
    lat = ga.mode[:ws.m]
    fx = ga.mode[ws.m:] - ws.prior_mean[ws.m:]
    q_lat = ga.prior_precision[:ws.m, :ws.m]
    return float(ga.loglik
                 + 0.5 * ws.model.log_det(ga.theta) - 0.5 * lat @ q_lat @ lat
                 - 0.5 * ws.fixed_prec * fx @ fx
                 + ws.model.log_hyperprior(ga.theta)
                 - 0.5 * ga.logdet)


def log_marginal_posterior(model: LatentModel, data: Dataset, theta, fixed: FixedEffects | None = None,
                           likelihood=None) -> float:
    """Laplace approximation of ``log pi(theta | y)`` up to an additive constant."""
    return _log_marginal(gaussian_approx(model, data, theta, fixed, likelihood=likelihood))


# ---------------------------------------------------------------------------
# hyperparameter grid


@dataclass(eq=False)
class _Point:
    index: tuple
    theta: np.ndarray
    logdens: float
    n_iter: int
    grad_norm: float
    eta_mean: np.ndarray
    eta_var: np.ndarray
    fixed_mean: np.ndarray
    fixed_var: np.ndarray
    mode: np.ndarray


class _Evaluator:
    def __init__(self, ws: _Workspace):
        self.ws = ws
        d = ws.model.n_hyper
        lo = np.full(d, LOG_PREC_BOUNDS[0])
        hi = np.full(d, LOG_PREC_BOUNDS[1])
        for j, name in enumerate(ws.model.hyper_names):
            if name.startswith("logit"):
                lo[j], hi[j] = -LOGIT_PHI_BOUND, LOGIT_PHI_BOUND
        self.lo, self.hi = lo, hi
        self._x = None
        self.n_evals = 0

    def inside(self, theta) -> bool:
        return bool(np.all(theta >= self.lo) and np.all(theta <= self.hi))

    def evaluate(self, theta, x0=None):
        ga = _newton(self.ws, theta, x0)
        self.n_evals += 1
        return ga, _log_marginal(ga)

    def neg_logdens(self, theta):
        th = np.clip(theta, self.lo, self.hi)
        penalty = 1e3 * float(np.sum((theta - th) ** 2))
        try:
            ga, ld = self.evaluate(th, self._x)
        except (NotPositiveDefinite, NonConvergence, FloatingPointError):
            return 1e100
        self._x = ga.mode
        return -ld + penalty

    def point(self, index, theta, x0):
        ga, ld = self.evaluate(theta, x0)
        em, ev, fm, fv = ga.marginals()
        return _Point(index, np.asarray(theta, dtype=float), ld, ga.n_iter, ga.grad_norm,
                      em, ev, fm, fv, ga.mode)


def _hessian(f, x, h=0.05):
    d = x.size
    f0 = f(x)
    H = np.zeros((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return H


@dataclass(frozen=True)
class GridConfig:
    """Grid step ``dz`` in standardised units and the log-density pruning drop."""

    dz: float = 0.2
    diff_logdens: float = 20.0
    max_points: int = 4000
    min_curvature: float = 0.05

    def __post_init__(self):
        if not self.dz > 0:
            raise ValueError("dz must be positive")
        if not self.diff_logdens > 0:
            raise ValueError("diff_logdens must be positive")


def _weighted_quantiles(values, weights, probs):
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cw = np.cumsum(w) - 0.5 * w
    return np.interp(probs, cw, v)


def _summary(values, weights, mode_value) -> dict:
    mean = float(weights @ values)
    sd = float(np.sqrt(max(weights @ (values - mean) ** 2, 0.0)))
    q = _weighted_quantiles(values, weights, QUANTILES)
    return {"mean": mean, "sd": sd, "q0.025": float(q[0]), "median": float(q[1]),
            "q0.975": float(q[2]), "mode": float(mode_value)}


def _mixture_summary(means, sds, weights, mode_value) -> dict:
    mean = float(weights @ means)
    var = float(weights @ (sds ** 2 + means ** 2) - mean ** 2)
    sd = float(np.sqrt(max(var, 0.0)))
    out = {"mean": mean, "sd": sd}
    if sd == 0.0:
        qs = [mean] * 3
    else:
        s = np.where(sds > 0, sds, 1e-300)
        cdf = lambda v: float(weights @ norm.cdf((v - means) / s))
        lo, hi = mean - 12 * sd - 1.0, mean + 12 * sd + 1.0
        qs = [brentq(lambda v: cdf(v) - p, lo, hi, xtol=1e-12) for p in QUANTILES]
    out.update({"q0.025": qs[0], "median": qs[1], "q0.975": qs[2], "mode": float(mode_value)})
    return out


def _gauss_hermite(n=61):
    t, w = np.polynomial.hermite.hermgauss(n)
    return np.sqrt(2.0) * t, np.log(w / np.sqrt(np.pi))


_GH_NODES, _GH_LOGW = _gauss_hermite()


def dic(eta_mean, eta_sd, data: Dataset):
    """DIC and pD with the posterior mean of eta as focus.

    Mean deviance uses ``E[exp(eta)] = exp(m + s^2/2)`` so it is exact under
    Gaussian marginals.
    """
    y, E = data.y, data.E
    c = gammaln(y + 1) - y * np.log(E)
    d_bar = -2.0 * float(np.sum(y * eta_mean - E * np.exp(eta_mean + 0.5 * eta_sd ** 2) - c))
    d_hat = -2.0 * float(np.sum(y * eta_mean - E * np.exp(eta_mean) - c))
    p_d = d_bar - d_hat
    return d_bar + p_d, p_d


def cpo_logscore(eta_means, eta_sds, weights, data: Dataset, threshold: float = 0.9):
    """Per-region CPO via the harmonic identity, the log score and instability flags.

    ``eta_means`` and ``eta_sds`` hold one row per grid point. Under a raw
    Gaussian marginal ``E[1/p(y_i|eta)]`` diverges because ``1/p`` grows like
    ``exp(E exp(eta))``. Each Gaussian marginal is therefore split into a
    cavity times the Poisson site term it was expanded from, and the site term
    is put back exactly. The inner harmonic integral then equals ``1/Z_ik``
    with ``Z_ik = int p(y_i|eta) cavity_ik(eta) deta``, and
    ``1/CPO_i = sum_k w_k / Z_ik``. The Gaussian part of ``Z_ik`` is analytic;
    the smooth remainder is integrated by 61-point Gauss-Hermite under the
    Gaussian marginal.

    A region is flagged when one quadrature node carries more than
    ``threshold`` of some ``Z_ik`` or the cavity is improper; nonfinite CPOs
    are reported as ``nan``.
    """
    m = np.atleast_2d(np.asarray(eta_means, dtype=float))
    s = np.atleast_2d(np.asarray(eta_sds, dtype=float))
    w = np.asarray(weights, dtype=float)
    y, E = data.y, data.E
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        d = E * np.exp(m)
        g = y - d
        prec = 1.0 / s ** 2 - d
        improper = ~(prec > 1e-12 / np.maximum(s, 1e-300) ** 2) | ~np.isfinite(prec)
        prec = np.where(improper, 1e-6, prec)
        mc = (m / s ** 2 - g - d * m) / prec
        mc = np.where(improper, m, mc)
        sc = 1.0 / np.sqrt(prec)
        # Z = Z_site * p(y|m) * E_N(m,s^2)[exp(r)], r the non-quadratic remainder of log p
        vc = 1.0 / prec
        mu_c = mc - m
        lin = g + mu_c * prec
        log_zsite = -0.5 * np.log1p(d * vc) + 0.5 * lin ** 2 * s ** 2 - 0.5 * mu_c ** 2 * prec
        u = s[:, :, None] * _GH_NODES[None, None, :]                           # K x n x 61
        eta = m[:, :, None] + u
        r = y[:, None] * u - E[:, None] * (np.exp(eta) - np.exp(m)[:, :, None]) \
            - g[:, :, None] * u + 0.5 * d[:, :, None] * u ** 2
        terms = _GH_LOGW[None, None, :] + r
        log_i = logsumexp(terms, axis=2)
        share = np.exp(np.max(terms, axis=2) - log_i)
        log_pm = y * (m + np.log(E)) - d - gammaln(y + 1)
        log_z = log_zsite + log_pm + log_i
        log_inv = logsumexp(np.log(w)[:, None] - log_z, axis=0)
    cpo = np.exp(-log_inv)
    bad = ~np.isfinite(log_inv) | ~(cpo > 0)
    cpo[bad] = np.nan
    relevant = w[:, None] >= 1e-6 * w.max()
    unstable = np.any(relevant & ((share > threshold) | improper), axis=0) | bad
    ls = float(-np.nanmean(np.log(cpo))) if np.any(~bad) else float("nan")
    return cpo, ls, unstable


def logscore(cpo) -> float:
    return float(-np.nanmean(np.log(np.asarray(cpo, dtype=float))))


def rmse(theta_hat, data: Dataset) -> float:
    return float(np.sqrt(np.mean((data.smr - np.asarray(theta_hat)) ** 2)))


@dataclass(eq=False)
class FitResult:
    """Grid, weights, posterior summaries and diagnostics of one fit.

    Hyperparameter summaries are on user scales; ``mode`` is the grid point of
    highest log density mapped to that scale. ``theta_mean`` is the lognormal
    mean ``exp(m + s^2/2)`` of the reported eta marginal.
    """

    kind: str
    hyper_names: tuple
    grid_theta: np.ndarray
    grid_index: np.ndarray
    grid_logdens: np.ndarray
    weights: np.ndarray
    hyper_summary: dict
    fixed_summary: dict
    eta_mean: np.ndarray
    eta_sd: np.ndarray
    theta_mean: np.ndarray
    theta_sd: np.ndarray
    grid_eta_mean: np.ndarray
    grid_eta_sd: np.ndarray
    dic: float
    p_d: float
    cpo: np.ndarray
    cpo_unstable: np.ndarray
    ls: float
    rmse: float
    metadata: dict

    def posterior_mean(self, name: str) -> float:
        if name in self.fixed_summary:
            return self.fixed_summary[name]["mean"]
        return self.hyper_summary[name]["mean"]

    def table(self) -> list[dict]:
        """Rows shaped like Mean / SD / 2.5% / Median / 97.5% / Mode."""
        rows = []
        for name, s in list(self.fixed_summary.items()) + list(self.hyper_summary.items()):
            rows.append({"parameter": name, "Mean": s["mean"], "SD": s["sd"], "2.5%": s["q0.025"],
                         "Median": s["median"], "97.5%": s["q0.975"], "Mode": s["mode"]})
        return rows

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or not np.isfinite(v) else float(v)
        return {
            "model": self.kind,
            "hyperparameters": {k: {kk: clean(vv) for kk, vv in v.items()} for k, v in self.hyper_summary.items()},
            "fixed_effects": {k: {kk: clean(vv) for kk, vv in v.items()} for k, v in self.fixed_summary.items()},
            "grid": {
                "internal_names": list(self.hyper_names),
                "theta": self.grid_theta.tolist(),
                "log_density": self.grid_logdens.tolist(),
                "weight": self.weights.tolist(),
            },
            "latent": {
                "eta_mean": self.eta_mean.tolist(),
                "eta_sd": self.eta_sd.tolist(),
                "theta_mean": self.theta_mean.tolist(),
                "theta_sd": self.theta_sd.tolist(),
            },
            "diagnostics": {
                "dic": clean(self.dic),
                "p_d": clean(self.p_d),
                "ls": clean(self.ls),
                "rmse": clean(self.rmse),
                "cpo": [clean(c) for c in self.cpo],
                "cpo_unstable": [bool(u) for u in self.cpo_unstable],
            },
            "metadata": self.metadata,
        }


def _flood_fill(ev: _Evaluator, center, basis, cfg: GridConfig, n_jobs: int, x_center):
    d = center.size
    origin = tuple([0] * d)
    points = {origin: ev.point(origin, center, x_center)}
    ref = points[origin].logdens
    frontier = [origin]
    visited = {origin}
    parallel = Parallel(n_jobs=n_jobs, prefer="threads") if n_jobs != 1 else None

    def job(idx, x0):
        theta = center + basis @ (cfg.dz * np.asarray(idx, dtype=float))
        try:
            return ev.point(idx, theta, x0)
        except (NotPositiveDefinite, NonConvergence):
            return None

    while frontier:
        todo = []
        for idx in frontier:
            for j in range(d):
                for s in (-1, 1):
                    nb = list(idx)
                    nb[j] += s
                    nb = tuple(nb)
                    if nb in visited:
                        continue
                    visited.add(nb)
                    theta = center + basis @ (cfg.dz * np.asarray(nb, dtype=float))
                    if ev.inside(theta):
                        todo.append((nb, points[idx].mode))
        if len(points) + len(todo) > cfg.max_points:
            todo = todo[: max(cfg.max_points - len(points), 0)]
        if parallel is None:
            results = [job(idx, x0) for idx, x0 in todo]
        else:
            results = parallel(delayed(job)(idx, x0) for idx, x0 in todo)
        frontier = []
        for (idx, _), pt in zip(todo, results):
            if pt is None or not np.isfinite(pt.logdens):
                continue
            if pt.logdens >= ref - cfg.diff_logdens:
                points[idx] = pt
                frontier.append(idx)
        if len(points) >= cfg.max_points:
            logger.warning("grid truncated at %d points", cfg.max_points)
            break
    return [points[k] for k in sorted(points)]


def fit(model: LatentModel, data: Dataset, grid: GridConfig | None = None,
        fixed: FixedEffects | None = None, n_jobs: int = 1, likelihood=None) -> FitResult:
    """Fit ``model`` to ``data``: hyperposterior mode, pruned grid, mixtures and diagnostics."""
    grid = grid or GridConfig()
    fixed = fixed or FixedEffects()
    ws = _Workspace(model, data, fixed, likelihood)
    ev = _Evaluator(ws)

    x_init = np.array(model.initial, dtype=float)
    if model.n_hyper == 1:
        res = minimize(lambda t: ev.neg_logdens(t), x_init, method="Nelder-Mead",
                       options={"xatol": 1e-4, "fatol": 1e-7, "maxiter": 400})
    else:
        res = minimize(lambda t: ev.neg_logdens(t), x_init, method="Nelder-Mead",
                       options={"xatol": 1e-4, "fatol": 1e-7, "maxiter": 400 * model.n_hyper,
                                "initial_simplex": x_init + np.vstack([np.zeros(model.n_hyper),
                                                                       np.eye(model.n_hyper)])})
    if not np.isfinite(res.fun) or res.fun >= 1e99:
        raise NonConvergence("hyperparameter mode search failed")
    center = np.clip(res.x, ev.lo, ev.hi)
    x_center = ev._x

    def f_clip(t):
        return ev.neg_logdens(np.clip(t, ev.lo, ev.hi))

    H = _hessian(f_clip, center)
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    lam = np.maximum(lam, grid.min_curvature)
    basis = V / np.sqrt(lam)[None, :]

    pts = _flood_fill(ev, center, basis, grid, n_jobs, x_center)
    if not pts:
        raise NonConvergence("empty hyperparameter grid")

    ld = np.array([p.logdens for p in pts])
    w = np.exp(ld - ld.max())
    w /= w.sum()
    theta = np.vstack([p.theta for p in pts])
    imode = int(np.argmax(ld))

    users = [model.user_hypers(t) for t in theta]
    hyper_summary = {}
    for name in users[0]:
        vals = np.array([u[name] for u in users], dtype=float)
        if np.all(np.isnan(vals)):
            continue
        hyper_summary[name] = _summary(vals, w, vals[imode])

    fm = np.vstack([p.fixed_mean for p in pts])
    fs = np.sqrt(np.vstack([p.fixed_var for p in pts]))
    cov_names = list(data.column_names[2:])
    if len(cov_names) != data.p:
        cov_names = [f"beta{j + 1}" for j in range(data.p)]
    fixed_summary = {nm: _mixture_summary(fm[:, j], fs[:, j], w, fm[imode, j])
                     for j, nm in enumerate(["intercept"] + cov_names)}

    em = np.vstack([p.eta_mean for p in pts])
    es = np.sqrt(np.vstack([p.eta_var for p in pts]))
    eta_mean = w @ em
    eta_sd = np.sqrt(np.maximum(w @ (es ** 2 + em ** 2) - eta_mean ** 2, 0.0))
    theta_mean = np.exp(eta_mean + 0.5 * eta_sd ** 2)
    theta_sd = np.sqrt(np.expm1(eta_sd ** 2)) * theta_mean

    is_poisson = isinstance(ws.lik, PoissonLikelihood)
    if is_poisson:
        dic_value, p_d = dic(eta_mean, eta_sd, data)
        cpo, ls, unstable = cpo_logscore(em, es, w, data)
    else:
        dic_value = p_d = ls = float("nan")
        cpo = np.full(data.n, np.nan)
        unstable = np.ones(data.n, dtype=bool)

    meta = {
        "hyper_internal_names": list(model.hyper_names),
        "hyper_mode_internal": center.tolist(),
        "mode_search_converged": bool(res.success),
        "grid_points": len(pts),
        "grid_dz": grid.dz,
        "grid_diff_logdens": grid.diff_logdens,
        "grid_standardisation": "eigen-decomposition of the negative Hessian at the mode",
        "hessian_eigenvalues": lam.tolist(),
        "newton_iterations_max": int(max(p.n_iter for p in pts)),
        "newton_iterations_total": int(sum(p.n_iter for p in pts)),
        "max_constrained_gradient_norm": float(max(p.grad_norm for p in pts)),
        "function_evaluations": ev.n_evals,
        "mode_definition": "grid point of highest log density, mapped to the user scale",
        "dic_focus": "posterior mean of eta",
        "cpo_unstable_count": int(np.sum(unstable)),
        "priors": model.prior_summary(),
        "fixed_effect_prior_variance": fixed.prior_var,
    }
    return FitResult(model.kind, tuple(model.hyper_names), theta,
                     np.array([p.index for p in pts], dtype=int), ld, w,
                     hyper_summary, fixed_summary, eta_mean, eta_sd, theta_mean, theta_sd,
                     em, es, dic_value, p_d, cpo, unstable, ls, rmse(theta_mean, data), meta)
