"""Hyperpriors: PC priors for the marginal precision and the mixing weight.

The precision prior is the type-2 Gumbel law obtained from an exponential
prior on the standard deviation. The mixing prior places an exponential law
on the distance ``d(phi) = sqrt(2 KLD)`` between ``(1-phi) I + phi Q*^-`` and
the identity; it depends on the graph only through the eigenvalues of ``Q*^-``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import expit, gammaln, xlogy

from .linalg import eigenvalues_sym

PHI_MIN = 1e-6
PHI_MAX = 1.0 - 1e-6
LOGIT_GRID_LIMIT = 20.0


def _check_positive(name, value):
    if not np.all(np.asarray(value) > 0):
        raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------- precision

def pc_prec_theta(U: float, alpha: float) -> float:
    """Rate of the exponential prior on ``1/sqrt(tau)`` with ``P(sigma > U) = alpha``."""
    if not U > 0:
        raise ValueError("U must be positive")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return -np.log(alpha) / U


def pc_prec_log_density(tau, theta):
    _check_positive("tau", tau)
    _check_positive("theta", theta)
    tau = np.asarray(tau, dtype=float)
    return np.log(theta / 2.0) - 1.5 * np.log(tau) - theta / np.sqrt(tau)


def gamma_prec_log_density(tau, shape, rate):
    _check_positive("shape", shape)
    _check_positive("rate", rate)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau must be non-negative")
    return shape * np.log(rate) - gammaln(shape) + xlogy(shape - 1, tau) - rate * tau


def uniform_phi_log_density(phi):
    phi = np.asarray(phi, dtype=float)
    if np.any((phi < 0) | (phi > 1)):
        raise ValueError("phi must lie in [0, 1]")
    return np.zeros_like(phi)


@dataclass(frozen=True)
class PCPrecPrior:
    """PC prior on a precision, specified by ``P(1/sqrt(tau) > U) = alpha``."""

    U: float = 1.0
    alpha: float = 0.01

    @property
    def theta(self) -> float:
        return pc_prec_theta(self.U, self.alpha)

    def log_density(self, tau):
        return pc_prec_log_density(tau, self.theta)

    def log_density_internal(self, log_tau):
        lt = np.asarray(log_tau, dtype=float)
        with np.errstate(over="ignore"):
            return np.log(self.theta / 2.0) - 0.5 * lt - self.theta * np.exp(-0.5 * lt)

    def describe(self) -> dict:
        return {"kind": "pc", "U": self.U, "alpha": self.alpha, "theta": self.theta}


@dataclass(frozen=True)
class GammaPrecPrior:
    shape: float = 1.0
    rate: float = 0.01

    def log_density(self, tau):
        return gamma_prec_log_density(tau, self.shape, self.rate)

    def log_density_internal(self, log_tau):
        lt = np.asarray(log_tau, dtype=float)
        with np.errstate(over="ignore"):
            return (self.shape * np.log(self.rate) - gammaln(self.shape) + self.shape * lt
                    - self.rate * np.exp(lt))

    def describe(self) -> dict:
        return {"kind": "gamma", "shape": self.shape, "rate": self.rate}


# ---------------------------------------------------------------- mixing

def phi_eigenvalues(q_star, null_dimension: int) -> np.ndarray:
    """Eigenvalues of the generalised inverse of ``q_star`` (zeros on the null space)."""
    gam = eigenvalues_sym(q_star)
    gt = np.zeros_like(gam)
    order = np.argsort(np.abs(gam))
    keep = order[null_dimension:]
    gt[keep] = 1.0 / gam[keep]
    return np.sort(gt)


def _x_minus_log1p(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-2
    xs = x[small]
    # x - log(1+x) = x^2/2 - x^3/3 + ...
    series = np.zeros_like(xs)
    for k in range(8, 1, -1):
        series = xs * (series + (-1) ** k / k)
    out[small] = xs * series
    xl = x[~small]
    with np.errstate(divide="ignore"):
        out[~small] = xl - np.log1p(xl)
    return out


def phi_kld(phi, gamma_tilde):
    """KLD of ``N(0, (1-phi) I + phi Q*^-)`` from ``N(0, I)``."""
    phi = np.asarray(phi, dtype=float)
    gt = np.asarray(gamma_tilde, dtype=float)
    x = phi[..., None] * (gt - 1.0)
    return 0.5 * np.sum(_x_minus_log1p(x), axis=-1)


def phi_distance(phi, gamma_tilde):
    phi = np.asarray(phi, dtype=float)
    if np.any((phi < 0) | (phi > 1)):
        raise ValueError("phi must lie in [0, 1]")
    kld = phi_kld(phi, gamma_tilde)
    if not np.all(np.isfinite(kld)):
        raise ValueError("distance is infinite at phi = 1 when Q* has a null space")
    return np.sqrt(2.0 * np.maximum(kld, 0.0))


def phi_distance_deriv(phi, gamma_tilde):
    """``d'(phi)``, with the finite limit ``sqrt(sum (g-1)^2 / 2)`` at ``phi = 0``."""
    phi = np.asarray(phi, dtype=float)
    a = np.asarray(gamma_tilde, dtype=float) - 1.0
    d = phi_distance(phi, gamma_tilde)
    limit0 = np.sqrt(0.5 * np.sum(a * a))
    p = phi[..., None]
    kld_deriv = 0.5 * np.sum(p * a * a / (1.0 + p * a), axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = kld_deriv / d
    return np.where(phi == 0, limit0, out)


def phi_pc_lambda(U: float, alpha: float, gamma_tilde) -> float:
    """Exponential rate on the distance scale giving ``P(phi < U) = alpha``."""
    if not 0 < U < 1:
        raise ValueError("U must lie in (0, 1)")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    dU = float(phi_distance(U, gamma_tilde))
    if dU <= 0:
        raise ValueError("distance at U is zero; the structure carries no spatial signal")
    return -np.log1p(-alpha) / dU


def _logit_parts(logit_phi):
    s = np.asarray(logit_phi, dtype=float)
    return s, -np.logaddexp(0.0, -s), -np.logaddexp(0.0, s)


def phi_kld_logit(logit_phi, gamma_tilde):
    """:func:`phi_kld` as a function of ``logit(phi)``, finite for any real logit."""
    s, log_phi, log_1m = _logit_parts(logit_phi)
    gt = np.asarray(gamma_tilde, dtype=float)
    phi = np.exp(log_phi)
    out = np.empty(s.shape)
    low = phi <= 0.5
    if np.any(low):
        out[low] = phi_kld(phi[low], gt)
    if np.any(~low):
        lp = log_phi[~low][..., None]
        l1 = log_1m[~low][..., None]
        with np.errstate(divide="ignore"):
            log_gt = np.log(gt)
        # log((1 - phi) + phi * g) without forming 1 - phi
        mix = np.logaddexp(l1, lp + log_gt)
        out[~low] = 0.5 * np.sum(np.exp(lp) * (gt - 1.0) - mix, axis=-1)
    return out


def phi_pc_log_density_logit(logit_phi, lam, gamma_tilde):
    """Log density of ``logit(phi)`` under the PC prior, stable in both tails."""
    s, log_phi, log_1m = _logit_parts(logit_phi)
    gt = np.asarray(gamma_tilde, dtype=float)
    a = gt - 1.0
    d = np.sqrt(2.0 * np.maximum(phi_kld_logit(s, gt), 0.0))
    phi = np.exp(log_phi)[..., None]
    one_m = np.exp(log_1m)[..., None]
    # d'(phi) * phi * (1 - phi) = 0.5 * sum a^2 phi^2 (1-phi) / ((1-phi) + phi g) / d
    with np.errstate(invalid="ignore"):
        ratio = np.where(gt == 0, 1.0, one_m / (one_m + phi * gt))
    jac = 0.5 * np.sum(a * a * phi * phi * ratio, axis=-1)
    tiny = log_phi < -20.0
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(jac) - np.log(d)
    # jac / d -> phi d'(0) as phi -> 0; use the limit before both underflow
    log_ratio = np.where(tiny, log_phi + 0.5 * np.log(0.5 * np.sum(a * a)), log_ratio)
    return np.log(lam) - lam * d + log_ratio


def phi_pc_log_density(phi, lam, gamma_tilde):
    phi = np.asarray(phi, dtype=float)
    return np.log(lam) - lam * phi_distance(phi, gamma_tilde) + np.log(phi_distance_deriv(phi, gamma_tilde))


@dataclass(frozen=True, eq=False)
class PhiPriorTable:
    """Mixing-weight prior bound to a particular scaled structure.

    The log density is tabulated on an equispaced logit grid for export and
    fast lookup; :meth:`log_density` evaluates it directly.
    """

    kind: str
    gamma_tilde: np.ndarray
    lam: float
    U: float | None = None
    alpha: float | None = None
    n_grid: int = 1000
    logit_grid: np.ndarray = field(init=False, repr=False)
    log_density_grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("pc", "uniform"):
            raise ValueError(f"unknown phi prior kind {self.kind!r}")
        if self.kind == "pc" and not np.any(self.gamma_tilde == 0):
            raise ValueError("PC prior for phi needs a structure with a null space")
        grid = np.linspace(-LOGIT_GRID_LIMIT, LOGIT_GRID_LIMIT, self.n_grid)
        object.__setattr__(self, "logit_grid", grid)
        object.__setattr__(self, "log_density_grid", self.log_density(expit(grid)))
        object.__setattr__(self, "_interp", CubicSpline(grid, self.log_density_grid))

    @classmethod
    def pc(cls, U: float, alpha: float, gamma_tilde, n_grid: int = 1000) -> "PhiPriorTable":
        gt = np.asarray(gamma_tilde, dtype=float)
        return cls("pc", gt, phi_pc_lambda(U, alpha, gt), U, alpha, n_grid)

    @classmethod
    def uniform(cls, gamma_tilde=None, n_grid: int = 1000) -> "PhiPriorTable":
        gt = np.zeros(0) if gamma_tilde is None else np.asarray(gamma_tilde, dtype=float)
        return cls("uniform", gt, 0.0, None, None, n_grid)

    def log_density(self, phi):
        if self.kind == "uniform":
            return uniform_phi_log_density(phi)
        phi = np.asarray(phi, dtype=float)
        # the endpoints take the value at the tabulation boundary
        lo, hi = expit(-LOGIT_GRID_LIMIT), expit(LOGIT_GRID_LIMIT)
        phi = np.where(phi <= 0.0, lo, np.where(phi >= 1.0, hi, phi))
        return phi_pc_log_density(phi, self.lam, self.gamma_tilde)

    def log_density_tabulated(self, phi):
        phi = np.asarray(phi, dtype=float)
        with np.errstate(divide="ignore"):
            s = np.log(phi) - np.log1p(-phi)
        return self._interp(np.clip(s, -LOGIT_GRID_LIMIT, LOGIT_GRID_LIMIT))

    def log_density_internal(self, logit_phi):
        """Log density of ``logit(phi)``."""
        s, log_phi, log_1m = _logit_parts(logit_phi)
        if self.kind == "uniform":
            return log_phi + log_1m
        return phi_pc_log_density_logit(s, self.lam, self.gamma_tilde)

    def cdf(self, phi):
        phi = np.asarray(phi, dtype=float)
        if self.kind == "uniform":
            return np.clip(phi, 0.0, 1.0)
        return -np.expm1(-self.lam * phi_distance(phi, self.gamma_tilde))

    def table(self):
        """``(phi, logit phi, log density)`` rows of the tabulated prior."""
        return expit(self.logit_grid), self.logit_grid, self.log_density_grid

    def describe(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform"}
        return {"kind": "pc", "U": self.U, "alpha": self.alpha, "lambda": self.lam}


@dataclass(frozen=True)
class PCPhiPrior:
    """Unbound PC prior for phi; :meth:`bind` attaches a scaled structure."""

    U: float = 0.5
    alpha: float = 2.0 / 3.0

    def bind(self, gamma_tilde) -> PhiPriorTable:
        return PhiPriorTable.pc(self.U, self.alpha, gamma_tilde)


@dataclass(frozen=True)
class UniformPhiPrior:
    def bind(self, gamma_tilde=None) -> PhiPriorTable:
        return PhiPriorTable.uniform(gamma_tilde)


_PRIOR_RE = re.compile(r"^\s*(pc|gamma|unif|uniform)\s*(?:[:(]\s*([^)]*)\)?)?\s*$", re.I)


def _parse_number(tok: str) -> float:
    tok = tok.strip()
    if "/" in tok:
        num, den = tok.split("/", 1)
        return float(num) / float(den)
    return float(tok)


def parse_prec_prior(text: str):
    """``"pc:U,alpha"`` or ``"gamma:shape,rate"``; fractions like ``0.2/0.31`` allowed."""
    m = _PRIOR_RE.match(text)
    if not m or m.group(1).lower().startswith("unif"):
        raise ValueError(f"cannot parse precision prior {text!r}")
    args = [_parse_number(t) for t in (m.group(2) or "").split(",") if t.strip()]
    kind = m.group(1).lower()
    if len(args) != 2:
        raise ValueError(f"{kind} prior needs two parameters, got {text!r}")
    if kind == "pc":
        pc_prec_theta(*args)
        return PCPrecPrior(*args)
    _check_positive("gamma parameters", args)
    return GammaPrecPrior(*args)


def parse_phi_prior(text: str):
    """``"pc:U,alpha"`` or ``"uniform"``."""
    m = _PRIOR_RE.match(text)
    if not m or m.group(1).lower() == "gamma":
        raise ValueError(f"cannot parse phi prior {text!r}")
    if m.group(1).lower().startswith("unif"):
        return UniformPhiPrior()
    args = [_parse_number(t) for t in (m.group(2) or "").split(",") if t.strip()]
    if len(args) != 2:
        raise ValueError(f"pc prior needs two parameters, got {text!r}")
    U, alpha = args
    if not (0 < U < 1 and 0 < alpha < 1):
        raise ValueError("phi prior needs U and alpha in (0, 1)")
    return PCPhiPrior(U, alpha)
