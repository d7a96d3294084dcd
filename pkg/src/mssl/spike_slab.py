"""Scalar spike-and-slab mathematics for Laplace mixtures.

Everything here is written for a two-component Laplace mixture
``w * l1 * exp(-l1 |x|) + (1 - w) * l0 * exp(-l0 |x|)`` with slab rate ``l1``
and spike rate ``l0 >= l1``. The same formulas serve the coefficient prior
(rates lambda1/lambda0, weight theta) and the partial-covariance prior
(rates xi1/xi0, weight eta).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.optimize import minimize_scalar
from scipy.special import expit

from .core import DataSet, EcmState, InstabilityError, PenaltyConfig, ValidationError


@dataclass(frozen=True)
class BetaMixture:
    lambda1: float
    lambda0: float

    def __post_init__(self):
        if not (self.lambda0 >= self.lambda1 > 0):
            raise ValidationError("need lambda0 >= lambda1 > 0")

    @property
    def slab(self) -> float:
        return self.lambda1

    @property
    def spike(self) -> float:
        return self.lambda0


@dataclass(frozen=True)
class OmegaMixture:
    xi1: float
    xi0: float

    def __post_init__(self):
        if not (self.xi0 >= self.xi1 > 0):
            raise ValidationError("need xi0 >= xi1 > 0")

    @property
    def slab(self) -> float:
        return self.xi1

    @property
    def spike(self) -> float:
        return self.xi0


def _check_weight(w, allow_boundary: bool):
    w = np.asarray(w, dtype=float)
    if allow_boundary:
        if np.any((w < 0) | (w > 1)):
            raise ValidationError("mixing weight must lie in [0, 1]")
    elif np.any((w <= 0) | (w >= 1)):
        raise ValidationError("mixing weight must lie strictly inside (0, 1)")
    return w


def _slab_log_odds(x, w, l1, l0):
    """log of slab/spike density ratio at ``x`` (finite for interior ``w``)."""
    with np.errstate(divide="ignore"):
        return (np.log(w) + math.log(l1)) - (np.log1p(-w) + math.log(l0)) + (l0 - l1) * np.abs(x)


def _slab_prob(x, w, mix, allow_boundary=False):
    w = _check_weight(w, allow_boundary)
    l1, l0 = mix.slab, mix.spike
    lo = _slab_log_odds(x, w, l1, l0)
    out = expit(lo)
    if allow_boundary:
        out = np.where(w == 0, 0.0, np.where(w == 1, 1.0, out))
    return out[()] if np.ndim(out) == 0 else out


def pstar(x, theta, mix: BetaMixture, allow_boundary: bool = False):
    """Conditional probability that ``x`` was drawn from the slab of the coefficient prior."""
    return _slab_prob(x, theta, mix, allow_boundary)


def qstar(x, eta, mix: OmegaMixture, allow_boundary: bool = False):
    """Conditional probability that ``x`` was drawn from the slab of the partial-covariance prior."""
    return _slab_prob(x, eta, mix, allow_boundary)


def lambda_star(x, theta, mix: BetaMixture, allow_boundary: bool = False):
    """Adaptive penalty ``lambda1 * p + lambda0 * (1 - p)``."""
    p = pstar(x, theta, mix, allow_boundary)
    return mix.lambda1 * p + mix.lambda0 * (1.0 - p)


def xi_star(x, eta, mix: OmegaMixture, allow_boundary: bool = False):
    qq = qstar(x, eta, mix, allow_boundary)
    return mix.xi1 * qq + mix.xi0 * (1.0 - qq)


def log_mixture_density(x, w, l1, l0):
    """``log(w l1 e^{-l1|x|} + (1-w) l0 e^{-l0|x|})`` evaluated without under/overflow."""
    ax = np.abs(x)
    with np.errstate(divide="ignore"):
        a = np.log(w) + math.log(l1) - l1 * ax
        b = np.log1p(-w) + math.log(l0) - l0 * ax
    return np.logaddexp(a, b)


def pen_beta(x, theta, mix: BetaMixture):
    """Log prior ratio ``log(pi(x | theta) / pi(0 | theta))`` of the marginal coefficient prior.

    Equals ``-lambda1 |x| + log(pstar(0) / pstar(x))``; it is zero at the origin
    and nonincreasing in ``|x|``.
    """
    _check_weight(theta, False)
    ax = np.abs(np.asarray(x, dtype=float))
    # near the origin: log1p of a relative change built from expm1 avoids cancellation
    w1 = theta * mix.lambda1
    w0 = (1.0 - theta) * mix.lambda0
    rel = (w1 * np.expm1(-mix.lambda1 * ax) + w0 * np.expm1(-mix.lambda0 * ax)) / (w1 + w0)
    with np.errstate(divide="ignore", invalid="ignore"):
        near = np.log1p(rel)
    far = (log_mixture_density(ax, theta, mix.lambda1, mix.lambda0)
           - log_mixture_density(0.0, theta, mix.lambda1, mix.lambda0))
    out = np.where(rel > -0.5, near, far)
    return out[()] if np.ndim(out) == 0 else out


# --- selection thresholds ----------------------------------------------------

def _check_delta_args(theta, omega_kk, n):
    _check_weight(theta, False)
    if omega_kk <= 0:
        raise ValidationError("omega_kk must be positive")
    if n < 1:
        raise ValidationError("n must be positive")


def delta_upper_bound(theta, omega_kk, n, mix: BetaMixture) -> float:
    """Raw upper bound ``sqrt(-2 n log p*(0) / omega_kk) + lambda1 / omega_kk`` on the exclusion threshold."""
    _check_delta_args(theta, omega_kk, n)
    lp0 = -np.logaddexp(0.0, -_slab_log_odds(0.0, theta, mix.lambda1, mix.lambda0))
    return float(math.sqrt(-2.0 * n * float(lp0) / omega_kk) + mix.lambda1 / omega_kk)


def bound_eligible(theta, omega_kk, n, mix: BetaMixture) -> bool:
    """True when the two-sided bound on the exclusion threshold applies.

    Requires a spike/slab gap larger than ``2 sqrt(n omega_kk)`` and a positive
    gap function at the origin, ``(lambda*(0) - lambda1)^2 > -2 n omega_kk log p*(0)``.
    """
    _check_delta_args(theta, omega_kk, n)
    if not (mix.lambda0 - mix.lambda1 > 2.0 * math.sqrt(n * omega_kk)):
        return False
    p0 = float(pstar(0.0, theta, mix))
    lstar0 = mix.lambda1 * p0 + mix.lambda0 * (1.0 - p0)
    return (lstar0 - mix.lambda1) ** 2 > -2.0 * n * omega_kk * math.log(p0)


def delta_upper(theta, omega_kk, n, mix: BetaMixture) -> float:
    """Hard-threshold used by the coordinate update.

    The bound ``delta_upper_bound`` when :func:`bound_eligible` holds, otherwise the
    soft threshold at the origin, ``lambda*(0, theta) / omega_kk``.
    """
    if bound_eligible(theta, omega_kk, n, mix):
        return delta_upper_bound(theta, omega_kk, n, mix)
    return float(lambda_star(0.0, theta, mix)) / omega_kk


def curvature_root(theta, omega_kk, n, mix: BetaMixture, variant: str = "scaled") -> float:
    """Larger root ``x > 0`` where the penalty curvature matches the likelihood curvature.

    ``pen''(x) = (lambda0 - lambda1)^2 p*(1 - p*)``. The ``"scaled"`` variant solves
    ``pen''(x) / omega_kk = n``; ``"printed"`` solves ``pen''(x) = omega_kk``.
    Returns ``nan`` when no root exists.
    """
    gap = mix.lambda0 - mix.lambda1
    if gap <= 0:
        return float("nan")
    c = (n * omega_kk if variant == "scaled" else omega_kk) / gap ** 2
    disc = 1.0 - 4.0 * c
    if disc < 0:
        return float("nan")
    p_hi = 0.5 * (1.0 + math.sqrt(disc))
    if p_hi >= 1.0:
        return float("nan")
    # p*(x) = expit(lo0 + gap x)
    lo0 = float(_slab_log_odds(0.0, theta, mix.lambda1, mix.lambda0))
    x = (math.log(p_hi / (1.0 - p_hi)) - lo0) / gap
    return max(x, 0.0)


def delta_lower(theta, omega_kk, n, mix: BetaMixture, variant: str = "scaled") -> float:
    """Lower bound on the exclusion threshold (diagnostic only)."""
    _check_delta_args(theta, omega_kk, n)
    x = curvature_root(theta, omega_kk, n, mix, variant)
    if not np.isfinite(x):
        return float("nan")
    px = float(pstar(x, theta, mix))
    lx = mix.lambda1 * px + mix.lambda0 * (1.0 - px)
    d = -(lx - mix.lambda1) ** 2 - 2.0 * n * omega_kk * math.log(px)
    p0 = float(pstar(0.0, theta, mix))
    arg = -2.0 * n * math.log(p0) / omega_kk - d / omega_kk ** 2
    if arg < 0:
        return float("nan")
    return math.sqrt(arg) + mix.lambda1 / omega_kk


def delta_oracle(theta, omega_kk, n, mix: BetaMixture, n_grid: int = 4000) -> float:
    """Brute-force ``inf_{t > 0} { n t / 2 - pen(t) / (omega_kk t) }``.

    Log-spaced grid plus bounded golden-section polish around the best grid
    point; the ``t -> 0+`` limit ``lambda*(0)/omega_kk`` is included as a candidate.
    """
    _check_delta_args(theta, omega_kk, n)

    def g(t):
        return n * t / 2.0 - pen_beta(t, theta, mix) / (omega_kk * t)

    limit0 = float(lambda_star(0.0, theta, mix)) / omega_kk
    # beyond t_max, n t / 2 alone exceeds the t -> 0 limit
    t_max = 2.0 * limit0 / n * 1.5 + 1e-12
    ts = np.geomspace(t_max * 1e-9, t_max, n_grid)
    vals = g(ts)
    i = int(np.argmin(vals))
    lo = ts[max(i - 1, 0)]
    hi = ts[min(i + 1, n_grid - 1)]
    best = float(vals[i])
    if hi > lo:
        res = minimize_scalar(g, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-14 * max(hi, 1.0), "maxiter": 500})
        best = min(best, float(res.fun))
    return min(best, limit0)


# --- log posterior -------------------------------------------------------------

def logdet_pd(Omega: np.ndarray) -> float:
    """``log|Omega|`` via Cholesky; raises :class:`InstabilityError` if not positive definite."""
    try:
        L = np.linalg.cholesky(Omega)
    except np.linalg.LinAlgError as exc:
        raise InstabilityError("Omega is not positive definite") from exc
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def _beta_log_prior(w, a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = 0.0 if a == 1 else (a - 1.0) * math.log(w)
        tb = 0.0 if b == 1 else (b - 1.0) * math.log1p(-w)
    return ta + tb


def log_posterior_parts(B, Omega, theta, eta, R, n, cfg: PenaltyConfig,
                        lambda0: float, xi0: float) -> float:
    q = Omega.shape[0]
    ld = logdet_pd(Omega)
    fit = float(np.sum((R.T @ R) * Omega))
    b_prior = float(np.sum(log_mixture_density(B, theta, cfg.lambda1, lambda0)))
    iu = np.triu_indices(q, k=1)
    o_prior = float(np.sum(log_mixture_density(Omega[iu], eta, cfg.xi1, xi0)))
    return (0.5 * n * ld - 0.5 * fit + b_prior + o_prior
            - cfg.xi1 * float(np.trace(Omega))
            + _beta_log_prior(theta, cfg.a_theta, cfg.b_theta)
            + _beta_log_prior(eta, cfg.a_eta, cfg.b_eta))


def log_posterior(state: EcmState, data: DataSet, cfg: PenaltyConfig,
                  lambda0: float, xi0: float) -> float:
    """Observed-data log posterior of ``(B, theta, Omega, eta)`` up to an additive constant.

    The indicator variables are integrated out; the off-diagonal mixture sum runs
    over the strict upper triangle of ``Omega``.
    """
    return log_posterior_parts(state.B, state.Omega, state.theta, state.eta, state.R,
                               data.n, cfg, lambda0, xi0)


# --- compiled scalar helpers for the coordinate kernels -----------------------

@njit(cache=True)
def nb_log_mix(x, log_w1, log_w0, l1, l0):
    ax = abs(x)
    a = log_w1 - l1 * ax
    b = log_w0 - l0 * ax
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def nb_pstar(x, log_ratio0, gap):
    # log_ratio0 = log(theta l1) - log((1 - theta) l0); gap = l0 - l1
    lo = log_ratio0 + gap * abs(x)
    if lo >= 0:
        return 1.0 / (1.0 + math.exp(-lo))
    e = math.exp(lo)
    return e / (1.0 + e)
