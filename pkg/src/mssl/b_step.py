"""Conditional maximization over ``(B, theta)`` with ``(Omega, eta)`` held fixed.

``B`` is updated by refined coordinate ascent: each entry is soft-thresholded at
its adaptive penalty and hard-thresholded at the exclusion threshold from
:func:`mssl.spike_slab.delta_upper`. ``theta`` is refreshed by a safeguarded
Newton iteration after every full sweep.

The coordinate kernel works with Gram quantities: ``XR = X'R`` is maintained
incrementally through ``X'X`` so a single update costs ``O(p + q)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .core import THETA_MARGIN, DataSet, EcmState, FitOptions, PenaltyConfig, ValidationError
from .spike_slab import (BetaMixture, log_mixture_density, delta_upper, lambda_star, nb_log_mix, nb_pstar,
                         pstar)

RECOMPUTE_EVERY = 50
GUARD_RTOL = 1e-12
FIXED_POINT_MAX = 500


class BStepWorkspace:
    """Cached ``X'R`` for the current ``B`` together with ``X'X``."""

    def __init__(self, data: DataSet, B: np.ndarray):
        self.data = data
        self.B = np.array(B, dtype=float, copy=True)
        self.xtx = data.gram
        self.refresh()

    def refresh(self):
        self.xr = self.data.xty - self.xtx @ self.B

    @property
    def xr_cache(self) -> np.ndarray:
        return self.xr

    @property
    def active_set(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.B[:, k]) for k in range(self.B.shape[1])]

    def residuals(self) -> np.ndarray:
        return self.data.Y - self.data.X @ self.B


def compute_z(j: int, k: int, Omega: np.ndarray, ws: BStepWorkspace) -> float:
    """``n beta_jk + sum_k' (omega_kk' / omega_kk) x_j' r_k'`` over all ``k'`` including ``k``."""
    okk = Omega[k, k]
    if okk <= 0:
        raise ValidationError("omega_kk must be positive")
    n = ws.data.n
    return float(n * ws.B[j, k] + Omega[k] @ ws.xr[j] / okk)


def _objective_1d(b, z, okk, n, theta, mix):
    # coordinate objective up to a constant: -n okk b^2 / 2 + okk z b + log pi(b | theta)
    return (-0.5 * n * okk * b * b + okk * z * b
            + float(log_mixture_density(b, theta, mix.lambda1, mix.lambda0)))


def update_entry(j: int, k: int, Omega: np.ndarray, ws: BStepWorkspace, theta: float,
                 mix: BetaMixture, guard: bool = True) -> float:
    """Apply the thresholding rule to entry ``(j, k)`` in place and return the new value.

    With ``guard`` a candidate that lowers the coordinate objective is rejected
    and the old value is kept.
    """
    n = ws.data.n
    okk = Omega[k, k]
    z = compute_z(j, k, Omega, ws)
    b_old = ws.B[j, k]
    thr = delta_upper(theta, okk, n, mix)
    if abs(z) > thr:
        lam = float(lambda_star(b_old, theta, mix))
        b_new = math.copysign(max(abs(z) - lam / okk, 0.0) / n, z)
        if b_new == 0.0:
            b_new = math.copysign(_largest_fixed_point(abs(z), okk, n, theta, mix), z)
    else:
        b_new = 0.0
    if b_new == b_old:
        return b_old
    if guard:
        f_new = _objective_1d(b_new, z, okk, n, theta, mix)
        f_old = _objective_1d(b_old, z, okk, n, theta, mix)
        if f_new < f_old - GUARD_RTOL * (1.0 + abs(f_old)):
            return b_old
    d = b_new - b_old
    ws.B[j, k] = b_new
    ws.xr[:, k] -= d * ws.xtx[:, j]
    return b_new


def _largest_fixed_point(az, okk, n, theta, mix):
    """Largest solution of ``b = (az - lambda*(b)/okk)_+ / n``, iterating down from the slab-only value."""
    b = max(az - mix.lambda1 / okk, 0.0) / n
    for _ in range(FIXED_POINT_MAX):
        nxt = max(az - float(lambda_star(b, theta, mix)) / okk, 0.0) / n
        if abs(nxt - b) <= 1e-15 * (1.0 + b):
            return nxt
        b = nxt
        if b == 0.0:
            break
    return b


@njit(cache=True)
def _nb_fixed_point(az, okk, n, lo0, l1, l0, max_iter):
    gap = l0 - l1
    b = max(az - l1 / okk, 0.0) / n
    for _ in range(max_iter):
        ps = nb_pstar(b, lo0, gap)
        nxt = max(az - (l1 * ps + l0 * (1.0 - ps)) / okk, 0.0) / n
        if abs(nxt - b) <= 1e-15 * (1.0 + b):
            return nxt
        b = nxt
        if b == 0.0:
            break
    return b


@njit(cache=True)
def _thresholds(omega_diag, n, lo0, l1, l0):
    """Per-column exclusion thresholds; mirrors :func:`mssl.spike_slab.delta_upper`."""
    q = omega_diag.shape[0]
    out = np.empty(q)
    if lo0 >= 0:
        p0 = 1.0 / (1.0 + math.exp(-lo0))
        logp0 = -math.log1p(math.exp(-lo0))
    else:
        e = math.exp(lo0)
        p0 = e / (1.0 + e)
        logp0 = lo0 - math.log1p(e)
    lstar0 = l1 * p0 + l0 * (1.0 - p0)
    for k in range(q):
        okk = omega_diag[k]
        eligible = (l0 - l1 > 2.0 * math.sqrt(n * okk)) and \
            ((lstar0 - l1) ** 2 > -2.0 * n * okk * logp0)
        if eligible:
            out[k] = math.sqrt(-2.0 * n * logp0 / okk) + l1 / okk
        else:
            out[k] = lstar0 / okk
    return out


@njit(cache=True)
def _cd_sweep(B, XR, XtX, Omega, n, theta, l1, l0, guard, guard_rtol):
    p, q = B.shape
    log_w1 = math.log(theta) + math.log(l1)
    log_w0 = math.log1p(-theta) + math.log(l0)
    lo0 = log_w1 - log_w0
    gap = l0 - l1
    diag = np.empty(q)
    for k in range(q):
        diag[k] = Omega[k, k]
    thr = _thresholds(diag, n, lo0, l1, l0)
    max_change = 0.0
    rejected = 0
    for j in range(p):
        for k in range(q):
            okk = diag[k]
            acc = 0.0
            for kk in range(q):
                acc += Omega[k, kk] * XR[j, kk]
            b_old = B[j, k]
            z = n * b_old + acc / okk
            az = abs(z)
            b_new = 0.0
            if az > thr[k]:
                ps = nb_pstar(b_old, lo0, gap)
                lam = l1 * ps + l0 * (1.0 - ps)
                mag = az - lam / okk
                if mag > 0.0:
                    b_new = mag / n
                else:
                    # the one-step rule cannot leave zero here; take the implicit solution
                    b_new = _nb_fixed_point(az, okk, n, lo0, l1, l0, FIXED_POINT_MAX)
                if z < 0.0:
                    b_new = -b_new
            if b_new == b_old:
                continue
            if guard:
                f_new = -0.5 * n * okk * b_new * b_new + okk * z * b_new \
                    + nb_log_mix(b_new, log_w1, log_w0, l1, l0)
                f_old = -0.5 * n * okk * b_old * b_old + okk * z * b_old \
                    + nb_log_mix(b_old, log_w1, log_w0, l1, l0)
                if f_new < f_old - guard_rtol * (1.0 + abs(f_old)):
                    rejected += 1
                    continue
            d = b_new - b_old
            B[j, k] = b_new
            for i in range(p):
                XR[i, k] -= d * XtX[i, j]
            if abs(d) > max_change:
                max_change = abs(d)
    return max_change, rejected


def coordinate_sweep(ws: BStepWorkspace, Omega: np.ndarray, theta: float,
                     mix: BetaMixture, guard: bool = True) -> tuple[float, int]:
    """One row-major pass over all entries (compiled); returns (max |change|, rejected updates)."""
    return _cd_sweep(ws.B, ws.xr, ws.xtx, np.ascontiguousarray(Omega), float(ws.data.n),
                     float(theta), float(mix.lambda1), float(mix.lambda0), guard, GUARD_RTOL)


def _sweep_converged(change: float, B: np.ndarray, tol: float) -> bool:
    return change < tol * (1.0 + float(np.max(np.abs(B), initial=0.0)))


def refined_coordinate_ascent(data: DataSet, B_init: np.ndarray, Omega: np.ndarray,
                              theta: float, mix: BetaMixture,
                              opts: FitOptions | None = None) -> tuple[np.ndarray, bool, int]:
    """Sweep the thresholding rule with ``theta`` fixed until a sweep changes nothing material.

    Returns ``(B, converged, sweeps)``. Hitting ``max_iter_cd`` is reported through
    ``converged=False`` rather than raised.
    """
    opts = opts or FitOptions()
    ws = BStepWorkspace(data, B_init)
    for sweep in range(1, opts.max_iter_cd + 1):
        change, _ = coordinate_sweep(ws, Omega, theta, mix)
        if sweep % RECOMPUTE_EVERY == 0:
            ws.refresh()
        if _sweep_converged(change, ws.B, opts.tol):
            return ws.B, True, sweep
    return ws.B, False, opts.max_iter_cd


# --- theta ---------------------------------------------------------------------

def theta_gradient(theta: float, B: np.ndarray, mix: BetaMixture, a: float, b: float):
    """First and second derivative of the theta objective."""
    ps = pstar(B, theta, mix)
    t = ps / theta - (1.0 - ps) / (1.0 - theta)
    g1 = float(np.sum(t)) + (a - 1.0) / theta - (b - 1.0) / (1.0 - theta)
    g2 = -float(np.sum(t * t)) - (a - 1.0) / theta ** 2 - (b - 1.0) / (1.0 - theta) ** 2
    return g1, g2


def theta_objective(theta: float, B: np.ndarray, mix: BetaMixture, a: float, b: float) -> float:
    return (float(np.sum(log_mixture_density(B, theta, mix.lambda1, mix.lambda0)))
            + (a - 1.0) * math.log(theta) + (b - 1.0) * math.log1p(-theta))


@dataclass
class ThetaUpdate:
    theta: float
    gradient: float
    boundary: bool
    iterations: int


def update_theta(B: np.ndarray, mix: BetaMixture, a: float, b: float, theta_init: float,
                 max_iter: int = 100, margin: float = THETA_MARGIN) -> ThetaUpdate:
    """Maximize the theta objective by Newton steps safeguarded with bisection.

    The objective is concave in theta, so the derivative is decreasing; when it
    does not change sign on ``[margin, 1 - margin]`` the maximizer sits at a
    boundary and ``boundary=True`` is reported.
    """
    if not (0.0 < theta_init < 1.0):
        raise ValidationError("theta_init must lie in (0, 1)")
    lo, hi = margin, 1.0 - margin
    g_lo, _ = theta_gradient(lo, B, mix, a, b)
    if g_lo <= 0.0:
        return ThetaUpdate(lo, g_lo, True, 0)
    g_hi, _ = theta_gradient(hi, B, mix, a, b)
    if g_hi >= 0.0:
        return ThetaUpdate(hi, g_hi, True, 0)
    tol = 1e-8 * max(B.size, 1)
    th = min(max(theta_init, lo), hi)
    g1 = float("nan")
    for it in range(1, max_iter + 1):
        g1, g2 = theta_gradient(th, B, mix, a, b)
        if abs(g1) < tol:
            # one more Newton step polishes theta to roundoff at negligible cost
            step = th - g1 / g2 if g2 < 0 else th
            if lo <= step <= hi and step != th:
                g_step, _ = theta_gradient(step, B, mix, a, b)
                if abs(g_step) <= abs(g1):
                    th, g1 = step, g_step
            return ThetaUpdate(th, g1, False, it)
        if g1 > 0:
            lo = th
        else:
            hi = th
        step = th - g1 / g2 if g2 < 0 else float("nan")
        if not (lo < step < hi):
            step = 0.5 * (lo + hi)
        if hi - lo <= 4.0 * np.finfo(float).eps * max(th, 1e-300):
            return ThetaUpdate(th, g1, False, it)
        th = step
    return ThetaUpdate(th, g1, False, max_iter)


# --- the CM step ---------------------------------------------------------------

@dataclass
class BStepResult:
    B: np.ndarray
    theta: float
    converged: bool
    sweeps: int
    rejected: int


def cm_step_B(data: DataSet, state: EcmState, cfg: PenaltyConfig, lambda0: float,
              opts: FitOptions | None = None, Omega: np.ndarray | None = None,
              update_theta_flag: bool = True) -> BStepResult:
    """Update ``(B, theta)`` holding ``Omega`` fixed (``state.Omega`` unless given).

    Alternates one coordinate sweep and one theta refresh until the largest
    change in ``B`` is below ``tol * (1 + max|B|)`` and theta moves by less than ``tol``.
    """
    opts = opts or FitOptions()
    mix = BetaMixture(cfg.lambda1, lambda0)
    Omega = state.Omega if Omega is None else Omega
    ws = BStepWorkspace(data, state.B)
    theta = min(max(state.theta, THETA_MARGIN), 1.0 - THETA_MARGIN)
    rejected = 0
    for sweep in range(1, opts.max_iter_cd + 1):
        change, rej = coordinate_sweep(ws, Omega, theta, mix)
        rejected += rej
        if sweep % RECOMPUTE_EVERY == 0:
            ws.refresh()
        dtheta = 0.0
        if update_theta_flag:
            upd = update_theta(ws.B, mix, cfg.a_theta, cfg.b_theta, theta,
                               max_iter=opts.max_iter_newton)
            dtheta = abs(upd.theta - theta)
            theta = upd.theta
        if _sweep_converged(change, ws.B, opts.tol) and dtheta < opts.tol:
            return BStepResult(ws.B, theta, True, sweep, rejected)
    return BStepResult(ws.B, theta, False, opts.max_iter_cd, rejected)
