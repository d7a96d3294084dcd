"""Dynamic posterior exploration over ladders of spike penalties.

* :func:`dpe` walks the full ``L x L`` grid of ``(lambda0, xi0)`` values, warm
  starting each cell from the best stable neighbour.
* :func:`dcpe` follows two conditional paths (``B`` with ``Omega = I``, then
  ``Omega`` with ``B`` fixed) and finishes with one joint ECM fit.
* :func:`sep_ssl_ssg` fits each response separately along the ``lambda0``
  ladder and then follows the ``Omega`` path with ``B`` fixed.
"""
from __future__ import annotations

import logging
import time
from typing import Optional

import numpy as np

from .b_step import cm_step_B, update_theta
from .core import (DataSet, EcmState, FitOptions, InstabilityError, ModeCell, ModeGrid,
                   PenaltyConfig, ValidationError, support_counts)
from .ecm import EcmTrace, ecm_fit, relative_change
from .omega_step import cm_step_Omega, e_step_q
from .spike_slab import BetaMixture, OmegaMixture, log_posterior

log = logging.getLogger(__name__)

N_SETTINGS = 12


# --- ladders -------------------------------------------------------------------

def make_ladder(lo: float, hi: float, L: int, rule: str = "linear") -> np.ndarray:
    if L < 1:
        raise ValidationError("ladder length must be >= 1")
    if L == 1:
        return np.array([float(hi)])
    if not hi > lo > 0:
        raise ValidationError(f"ladder endpoints must satisfy 0 < lo < hi (got {lo}, {hi})")
    if rule == "linear":
        return np.linspace(lo, hi, L)
    if rule == "log":
        return np.geomspace(lo, hi, L)
    raise ValidationError(f"unknown ladder rule {rule!r}")


def default_ladders(setting: int, data: DataSet, L: int = 10) -> PenaltyConfig:
    """Penalty configuration for one of the twelve preset hyper-parameter settings.

    Settings 1-6 use ``lambda1 = 1``, ``xi1 = 0.01 n`` with ladders on ``[10, n]`` and
    ``[0.1 n, n]``; settings 7-12 take the terminal ``lambda0`` from
    ``max |x_j'y_k|`` and the ``xi`` scale from ``max |Y'Y| / n``. Settings 4-6 and
    10-12 space the ladders on the log scale. Within each block of three the Beta
    hyper-parameters are ``(b_theta, b_eta) = (pq, q), (p, q), (1, 1)``.
    """
    if setting not in range(1, N_SETTINGS + 1):
        raise ValidationError(f"unknown setting {setting}; expected 1..{N_SETTINGS}")
    n, p, q = data.n, data.p, data.q
    rule = "log" if setting in (4, 5, 6, 10, 11, 12) else "linear"
    variant = (setting - 1) % 3
    b_theta = (p * q, p, 1)[variant]
    b_eta = (q, q, 1)[variant]
    if setting <= 6:
        lambda1, xi1 = 1.0, 0.01 * n
        lam = make_ladder(10.0, float(n), L, rule)
        xi = make_ladder(0.1 * n, float(n), L, rule)
    else:
        lambda1 = 1.0
        lam_max = float(np.max(np.abs(data.xty)))
        yty_max = float(np.max(np.abs(data.Y.T @ data.Y))) / n
        xi1 = yty_max / 1000.0
        if lam_max <= 10.0:
            raise ValidationError("max |x_j'y_k| must exceed 10 for settings 7-12")
        lam = make_ladder(10.0, lam_max, L, rule)
        xi = make_ladder(10.0 * xi1, 100.0 * xi1, L, rule)
    return PenaltyConfig(lambda1=lambda1, xi1=xi1, lambda_ladder=lam, xi_ladder=xi,
                         a_theta=1.0, b_theta=float(b_theta), a_eta=1.0, b_eta=float(b_eta))


# --- stability -----------------------------------------------------------------

def condition_number(S: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(0.5 * (S + S.T))
    if ev[0] <= 0.0:
        return float("inf")
    return float(ev[-1] / ev[0])


def check_stability(S: np.ndarray, n: int, multiplier: float = 10.0) -> bool:
    """True iff the residual covariance has condition number at most ``multiplier * n``."""
    return condition_number(S) <= multiplier * n


# --- helpers -------------------------------------------------------------------

def _masks(state: EcmState):
    iu = np.triu_indices(state.Omega.shape[0], k=1)
    return state.B != 0, state.Omega[iu] != 0


def _safe_logpost(state, data, cfg, lambda0, xi0) -> float:
    if state is None:
        return float("nan")
    try:
        return log_posterior(state, data, cfg, lambda0, xi0)
    except InstabilityError:
        return float("nan")


def _make_cell(state, trace, data, cfg, lam_s, xi_t, opts, t0, predecessor=None,
               error=None, keep_state=True, stable=None) -> ModeCell:
    lamL, xiL = cfg.lambda_ladder[-1], cfg.xi_ladder[-1]
    if stable is None:
        stable = error is None and state is not None and \
            check_stability(state.S, data.n, opts.cond_cap_multiplier)
    bm, om = _masks(state) if state is not None else (None, None)
    return ModeCell(
        supports=support_counts(state) if state is not None else (-1, -1),
        log_posterior_at_terminal=_safe_logpost(state, data, cfg, lamL, xiL),
        log_posterior_at_own=_safe_logpost(state, data, cfg, lam_s, xi_t),
        stable=bool(stable),
        converged=bool(trace.converged) if trace is not None else False,
        iterations=int(trace.iterations) if trace is not None else 0,
        wall_time=time.perf_counter() - t0,
        predecessor=predecessor,
        B_mask=bm, Omega_mask=om,
        state=state if keep_state else None,
        trace=trace, error=error)


def _grid_order(Ls: int, Lt: int, order: str):
    if order == "s-outer":
        return [(s, t) for s in range(1, Ls + 1) for t in range(1, Lt + 1)]
    if order == "t-outer":
        return [(s, t) for t in range(1, Lt + 1) for s in range(1, Ls + 1)]
    raise ValidationError(f"unknown traversal order {order!r}")


# --- mSSL-DPE ------------------------------------------------------------------

def dpe(data: DataSet, cfg: PenaltyConfig, opts: FitOptions | None = None,
        keep_states: bool = False, order: str = "s-outer") -> ModeGrid:
    """Warm-started exploration of the full ladder grid; the reported mode is ``(L, L)``.

    Cell ``(s, t)`` starts from whichever stable neighbour among ``(s-1, t)``,
    ``(s, t-1)`` and ``(s-1, t-1)`` has the largest log posterior at
    ``(lambda0^(s), xi0^(t))``; with no stable neighbour it restarts from
    ``B = 0, Omega = I``. Unstable modes are recorded but never propagated.
    """
    opts = opts or FitOptions()
    lam, xi = cfg.lambda_ladder, cfg.xi_ladder
    Ls, Lt = lam.size, xi.size
    grid = ModeGrid(lam.copy(), xi.copy(), order=order)
    cold = EcmState.cold_start(data)
    grid.reference_log_posterior = log_posterior(cold, data, cfg, lam[-1], xi[-1])
    states: dict[tuple, EcmState] = {}
    outer_of = (lambda key: key[0]) if order == "s-outer" else (lambda key: key[1])
    for (s, t) in _grid_order(Ls, Lt, order):
        t0 = time.perf_counter()
        lam_s, xi_t = lam[s - 1], xi[t - 1]
        candidates = {}
        for key in ((s - 1, t), (s, t - 1), (s - 1, t - 1)):
            if key in states and grid.modes[key].stable:
                candidates[key] = _safe_logpost(states[key], data, cfg, lam_s, xi_t)
        pred, init = None, cold
        best = -np.inf
        for key, lp in candidates.items():
            if np.isfinite(lp) and lp > best:
                pred, best = key, lp
        if pred is not None:
            init = states[pred]
        error = None
        try:
            state, trace = ecm_fit(data, init, cfg, lam_s, xi_t, opts)
        except InstabilityError as exc:
            state, trace, error = exc.last_state, exc.trace, str(exc)
        cell = _make_cell(state, trace, data, cfg, lam_s, xi_t, opts, t0,
                          predecessor=pred, error=error,
                          keep_state=keep_states or (s, t) == (Ls, Lt))
        cell.candidates = candidates
        grid.modes[(s, t)] = cell
        if state is not None and cell.stable:
            states[(s, t)] = state
        if not keep_states:
            cur = outer_of((s, t))
            for key in [k for k in states if outer_of(k) < cur - 1]:
                del states[key]
        if opts.verbose:
            log.info("dpe cell (%d,%d) pred=%s supp=%s stable=%s", s, t, pred,
                     cell.supports, cell.stable)
    grid.final = (Ls, Lt)
    return grid


# --- conditional paths ---------------------------------------------------------

def lambda_path(data: DataSet, state: EcmState, cfg: PenaltyConfig, opts: FitOptions,
                Omega: Optional[np.ndarray] = None, grid: Optional[ModeGrid] = None,
                label: str = "lambda") -> EcmState:
    """Warm-started ``(B, theta)`` modes along the lambda0 ladder with ``Omega`` held fixed."""
    Omega = np.eye(data.q) if Omega is None else Omega
    for s, lam_s in enumerate(cfg.lambda_ladder, start=1):
        t0 = time.perf_counter()
        res = cm_step_B(data, state, cfg, lam_s, opts, Omega=Omega)
        state = EcmState.from_params(data, res.B, res.theta, Omega, state.eta)
        if grid is not None:
            tr = EcmTrace(converged=res.converged, iterations=res.sweeps)
            grid.modes[(label, s)] = _make_cell(state, tr, data, cfg, lam_s, cfg.xi_ladder[-1],
                                                opts, t0, predecessor=(label, s - 1),
                                                keep_state=False, stable=True)
    return state


def omega_path(data: DataSet, state: EcmState, cfg: PenaltyConfig, opts: FitOptions,
               grid: Optional[ModeGrid] = None, label: str = "xi") -> EcmState:
    """Warm-started ``(Omega, eta)`` modes along the xi0 ladder with ``(B, theta)`` held fixed."""
    for t, xi_t in enumerate(cfg.xi_ladder, start=1):
        t0 = time.perf_counter()
        mix = OmegaMixture(cfg.xi1, xi_t)
        converged = False
        it = 0
        error = None
        try:
            for it in range(1, opts.max_iter_ecm + 1):
                Q, P = e_step_q(state.Omega, state.eta, mix)
                ores = cm_step_Omega(data, state, cfg, xi_t, opts, qstar_matrix=Q, penalties=P)
                change = max(relative_change(state.Omega, ores.Omega), abs(ores.eta - state.eta))
                state = EcmState(state.B, state.theta, ores.Omega, ores.eta, state.R, state.S)
                if change < opts.tol:
                    converged = True
                    break
        except InstabilityError as exc:
            error = str(exc)
        if grid is not None:
            tr = EcmTrace(converged=converged, iterations=it)
            grid.modes[(label, t)] = _make_cell(state, tr, data, cfg, cfg.lambda_ladder[-1], xi_t,
                                                opts, t0, predecessor=(label, t - 1),
                                                error=error, keep_state=False)
        if error is not None:
            raise InstabilityError(error, last_state=state)
    return state


def dcpe(data: DataSet, cfg: PenaltyConfig, opts: FitOptions | None = None,
         keep_states: bool = False) -> tuple[EcmState, ModeGrid]:
    """Conditional path for ``B`` (``Omega = I``), then for ``Omega`` (``B`` fixed), then a joint ECM fit.

    Grid keys: ``("lambda", s)`` for the first path, ``("xi", t)`` for the second
    and ``("joint",)`` for the reported mode.
    """
    opts = opts or FitOptions()
    grid = ModeGrid(cfg.lambda_ladder.copy(), cfg.xi_ladder.copy(), order="conditional")
    cold = EcmState.cold_start(data)
    grid.reference_log_posterior = log_posterior(cold, data, cfg, cfg.lambda_ladder[-1],
                                                 cfg.xi_ladder[-1])
    state = lambda_path(data, cold, cfg, opts, grid=grid)
    state = EcmState.from_params(data, state.B, state.theta, np.eye(data.q), state.eta)
    state = omega_path(data, state, cfg, opts, grid=grid)
    t0 = time.perf_counter()
    lamL, xiL = cfg.lambda_ladder[-1], cfg.xi_ladder[-1]
    error = None
    try:
        final, trace = ecm_fit(data, state, cfg, lamL, xiL, opts)
    except InstabilityError as exc:
        final, trace, error = exc.last_state, exc.trace, str(exc)
    grid.modes[("joint",)] = _make_cell(final, trace, data, cfg, lamL, xiL, opts, t0,
                                        predecessor=("xi", cfg.xi_ladder.size), error=error)
    grid.final = ("joint",)
    return final, grid


def sep_ssl_ssg(data: DataSet, cfg: PenaltyConfig, opts: FitOptions | None = None
                ) -> tuple[EcmState, ModeGrid]:
    """Column-by-column spike-and-slab lasso paths, then the ``Omega`` path with ``B`` fixed.

    Each response gets its own ``theta_k`` (stored in ``grid.info["column_thetas"]``).
    The returned state's ``theta`` is the pooled maximizer given the assembled ``B``.
    """
    opts = opts or FitOptions()
    grid = ModeGrid(cfg.lambda_ladder.copy(), cfg.xi_ladder.copy(), order="separate")
    B = np.zeros((data.p, data.q))
    thetas = np.zeros(data.q)
    for k in range(data.q):
        sub = data.column_subset([k])
        st = EcmState.cold_start(sub)
        st = lambda_path(sub, st, cfg, opts, Omega=np.eye(1))
        B[:, k] = st.B[:, 0]
        thetas[k] = st.theta
    mix = BetaMixture(cfg.lambda1, cfg.lambda_ladder[-1])
    pooled = update_theta(B, mix, cfg.a_theta, cfg.b_theta, 0.5, opts.max_iter_newton).theta
    state = EcmState.from_params(data, B, pooled, np.eye(data.q), 0.5)
    state = omega_path(data, state, cfg, opts, grid=grid)
    t0 = time.perf_counter()
    lamL, xiL = cfg.lambda_ladder[-1], cfg.xi_ladder[-1]
    grid.modes[("final",)] = _make_cell(state, EcmTrace(converged=True), data, cfg, lamL, xiL,
                                        opts, t0, predecessor=("xi", cfg.xi_ladder.size))
    grid.final = ("final",)
    grid.info = {"column_thetas": thetas}
    return state, grid


# --- diagnostics ---------------------------------------------------------------

def stabilization_report(grid: ModeGrid) -> dict:
    """Per-cell supports, stability flags and normalized log-posterior ratios.

    The ratio for cell ``(s, t)`` is
    ``(lp(s,t) - lp_ref) / (lp(L,L) - lp_ref)`` with all log posteriors taken at
    the terminal penalties and ``lp_ref`` the cold start ``B = 0, Omega = I``.
    ``row_run`` counts cells ``(L, L), (L, L-1), ...`` sharing the final support
    pattern before the first change; ``col_run`` does the same for ``(L, L), (L-1, L), ...``;
    ``trailing_block`` is the largest ``m`` such that every cell in the last
    ``m x m`` block shares the final support.
    """
    keys = [k for k in grid.modes if len(k) == 2 and all(isinstance(v, (int, np.integer)) for v in k)]
    final = grid.final_cell
    ref = grid.reference_log_posterior
    denom = final.log_posterior_at_terminal - ref

    def same(cell):
        return (cell.B_mask is not None and np.array_equal(cell.B_mask, final.B_mask)
                and np.array_equal(cell.Omega_mask, final.Omega_mask))

    cells = []
    for key in sorted(keys):
        c = grid.modes[key]
        ratio = (c.log_posterior_at_terminal - ref) / denom if denom != 0 else float("nan")
        if key == grid.final:
            ratio = 1.0
        cells.append({"s": key[0], "t": key[1], "nnz_B": c.supports[0],
                      "nnz_Omega": c.supports[1], "stable": c.stable,
                      "converged": c.converged, "iterations": c.iterations,
                      "log_posterior_terminal": c.log_posterior_at_terminal,
                      "ratio": ratio, "same_support_as_final": same(c),
                      "predecessor": c.predecessor})
    out = {"cells": cells, "final": grid.final, "row_run": 0, "col_run": 0, "trailing_block": 0}
    if not keys or grid.final not in keys:
        return out
    Ls, Lt = grid.final
    row_run = 0
    for t in range(Lt, 0, -1):
        if (Ls, t) in grid.modes and same(grid.modes[(Ls, t)]):
            row_run += 1
        else:
            break
    col_run = 0
    for s in range(Ls, 0, -1):
        if (s, Lt) in grid.modes and same(grid.modes[(s, Lt)]):
            col_run += 1
        else:
            break
    block = 0
    for m in range(1, min(Ls, Lt) + 1):
        ok = all((s, t) in grid.modes and same(grid.modes[(s, t)])
                 for s in range(Ls - m + 1, Ls + 1) for t in range(Lt - m + 1, Lt + 1))
        if not ok:
            break
        block = m
    out.update(row_run=row_run, col_run=col_run, trailing_block=block)
    return out
