"""Shared data model: datasets, model state, penalty configuration, fit options.

All matrices are dense ``float64`` numpy arrays. ``B`` is ``p x q``, ``Omega`` is
``q x q``, ``X`` is ``n x p`` and ``Y`` is ``n x q``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

THETA_MARGIN = 1e-12


class MsslError(Exception):
    """Base class for package errors."""


class ValidationError(MsslError, ValueError):
    """Bad user input (shapes, constant columns, invalid settings)."""


class InstabilityError(MsslError):
    """A precision matrix lost positive definiteness or a mode is numerically unusable."""

    def __init__(self, message: str, last_state: "Optional[EcmState]" = None, trace=None):
        super().__init__(message)
        self.last_state = last_state
        self.trace = trace


@dataclass
class DataSet:
    """Standardized predictors and centered responses.

    ``x_center``/``x_scale`` and ``y_center``/``y_scale`` hold the constants
    used to go from the raw matrices to ``X`` and ``Y`` so that coefficients can
    be mapped back with :meth:`coef_original_scale`.
    """

    X: np.ndarray
    Y: np.ndarray
    x_center: np.ndarray
    x_scale: np.ndarray
    y_center: np.ndarray
    y_scale: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Y.shape[1]

    @cached_property
    def gram(self) -> np.ndarray:
        """``X'X`` (p x p), used by the coordinate updates."""
        return self.X.T @ self.X

    @cached_property
    def xty(self) -> np.ndarray:
        return self.X.T @ self.Y

    def column_subset(self, cols: Sequence[int]) -> "DataSet":
        cols = list(cols)
        sub = DataSet(self.X, self.Y[:, cols], self.x_center, self.x_scale,
                      self.y_center[cols], self.y_scale[cols])
        # share the predictor Gram matrix
        sub.__dict__["gram"] = self.gram
        return sub

    def coef_original_scale(self, B: np.ndarray) -> np.ndarray:
        """Map ``B`` fitted on standardized data back to the raw predictor/response scale."""
        return B / self.x_scale[:, None] * self.y_scale[None, :]


def standardize(raw_X, raw_Y, scale_y: bool = False) -> DataSet:
    """Center and scale the columns of ``raw_X`` to mean 0 and norm ``sqrt(n)``; center ``raw_Y``.

    With ``scale_y=True`` the response columns are also scaled to norm ``sqrt(n)``
    (unit population variance).
    """
    X = np.array(raw_X, dtype=float, copy=True)
    Y = np.array(raw_Y, dtype=float, copy=True)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or Y.ndim != 2:
        raise ValidationError("X and Y must be 2-d matrices")
    n = X.shape[0]
    if Y.shape[0] != n:
        raise ValidationError(f"X has {n} rows but Y has {Y.shape[0]}")
    if n < 2:
        raise ValidationError("need at least 2 observations")
    if X.shape[1] < 1 or Y.shape[1] < 1:
        raise ValidationError("X and Y need at least one column")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValidationError("X and Y must be finite (missing data is not supported)")

    x_center = X.mean(axis=0)
    X -= x_center
    norms = np.sqrt(np.sum(X * X, axis=0))
    tiny = norms <= 1e-12 * np.maximum(1.0, np.abs(x_center) * np.sqrt(n))
    if np.any(tiny):
        j = int(np.flatnonzero(tiny)[0])
        raise ValidationError(f"column {j} of X is constant")
    x_scale = norms / np.sqrt(n)
    X /= x_scale

    y_center = Y.mean(axis=0)
    Y -= y_center
    y_scale = np.ones(Y.shape[1])
    if scale_y:
        ynorm = np.sqrt(np.sum(Y * Y, axis=0))
        if np.any(ynorm <= 0):
            k = int(np.flatnonzero(ynorm <= 0)[0])
            raise ValidationError(f"column {k} of Y is constant and cannot be scaled")
        y_scale = ynorm / np.sqrt(n)
        Y /= y_scale
    return DataSet(X, Y, x_center, x_scale, y_center, y_scale)


@dataclass
class EcmState:
    """Current ``(B, theta, Omega, eta)`` with the residual cache ``R`` and ``S = R'R/n``."""

    B: np.ndarray
    theta: float
    Omega: np.ndarray
    eta: float
    R: np.ndarray
    S: np.ndarray

    @classmethod
    def from_params(cls, data: DataSet, B, theta: float, Omega, eta: float) -> "EcmState":
        B = np.array(B, dtype=float, copy=True)
        Omega = np.array(Omega, dtype=float, copy=True)
        if B.shape != (data.p, data.q) or Omega.shape != (data.q, data.q):
            raise ValidationError(f"B must be {data.p}x{data.q} and Omega {data.q}x{data.q}")
        for name, w in (("theta", theta), ("eta", eta)):
            if not 0.0 < w < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1), got {w}")
        if not np.allclose(Omega, Omega.T, rtol=0.0, atol=1e-12):
            raise ValidationError("Omega must be symmetric")
        R = data.Y - data.X @ B
        S = R.T @ R / data.n
        return cls(B, float(theta), Omega, float(eta), R, S)

    @classmethod
    def cold_start(cls, data: DataSet, theta: float = 0.5, eta: float = 0.5) -> "EcmState":
        return cls.from_params(data, np.zeros((data.p, data.q)), theta, np.eye(data.q), eta)

    def with_B(self, data: DataSet, B: np.ndarray, theta: Optional[float] = None) -> "EcmState":
        return EcmState.from_params(data, B, self.theta if theta is None else theta,
                                    self.Omega, self.eta)

    def copy(self) -> "EcmState":
        return replace(self, B=self.B.copy(), Omega=self.Omega.copy(),
                       R=self.R.copy(), S=self.S.copy())


def support_counts(state_or_B, Omega=None, zero_tol: float = 0.0) -> tuple[int, int]:
    """Return ``(||B||_0, ||Omega||_0*)``: nonzeros of B and of the strict upper triangle of Omega."""
    if Omega is None:
        B, Omega = state_or_B.B, state_or_B.Omega
    else:
        B = state_or_B
    nb = int(np.count_nonzero(np.abs(B) > zero_tol))
    iu = np.triu_indices(Omega.shape[0], k=1)
    no = int(np.count_nonzero(np.abs(Omega[iu]) > zero_tol))
    return nb, no


@dataclass
class PenaltyConfig:
    """Slab penalties, spike ladders and Beta hyper-parameters."""

    lambda1: float
    xi1: float
    lambda_ladder: np.ndarray
    xi_ladder: np.ndarray
    a_theta: float = 1.0
    b_theta: float = 1.0
    a_eta: float = 1.0
    b_eta: float = 1.0

    def __post_init__(self):
        self.lambda_ladder = np.atleast_1d(np.asarray(self.lambda_ladder, dtype=float))
        self.xi_ladder = np.atleast_1d(np.asarray(self.xi_ladder, dtype=float))
        if self.lambda1 <= 0 or self.xi1 <= 0:
            raise ValidationError("slab penalties must be positive")
        for name, lad, slab in (("lambda", self.lambda_ladder, self.lambda1),
                                ("xi", self.xi_ladder, self.xi1)):
            if lad.size < 1:
                raise ValidationError(f"{name} ladder is empty")
            if np.any(np.diff(lad) <= 0):
                raise ValidationError(f"{name} ladder must be strictly increasing")
            if lad[0] < slab:
                raise ValidationError(f"{name} ladder starts below the slab penalty")
        for name in ("a_theta", "b_theta", "a_eta", "b_eta"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")

    @property
    def L(self) -> int:
        return int(self.lambda_ladder.size)

    def to_dict(self) -> dict:
        return {
            "lambda1": float(self.lambda1),
            "xi1": float(self.xi1),
            "lambda_ladder": [float(v) for v in self.lambda_ladder],
            "xi_ladder": [float(v) for v in self.xi_ladder],
            "a_theta": float(self.a_theta),
            "b_theta": float(self.b_theta),
            "a_eta": float(self.a_eta),
            "b_eta": float(self.b_eta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyConfig":
        return cls(**{k: d[k] for k in ("lambda1", "xi1", "lambda_ladder", "xi_ladder",
                                         "a_theta", "b_theta", "a_eta", "b_eta") if k in d})


@dataclass
class FitOptions:
    tol: float = 1e-3
    max_iter_ecm: int = 500
    max_iter_cd: int = 500
    max_iter_newton: int = 100
    cond_cap_multiplier: float = 10.0
    glasso_tol: float = 1e-8
    max_iter_glasso: int = 1000
    check_ascent: bool = False
    verbose: bool = False

    def __post_init__(self):
        if self.tol <= 0 or self.glasso_tol <= 0:
            raise ValidationError("tolerances must be positive")
        for name in ("max_iter_ecm", "max_iter_cd", "max_iter_newton", "max_iter_glasso"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ModeCell:
    """One fitted mode of the exploration together with its bookkeeping."""

    supports: tuple[int, int]
    log_posterior_at_terminal: float
    stable: bool
    converged: bool
    iterations: int
    wall_time: float
    predecessor: Optional[tuple] = None
    log_posterior_at_own: float = float("nan")
    B_mask: Optional[np.ndarray] = None
    Omega_mask: Optional[np.ndarray] = None
    state: Optional[EcmState] = None
    trace: object = None
    error: Optional[str] = None
    candidates: dict = field(default_factory=dict)


@dataclass
class ModeGrid:
    """Fitted modes keyed by ladder index pairs (1-based); exactly one key is ``final``."""

    lambda_ladder: np.ndarray
    xi_ladder: np.ndarray
    modes: dict = field(default_factory=dict)
    final: Optional[tuple] = None
    reference_log_posterior: float = float("nan")
    order: str = "s-outer"
    info: dict = field(default_factory=dict)

    @property
    def final_cell(self) -> ModeCell:
        return self.modes[self.final]


# --- CSV matrix I/O ---------------------------------------------------------

def read_matrix_csv(path, header: bool = False) -> np.ndarray:
    """Read a numeric matrix, one row per observation; ``header`` skips the first row."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    if header:
        rows = rows[1:]
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ValidationError(f"{path} holds no data rows")
    try:
        out = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric entry ({exc})") from exc
    return out


def write_matrix_csv(path, M, header: Optional[Sequence[str]] = None) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(list(header))
        for row in M:
            w.writerow([repr(float(v)) for v in row])
