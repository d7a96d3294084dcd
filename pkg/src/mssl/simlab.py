"""Ground-truth generators and support-recovery / estimation metrics."""
from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .core import DataSet, ValidationError, standardize


@dataclass
class SimScenario:
    n: int = 100
    p: int = 50
    q: int = 25
    rho: float = 0.9
    rho_x: float = 0.7
    b_density: float = 0.2
    b_low: float = -2.0
    b_high: float = 2.0
    seed: int = 0
    fix_design: bool = False

    def __post_init__(self):
        if min(self.n, self.p, self.q) < 1:
            raise ValidationError("dimensions must be positive")
        if not (0.0 <= self.rho < 1.0) or not (0.0 <= self.rho_x < 1.0):
            raise ValidationError("AR parameters must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


# the eight simulation designs (n, p, q, rho)
SIMULATIONS = {
    1: (100, 50, 25, 0.9),
    2: (100, 50, 25, 0.7),
    3: (100, 50, 25, 0.5),
    4: (100, 50, 25, 0.0),
    5: (400, 500, 25, 0.9),
    6: (400, 500, 25, 0.7),
    7: (400, 500, 25, 0.5),
    8: (400, 500, 25, 0.0),
}


def simulation(number: int, seed: int = 0) -> SimScenario:
    n, p, q, rho = SIMULATIONS[number]
    return SimScenario(n=n, p=p, q=q, rho=rho, seed=seed)


def read_scenario(path) -> SimScenario:
    """Parse an INI-style ``key = value`` scenario file (optional ``[scenario]`` section)."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser()
    if not text.lstrip().startswith("["):
        text = "[scenario]\n" + text
    cp.read_string(text)
    sec = cp["scenario"]
    kwargs = {}
    for f in fields(SimScenario):
        if f.name in sec:
            raw = sec[f.name]
            if f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("bool", bool):
                kwargs[f.name] = sec.getboolean(f.name)
            else:
                kwargs[f.name] = float(raw)
    unknown = set(sec) - {f.name for f in fields(SimScenario)}
    if unknown:
        raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")
    return SimScenario(**kwargs)


def write_scenario(scn: SimScenario, path) -> None:
    cp = configparser.ConfigParser()
    cp["scenario"] = {k: str(v) for k, v in scn.to_dict().items()}
    with Path(path).open("w") as fh:
        cp.write(fh)


def ar1_covariance(dim: int, rho: float) -> np.ndarray:
    if not (0.0 <= rho < 1.0):
        raise ValidationError("rho must lie in [0, 1)")
    idx = np.arange(dim)
    return rho ** np.abs(idx[:, None] - idx[None, :]).astype(float)


def ar1_precision(dim: int, rho: float) -> np.ndarray:
    """Tridiagonal inverse of :func:`ar1_covariance`."""
    if not (0.0 <= rho < 1.0):
        raise ValidationError("rho must lie in [0, 1)")
    c = 1.0 / (1.0 - rho * rho)
    diag = np.full(dim, (1.0 + rho * rho) * c)
    diag[0] = diag[-1] = c
    if dim == 1:
        diag[0] = 1.0
    out = np.diag(diag)
    off = np.full(dim - 1, -rho * c)
    out += np.diag(off, 1) + np.diag(off, -1)
    return out


def _streams(scn: SimScenario, replication: int):
    """Independent generators for the fixed structure and for the per-replication noise.

    Stream layout under ``SeedSequence(seed)``: child 0 drives ``B0``; child 1 the
    design (shared across replications with ``fix_design``); child ``2 + r`` the
    noise (and design) of replication ``r``.
    """
    root = np.random.SeedSequence(scn.seed)
    structure, design, *_ = root.spawn(2)
    noise = np.random.SeedSequence(scn.seed, spawn_key=(2 + replication,))
    return (np.random.Generator(np.random.PCG64(structure)),
            np.random.Generator(np.random.PCG64(design)),
            np.random.Generator(np.random.PCG64(noise)))


def make_truth(scn: SimScenario, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    pq = scn.p * scn.q
    count = int(round(pq * scn.b_density))
    B0 = np.zeros(pq)
    pos = rng.choice(pq, size=count, replace=False)
    B0[pos] = rng.uniform(scn.b_low, scn.b_high, size=count)
    return B0.reshape(scn.p, scn.q), ar1_precision(scn.q, scn.rho)


def generate(scn: SimScenario, replication: int = 0, standardized: bool = True):
    """Draw one replication: returns ``(data, B0, Omega0, raw)`` with ``raw = (X, Y)`` unstandardized.

    ``B0`` and ``Omega0`` depend only on the scenario seed; ``X`` and ``E`` are
    redrawn per replication unless ``fix_design`` holds ``X`` fixed.
    """
    g_struct, g_design, g_noise = _streams(scn, replication)
    B0, Omega0 = make_truth(scn, g_struct)
    Lx = np.linalg.cholesky(ar1_covariance(scn.p, scn.rho_x))
    Le = np.linalg.cholesky(ar1_covariance(scn.q, scn.rho))
    g_x = g_design if scn.fix_design else g_noise
    X = g_x.standard_normal((scn.n, scn.p)) @ Lx.T
    E = g_noise.standard_normal((scn.n, scn.q)) @ Le.T
    Y = X @ B0 + E
    data = standardize(X, Y) if standardized else None
    return data, B0, Omega0, (X, Y)


# --- metrics -------------------------------------------------------------------

@dataclass
class RecoveryMetrics:
    TP: int
    TN: int
    FP: int
    FN: int
    sen: float
    spe: float
    prec: float
    acc: float
    mcc: float

    def as_dict(self) -> dict:
        return asdict(self)


def _ratio(a: float, b: float) -> float:
    return a / b if b > 0 else float("nan")


def confusion_metrics(TP: int, TN: int, FP: int, FN: int) -> RecoveryMetrics:
    den = (TP + FP) * (TP + FN) * (TN + FP) * (TN + FN)
    mcc = (TP * TN - FP * FN) / math.sqrt(den) if den > 0 else float("nan")
    return RecoveryMetrics(TP, TN, FP, FN,
                           sen=_ratio(TP, TP + FN), spe=_ratio(TN, TN + FP),
                           prec=_ratio(TP, TP + FP), acc=_ratio(TP + TN, TP + TN + FP + FN),
                           mcc=mcc)


def score_support(estimate: np.ndarray, truth: np.ndarray, mode: str = "B") -> RecoveryMetrics:
    """Confusion counts of nonzero patterns; ``mode="Omega"`` scores the strict upper triangle only."""
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if estimate.shape != truth.shape:
        raise ValidationError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    if mode == "B":
        e, t = estimate != 0, truth != 0
    elif mode in ("Omega", "Omega-upper"):
        if estimate.ndim != 2 or estimate.shape[0] != estimate.shape[1]:
            raise ValidationError("Omega mode needs square matrices")
        iu = np.triu_indices(estimate.shape[0], k=1)
        e, t = estimate[iu] != 0, truth[iu] != 0
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    TP = int(np.sum(e & t))
    TN = int(np.sum(~e & ~t))
    FP = int(np.sum(e & ~t))
    FN = int(np.sum(~e & t))
    return confusion_metrics(TP, TN, FP, FN)


def mse_scaled(B_hat: np.ndarray, B0: np.ndarray) -> float:
    """Mean squared error over all ``p q`` entries, times 1000."""
    if B_hat.shape != B0.shape:
        raise ValidationError("shape mismatch")
    return 1000.0 * float(np.mean((B_hat - B0) ** 2))


def frob_sq(Omega_hat: np.ndarray, Omega0: np.ndarray) -> float:
    """Squared Frobenius error over all ``q^2`` entries."""
    if Omega_hat.shape != Omega0.shape:
        raise ValidationError("shape mismatch")
    return float(np.sum((Omega_hat - Omega0) ** 2))


def score_estimation(estimate: np.ndarray, truth: np.ndarray, kind: str = "B") -> float:
    return mse_scaled(estimate, truth) if kind == "B" else frob_sq(estimate, truth)


@dataclass
class FitScore:
    B: RecoveryMetrics
    Omega: RecoveryMetrics
    mse: float
    frob: float
    time: float = float("nan")

    def row(self, method: str = "") -> dict:
        out = {"method": method}
        for prefix, m in (("B", self.B), ("Omega", self.Omega)):
            for k in ("sen", "spe", "prec", "acc", "mcc", "TP", "TN", "FP", "FN"):
                out[f"{prefix}_{k}"] = getattr(m, k)
        out["MSE"] = self.mse
        out["FROB"] = self.frob
        out["TIME"] = self.time
        return out


def score_fit(B_hat, Omega_hat, B0, Omega0, time: float = float("nan"),
              B_original: Optional[np.ndarray] = None) -> FitScore:
    """Score a fit; ``B_hat`` must be on the scale of ``B0`` (see ``DataSet.coef_original_scale``)."""
    return FitScore(score_support(B_hat, B0, "B"), score_support(Omega_hat, Omega0, "Omega"),
                    mse_scaled(B_hat, B0), frob_sq(Omega_hat, Omega0), time)


def table_line(label: str, b: dict, last: str = "MSE") -> str:
    """Format ``SEN / SPE & PREC / ACC & MCC & MSE & TIME`` like the published tables."""
    def f(v):
        return "NaN" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.2f}"
    return (f"{label:<14s} {f(b['sen'])} / {f(b['spe'])}   {f(b['prec'])} / {f(b['acc'])}   "
            f"{f(b['mcc'])}   {f(b[last.lower()])}   {f(b.get('time'))}")
