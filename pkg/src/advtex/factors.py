"""L1-regularized logistic regression over attack-success factors."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .data import DISTANCES

FACTORS = ("detector", "physical", "distance", "condition", "tier")


@dataclass(frozen=True)
class FactorRecord:
    detector: str
    distance: str
    condition: str
    tier: str
    success: bool
    # carried for real captures; always False for rendered frames
    physical: bool = False

    def __post_init__(self):
        for name in ("detector", "distance", "condition", "tier"):
            if not getattr(self, name):
                raise ValueError(f"covariate {name!r} is missing")


@dataclass
class LogisticFit:
    coef: np.ndarray
    bias: float
    l1_strength: float
    objective: float
    iterations: int
    converged: bool


@dataclass
class FactorFit:
    names: list[str]
    coef: np.ndarray
    bias: float
    l1_strength: float
    objective: float
    converged: bool
    cv: dict = field(default_factory=dict)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coef)

    def ranking(self) -> list[tuple[str, float]]:
        """Nonzero features by decreasing |coefficient| (standardized scale)."""
        order = np.argsort(-np.abs(self.coef), kind="stable")
        return [(self.names[i], float(self.coef[i])) for i in order if self.coef[i] != 0]

    def factor_ranking(self) -> list[tuple[str, float]]:
        """Covariates ranked by their largest |coefficient| over indicator columns."""
        best: dict[str, float] = {}
        for name, c in zip(self.names, self.coef):
            f = name.split("=", 1)[0]
            best[f] = max(best.get(f, 0.0), abs(float(c)))
        return sorted(((f, v) for f, v in best.items() if v > 0), key=lambda t: -t[1])


def logistic_loss(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float) -> float:
    z = X @ w + b
    return float(-np.mean(y * log_expit(z) + (1 - y) * log_expit(-z)))


def l1_objective(X, y, w, b, l1_strength: float) -> float:
    return logistic_loss(X, y, w, b) + l1_strength * float(np.abs(w).sum())


def _soft(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def l1_logistic_regression(X: np.ndarray, y: np.ndarray, l1_strength: float, tol: float = 1e-8,
                           max_iter: int = 50000) -> LogisticFit:
    """Minimize mean logistic loss + l1_strength * ||w||_1 (bias unpenalized).

    Monotone FISTA with the fixed step 1/L, L = ||[X 1]||_2^2 / (4n). Stops
    when the proximal-gradient residual falls below ``tol``. If every
    outcome is identical the minimizer has w = 0 and an infinite bias; that
    case is returned directly.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if l1_strength < 0:
        raise ValueError("l1_strength must be nonnegative")
    if n == 0:
        raise ValueError("no records")
    rate = y.mean()
    if rate in (0.0, 1.0):
        return LogisticFit(np.zeros(p), np.inf if rate == 1 else -np.inf, l1_strength, 0.0, 0, True)
    Xb = np.c_[X, np.ones(n)]
    L = np.linalg.norm(Xb, 2) ** 2 / (4 * n)
    theta = np.zeros(p + 1)
    theta[p] = np.log(rate / (1 - rate))

    def F(t):
        return l1_objective(X, y, t[:p], t[p], l1_strength)

    def prox_step(t):
        v = t - Xb.T @ (expit(Xb @ t) - y) / (n * L)
        v[:p] = _soft(v[:p], l1_strength / L)
        return v

    z, t_k = theta.copy(), 1.0
    best = F(theta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        cand = prox_step(z)
        fc = F(cand)
        t_next = (1 + np.sqrt(1 + 4 * t_k * t_k)) / 2
        new = cand if fc <= best else theta
        z = new + (t_k / t_next) * (cand - new) + ((t_k - 1) / t_next) * (new - theta)
        theta, best, t_k = new, min(fc, best), t_next
        residual = L * np.linalg.norm(theta - prox_step(theta))
        if residual < tol:
            converged = True
            break
    return LogisticFit(theta[:p].copy(), float(theta[p]), l1_strength, F(theta), it, converged)


def lambda_max(X: np.ndarray, y: np.ndarray) -> float:
    """Smallest l1_strength at which every feature coefficient is zero."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.abs(X.T @ (y - y.mean())).max() / len(y)) if X.size else 0.0


def cross_validate(X: np.ndarray, y: np.ndarray, grid: Sequence[float] | None = None, folds: int = 5,
                   seed: int = 0) -> dict:
    """K-fold held-out log-loss over a strength grid; picks by the one-standard-error rule.

    The chosen strength is the largest one whose mean loss is within one
    standard error of the best mean loss.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if grid is None:
        top = lambda_max(X, y)
        grid = top * np.logspace(0, -3, 16)
    grid = np.sort(np.asarray(grid, dtype=np.float64))[::-1]
    fold = np.random.default_rng(seed).permutation(len(y)) % folds
    losses = np.zeros((len(grid), folds))
    for k in range(folds):
        tr, te = fold != k, fold == k
        for i, lam in enumerate(grid):
            fit = l1_logistic_regression(X[tr], y[tr], lam, tol=1e-6)
            if not np.isfinite(fit.bias):
                p = np.clip(y[tr].mean(), 1e-6, 1 - 1e-6)
                losses[i, k] = float(-np.mean(y[te] * np.log(p) + (1 - y[te]) * np.log(1 - p)))
            else:
                losses[i, k] = logistic_loss(X[te], y[te], fit.coef, fit.bias)
    mean = losses.mean(axis=1)
    se = losses.std(axis=1, ddof=1) / np.sqrt(folds)
    best = int(np.argmin(mean))
    chosen = int(np.flatnonzero(mean <= mean[best] + se[best])[0])
    return {"grid": grid.tolist(), "mean_loss": mean.tolist(), "se": se.tolist(),
            "best": float(grid[best]), "chosen": float(grid[chosen])}


def standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-mean, unit-variance columns; constant columns become zero."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    safe = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / safe
    Z[:, sd == 0] = 0.0
    return Z, mu, sd


def fit_logistic_l1(X: np.ndarray, y: np.ndarray, names: Sequence[str] | None = None,
                    l1_strength: float | None = None, seed: int = 0) -> FactorFit:
    """Standardize, pick the strength by cross-validation if not given, and fit."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("both outcomes must be present")
    names = list(names) if names is not None else [f"x{i}" for i in range(X.shape[1])]
    Z, _, _ = standardize(X)
    cv = {}
    if l1_strength is None:
        cv = cross_validate(Z, y, seed=seed)
        l1_strength = cv["chosen"]
    fit = l1_logistic_regression(Z, y, l1_strength)
    return FactorFit(names, fit.coef, fit.bias, l1_strength, fit.objective, fit.converged, cv)


def design_matrix(records: Sequence[FactorRecord]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """One indicator column per observed level of each categorical covariate."""
    levels = {
        "detector": sorted({r.detector for r in records}),
        "distance": [d for d in DISTANCES if any(r.distance == d for r in records)]
        + sorted({r.distance for r in records} - set(DISTANCES)),
        "condition": sorted({r.condition for r in records}),
        "tier": sorted({r.tier for r in records}),
    }
    names = ["physical"] + [f"{k}={v}" for k in ("detector", "distance", "condition", "tier") for v in levels[k]]
    X = np.zeros((len(records), len(names)))
    col = {n: i for i, n in enumerate(names)}
    for i, r in enumerate(records):
        X[i, 0] = float(r.physical)
        for k in ("detector", "distance", "condition", "tier"):
            X[i, col[f"{k}={getattr(r, k)}"]] = 1.0
    y = np.array([float(r.success) for r in records])
    return X, y, names


def fit_success_factors(records: Sequence[FactorRecord], l1_strength: float | None = None,
                        seed: int = 0) -> FactorFit:
    """Fit attack success against the covariates and rank them by |coefficient|.

    Perfectly separable records still give a bounded solution because the L1
    penalty is positive; with ``l1_strength=0`` such a fit is reported as not
    converged.
    """
    if not records:
        raise ValueError("no records")
    X, y, names = design_matrix(records)
    return fit_logistic_l1(X, y, names, l1_strength, seed)


def records_from_report(report) -> list[FactorRecord]:
    """One record per attacked frame outcome; success means no target detection survived."""
    return [FactorRecord(r.detector, r.distance, r.condition, report.tiers.get(r.attack, r.attack),
                         not r.detected)
            for r in report.records if r.attack != "clean"]
