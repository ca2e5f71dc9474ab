"""Exact Gaussian-process regression with an RBF + white-noise kernel.

Inputs are z-scored and targets mean-centred.  Hyperparameters
(log length scale, log signal variance, log noise variance) maximise the log
marginal likelihood by bounded L-BFGS-B from several deterministic starts.
"""

from __future__ import annotations

import logging
import math

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky
from scipy.optimize import minimize

from ..errors import NumericError
from .base import FittedRegressor, check_xy

logger = logging.getLogger(__name__)

BOUNDS = ((math.log(1e-2), math.log(1e3)),   # length scale
          (math.log(1e-4), math.log(1e2)),   # signal variance
          (math.log(1e-8), math.log(1e1)))   # noise variance
STARTS = ((0.0, 0.0, math.log(1e-1)),
          (math.log(3.0), math.log(0.1), math.log(1e-2)),
          (math.log(0.3), math.log(1.0), math.log(1e-3)),
          (math.log(10.0), math.log(0.01), math.log(1e-4)),
          (math.log(1.0), math.log(0.01), math.log(1e-5)))
_JITTER = 1e-10


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def _chol(K: np.ndarray) -> np.ndarray:
    try:
        return cholesky(K, lower=True)
    except LinAlgError:
        # retry once with a raised noise floor
        bump = 1e-6 * max(1.0, float(np.mean(np.diag(K))))
        try:
            return cholesky(K + bump * np.eye(len(K)), lower=True)
        except LinAlgError as exc:
            raise NumericError(f"GP covariance is not positive definite: {exc}") from exc


def log_marginal_likelihood(theta, Xz: np.ndarray, yc: np.ndarray,
                            grad: bool = False):
    ell, sf2, sn2 = np.exp(theta)
    D = _sqdist(Xz, Xz)
    Kf = sf2 * np.exp(-0.5 * D / ell ** 2)
    n = len(yc)
    K = Kf + (sn2 + _JITTER) * np.eye(n)
    L = _chol(K)
    alpha = cho_solve((L, True), yc)
    lml = -0.5 * yc @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)
    if not grad:
        return float(lml)
    inner = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n))
    dK = (Kf * D / ell ** 2,          # d/d log ell
          Kf,                          # d/d log sf2
          sn2 * np.eye(n))             # d/d log sn2
    g = np.array([0.5 * np.sum(inner * d) for d in dK])
    return float(lml), g


def fit_gpr(X, y, seed: int = 0) -> FittedRegressor:
    X, y = check_xy(X, y, min_rows=5)
    mean_x = X.mean(axis=0)
    std_x = X.std(axis=0)
    std_x[std_x == 0] = 1.0
    Xz = (X - mean_x) / std_x
    y_mean = float(y.mean())
    yc = y - y_mean

    def objective(t):
        try:
            v, g = log_marginal_likelihood(t, Xz, yc, grad=True)
        except NumericError:
            return 1e25, np.zeros(3)
        return -v, -g

    best = None
    starts = []
    for s in STARTS:
        t0 = np.clip(np.array(s), [b[0] for b in BOUNDS], [b[1] for b in BOUNDS])
        res = minimize(objective, t0, jac=True, method="L-BFGS-B", bounds=BOUNDS)
        val = -float(res.fun)
        start_val = -objective(t0)[0]
        starts.append(start_val)
        # never accept a point worse than its own start
        cand = (val, res.x) if val >= start_val else (start_val, t0)
        if best is None or cand[0] > best[0]:
            best = cand
    lml, theta = best
    ell, sf2, sn2 = np.exp(theta)
    K = sf2 * np.exp(-0.5 * _sqdist(Xz, Xz) / ell ** 2) + (sn2 + _JITTER) * np.eye(len(yc))
    L = _chol(K)
    alpha = cho_solve((L, True), yc)
    params = {"X": Xz, "alpha": alpha, "L": L, "theta": np.asarray(theta, dtype=np.float64),
              "x_mean": mean_x, "x_std": std_x, "y_mean": np.array([y_mean])}
    cfg = {"log_marginal_likelihood": lml, "start_values": starts, "n_features": X.shape[1]}
    return FittedRegressor("gpr", params, cfg, seed)


def predict_gpr(model: FittedRegressor, X: np.ndarray, return_std: bool = False):
    p = model.params
    Xz = (X - p["x_mean"]) / p["x_std"]
    ell, sf2, sn2 = np.exp(p["theta"])
    Ks = sf2 * np.exp(-0.5 * _sqdist(Xz, p["X"]) / ell ** 2)
    mean = Ks @ p["alpha"] + p["y_mean"][0]
    if not return_std:
        return mean
    v = cho_solve((p["L"], True), Ks.T)
    var = sf2 + sn2 - np.sum(Ks * v.T, axis=1)
    return mean, np.sqrt(np.maximum(var, 0.0))
