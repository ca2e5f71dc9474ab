"""Least-squares regressors: OLS, bagged OLS and the shape-only baseline."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import NumericError, ValidationError
from .base import FittedRegressor, check_xy

RIDGE = 1e-8
SHAPE_COLUMN = 3


def _design(X: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((X.shape[0], 1)), X])


def ols_coefficients(X: np.ndarray, y: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    """``[intercept, b_1..b_p]`` from the normal equations with a tiny ridge
    on the non-intercept terms."""
    A = _design(X)
    gram = A.T @ A
    reg = np.full(A.shape[1], ridge)
    reg[0] = 0.0
    gram[np.diag_indices_from(gram)] += reg
    try:
        beta = np.linalg.solve(gram, A.T @ y)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"normal equations are singular: {exc}") from exc
    if not np.all(np.isfinite(beta)) or np.linalg.cond(gram) > 1e15:
        raise NumericError("design matrix is rank deficient beyond ridge rescue")
    return beta


def fit_ols(X, y, columns: Sequence[int] | None = None) -> FittedRegressor:
    X, y = check_xy(X, y)
    cols = list(range(X.shape[1])) if columns is None else [int(c) for c in columns]
    Xs = X[:, cols]
    if X.shape[0] <= Xs.shape[1] + 1:
        raise ValidationError(f"OLS needs more than {Xs.shape[1] + 1} rows, got {X.shape[0]}")
    beta = ols_coefficients(Xs, y)
    return FittedRegressor("ols", {"coef": beta[None, :]},
                           {"columns": cols, "n_features": X.shape[1]})


def fit_bagging(X, y, n_estimators: int = 100, subsample: float = 0.9, seed: int = 0,
                columns: Sequence[int] | None = None, method: str = "bagging") -> FittedRegressor:
    """Mean of ``n_estimators`` OLS fits, each on ``ceil(subsample * N)`` rows
    drawn with replacement."""
    X, y = check_xy(X, y)
    if n_estimators < 1:
        raise ValidationError("n_estimators must be >= 1")
    if not 0 < subsample <= 1:
        raise ValidationError("subsample must be in (0, 1]")
    cols = list(range(X.shape[1])) if columns is None else [int(c) for c in columns]
    Xs = X[:, cols]
    n = X.shape[0]
    if n <= Xs.shape[1] + 1:
        raise ValidationError(f"bagging needs more than {Xs.shape[1] + 1} rows, got {n}")
    m = math.ceil(subsample * n)
    rng = np.random.default_rng(seed)
    coefs = np.empty((n_estimators, Xs.shape[1] + 1))
    for i in range(n_estimators):
        idx = rng.integers(0, n, size=m)
        coefs[i] = ols_coefficients(Xs[idx], y[idx])
    cfg = {"columns": cols, "n_features": X.shape[1], "n_estimators": n_estimators,
           "subsample": subsample}
    return FittedRegressor(method, {"coef": coefs}, cfg, seed)


def fit_shape_only(X, y, n_estimators: int = 100, subsample: float = 0.9,
                   seed: int = 0) -> FittedRegressor:
    """Bagged OLS on the ``x_shape`` column alone."""
    X, _ = check_xy(X)
    if X.shape[1] <= SHAPE_COLUMN:
        raise ValidationError("design matrix has no x_shape column")
    return fit_bagging(X, y, n_estimators, subsample, seed, columns=[SHAPE_COLUMN],
                       method="shape_only")


def predict_linear(model: FittedRegressor, X: np.ndarray) -> np.ndarray:
    cols = model.config["columns"]
    coef = model.params["coef"]
    preds = _design(X[:, cols]) @ coef.T
    return preds.mean(axis=1)
