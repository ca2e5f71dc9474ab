"""Regression from QA features (or raw inputs) to per-case DSC."""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from .base import FittedRegressor, check_finite_output, check_xy, load_model, save_model
from .direct import DirectNetConfig, fit_direct_net, predict_direct_net
from .gp import fit_gpr, predict_gpr
from .linear import fit_bagging, fit_ols, fit_shape_only, predict_linear
from .trees import fit_gbt, fit_rf, predict_gbt, predict_rf

FEATURE_METHODS = ("ols", "bagging", "gpr", "rf", "gbt", "shape_only")
METHODS = FEATURE_METHODS + ("direct_net",)

_PREDICT = {"ols": predict_linear, "bagging": predict_linear, "shape_only": predict_linear,
            "rf": predict_rf, "gbt": predict_gbt}


def fit(method: str, X, y, seed: int = 0) -> FittedRegressor:
    """Fit any feature-based method with its default settings."""
    if method == "ols":
        return fit_ols(X, y)
    if method == "bagging":
        return fit_bagging(X, y, seed=seed)
    if method == "shape_only":
        return fit_shape_only(X, y, seed=seed)
    if method == "gpr":
        return fit_gpr(X, y, seed=seed)
    if method == "rf":
        return fit_rf(X, y, seed=seed)
    if method == "gbt":
        return fit_gbt(X, y, seed=seed)
    if method == "direct_net":
        raise ValidationError("direct_net is fit on images; use fit_direct_net")
    raise ValidationError(f"unknown regression method {method!r}; choose from {METHODS}")


def predict(model: FittedRegressor, X, return_std: bool = False, clamp: bool = True):
    """Predicted DSC for each feature row, clamped to [0, 1].

    ``return_std`` is only meaningful for GPR and gives the predictive
    standard deviation as a second array.
    """
    X, _ = check_xy(X)
    n_features = model.config.get("n_features")
    if n_features is not None and X.shape[1] != n_features:
        raise ValidationError(f"model expects {n_features} features, got {X.shape[1]}")
    std = None
    if model.method == "gpr":
        out = predict_gpr(model, X, return_std=True)
        pred, std = out
    elif model.method in _PREDICT:
        pred = _PREDICT[model.method](model, X)
    elif model.method == "direct_net":
        raise ValidationError("direct_net predicts from images; use predict_direct_net")
    else:
        raise ValidationError(f"unknown regression method {model.method!r}")
    pred = check_finite_output(np.asarray(pred, dtype=np.float64))
    if clamp:
        pred = np.clip(pred, 0.0, 1.0)
    if return_std:
        if std is None:
            raise ValidationError(f"{model.method} has no predictive std")
        return pred, std
    return pred


__all__ = ["FittedRegressor", "DirectNetConfig", "METHODS", "FEATURE_METHODS", "fit", "fit_ols",
           "fit_bagging", "fit_shape_only", "fit_gpr", "fit_rf", "fit_gbt", "fit_direct_net",
           "predict", "predict_direct_net", "save_model", "load_model"]
