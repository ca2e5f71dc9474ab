"""Fitted-model container shared by every regression method."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import _container
from ..errors import NumericError, ValidationError

MAGIC = b"SQREG001"
VERSION = 1
N_FEATURES = 4


@dataclass(eq=False)
class FittedRegressor:
    method: str
    params: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"method": self.method, "config": self.config, "seed": self.seed}
        return meta, dict(self.params)

    @classmethod
    def from_arrays(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "FittedRegressor":
        return cls(meta["method"], dict(arrays), dict(meta.get("config", {})),
                   int(meta.get("seed", 0)))

    def equals(self, other: "FittedRegressor") -> bool:
        return (self.method == other.method and self.config == other.config
                and self.seed == other.seed and self.params.keys() == other.params.keys()
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


def check_xy(X, y=None, min_rows: int = 1) -> tuple[np.ndarray, np.ndarray | None]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValidationError(f"design matrix must be 2-D, got shape {X.shape}")
    if X.shape[0] < min_rows:
        raise ValidationError(f"need at least {min_rows} rows, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("design matrix has non-finite entries")
    if y is None:
        return X, None
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size != X.shape[0]:
        raise ValidationError(f"{X.shape[0]} rows but {y.size} targets")
    if not np.all(np.isfinite(y)):
        raise ValidationError("targets have non-finite entries")
    return X, y


def check_finite_output(pred: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(pred)):
        raise NumericError("regressor produced non-finite predictions")
    return pred


def save_model(model: FittedRegressor, path) -> Path:
    meta, arrays = model.to_arrays()
    return _container.save(path, MAGIC, VERSION, meta, arrays)


def load_model(path) -> FittedRegressor:
    meta, arrays = _container.load(path, MAGIC, VERSION)
    return FittedRegressor.from_arrays(meta, arrays)
