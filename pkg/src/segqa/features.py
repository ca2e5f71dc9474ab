"""The four QA features of an (image, segmentation) pair.

* ``x_appr``: mean cosine similarity of the DAE latent to common-domain latents
* ``x_intensity``: mean intensity in the predicted heart minus the common mean
* ``x_noise``: energy of the residual after a 3x3x3 median filter
* ``x_shape``: DSC between the segmentation and its shape-VAE reconstruction
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .encoders import TrainedDAE, TrainedVAE, encode, encode_many, reconstruct, reconstruct_many
from .errors import FormatError, NumericError, ValidationError
from .grid import LabelMap, Volume
from .stats import mean_dsc

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("x_appr", "x_intensity", "x_noise", "x_shape")
CSV_COLUMNS = ("case_id", "domain") + FEATURE_NAMES + ("dsc_true",)


@dataclass(frozen=True)
class FeatureVector:
    x_appr: float
    x_intensity: float
    x_noise: float
    x_shape: float

    def __post_init__(self):
        vals = [self.x_appr, self.x_intensity, self.x_noise, self.x_shape]
        if not all(math.isfinite(v) for v in vals):
            raise NumericError(f"non-finite feature in {vals}")
        if not -1.0 <= self.x_appr <= 1.0:
            raise ValidationError(f"x_appr out of [-1, 1]: {self.x_appr}")
        if self.x_noise < 0:
            raise ValidationError(f"x_noise negative: {self.x_noise}")
        if not 0.0 <= self.x_shape <= 1.0:
            raise ValidationError(f"x_shape out of [0, 1]: {self.x_shape}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_appr, self.x_intensity, self.x_noise, self.x_shape])

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in FEATURE_NAMES}


@dataclass(frozen=True, eq=False)
class CommonReference:
    latents: np.ndarray
    intensity_mean: float

    def __post_init__(self):
        z = np.asarray(self.latents, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] < 2:
            raise ValidationError("common reference needs at least 2 latents")
        if not np.all(np.isfinite(z)) or not math.isfinite(self.intensity_mean):
            raise NumericError("non-finite common reference")
        z = z.copy()
        z.setflags(write=False)
        object.__setattr__(self, "latents", z)

    @property
    def n(self) -> int:
        return self.latents.shape[0]

    def equals(self, other: "CommonReference") -> bool:
        return (np.array_equal(self.latents, other.latents)
                and self.intensity_mean == other.intensity_mean)


def masked_mean(volume: Volume, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volume.dims:
        raise ValidationError(f"mask {mask.shape} != volume {volume.dims}")
    if not mask.any():
        raise ValidationError("heart mask is empty")
    return float(volume.data[mask].astype(np.float64).mean())


def build_reference(dae: TrainedDAE, volumes: Sequence[Volume],
                    heart_masks: Sequence[np.ndarray]) -> CommonReference:
    """Reference latents and mean heart intensity from common-domain cases."""
    if len(volumes) != len(heart_masks):
        raise ValidationError("volumes and masks differ in length")
    latents = encode_many(dae, volumes)
    h = [masked_mean(v, m) for v, m in zip(volumes, heart_masks)]
    return CommonReference(latents, float(np.mean(h)))


def cosine_to_reference(z: np.ndarray, ref: CommonReference) -> float:
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size != ref.latents.shape[1]:
        raise ValidationError(f"latent dim {z.size} != reference dim {ref.latents.shape[1]}")
    nz = float(np.linalg.norm(z))
    if nz == 0.0:
        raise NumericError("query latent has zero norm")
    norms = np.linalg.norm(ref.latents, axis=1)
    keep = norms > 0
    if not keep.all():
        logger.warning("excluding %d zero-norm reference latents", int((~keep).sum()))
    if not keep.any():
        raise NumericError("every reference latent has zero norm")
    cos = ref.latents[keep] @ z / (norms[keep] * nz)
    return float(np.clip(cos.mean(), -1.0, 1.0))


def x_appr(volume: Volume, dae: TrainedDAE, ref: CommonReference) -> float:
    return cosine_to_reference(encode(dae, volume), ref)


def x_intensity(volume: Volume, heart_mask: np.ndarray, ref: CommonReference | float) -> float:
    m = ref.intensity_mean if isinstance(ref, CommonReference) else float(ref)
    return masked_mean(volume, heart_mask) - m


def median_filter3(data: np.ndarray) -> np.ndarray:
    """3x3x3 median with clamp-to-border edges."""
    return ndimage.median_filter(np.asarray(data), size=3, mode="nearest")


def x_noise(volume: Volume | np.ndarray) -> float:
    d = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if d.ndim != 3 or min(d.shape) < 3:
        raise ValidationError(f"x_noise needs a 3-D volume with every dim >= 3, got {d.shape}")
    resid = d.astype(np.float64) - median_filter3(d).astype(np.float64)
    return float(np.mean(resid * resid))


def x_shape(s_pred: LabelMap, vae: TrainedVAE) -> float:
    return mean_dsc(s_pred, reconstruct(vae, s_pred))


def _intensity_or_zero(volume: Volume, s_pred: LabelMap, ref: CommonReference) -> float:
    mask = s_pred.labels > 0
    if not mask.any():
        # nothing segmented: no heart to measure; x_shape carries the signal
        return 0.0
    return x_intensity(volume, mask, ref)


def extract(volume: Volume, s_pred: LabelMap, dae: TrainedDAE, vae: TrainedVAE,
            ref: CommonReference) -> FeatureVector:
    """All four features; the heart mask is the union of predicted structures."""
    if volume.dims != s_pred.dims:
        raise ValidationError(f"volume {volume.dims} and segmentation {s_pred.dims} differ")
    return FeatureVector(x_appr(volume, dae, ref), _intensity_or_zero(volume, s_pred, ref),
                         x_noise(volume), x_shape(s_pred, vae))


@dataclass(frozen=True)
class ImageFeatures:
    """Segmentation-independent part, shared across segmenters."""

    x_appr: float
    x_noise: float


def image_features(volumes: Sequence[Volume], dae: TrainedDAE,
                   ref: CommonReference) -> list[ImageFeatures]:
    z = encode_many(dae, volumes)
    return [ImageFeatures(cosine_to_reference(zi, ref), x_noise(v)) for zi, v in zip(z, volumes)]


def extract_many(volumes: Sequence[Volume], preds: Sequence[LabelMap], dae: TrainedDAE,
                 vae: TrainedVAE, ref: CommonReference,
                 image: Optional[Sequence[ImageFeatures]] = None) -> list[FeatureVector]:
    """Batched :func:`extract`; pass ``image`` to reuse image-only features."""
    if len(volumes) != len(preds):
        raise ValidationError("volumes and segmentations differ in length")
    image = list(image) if image is not None else image_features(volumes, dae, ref)
    recon = reconstruct_many(vae, preds)
    out = []
    for v, s, r, im in zip(volumes, preds, recon, image):
        out.append(FeatureVector(im.x_appr, _intensity_or_zero(v, s, ref), im.x_noise,
                                 mean_dsc(s, r)))
    return out


# --------------------------------------------------------------------------
# CSV exchange format

@dataclass(frozen=True)
class FeatureRow:
    case_id: str
    domain: str
    features: FeatureVector
    dsc_true: Optional[float] = None


def write_features_csv(rows: Iterable[FeatureRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            f = r.features
            w.writerow([r.case_id, r.domain] + [repr(float(getattr(f, k))) for k in FEATURE_NAMES]
                       + ["" if r.dsc_true is None else repr(float(r.dsc_true))])
    return path


def read_features_csv(path) -> list[FeatureRow]:
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS[:-1]) - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for i, rec in enumerate(reader):
            try:
                fv = FeatureVector(*(float(rec[k]) for k in FEATURE_NAMES))
                y = rec.get("dsc_true") or ""
                rows.append(FeatureRow(rec["case_id"], rec["domain"], fv,
                                       float(y) if y.strip() else None))
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}: bad row {i + 2}: {exc}") from exc
    return rows


def design_matrix(rows: Sequence[FeatureRow]) -> tuple[np.ndarray, Optional[np.ndarray]]:
    X = np.array([r.features.as_array() for r in rows], dtype=np.float64).reshape(-1, 4)
    ys = [r.dsc_true for r in rows]
    y = None if any(v is None for v in ys) else np.array(ys, dtype=np.float64)
    return X, y
