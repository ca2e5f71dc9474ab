"""Volume / label-map containers, preprocessing and file I/O.

Arrays are indexed ``[x, y, z]``; ``dims`` is ``(nx, ny, nz)`` and spacing is
in millimetres per voxel along the same axes.  On disk a grid is a JSON
header plus a raw little-endian payload written x-fastest.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

NUM_LABELS = 10          # background + 9 substructures
STRUCTURES = tuple(range(1, NUM_LABELS))
STRUCTURE_NAMES = ("AV", "LAD", "TV", "MV", "PV", "RA", "RV", "LA", "LV")

Triple = tuple[float, float, float]


def _as_spacing(spacing: Sequence[float]) -> Triple:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValidationError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValidationError(f"spacing must be positive, got {sp}")
    return sp  # type: ignore[return-value]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """3D intensity grid with physical spacing (float32, read-only)."""

    data: np.ndarray
    spacing: Triple = (2.0, 2.0, 2.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume must be a non-empty 3D array, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)

    def equals(self, other: "Volume") -> bool:
        return (self.spacing == other.spacing and self.dims == other.dims
                and self.data.tobytes() == other.data.tobytes())


@dataclass(frozen=True, eq=False)
class LabelMap:
    """3D integer grid of structure labels 0..9 (uint8, read-only)."""

    labels: np.ndarray
    spacing: Triple = (2.0, 2.0, 2.0)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3 or min(lab.shape) < 1:
            raise ValidationError(f"label map must be a non-empty 3D array, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= NUM_LABELS):
            raise ValidationError(f"labels must lie in 0..{NUM_LABELS - 1}")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)  # type: ignore[return-value]

    def with_labels(self, labels: np.ndarray) -> "LabelMap":
        return LabelMap(labels, self.spacing)

    def foreground(self) -> np.ndarray:
        return self.labels > 0

    def equals(self, other: "LabelMap") -> bool:
        return (self.spacing == other.spacing and self.dims == other.dims
                and self.labels.tobytes() == other.labels.tobytes())


@dataclass(frozen=True, eq=False)
class OneHotMap:
    """Per-structure probability channels, shape ``(L, nx, ny, nz)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 4 or p.shape[0] != NUM_LABELS:
            raise ValidationError(f"expected ({NUM_LABELS}, nx, ny, nz) probabilities, got {p.shape}")
        if p.min() < -1e-9 or p.max() > 1 + 1e-9:
            raise ValidationError("probabilities must lie in [0, 1]")
        if np.abs(p.sum(axis=0) - 1.0).max() > 1e-6:
            raise ValidationError("channel probabilities must sum to 1 at every voxel")
        object.__setattr__(self, "probs", _frozen(p))

    @classmethod
    def from_labels(cls, labels: LabelMap | np.ndarray) -> "OneHotMap":
        return cls(one_hot(labels))

    def argmax(self, spacing: Sequence[float] = (2.0, 2.0, 2.0)) -> LabelMap:
        return LabelMap(np.argmax(self.probs, axis=0).astype(np.uint8), spacing)


def one_hot(labels: LabelMap | np.ndarray, dtype=np.float32) -> np.ndarray:
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    out = np.zeros((NUM_LABELS,) + lab.shape, dtype=dtype)
    np.put_along_axis(out, lab[None].astype(np.intp), 1, axis=0)
    return out


# --------------------------------------------------------------------------
# resampling

def _linear_axis(arr: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    n = arr.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    w = (coords - lo).astype(np.float64)
    shape = [1] * arr.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    a = np.take(arr, lo, axis=axis).astype(np.float64)
    b = np.take(arr, hi, axis=axis).astype(np.float64)
    return a + w * (b - a)


def _target_dims(dims, spacing, target):
    out = []
    for n, s, t in zip(dims, spacing, target):
        out.append(max(1, int(round(n * s / t))))
    return tuple(out)


def resample(grid: Union[Volume, LabelMap], target_spacing: Sequence[float]):
    """Resample to ``target_spacing``: trilinear for volumes, nearest for labels.

    Output voxel ``i`` sits at physical offset ``i * target`` from the first
    input voxel centre; samples beyond the last input voxel replicate the edge.
    """
    target = _as_spacing(target_spacing)
    if isinstance(grid, Volume):
        src, spacing = grid.data, grid.spacing
    elif isinstance(grid, LabelMap):
        src, spacing = grid.labels, grid.spacing
    else:
        raise ValidationError(f"cannot resample {type(grid).__name__}")
    if src.size == 0:
        raise ValidationError("cannot resample an empty grid")
    if target == spacing:
        return grid
    new_dims = _target_dims(src.shape, spacing, target)
    coords = [np.arange(m) * t / s for m, s, t in zip(new_dims, spacing, target)]
    if isinstance(grid, Volume):
        out = src.astype(np.float64)
        for ax in range(3):
            out = _linear_axis(out, ax, coords[ax])
        return Volume(out.astype(np.float32), target)
    idx = [np.clip(np.floor(c + 0.5).astype(np.intp), 0, n - 1)
           for c, n in zip(coords, src.shape)]
    return LabelMap(src[np.ix_(*idx)], target)


# --------------------------------------------------------------------------
# ROI cropping and normalisation

def label_bbox(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive (lo, hi) index corners of the nonzero labels."""
    nz = np.argwhere(labels > 0)
    if nz.size == 0:
        raise ValidationError("label map has no foreground voxels")
    return nz.min(axis=0), nz.max(axis=0)


def roi_window(labels: np.ndarray, roi_size: Sequence[int]) -> np.ndarray:
    """Start index of the ROI along each axis (may be negative / past the edge)."""
    lo, hi = label_bbox(labels)
    extent = hi - lo + 1
    roi = np.asarray(roi_size, dtype=np.intp)
    if np.any(extent > roi):
        logger.warning("label bounding box %s exceeds ROI %s; centre-cropping",
                       tuple(extent), tuple(roi))
    return lo - (roi - extent) // 2


def _crop_pad(arr: np.ndarray, start: np.ndarray, size: Sequence[int], fill) -> np.ndarray:
    out = np.full(tuple(size), fill, dtype=arr.dtype)
    src, dst = [], []
    for s, n, m in zip(start, size, arr.shape):
        a, b = max(s, 0), min(s + n, m)
        if b <= a:
            return out
        src.append(slice(a, b))
        dst.append(slice(a - s, b - s))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def crop_roi(vol: Volume, labels: LabelMap, roi_size: Sequence[int] = (48, 48, 48),
             pad_value: float = 0.0) -> tuple[Volume, LabelMap]:
    """Crop a fixed-size box centred on the labelled structures.

    Regions outside the scan are filled with ``pad_value`` (volume) and
    background (labels).
    """
    if vol.dims != labels.dims:
        raise ValidationError(f"volume dims {vol.dims} != label dims {labels.dims}")
    roi = tuple(int(r) for r in roi_size)
    if len(roi) != 3 or min(roi) < 1:
        raise ValidationError(f"invalid roi_size {roi_size}")
    start = roi_window(labels.labels, roi)
    v = _crop_pad(vol.data, start, roi, np.float32(pad_value))
    lab = _crop_pad(labels.labels, start, roi, np.uint8(0))
    return Volume(v, vol.spacing), LabelMap(lab, labels.spacing)


def normalize(vol: Volume) -> Volume:
    """Affine min/max map to [0, 1]; a constant volume maps to zeros."""
    d = vol.data.astype(np.float64)
    lo, hi = d.min(), d.max()
    if hi <= lo:
        return vol.with_data(np.zeros_like(vol.data))
    out = (d - lo) / (hi - lo)
    return vol.with_data(np.clip(out, 0.0, 1.0).astype(np.float32))


def preprocess(vol: Volume, labels: LabelMap, target_spacing: Sequence[float] = (2.0, 2.0, 2.0),
               roi_size: Sequence[int] = (48, 48, 48)) -> tuple[Volume, LabelMap]:
    """Resample, normalise the full scan, then crop the ROI (pad = 0)."""
    v = normalize(resample(vol, target_spacing))
    lab = resample(labels, target_spacing)
    return crop_roi(v, lab, roi_size, pad_value=0.0)


# --------------------------------------------------------------------------
# file I/O

_KINDS = {"volume": ("float32", "<f4"), "labelmap": ("uint8", "|u1")}


def _payload_path(header_path: Path) -> Path:
    return header_path.with_name(header_path.name + ".raw")


def _write(path, kind: str, arr: np.ndarray, spacing: Triple) -> None:
    path = Path(path)
    dtype_name, dt = _KINDS[kind]
    payload = _payload_path(path)
    header = {
        "kind": kind,
        "dims": [int(d) for d in arr.shape],
        "spacing": list(spacing),
        "dtype": dtype_name,
        "byte_order": "little",
        "order": "x-fastest",
        "payload": payload.name,
    }
    payload.write_bytes(np.asarray(arr).astype(dt).tobytes(order="F"))
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def _read(path, kind: str) -> tuple[np.ndarray, Triple]:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    required = {"kind", "dims", "spacing", "dtype", "byte_order", "payload"}
    if not isinstance(header, dict) or not required <= header.keys():
        raise FormatError(f"{path}: header missing fields {sorted(required - set(header or {}))}")
    if header["kind"] != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {header['kind']!r}")
    dtype_name, dt = _KINDS[kind]
    if header["dtype"] != dtype_name:
        raise FormatError(f"{path}: unsupported dtype {header['dtype']!r} for {kind}")
    if header["byte_order"] != "little":
        raise FormatError(f"{path}: unsupported byte order {header['byte_order']!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"{path}: unsupported payload order {header['order']!r}")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and d > 0 for d in dims)):
        raise FormatError(f"{path}: invalid dims {dims!r}")
    try:
        spacing = _as_spacing(header["spacing"])
    except (ValidationError, TypeError) as exc:
        raise FormatError(f"{path}: invalid spacing {header['spacing']!r}") from exc
    raw = (path.parent / header["payload"]).read_bytes()
    item = np.dtype(dt).itemsize
    expected = int(np.prod(dims)) * item
    if len(raw) != expected:
        raise FormatError(f"{path}: payload has {len(raw) // item} elements "
                          f"({len(raw)} bytes), dims require {expected // item}")
    arr = np.frombuffer(raw, dtype=dt).reshape(dims, order="F")
    return np.array(arr, order="C"), spacing


def write_volume(vol: Volume, path) -> None:
    _write(path, "volume", vol.data, vol.spacing)


def read_volume(path) -> Volume:
    arr, spacing = _read(path, "volume")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite intensities in payload")
    return Volume(arr, spacing)


def write_labelmap(labels: LabelMap, path) -> None:
    _write(path, "labelmap", labels.labels, labels.spacing)


def read_labelmap(path) -> LabelMap:
    arr, spacing = _read(path, "labelmap")
    if arr.max(initial=0) >= NUM_LABELS:
        raise FormatError(f"{path}: label value {int(arr.max())} outside 0..{NUM_LABELS - 1}")
    return LabelMap(arr, spacing)
