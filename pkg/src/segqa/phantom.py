"""Synthetic multi-domain cardiac benchmark and black-box segmenter stand-ins.

Each case is a chest-like phantom: air, body, lungs, spine, sternum,
pericardial fat and nine ellipsoidal cardiac substructures with their own
intensity bands.  Raw scans are built in HU on an anisotropic "scanner" grid,
then resampled to the target spacing, window-clipped to [-1000, 1000] HU,
normalised and cropped around the heart.  Domain transforms from
:mod:`segqa.perturb` are applied to the cropped ROI.
"""

from __future__ import annotations

import enum
import functools
import json
import logging
import math
import zlib
from fractions import Fraction
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import perturb
from .errors import ValidationError
from .grid import (NUM_LABELS, STRUCTURES, LabelMap, Volume, crop_roi, normalize,
                   read_labelmap, read_volume, resample, write_labelmap, write_volume)

logger = logging.getLogger(__name__)


class DomainKind(str, enum.Enum):
    COMMON = "COMMON"
    AV = "AV"
    CE = "CE"
    MIP = "MIP"
    PRONE = "PRONE"
    RPV_BASE = "RPV_BASE"
    RPV_NOISY = "RPV_NOISY"


_KIND_CODE = {k: i for i, k in enumerate(DomainKind)}
_DEFAULT_PARAM = {DomainKind.CE: 0.15, DomainKind.AV: 3.0, DomainKind.RPV_NOISY: 4.0}
BENCHMARK_KINDS = (DomainKind.COMMON, DomainKind.AV, DomainKind.CE, DomainKind.MIP,
                   DomainKind.PRONE, DomainKind.RPV_NOISY)
FULL_COUNTS = {DomainKind.COMMON: 39, DomainKind.AV: 74, DomainKind.CE: 20,
               DomainKind.MIP: 12, DomainKind.PRONE: 16, DomainKind.RPV_NOISY: 20}
FULL_SEG_TRAIN = 60


@dataclass(frozen=True)
class DomainTag:
    kind: DomainKind
    parameter: Optional[float] = None

    def __post_init__(self):
        kind = DomainKind(self.kind)
        object.__setattr__(self, "kind", kind)
        p = self.parameter
        if kind in _DEFAULT_PARAM:
            p = _DEFAULT_PARAM[kind] if p is None else float(p)
            if not math.isfinite(p):
                raise ValidationError(f"{kind.value}: non-finite parameter")
            if kind is DomainKind.RPV_NOISY and p <= 0:
                raise ValidationError("RPV_NOISY noise level must be > 0")
            if kind is DomainKind.AV and p < 0:
                raise ValidationError("AV deformation magnitude must be >= 0")
        elif p is not None:
            raise ValidationError(f"{kind.value} takes no parameter")
        object.__setattr__(self, "parameter", p)

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "parameter": self.parameter}

    @classmethod
    def from_json(cls, d: dict) -> "DomainTag":
        return cls(DomainKind(d["kind"]), d.get("parameter"))

    def __str__(self) -> str:
        return self.kind.value if self.parameter is None else f"{self.kind.value}({self.parameter:g})"


@dataclass(frozen=True)
class GridConfig:
    scan_dims: tuple[int, int, int] = (64, 64, 44)
    scan_spacing: tuple[float, float, float] = (2.5, 2.5, 3.0)
    target_spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    roi: tuple[int, int, int] = (48, 48, 48)
    jitter: float = 0.05
    noise_hu: float = 10.0
    blur_voxels: float = 1.0

    @classmethod
    def small(cls) -> "GridConfig":
        """Coarse 24^3 ROI at 4 mm; for fast tests."""
        return cls(scan_dims=(40, 40, 34), scan_spacing=(4.0, 4.0, 4.0),
                   target_spacing=(4.0, 4.0, 4.0), roi=(24, 24, 24))

    @classmethod
    def from_json(cls, d: dict) -> "GridConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class CaseRecord:
    id: str
    volume: Volume
    truth: LabelMap
    domain: DomainTag
    seed: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.volume.dims != self.truth.dims or self.volume.spacing != self.truth.spacing:
            raise ValidationError(f"{self.id}: volume and truth grids disagree")

    def equals(self, other: "CaseRecord") -> bool:
        return (self.id == other.id and self.domain == other.domain and self.seed == other.seed
                and self.volume.equals(other.volume) and self.truth.equals(other.truth)
                and self.metadata == other.metadata)


# --------------------------------------------------------------------------
# anatomy
#
# Centres and semi-axes in mm relative to the heart centre; +y is posterior,
# +z superior.  Paint order resolves overlaps (later wins).

_GEOMETRY = {
    6: ((-24.0, 4.0, 6.0), (11.0, 12.0, 14.0)),    # RA
    7: ((-10.0, -14.0, -6.0), (15.0, 9.0, 14.0)),  # RV
    8: ((10.0, 18.0, 10.0), (14.0, 9.0, 9.0)),     # LA
    9: ((16.0, -4.0, -8.0), (14.0, 14.0, 16.0)),   # LV
    3: ((-14.0, -4.0, 0.0), (8.0, 5.5, 8.0)),      # TV
    4: ((10.0, 4.0, 2.0), (8.0, 5.5, 8.0)),        # MV
    1: ((2.0, 2.0, 16.0), (8.0, 8.0, 5.5)),        # AV
    5: ((-6.0, -16.0, 22.0), (8.0, 6.5, 5.5)),     # PV
    2: ((-4.0, -25.0, -2.0), (5.0, 5.0, 20.0)),    # LAD
}
PAINT_ORDER = (6, 7, 8, 9, 3, 4, 1, 5, 2)
_HEART_FLOOR_MM = min(c[2] - a[2] for c, a in _GEOMETRY.values())
_DOME_LIFT_MM = (6.0, 12.0)

# per-structure HU band centres
_STRUCTURE_HU = {1: 80.0, 2: 150.0, 3: 70.0, 4: 75.0, 5: 85.0, 6: 30.0, 7: 35.0, 8: 45.0, 9: 50.0}
_BAND_HALF_WIDTH = 10.0
HU_WINDOW = (-1000.0, 1000.0)


def hu_to_unit(hu: float) -> float:
    lo, hi = HU_WINDOW
    return (hu - lo) / (hi - lo)


def template_geometry() -> dict[int, tuple[np.ndarray, np.ndarray]]:
    return {lab: (np.array(c), np.array(a)) for lab, (c, a) in _GEOMETRY.items()}


def _bbox_centre_mm(geo) -> np.ndarray:
    lo = np.min([c - a for c, a in geo.values()], axis=0)
    hi = np.max([c + a for c, a in geo.values()], axis=0)
    return 0.5 * (lo + hi)


def _jittered_geometry(rng: np.random.Generator, jitter: float):
    geo = {}
    for lab in PAINT_ORDER:
        c, a = _GEOMETRY[lab]
        c = np.asarray(c) + rng.uniform(-jitter, jitter, 3) * np.asarray(a)
        a = np.asarray(a) * (1.0 + rng.uniform(-jitter, jitter, 3))
        geo[lab] = (c, a)
    # keep the whole-heart box centred where the template's is, so the
    # bbox-centred crop does not turn shape jitter into a global shift
    drift = _bbox_centre_mm(geo) - _bbox_centre_mm(template_geometry())
    return {lab: (c - drift, a) for lab, (c, a) in geo.items()}


def _ellipsoid(coords, center, axes) -> np.ndarray:
    return sum(((c - m) / a) ** 2 for c, m, a in zip(coords, center, axes)) <= 1.0


def _paint_labels(coords, geo) -> np.ndarray:
    lab = np.zeros(coords[0].shape, dtype=np.uint8)
    for l in PAINT_ORDER:
        lab[_ellipsoid(coords, *geo[l])] = l
    return lab


def _phase_period(cfg: GridConfig) -> np.ndarray:
    # smallest mm step that is a whole number of both scanner and target voxels
    out = []
    for a, b in zip(cfg.scan_spacing, cfg.target_spacing):
        fa, fb = Fraction(str(a)), Fraction(str(b))
        out.append(math.lcm(fa.numerator, fb.numerator) / math.gcd(fa.denominator, fb.denominator))
    return np.array(out)


def _scan(seed: int, kind: DomainKind, cfg: GridConfig) -> tuple[np.ndarray, np.ndarray, dict]:
    """Raw HU scan and labels on the scanner grid."""
    rng = np.random.default_rng(seed)
    geo = _jittered_geometry(rng, cfg.jitter)
    # whole-voxel offsets keep the scanner/target grid phase fixed across cases
    heart_offset = rng.integers(-1, 2, 3) * _phase_period(cfg)
    bands = {l: _STRUCTURE_HU[l] + rng.uniform(-_BAND_HALF_WIDTH, _BAND_HALF_WIDTH)
             for l in STRUCTURES}
    body_shift = np.array([0.0, 8.0, 0.0]) if kind is DomainKind.PRONE else np.zeros(3)

    dims = np.asarray(cfg.scan_dims)
    sp = np.asarray(cfg.scan_spacing)
    axes = [(np.arange(n) - (n - 1) / 2.0) * s - o for n, s, o in zip(dims, sp, heart_offset)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    meta: dict = {}
    coords = (x, y, z)
    labels = _paint_labels(coords, geo)

    bx, by = x - body_shift[0], y - body_shift[1]
    img = np.full(x.shape, HU_WINDOW[0])
    body = (bx / 150.0) ** 2 + ((by - 40.0) / 100.0) ** 2 <= 1.0
    field_noise = ndimage.gaussian_filter(rng.standard_normal(x.shape), 6.0, mode="nearest")
    field_noise *= 15.0 / max(np.abs(field_noise).max(), 1e-12)
    img[body] = 20.0 + field_noise[body]
    for side in (-1.0, 1.0):
        lung = ((bx - side * 68.0) / 42.0) ** 2 + ((by - 20.0) / 55.0) ** 2 + (z / 90.0) ** 2 <= 1.0
        img[lung & body] = -820.0
    r_spine = np.hypot(bx, by - 72.0)
    img[r_spine <= 17.0] = 1100.0
    img[r_spine <= 11.0] = 350.0
    img[(bx / 14.0) ** 2 + ((by + 50.0) / 6.0) ** 2 <= 1.0] = 500.0
    heart = labels > 0
    fat = ndimage.binary_dilation(heart, iterations=2) & ~heart
    img[fat] = -90.0
    if kind is DomainKind.AV:
        # elevated hemidiaphragm: a liver-density dome pressed up against the
        # inferior heart border, displacing the epicardial fat plane
        lift = rng.uniform(*_DOME_LIFT_MM)
        top = _HEART_FLOOR_MM + lift
        dome = (bx / 70.0) ** 2 + (by / 60.0) ** 2 + ((z - (top - 30.0)) / 30.0) ** 2 <= 1.0
        img[dome & body] = 55.0
        meta["dome_lift_mm"] = float(lift)
    for l in STRUCTURES:
        img[labels == l] = bands[l]
    img = ndimage.gaussian_filter(img, cfg.blur_voxels, mode="nearest")
    img = img + rng.normal(0.0, cfg.noise_hu, img.shape)
    meta["heart_offset_mm"] = [float(v) for v in heart_offset]
    return img, labels, meta


def _domain_seed(seed: int, kind: DomainKind) -> int:
    return int(np.random.SeedSequence([seed, 7919, _KIND_CODE[kind]]).generate_state(1)[0])


def generate_case(seed: int, domain: DomainTag, grid_config: GridConfig | None = None,
                  case_id: str | None = None) -> CaseRecord:
    """Deterministic phantom case for ``(seed, domain, grid_config)``."""
    cfg = grid_config or GridConfig()
    domain = domain if isinstance(domain, DomainTag) else DomainTag(domain)
    kind = domain.kind
    raw, labels, meta = _scan(seed, kind, cfg)
    if kind is DomainKind.PRONE:
        # acquired prone; flipped back to pseudo-supine during preprocessing
        raw, labels = raw[:, ::-1, :], labels[:, ::-1, :]
        meta["flipped"] = True
    vol = Volume(raw.astype(np.float32), cfg.scan_spacing)
    lab = LabelMap(labels, cfg.scan_spacing)
    vol = resample(vol, cfg.target_spacing)
    lab = resample(lab, cfg.target_spacing)
    vol = normalize(vol.with_data(np.clip(vol.data, *HU_WINDOW)))
    if kind is DomainKind.PRONE:
        vol, lab = perturb.flip_axis(vol, lab, "y")
    vol, lab = crop_roi(vol, lab, cfg.roi, pad_value=0.0)

    dseed = _domain_seed(seed, kind)
    if kind is DomainKind.CE:
        vol = perturb.contrast_enhance(vol, lab.foreground(), domain.parameter)
    elif kind is DomainKind.RPV_NOISY:
        vol = perturb.add_poisson_noise(vol, domain.parameter, dseed)
    elif kind is DomainKind.MIP:
        centre = np.argwhere(lab.labels > 0).mean(axis=0)
        offset = np.random.default_rng(dseed).uniform(-6.0, 6.0, 3) * (cfg.roi[0] / 48.0)
        vol = perturb.insert_artifact(vol, dseed, center=centre + offset)
    elif kind is DomainKind.AV:
        magnitude = domain.parameter * (cfg.roi[0] / 48.0)
        vol, lab = perturb.deform(vol, lab, magnitude, dseed)
        meta["deform_voxels"] = magnitude
    present = sorted(int(v) for v in np.unique(lab.labels) if v > 0)
    missing = [l for l in STRUCTURES if l not in present]
    if missing:
        meta["missing_structures"] = missing
    cid = case_id or f"{kind.value.lower()}_{seed}"
    return CaseRecord(cid, vol, lab, domain, int(seed), meta)


# --------------------------------------------------------------------------
# benchmark assembly

class Split(str, enum.Enum):
    SEG_TRAIN = "SEG_TRAIN"
    QA_TRAIN = "QA_TRAIN"
    QA_TEST = "QA_TEST"


@dataclass(frozen=True)
class BenchmarkConfig:
    scale: float = 1.0
    seed: int = 0
    grid: GridConfig = GridConfig()
    counts: Optional[dict] = None
    seg_train: Optional[int] = None
    ce_range: tuple[float, float] = (0.05, 0.25)
    av_range: tuple[float, float] = (1.5, 4.0)
    noise_levels: tuple[float, ...] = perturb.NOISE_LEVELS

    def domain_counts(self) -> dict[DomainKind, int]:
        if self.counts is not None:
            counts = {DomainKind(k): int(v) for k, v in self.counts.items()}
        else:
            if self.scale <= 0:
                raise ValidationError("scale must be positive")
            counts = {k: max(1, int(round(v * self.scale))) for k, v in FULL_COUNTS.items()}
        if counts.get(DomainKind.COMMON, 0) < 1:
            raise ValidationError("the COMMON reference domain needs at least one case")
        for k, v in counts.items():
            if v < 1:
                raise ValidationError(f"domain {k.value} needs at least one case")
        return counts

    def seg_train_count(self) -> int:
        if self.seg_train is not None:
            return int(self.seg_train)
        return int(round(FULL_SEG_TRAIN * self.scale))

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = asdict(self.grid)
        d["noise_levels"] = list(self.noise_levels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = GridConfig.from_json(d["grid"])
        for k in ("ce_range", "av_range", "noise_levels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class CaseSpec:
    id: str
    seed: int
    domain: DomainTag
    split: Split


def _case_seed(root: int, kind: DomainKind, index: int) -> int:
    return int(np.random.SeedSequence([root, _KIND_CODE[kind], index]).generate_state(1)[0] >> 1)


class BenchmarkDataset:
    """Case specs plus lazily generated records."""

    def __init__(self, specs: Sequence[CaseSpec], config: BenchmarkConfig):
        ids = [s.id for s in specs]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate case ids")
        self.specs = list(specs)
        self.config = config
        self._cache: dict[str, CaseRecord] = {}
        self._by_id = {s.id: s for s in self.specs}

    def __len__(self) -> int:
        return len(self.specs)

    def spec(self, case_id: str) -> CaseSpec:
        return self._by_id[case_id]

    def case(self, case_id: str) -> CaseRecord:
        if case_id not in self._cache:
            s = self._by_id[case_id]
            self._cache[case_id] = generate_case(s.seed, s.domain, self.config.grid, s.id)
        return self._cache[case_id]

    def variant(self, case_id: str, domain: DomainTag) -> CaseRecord:
        """Same patient seed re-generated under another domain (e.g. noise levels)."""
        key = f"{case_id}@{domain}"
        if key not in self._cache:
            s = self._by_id[case_id]
            self._cache[key] = generate_case(s.seed, domain, self.config.grid, f"{s.id}@{domain}")
        return self._cache[key]

    def materialize(self) -> "BenchmarkDataset":
        for s in self.specs:
            self.case(s.id)
        return self

    def select(self, splits: Iterable[Split] | None = None,
               kinds: Iterable[DomainKind] | None = None) -> list[CaseSpec]:
        splits = None if splits is None else {Split(s) for s in splits}
        kinds = None if kinds is None else {DomainKind(k) for k in kinds}
        return [s for s in self.specs
                if (splits is None or s.split in splits)
                and (kinds is None or s.domain.kind in kinds)]

    def records(self, splits=None, kinds=None) -> list[CaseRecord]:
        return [self.case(s.id) for s in self.select(splits, kinds)]

    @property
    def cases(self) -> list[CaseRecord]:
        return [self.case(s.id) for s in self.specs]

    def benchmark_specs(self) -> list[CaseSpec]:
        return self.select([Split.QA_TRAIN, Split.QA_TEST])


def plan_benchmark(config: BenchmarkConfig | None = None) -> BenchmarkDataset:
    """Case ids, seeds, domain parameters and splits without generating images."""
    config = config or BenchmarkConfig()
    counts = config.domain_counts()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 424242]))
    specs: list[CaseSpec] = []
    counter = 0
    for kind in BENCHMARK_KINDS:
        n = counts.get(kind, 0)
        tags = []
        for i in range(n):
            if kind is DomainKind.CE:
                tags.append(DomainTag(kind, float(rng.uniform(*config.ce_range))))
            elif kind is DomainKind.AV:
                tags.append(DomainTag(kind, float(rng.uniform(*config.av_range))))
            elif kind is DomainKind.RPV_NOISY:
                tags.append(DomainTag(kind, float(config.noise_levels[i % len(config.noise_levels)])))
            else:
                tags.append(DomainTag(kind))
        order = list(range(n))
        if kind is DomainKind.RPV_NOISY:
            # interleave levels so both QA splits see the whole ladder
            order.sort(key=lambda i: (tags[i].parameter, i))
        for j, i in enumerate(order):
            split = Split.QA_TEST if counter % 3 == 2 else Split.QA_TRAIN
            counter += 1
            specs.append(CaseSpec(f"{kind.value.lower()}_{i:03d}", _case_seed(config.seed, kind, i),
                                  tags[i], split))
    for i in range(config.seg_train_count()):
        specs.append(CaseSpec(f"segtrain_{i:03d}", _case_seed(config.seed + 1_000_003,
                                                               DomainKind.COMMON, i),
                              DomainTag(DomainKind.COMMON), Split.SEG_TRAIN))
    return BenchmarkDataset(specs, config)


def generate_benchmark(config: BenchmarkConfig | None = None,
                       materialize: bool = True) -> BenchmarkDataset:
    ds = plan_benchmark(config)
    return ds.materialize() if materialize else ds


def save_benchmark(dataset: BenchmarkDataset, out_dir) -> Path:
    """Write every case plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in dataset.specs:
        rec = dataset.case(s.id)
        vol_rel = f"cases/{s.id}.vol"
        lab_rel = f"cases/{s.id}.lab"
        write_volume(rec.volume, out / vol_rel)
        write_labelmap(rec.truth, out / lab_rel)
        entries.append({"id": s.id, "seed": s.seed, "domain": s.domain.to_json(),
                        "split": s.split.value, "volume": vol_rel, "truth": lab_rel,
                        "metadata": rec.metadata})
    manifest = {"format": "segqa-benchmark", "version": 1,
                "config": dataset.config.to_json(), "cases": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_benchmark(data_dir) -> BenchmarkDataset:
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read benchmark manifest in {root}: {exc}") from exc
    config = BenchmarkConfig.from_json(manifest["config"])
    specs = [CaseSpec(e["id"], int(e["seed"]), DomainTag.from_json(e["domain"]), Split(e["split"]))
             for e in manifest["cases"]]
    ds = BenchmarkDataset(specs, config)
    for e, s in zip(manifest["cases"], specs):
        vol = read_volume(root / e["volume"])
        lab = read_labelmap(root / e["truth"])
        ds._cache[s.id] = CaseRecord(s.id, vol, lab, s.domain, s.seed, e.get("metadata", {}))
    return ds


# --------------------------------------------------------------------------
# segmenter stand-ins

class Family(str, enum.Enum):
    ATLAS = "ATLAS"
    THRESHOLD = "THRESHOLD"
    ROBUST = "ROBUST"


TARGET_DOMAIN = {Family.ATLAS: DomainKind.CE, Family.THRESHOLD: DomainKind.RPV_NOISY}


@dataclass(frozen=True)
class SegmenterProfile:
    """Fragility profile of a black-box segmenter stand-in.

    Sensitivities scale how strongly measured intensity offset, noise level,
    metal artifact burden and anatomical atypicality degrade the output.
    """

    family: Family
    intensity_sensitivity: float = 0.0
    noise_sensitivity: float = 0.0
    base_jitter: float = 0.15
    artifact_sensitivity: float = 0.0
    anatomy_sensitivity: float = 0.0
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        for f in ("intensity_sensitivity", "noise_sensitivity", "base_jitter",
                  "artifact_sensitivity", "anatomy_sensitivity"):
            v = getattr(self, f)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{f} must be a nonnegative finite number")
        if not self.name:
            object.__setattr__(self, "name", f"{self.family.value.lower()}-{self.seed}")

    @property
    def id(self) -> str:
        return self.name

    def to_json(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SegmenterProfile":
        return cls(**d)


def profile_bank(count: int = 19) -> list[SegmenterProfile]:
    """Deterministic bank spanning (family x sensitivity).

    Slot 0 is the default ATLAS profile; with ``count >= 2`` the last slot is
    ROBUST and the remaining slots alternate THRESHOLD / ATLAS over a grid of
    sensitivities and base jitters.
    """
    if count < 1:
        raise ValidationError("profile bank needs count >= 1")
    bank = [SegmenterProfile(Family.ATLAS, intensity_sensitivity=1.2, noise_sensitivity=0.3,
                             artifact_sensitivity=0.3, anatomy_sensitivity=0.4,
                             base_jitter=0.15, seed=1000, name="atlas-00")]
    sens = (1.0, 1.5, 0.8, 1.25, 1.75, 0.9, 1.1, 1.4, 2.0)
    jit = (0.10, 0.20, 0.15, 0.25, 0.12)
    n_mid = count - 2
    for i in range(max(0, n_mid)):
        s = sens[(i // 2) % len(sens)]
        j = jit[i % len(jit)]
        if i % 2 == 0:
            p = SegmenterProfile(Family.THRESHOLD, intensity_sensitivity=0.25 * s,
                                 noise_sensitivity=s, artifact_sensitivity=0.4,
                                 anatomy_sensitivity=0.3, base_jitter=j, seed=1001 + i,
                                 name=f"threshold-{i + 1:02d}")
        else:
            p = SegmenterProfile(Family.ATLAS, intensity_sensitivity=s,
                                 noise_sensitivity=0.3 * s, artifact_sensitivity=0.3,
                                 anatomy_sensitivity=0.4, base_jitter=j, seed=1001 + i,
                                 name=f"atlas-{i + 1:02d}")
        bank.append(p)
    if count >= 2:
        bank.append(SegmenterProfile(Family.ROBUST, base_jitter=0.0, seed=1999,
                                     name=f"robust-{count - 1:02d}"))
    return bank


# observables the stand-ins react to
COMMON_HEART_LEVEL = hu_to_unit(19.0)
FLOOR_LEVEL = hu_to_unit(16.0)
_FLOOR_TOL = 25.0 / 2000.0
_OFFSET_TOL = 0.01
_NOISE_FLOOR = 0.01


def observe(volume: Volume, truth: LabelMap) -> dict[str, float]:
    """Image quantities inside the reference heart region that drive fragility."""
    d = volume.data.astype(np.float64)
    fg = truth.labels > 0
    if not fg.any():
        raise ValidationError("reference has no foreground")
    offset = float(np.median(d[fg])) - COMMON_HEART_LEVEL
    pair = fg[1:] & fg[:-1]
    diffs = np.abs(np.diff(d, axis=0))[pair]
    noise = float(1.4826 * np.median(diffs) / math.sqrt(2.0)) if diffs.size else 0.0
    saturated = int(np.count_nonzero(d >= 0.999))
    return {"offset": offset, "noise": noise, "saturated": saturated,
            "floor": _floor_offset(d, fg)}


def _floor_offset(d: np.ndarray, fg: np.ndarray, depth: int = 4) -> float:
    # median tissue level in the slab just below the heart's inferior border
    zs = np.flatnonzero(fg.any(axis=(0, 1)))
    z0 = int(zs[0])
    if z0 == 0:
        return 0.0
    foot = fg[:, :, z0:z0 + 6].any(axis=2)
    region = np.zeros_like(fg)
    region[:, :, max(0, z0 - depth):z0] = foot[:, :, None]
    vals = d[region & ~fg]
    return float(np.median(vals)) - FLOOR_LEVEL if vals.size else 0.0


def _atypicality(truth: np.ndarray, spacing) -> float:
    geo = template_geometry()
    present = [l for l in STRUCTURES if np.any(truth == l)]
    if len(present) < 2:
        return 3.0
    cents = ndimage.center_of_mass(np.ones_like(truth), truth, present)
    cents = np.asarray(cents) * np.asarray(spacing)
    tmpl = np.array([geo[l][0] for l in present])
    dev = (cents - cents.mean(axis=0)) - (tmpl - tmpl.mean(axis=0))
    missing_penalty = (len(STRUCTURES) - len(present)) * 1.0
    return float(np.linalg.norm(dev, axis=1).mean()) + missing_penalty


_ATYP_BASELINE_MM = 0.7


def severity(profile: SegmenterProfile, volume: Volume, truth: LabelMap) -> dict[str, float]:
    obs = observe(volume, truth)
    scale = volume.dims[0] / 48.0
    terms = {
        "intensity": max(0.0, abs(obs["offset"]) - _OFFSET_TOL) / 0.3,
        "noise": max(0.0, obs["noise"] - _NOISE_FLOOR) / 0.12,
        "artifact": min(1.0, obs["saturated"] / (50.0 * scale ** 3)),
        "anatomy": min(1.5, max(0.0, _atypicality(truth.labels, truth.spacing)
                                - _ATYP_BASELINE_MM) / 1.0
                       + max(0.0, abs(obs["floor"]) - _FLOOR_TOL) / 0.03),
    }
    total = (profile.intensity_sensitivity * terms["intensity"]
             + profile.noise_sensitivity * terms["noise"]
             + profile.artifact_sensitivity * terms["artifact"]
             + profile.anatomy_sensitivity * terms["anatomy"])
    terms["total"] = total
    return terms


_NEIGHBOURS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def _neighbour_stack(lab: np.ndarray) -> np.ndarray:
    pad = np.pad(lab, 1, mode="edge")
    nx, ny, nz = lab.shape
    return np.stack([pad[1 + dx:1 + dx + nx, 1 + dy:1 + dy + ny, 1 + dz:1 + dz + nz]
                     for dx, dy, dz in _NEIGHBOURS])


def boundary_flip(lab: np.ndarray, p: float, rng: np.random.Generator, passes: int = 1) -> np.ndarray:
    """Relabel each boundary voxel to a random 6-neighbour's label with probability ``p``."""
    out = lab.copy()
    for _ in range(passes):
        nb = _neighbour_stack(out)
        boundary = np.any(nb != out[None], axis=0)
        pick = rng.integers(0, 6, size=out.shape)
        flip = boundary & (rng.random(out.shape) < p)
        chosen = np.take_along_axis(nb, pick[None], axis=0)[0]
        out = np.where(flip, chosen, out)
    return out


def _shift(mask: np.ndarray, vec: Sequence[int]) -> np.ndarray:
    out = np.zeros_like(mask)
    src, dst = [], []
    for v, n in zip(vec, mask.shape):
        v = int(v)
        if abs(v) >= n:
            return out
        src.append(slice(max(0, -v), n - max(0, v)))
        dst.append(slice(max(0, v), n - max(0, -v)))
    out[tuple(dst)] = mask[tuple(src)]
    return out


def _displace_structures(lab: np.ndarray, mags: np.ndarray, rng) -> np.ndarray:
    out = np.zeros_like(lab)
    for l, m in zip(PAINT_ORDER, mags):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        vec = np.rint(direction * m).astype(int)
        out[_shift(lab == l, vec)] = l
    return out


def _speckle(lab: np.ndarray, q: float, rng) -> np.ndarray:
    heart = lab > 0
    holes = heart & (rng.random(lab.shape) < 0.35 * q)
    near = ndimage.binary_dilation(heart, iterations=2) & ~heart
    spurious = near & (rng.random(lab.shape) < 0.25 * q)
    out = lab.copy()
    out[holes] = 0
    out[spurious] = rng.integers(1, NUM_LABELS, size=int(spurious.sum()))
    return out


ROBUST_DSC_RANGE = (0.805, 0.945)
PRIOR_PULL = 4.0
INTENSITY_DRIFT_SHARE = 0.4


def _jitter_to_target(lab: np.ndarray, target: float, rng, p: float = 0.15,
                      max_passes: int = 40) -> np.ndarray:
    from .stats import mean_dsc  # local import: stats depends on grid only

    out = lab
    for _ in range(max_passes):
        cand = boundary_flip(out, p, rng)
        if mean_dsc(cand, lab) < target:
            # finish with a partial pass so the overshoot stays small
            diff = np.argwhere(cand != out)
            rng.shuffle(diff)
            for chunk in np.array_split(diff, 8):
                out = out.copy()
                out[tuple(chunk.T)] = cand[tuple(chunk.T)]
                if mean_dsc(out, lab) <= target:
                    break
            return out
        out = cand
    return out


def _grid_for(dims, spacing) -> GridConfig:
    for cfg in (GridConfig(), GridConfig.small()):
        if tuple(cfg.roi) == tuple(dims) and np.allclose(cfg.target_spacing, spacing):
            return cfg
    return GridConfig(scan_dims=tuple(int(n) + 16 for n in dims), scan_spacing=tuple(spacing),
                      target_spacing=tuple(spacing), roi=tuple(dims))


@functools.lru_cache(maxsize=4)
def _atlas_labels(cfg: GridConfig) -> np.ndarray:
    # the mean anatomy rendered through the same scanner pipeline as the cases
    return generate_case(0, DomainTag(DomainKind.COMMON), replace(cfg, jitter=0.0)).truth.labels


def _atlas_prior(truth: LabelMap) -> np.ndarray:
    """Mean-shape atlas on the truth grid, aligned on the heart bbox centre."""
    atlas = _atlas_labels(_grid_for(truth.dims, truth.spacing))

    def centre(lab):
        idx = np.argwhere(lab > 0)
        return 0.5 * (idx.min(axis=0) + idx.max(axis=0))

    vec = np.rint(centre(truth.labels) - centre(atlas)).astype(int)
    out = np.zeros_like(atlas)
    for l in STRUCTURES:
        out[_shift(atlas == l, vec)] = l
    return out


def _snap_to_prior(lab: np.ndarray, prior: np.ndarray, weight: float, rng) -> np.ndarray:
    # a poorly converged fit falls back on the mean shape for some structures
    k = int(math.floor(weight * len(PAINT_ORDER) + rng.random()))
    if k <= 0:
        return lab
    out = lab.copy()
    for l in rng.permutation(PAINT_ORDER)[:k]:
        out[out == l] = 0
        out[prior == l] = l
    return out


def _case_rng(profile: SegmenterProfile, volume: Volume, truth: LabelMap) -> np.random.Generator:
    # ROBUST errors depend on the patient only, not on how it was imaged
    src = truth.labels if profile.family is Family.ROBUST else volume.data
    digest = zlib.crc32(np.ascontiguousarray(src).tobytes())
    return np.random.default_rng([profile.seed, digest])


def segment(profile: SegmenterProfile, volume: Volume, truth: LabelMap) -> LabelMap:
    """Simulated black-box output for ``volume``.

    The stand-ins degrade the reference anatomy ``truth`` according to image
    quantities measured from ``volume`` (see :func:`observe`):

    * ATLAS: template fit drifts; under an intensity offset some structures
      fall back on the mean-shape prior, then structures are displaced
      independently by an amount growing with the severity.
    * THRESHOLD: intensity banding breaks under noise; holes, spurious
      voxels and ragged borders grow with severity.
    * ROBUST: only a per-case random boundary jitter, independent of domain.
    """
    if volume.dims != truth.dims:
        raise ValidationError("volume and truth dims disagree")
    rng = _case_rng(profile, volume, truth)
    lab = truth.labels.copy()
    scale = volume.dims[0] / 48.0
    if profile.family is Family.ROBUST:
        return truth.with_labels(_jitter_to_target(lab, rng.uniform(*ROBUST_DSC_RANGE), rng))
    terms = severity(profile, volume, truth)
    sev = terms["total"] + rng.uniform(0.0, 0.12)
    if profile.family is Family.ATLAS:
        pull = profile.intensity_sensitivity * terms["intensity"]
        lab = _snap_to_prior(lab, _atlas_prior(truth), min(1.0, PRIOR_PULL * pull), rng)
        # part of the intensity damage went into the prior fallback
        sev -= (1.0 - INTENSITY_DRIFT_SHARE) * pull
        mags = sev * 5.0 * scale * rng.uniform(0.5, 1.5, len(PAINT_ORDER))
        out = _displace_structures(lab, mags, rng)
        out = boundary_flip(out, min(0.9, profile.base_jitter + 0.2 * sev), rng, passes=2)
    else:
        q = min(1.0, sev)
        out = _speckle(lab, q, rng)
        out = boundary_flip(out, min(0.9, profile.base_jitter + 0.35 * q), rng, passes=1 + int(sev > 0.5))
    return truth.with_labels(out)
