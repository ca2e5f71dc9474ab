"""Commissioning, per-case inference, drift monitoring and bank evaluation."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _container, regress
from .encoders import (DAE_DEFAULTS, VAE_DEFAULTS, EncoderConfig, TrainedDAE, TrainedVAE,
                       model_from_arrays, train_dae, train_vae)
from .errors import FormatError, NumericError, ValidationError
from .features import (CommonReference, FeatureRow, FeatureVector, ImageFeatures,
                       build_reference, design_matrix, extract, extract_many, image_features)
from .grid import LabelMap, Volume
from .phantom import (BENCHMARK_KINDS, BenchmarkDataset, CaseSpec, DomainKind, DomainTag,
                      SegmenterProfile, Split, segment)
from .regress import FittedRegressor
from .regress.direct import DirectNetConfig, fit_direct_net, predict_direct_net
from .stats import (TestResult, anova_oneway, mae, mean_dsc, pearson, rank_sum, spearman,
                    wilcoxon_signed_rank)

logger = logging.getLogger(__name__)

BUNDLE_MAGIC = b"SQBUNDLE"
BUNDLE_VERSION = 1
DEFAULT_THRESHOLD = 0.4


class Flag(str, enum.Enum):
    GOOD = "GOOD"
    POOR = "POOR"


def classify(y_pred: float, threshold: float = DEFAULT_THRESHOLD) -> Flag:
    """GOOD iff ``y_pred >= threshold``."""
    return Flag.GOOD if y_pred >= threshold else Flag.POOR


# --------------------------------------------------------------------------
# shared detectors and per-case caches

@dataclass(eq=False)
class Detectors:
    dae: TrainedDAE
    vae: TrainedVAE
    ref: CommonReference


def _sub_seed(root: int, tag: int) -> int:
    return int(np.random.SeedSequence([root, tag]).generate_state(1)[0] >> 1)


def train_detectors(dataset: BenchmarkDataset, seed: int = 0,
                    dae_config: EncoderConfig = DAE_DEFAULTS,
                    vae_config: EncoderConfig = VAE_DEFAULTS) -> Detectors:
    """DAE on QA_TRAIN volumes, VAE on QA_TRAIN truths, reference from QA_TRAIN COMMON."""
    train = dataset.records([Split.QA_TRAIN])
    if not train:
        raise ValidationError("dataset has no QA_TRAIN cases")
    dae = train_dae([c.volume for c in train], replace(dae_config, seed=_sub_seed(seed, 1)))
    vae = train_vae([c.truth for c in train], replace(vae_config, seed=_sub_seed(seed, 2)))
    return detectors_from_models(dataset, dae, vae)


def detectors_from_models(dataset: BenchmarkDataset, dae: TrainedDAE, vae: TrainedVAE) -> Detectors:
    """Pair already trained encoders with a reference built from QA_TRAIN COMMON."""
    if not isinstance(dae, TrainedDAE) or not isinstance(vae, TrainedVAE):
        raise ValidationError("expected a trained DAE and a trained VAE")
    common = dataset.records([Split.QA_TRAIN], [DomainKind.COMMON])
    if len(common) < 2:
        raise ValidationError("need at least 2 QA_TRAIN COMMON cases for the reference")
    ref = build_reference(dae, [c.volume for c in common], [c.truth.foreground() for c in common])
    return Detectors(dae, vae, ref)


class Workspace:
    """Caches image features and per-(profile, case) results over one dataset."""

    def __init__(self, dataset: BenchmarkDataset, detectors: Optional[Detectors] = None):
        self.dataset = dataset
        self.detectors = detectors
        self._image: dict[str, ImageFeatures] = {}
        self._rows: dict[tuple[str, str], FeatureRow] = {}
        self._dsc: dict[tuple[str, str], float] = {}

    def _need_detectors(self) -> Detectors:
        if self.detectors is None:
            raise ValidationError("workspace has no trained detectors")
        return self.detectors

    def image_features(self, specs: Sequence[CaseSpec]) -> list[ImageFeatures]:
        det = self._need_detectors()
        todo = [s for s in specs if s.id not in self._image]
        if todo:
            vols = [self.dataset.case(s.id).volume for s in todo]
            for s, f in zip(todo, image_features(vols, det.dae, det.ref)):
                self._image[s.id] = f
        return [self._image[s.id] for s in specs]

    def segmentation(self, profile: SegmenterProfile, case_id: str) -> LabelMap:
        rec = self.dataset.case(case_id)
        return segment(profile, rec.volume, rec.truth)

    def dsc(self, profile: SegmenterProfile, record) -> float:
        key = (profile.name, record.id)
        if key not in self._dsc:
            self._dsc[key] = mean_dsc(segment(profile, record.volume, record.truth), record.truth)
        return self._dsc[key]

    def rows(self, profile: SegmenterProfile, specs: Sequence[CaseSpec]) -> list[FeatureRow]:
        det = self._need_detectors()
        todo = [s for s in specs if (profile.name, s.id) not in self._rows]
        if todo:
            image = self.image_features(todo)
            recs = [self.dataset.case(s.id) for s in todo]
            preds = [segment(profile, r.volume, r.truth) for r in recs]
            feats = extract_many([r.volume for r in recs], preds, det.dae, det.vae, det.ref, image)
            for s, r, p, f in zip(todo, recs, preds, feats):
                y = mean_dsc(p, r.truth)
                self._dsc[(profile.name, s.id)] = y
                self._rows[(profile.name, s.id)] = FeatureRow(s.id, s.domain.kind.value, f, y)
        return [self._rows[(profile.name, s.id)] for s in specs]


# --------------------------------------------------------------------------
# benchmark

def _tr(t: TestResult) -> dict:
    return {"statistic": t.statistic, "p_value": t.p_value, "method": t.method}


def run_benchmark(profile: SegmenterProfile, dataset: BenchmarkDataset,
                  workspace: Optional[Workspace] = None) -> dict:
    """Per-domain DSC summary and significance tests for one segmenter.

    Each uncommon case is paired with the COMMON rendering of the same
    patient seed for the signed-rank test; the noise ANOVA re-renders every
    RPV_NOISY patient at each level of the noise ladder.
    """
    ws = workspace or Workspace(dataset)
    specs = dataset.benchmark_specs()
    kinds = {s.domain.kind for s in specs}
    missing = [k.value for k in BENCHMARK_KINDS if k not in kinds]
    if missing:
        raise ValidationError(f"benchmark is missing domains: {missing}")
    domains = {}
    tests = {}
    for kind in BENCHMARK_KINDS:
        ks = [s for s in specs if s.domain.kind is kind]
        vals = np.array([ws.dsc(profile, dataset.case(s.id)) for s in ks])
        domains[kind.value] = {"n": int(vals.size), "mean": float(vals.mean()),
                               "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
        if kind is DomainKind.COMMON:
            continue
        twins = np.array([ws.dsc(profile, dataset.variant(s.id, DomainTag(DomainKind.COMMON)))
                          for s in ks])
        drop = float(np.mean(twins - vals))
        try:
            t = _tr(wilcoxon_signed_rank(twins, vals, alternative="greater"))
        except (ValidationError, NumericError):
            t = {"statistic": 0.0, "p_value": 1.0, "method": "wilcoxon-degenerate"}
        tests[kind.value] = {**t, "mean_drop": drop, "n": int(vals.size)}
    levels = sorted({float(l) for l in dataset.config.noise_levels})
    patients = [s for s in specs if s.domain.kind is DomainKind.RPV_NOISY]
    groups = [[ws.dsc(profile, dataset.variant(s.id, DomainTag(DomainKind.RPV_NOISY, lvl)))
               for s in patients] for lvl in levels]
    try:
        anova = _tr(anova_oneway(groups))
    except ValidationError:
        anova = {"statistic": 0.0, "p_value": 1.0, "method": "anova-degenerate"}
    return {"profile": profile.name, "family": profile.family.value, "domains": domains,
            "wilcoxon_vs_common": tests,
            "noise_anova": {**anova, "levels": levels,
                            "means": [float(np.mean(g)) for g in groups]}}


# --------------------------------------------------------------------------
# bundles

@dataclass(eq=False)
class QABundle:
    dae: TrainedDAE
    vae: TrainedVAE
    ref: CommonReference
    regressor: FittedRegressor
    profile: SegmenterProfile
    baseline: np.ndarray
    threshold: float = DEFAULT_THRESHOLD
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold must be in (0, 1), got {self.threshold}")
        self.baseline = np.asarray(self.baseline, dtype=np.float64)

    @property
    def detectors(self) -> Detectors:
        return Detectors(self.dae, self.vae, self.ref)

    def digest(self) -> str:
        return hashlib.sha256(dumps_bundle(self)).hexdigest()


@dataclass(frozen=True)
class CasePrediction:
    case_id: str
    features: FeatureVector
    y_pred: float
    flag: Flag
    index: int = 0

    def to_json(self) -> dict:
        return {"case_id": self.case_id, "index": self.index, "y_pred": self.y_pred,
                "flag": self.flag.value, **self.features.to_json()}


def _regression_metrics(y_true: np.ndarray, y_pred: np.ndarray, threshold: float) -> dict:
    out = {"mae": mae(y_true, y_pred),
           "accuracy": float(np.mean((y_true >= threshold) == (y_pred >= threshold)))}
    try:
        out["spearman"] = spearman(y_pred, y_true)
    except ValidationError:
        out["spearman"] = None
    return out


def _safe_pearson(x, y) -> Optional[float]:
    try:
        return pearson(x, y)
    except ValidationError:
        return None


def feature_correlations(rows: Sequence[FeatureRow]) -> dict:
    X, y = design_matrix(rows)
    return {name: _safe_pearson(X[:, i], y)
            for i, name in enumerate(("x_appr", "x_intensity", "x_noise", "x_shape"))}


def commission(profile: SegmenterProfile, dataset: BenchmarkDataset,
               regress_method: str = "bagging", detectors: Optional[Detectors] = None,
               workspace: Optional[Workspace] = None, seed: int = 0,
               threshold: float = DEFAULT_THRESHOLD,
               direct_config: DirectNetConfig = DirectNetConfig()) -> QABundle:
    """Train (or reuse) detectors, fit the regressor on QA_TRAIN, score QA_TEST."""
    if workspace is not None and detectors is None:
        detectors = workspace.detectors
    if detectors is None:
        detectors = train_detectors(dataset, seed)
    ws = workspace or Workspace(dataset, detectors)
    if ws.detectors is None:
        ws.detectors = detectors
    train = dataset.select([Split.QA_TRAIN])
    test = dataset.select([Split.QA_TEST])
    if not train or not test:
        raise ValidationError("dataset needs QA_TRAIN and QA_TEST cases")
    rows_tr, rows_te = ws.rows(profile, train), ws.rows(profile, test)
    X_tr, y_tr = design_matrix(rows_tr)
    X_te, y_te = design_matrix(rows_te)
    reg_seed = _sub_seed(seed, 3)
    if regress_method == "direct_net":
        model = fit_direct_net([dataset.case(s.id).volume for s in train],
                               [ws.segmentation(profile, s.id) for s in train], y_tr,
                               replace(direct_config, seed=reg_seed))
        pred_te = predict_direct_net(model, [dataset.case(s.id).volume for s in test],
                                     [ws.segmentation(profile, s.id) for s in test])
    else:
        model = regress.fit(regress_method, X_tr, y_tr, seed=reg_seed)
        pred_te = regress.predict(model, X_te)
    common = np.array([s.domain.kind is DomainKind.COMMON for s in test])
    baseline = pred_te[common]
    report = {"profile": profile.name, "method": regress_method, "seed": seed,
              "n_train": len(train), "n_test": len(test),
              "train_feature_pearson": feature_correlations(rows_tr),
              "test": _regression_metrics(y_te, pred_te, threshold),
              "baseline": {"n": int(baseline.size),
                           "mean": float(baseline.mean()) if baseline.size else None,
                           "std": float(baseline.std(ddof=1)) if baseline.size > 1 else None}}
    return QABundle(detectors.dae, detectors.vae, detectors.ref, model, profile, baseline,
                    threshold, report)


def predict_case(bundle: QABundle, volume: Volume, s_pred: LabelMap, case_id: str = "",
                 index: int = 0) -> CasePrediction:
    """Predicted DSC and GOOD/POOR flag from the image and segmentation alone."""
    if volume.dims != tuple(bundle.dae.roi) or s_pred.dims != tuple(bundle.vae.roi):
        raise ValidationError(f"inputs {volume.dims}/{s_pred.dims} do not match bundle ROI "
                              f"{tuple(bundle.dae.roi)}")
    feats = extract(volume, s_pred, bundle.dae, bundle.vae, bundle.ref)
    if bundle.regressor.method == "direct_net":
        y = float(predict_direct_net(bundle.regressor, [volume], [s_pred])[0])
    else:
        y = float(regress.predict(bundle.regressor, feats.as_array()[None])[0])
    return CasePrediction(case_id, feats, y, classify(y, bundle.threshold), index)


# --------------------------------------------------------------------------
# drift monitoring

@dataclass(frozen=True)
class DriftReport:
    index: int
    window: int
    baseline_mean: float
    baseline_std: float
    window_mean: float
    test: TestResult
    alarm: bool

    def to_json(self) -> dict:
        return {"index": self.index, "window": self.window, "baseline_mean": self.baseline_mean,
                "baseline_std": self.baseline_std, "window_mean": self.window_mean,
                "test": _tr(self.test), "alarm": self.alarm}


def monitor(baseline, stream: Iterable, window: int = 50, alpha: float = 0.05,
            delta: float = 0.05) -> list[DriftReport]:
    """Sliding-window drift check of predicted DSC against a baseline sample.

    ``baseline`` is a :class:`QABundle` (its stored QA_TEST COMMON
    predictions) or an array.  One report is emitted per stream item once the
    window is full; alarm iff the one-sided rank-sum p < ``alpha`` and the
    mean drop exceeds ``delta``.
    """
    base = baseline.baseline if isinstance(baseline, QABundle) else np.asarray(baseline, float)
    if window < 10:
        raise ValidationError("window must be >= 10")
    if base.size < 2:
        raise ValidationError("baseline needs at least 2 values")
    b_mean, b_std = float(base.mean()), float(base.std(ddof=1))
    values = [float(v.y_pred if isinstance(v, CasePrediction) else v) for v in stream]
    out = []
    for end in range(window, len(values) + 1):
        w = np.array(values[end - window:end])
        try:
            t = rank_sum(w, base, alternative="less")
        except ValidationError:
            t = TestResult(0.0, 1.0, "ranksum-degenerate")
        w_mean = float(w.mean())
        alarm = bool(t.p_value < alpha and (b_mean - w_mean) > delta)
        out.append(DriftReport(end - 1, window, b_mean, b_std, w_mean, t, alarm))
    return out


# --------------------------------------------------------------------------
# persistence

def _bundle_parts(bundle: QABundle) -> tuple[dict, dict]:
    dae_meta, dae_arr = bundle.dae.to_arrays()
    vae_meta, vae_arr = bundle.vae.to_arrays()
    reg_meta, reg_arr = bundle.regressor.to_arrays()
    meta = {"dae": dae_meta, "vae": vae_meta, "regressor": reg_meta,
            "profile": bundle.profile.to_json(), "threshold": bundle.threshold,
            "ref_intensity_mean": bundle.ref.intensity_mean, "report": bundle.report}
    arrays = {**_container.nest("dae", dae_arr), **_container.nest("vae", vae_arr),
              **_container.nest("reg", reg_arr), "ref.latents": bundle.ref.latents,
              "baseline": bundle.baseline}
    return meta, arrays


def dumps_bundle(bundle: QABundle) -> bytes:
    meta, arrays = _bundle_parts(bundle)
    return _container.dumps(BUNDLE_MAGIC, BUNDLE_VERSION, meta, arrays)


def loads_bundle(blob: bytes) -> QABundle:
    meta, arrays = _container.loads(blob, BUNDLE_MAGIC, BUNDLE_VERSION)
    try:
        dae = model_from_arrays(meta["dae"], _container.unnest("dae", arrays))
        vae = model_from_arrays(meta["vae"], _container.unnest("vae", arrays))
        reg = FittedRegressor.from_arrays(meta["regressor"], _container.unnest("reg", arrays))
        ref = CommonReference(arrays["ref.latents"], float(meta["ref_intensity_mean"]))
        return QABundle(dae, vae, ref, reg, SegmenterProfile.from_json(meta["profile"]),
                        arrays["baseline"], float(meta["threshold"]), meta["report"])
    except KeyError as exc:
        raise FormatError(f"bundle is missing {exc}") from exc


def save_bundle(bundle: QABundle, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps_bundle(bundle))
    return path


def load_bundle(path) -> QABundle:
    return loads_bundle(Path(path).read_bytes())


# --------------------------------------------------------------------------
# bank evaluation

def _targeted_rows(rows: Sequence[FeatureRow], kinds: set[str]) -> list[FeatureRow]:
    return [r for r in rows if r.domain in kinds]


def evaluate_framework(bank: Sequence[SegmenterProfile], dataset: BenchmarkDataset,
                       detectors: Optional[Detectors] = None,
                       methods: Sequence[str] = regress.METHODS, seed: int = 0,
                       workspace: Optional[Workspace] = None,
                       threshold: float = DEFAULT_THRESHOLD,
                       direct_config: DirectNetConfig = DirectNetConfig()) -> dict:
    """QA_TEST MAE per profile and method, threshold accuracy and correlations."""
    if not bank:
        raise ValidationError("empty profile bank")
    for m in methods:
        if m not in regress.METHODS:
            raise ValidationError(f"unknown method {m!r}")
    if workspace is not None and detectors is None:
        detectors = workspace.detectors
    if detectors is None:
        detectors = train_detectors(dataset, seed)
    ws = workspace or Workspace(dataset, detectors)
    if ws.detectors is None:
        ws.detectors = detectors
    train = dataset.select([Split.QA_TRAIN])
    test = dataset.select([Split.QA_TEST])
    per_profile = []
    for profile in bank:
        rows_tr, rows_te = ws.rows(profile, train), ws.rows(profile, test)
        X_tr, y_tr = design_matrix(rows_tr)
        X_te, y_te = design_matrix(rows_te)
        entry = {"profile": profile.name, "family": profile.family.value, "methods": {}}
        for method in methods:
            bundle_seed = _sub_seed(seed, 3)
            if method == "direct_net":
                model = fit_direct_net([dataset.case(s.id).volume for s in train],
                                       [ws.segmentation(profile, s.id) for s in train], y_tr,
                                       replace(direct_config, seed=bundle_seed))
                pred = predict_direct_net(model, [dataset.case(s.id).volume for s in test],
                                          [ws.segmentation(profile, s.id) for s in test])
            else:
                model = regress.fit(method, X_tr, y_tr, seed=bundle_seed)
                pred = regress.predict(model, X_te)
            entry["methods"][method] = _regression_metrics(y_te, pred, threshold)
        cc = _targeted_rows(rows_te, {"COMMON", "CE"})
        cn = _targeted_rows(rows_te, {"COMMON", "RPV_NOISY"})
        Xc, yc = design_matrix(cc)
        Xn, yn = design_matrix(cn)
        Xa, ya = design_matrix(rows_te)
        entry["correlations"] = {
            "intensity_common_ce": _safe_pearson(Xc[:, 1], yc),
            "noise_common_rpv": _safe_pearson(Xn[:, 2], yn),
            "shape_all": _safe_pearson(Xa[:, 3], ya)}
        entry["dsc_test_mean"] = float(y_te.mean())
        per_profile.append(entry)
        logger.info("evaluated %s", profile.name)
    summary_methods = {}
    for method in methods:
        maes = np.array([p["methods"][method]["mae"] for p in per_profile])
        accs = np.array([p["methods"][method]["accuracy"] for p in per_profile])
        summary_methods[method] = {"mean_mae": float(maes.mean()),
                                   "std_mae": float(maes.std(ddof=1)) if maes.size > 1 else 0.0,
                                   "mean_accuracy": float(accs.mean())}
    return {"n_profiles": len(bank), "threshold": threshold, "seed": seed,
            "n_train": len(train), "n_test": len(test),
            "profiles": per_profile, "methods": summary_methods}


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
