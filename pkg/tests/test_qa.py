import numpy as np
import pytest

from segqa import qa
from segqa.errors import FormatError, ValidationError
from segqa.phantom import Split, profile_bank


@pytest.fixture(scope="module")
def bundle(small_dataset, small_detectors):
    return qa.commission(profile_bank(19)[0], small_dataset, "ols", detectors=small_detectors)


def test_classify_threshold():
    assert qa.classify(0.4) is qa.Flag.GOOD
    assert qa.classify(0.399) is qa.Flag.POOR
    assert qa.classify(0.6, threshold=0.7) is qa.Flag.POOR


def test_monitor_quiet_on_stable_stream():
    r = np.random.default_rng(0)
    base = r.normal(0.85, 0.03, 60)
    stream = r.normal(0.85, 0.03, 149)
    reports = qa.monitor(base, stream, window=50)
    assert len(reports) == 100
    assert np.mean([rep.alarm for rep in reports]) <= 0.1
    assert reports[0].index == 49 and reports[0].window == 50


def test_monitor_alarms_after_shift():
    r = np.random.default_rng(1)
    base = r.normal(0.85, 0.03, 60)
    stream = np.concatenate([r.normal(0.85, 0.03, 50), r.normal(0.65, 0.03, 60)])
    reports = qa.monitor(base, stream, window=50)
    first = next(rep.index for rep in reports if rep.alarm)
    assert 50 <= first < 100
    assert not any(rep.alarm for rep in reports if rep.index < 50)


def test_monitor_needs_drop_as_well_as_significance():
    # a tiny but consistent shift is significant yet below the drop margin
    base = np.linspace(0.80, 0.90, 60)
    reports = qa.monitor(base, base[:50] - 0.01, window=50)
    assert reports[0].test.p_value < 0.05
    assert not reports[0].alarm


def test_monitor_validation():
    with pytest.raises(ValidationError):
        qa.monitor([0.8, 0.9], [0.8] * 20, window=5)
    with pytest.raises(ValidationError):
        qa.monitor([0.8], [0.8] * 20)
    assert qa.monitor([0.8, 0.9], [0.8] * 20, window=50) == []


def test_commission_report(bundle, small_dataset):
    rep = bundle.report
    assert rep["n_train"] == len(small_dataset.select([Split.QA_TRAIN]))
    assert rep["n_test"] == len(small_dataset.select([Split.QA_TEST]))
    assert 0 <= rep["test"]["mae"] < 0.3
    assert bundle.baseline.size == rep["baseline"]["n"] > 0


def test_predict_case(bundle, small_dataset):
    rec = small_dataset.records([Split.QA_TEST])[0]
    pred = qa.predict_case(bundle, rec.volume, rec.truth, case_id=rec.id, index=3)
    assert 0 <= pred.y_pred <= 1 and pred.flag is qa.classify(pred.y_pred)
    js = pred.to_json()
    assert js["case_id"] == rec.id and js["index"] == 3 and "x_shape" in js
    with pytest.raises(ValidationError):
        qa.predict_case(bundle, rec.volume.with_data(rec.volume.data[:8]), rec.truth)


def test_monitor_accepts_bundle_and_predictions(bundle, small_dataset):
    recs = small_dataset.records([Split.QA_TEST])
    preds = [qa.predict_case(bundle, r.volume, r.truth) for r in recs] * 4
    reports = qa.monitor(bundle, preds, window=10)
    assert len(reports) == len(preds) - 9


def test_bundle_round_trip(bundle, small_dataset, tmp_path):
    path = qa.save_bundle(bundle, tmp_path / "b.bin")
    back = qa.load_bundle(path)
    assert back.digest() == bundle.digest()
    rec = small_dataset.records([Split.QA_TEST])[1]
    a = qa.predict_case(bundle, rec.volume, rec.truth)
    b = qa.predict_case(back, rec.volume, rec.truth)
    assert a == b
    with pytest.raises(FormatError):
        qa.loads_bundle(b"garbage")


def test_commission_is_deterministic(bundle, small_dataset, small_detectors):
    again = qa.commission(profile_bank(19)[0], small_dataset, "ols", detectors=small_detectors)
    assert again.digest() == bundle.digest()


def test_run_benchmark_structure(small_dataset):
    res = qa.run_benchmark(profile_bank(19)[0], small_dataset)
    assert set(res["domains"]) == {"COMMON", "AV", "CE", "MIP", "PRONE", "RPV_NOISY"}
    assert set(res["wilcoxon_vs_common"]) == set(res["domains"]) - {"COMMON"}
    assert res["domains"]["CE"]["mean"] < res["domains"]["COMMON"]["mean"]
    assert len(res["noise_anova"]["means"]) == len(res["noise_anova"]["levels"])


def test_evaluate_framework_small(small_dataset, small_detectors):
    out = qa.evaluate_framework(profile_bank(3), small_dataset, small_detectors,
                                methods=("ols", "shape_only"))
    assert out["n_profiles"] == 3 and set(out["methods"]) == {"ols", "shape_only"}
    assert all(set(p["correlations"]) == {"intensity_common_ce", "noise_common_rpv", "shape_all"}
               for p in out["profiles"])
    with pytest.raises(ValidationError):
        qa.evaluate_framework([], small_dataset, small_detectors)
    with pytest.raises(ValidationError):
        qa.evaluate_framework(profile_bank(1), small_dataset, small_detectors, methods=("x",))
