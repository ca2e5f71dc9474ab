import numpy as np
import pytest

from segqa.errors import ValidationError
from segqa.grid import STRUCTURES
from segqa.phantom import (BENCHMARK_KINDS, BenchmarkConfig, DomainKind, DomainTag, Family,
                           GridConfig, SegmenterProfile, Split, generate_case, load_benchmark,
                           observe, plan_benchmark, profile_bank, save_benchmark, segment, severity)
from segqa.stats import mean_dsc

SMALL = GridConfig.small()


def _case(kind, param=None, seed=3):
    return generate_case(seed, DomainTag(kind, param), SMALL)


def test_case_is_deterministic_and_well_formed():
    a, b = _case(DomainKind.COMMON), _case(DomainKind.COMMON)
    assert a.equals(b)
    assert a.volume.dims == a.truth.dims == SMALL.roi
    assert a.volume.data.dtype == np.float32 and a.truth.labels.dtype == np.uint8
    assert 0.0 <= a.volume.data.min() and a.volume.data.max() <= 1.0
    assert set(np.unique(a.truth.labels)) == {0, *STRUCTURES}


def test_different_seeds_differ():
    assert not _case(DomainKind.COMMON, seed=1).equals(_case(DomainKind.COMMON, seed=2))


def test_domain_tag_defaults_and_validation():
    assert DomainTag(DomainKind.CE).parameter == 0.15
    assert DomainTag(DomainKind.COMMON).parameter is None
    with pytest.raises(ValidationError):
        DomainTag(DomainKind.COMMON, 1.0)
    assert DomainTag.from_json(DomainTag(DomainKind.AV, 2.0).to_json()) == DomainTag(DomainKind.AV, 2.0)


def test_domains_shift_the_observables():
    common = observe(*_pair(_case(DomainKind.COMMON)))
    ce = observe(*_pair(_case(DomainKind.CE, 0.2)))
    noisy = observe(*_pair(_case(DomainKind.RPV_NOISY, 8.0)))
    mip = observe(*_pair(_case(DomainKind.MIP)))
    assert ce["offset"] > common["offset"] + 0.1
    assert noisy["noise"] > 3 * common["noise"]
    assert mip["saturated"] > common["saturated"]


def _pair(rec):
    return rec.volume, rec.truth


def test_prone_and_av_metadata():
    assert _case(DomainKind.PRONE).metadata["flipped"] is True
    av = _case(DomainKind.AV, 2.0)
    assert 6.0 <= av.metadata["dome_lift_mm"] <= 12.0


def test_same_patient_across_domains():
    # CE only changes intensities, so the anatomy is that of the COMMON twin
    a, b = _case(DomainKind.COMMON), _case(DomainKind.CE, 0.1)
    assert np.array_equal(a.truth.labels, b.truth.labels)


def test_plan_counts_and_splits():
    cfg = BenchmarkConfig(scale=0.5)
    ds = plan_benchmark(cfg)
    counts = cfg.domain_counts()
    for k in BENCHMARK_KINDS:
        assert len(ds.select(None, [k])) - (cfg.seg_train_count() if k is DomainKind.COMMON else 0) \
            == counts[k]
    qa_cases = ds.benchmark_specs()
    test = ds.select([Split.QA_TEST])
    assert abs(len(test) - len(qa_cases) / 3) <= 1
    noisy_test = {s.domain.parameter for s in test if s.domain.kind is DomainKind.RPV_NOISY}
    assert len(noisy_test) >= 3


def test_config_json_round_trip():
    cfg = BenchmarkConfig(scale=0.25, seed=5, grid=SMALL, counts={"COMMON": 3, "CE": 2})
    assert BenchmarkConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValidationError):
        BenchmarkConfig(counts={"CE": 2}).domain_counts()


def test_save_load_benchmark_bit_exact(tmp_path):
    cfg = BenchmarkConfig(seed=2, grid=SMALL, counts={"COMMON": 2, "CE": 1, "RPV_NOISY": 1},
                          seg_train=1)
    ds = plan_benchmark(cfg)
    save_benchmark(ds, tmp_path)
    back = load_benchmark(tmp_path)
    assert back.config == cfg
    assert [s.id for s in back.specs] == [s.id for s in ds.specs]
    for s in ds.specs:
        assert back.case(s.id).equals(ds.case(s.id))
    with pytest.raises(ValidationError):
        load_benchmark(tmp_path / "missing")


def test_profile_bank_layout():
    bank = profile_bank(19)
    assert len(bank) == 19 and len({p.name for p in bank}) == 19
    assert bank[0].family is Family.ATLAS and bank[-1].family is Family.ROBUST
    fams = {p.family for p in bank}
    assert fams == {Family.ATLAS, Family.THRESHOLD, Family.ROBUST}
    assert profile_bank(19) == bank
    assert SegmenterProfile.from_json(bank[3].to_json()) == bank[3]
    with pytest.raises(ValidationError):
        SegmenterProfile(Family.ATLAS, intensity_sensitivity=-1.0)


def test_segment_deterministic_and_degrades_on_target_domain():
    atlas = profile_bank(19)[0]
    common, ce = _case(DomainKind.COMMON), _case(DomainKind.CE, 0.25)
    s1 = segment(atlas, common.volume, common.truth)
    assert np.array_equal(s1.labels, segment(atlas, common.volume, common.truth).labels)
    d_common = mean_dsc(s1, common.truth)
    d_ce = mean_dsc(segment(atlas, ce.volume, ce.truth), ce.truth)
    assert d_common > d_ce + 0.1
    assert severity(atlas, ce.volume, ce.truth)["intensity"] > \
        severity(atlas, common.volume, common.truth)["intensity"]


def test_threshold_profile_breaks_under_noise():
    thr = next(p for p in profile_bank(19) if p.family is Family.THRESHOLD)
    quiet, loud = _case(DomainKind.RPV_NOISY, 0.01), _case(DomainKind.RPV_NOISY, 8.0)
    assert mean_dsc(segment(thr, quiet.volume, quiet.truth), quiet.truth) > \
        mean_dsc(segment(thr, loud.volume, loud.truth), loud.truth) + 0.1


def test_robust_profile_ignores_imaging():
    rob = profile_bank(19)[-1]
    quiet, loud = _case(DomainKind.RPV_NOISY, 0.01), _case(DomainKind.RPV_NOISY, 8.0)
    a = segment(rob, quiet.volume, quiet.truth)
    b = segment(rob, loud.volume, loud.truth)
    assert np.array_equal(a.labels, b.labels)
    assert 0.78 <= mean_dsc(a, quiet.truth) <= 0.96


def test_segment_rejects_mismatched_dims():
    c = _case(DomainKind.COMMON)
    other = generate_case(0, DomainTag(DomainKind.COMMON), GridConfig())
    with pytest.raises(ValidationError):
        segment(profile_bank(1)[0], c.volume, other.truth)
