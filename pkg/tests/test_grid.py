import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from segqa.errors import FormatError, ValidationError
from segqa.grid import (NUM_LABELS, LabelMap, OneHotMap, Volume, crop_roi, label_bbox, normalize,
                        one_hot, preprocess, read_labelmap, read_volume, resample, roi_window,
                        write_labelmap, write_volume)


def test_volume_validation():
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    v = Volume(np.zeros((2, 3, 4)))
    assert v.dims == (2, 3, 4) and v.data.dtype == np.float32
    assert not v.data.flags.writeable


def test_labelmap_rejects_out_of_range():
    with pytest.raises(ValidationError):
        LabelMap(np.full((2, 2, 2), NUM_LABELS, np.uint8))


def test_one_hot_round_trip(rng):
    lab = rng.integers(0, NUM_LABELS, (3, 4, 5)).astype(np.uint8)
    oh = one_hot(lab)
    assert oh.shape == (NUM_LABELS, 3, 4, 5)
    assert np.all(oh.sum(axis=0) == 1)
    assert np.array_equal(OneHotMap.from_labels(lab).argmax().labels, lab)


def test_resample_identity_and_grid_size():
    v = Volume(np.arange(24, dtype=np.float32).reshape(2, 3, 4), (2.0, 2.0, 2.0))
    assert resample(v, (2.0, 2.0, 2.0)) is v
    up = resample(v, (1.0, 1.0, 1.0))
    assert up.dims == (4, 6, 8)
    # first voxel centres coincide and linear interpolation is exact on a ramp
    assert up.data[0, 0, 0] == v.data[0, 0, 0]
    assert up.data[1, 0, 0] == pytest.approx(0.5 * (v.data[0, 0, 0] + v.data[1, 0, 0]))


def test_resample_labels_nearest(rng):
    lab = LabelMap(rng.integers(0, NUM_LABELS, (4, 4, 4)).astype(np.uint8), (2.0, 2.0, 2.0))
    up = resample(lab, (1.0, 1.0, 1.0))
    assert set(np.unique(up.labels)) <= set(np.unique(lab.labels))
    assert np.array_equal(up.labels[::2, ::2, ::2], lab.labels)


@given(st.tuples(st.integers(0, 9), st.integers(0, 9), st.integers(0, 9)),
       st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)))
def test_crop_centres_bbox(corner, size):
    lab = np.zeros((14, 14, 14), np.uint8)
    lo = np.array(corner)
    hi = np.minimum(lo + np.array(size), 14)
    lab[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 3
    vol = Volume(lab.astype(np.float32))
    v, l = crop_roi(vol, LabelMap(lab), (8, 8, 8), pad_value=-1.0)
    assert v.dims == l.dims == (8, 8, 8)
    assert np.count_nonzero(l.labels) == np.count_nonzero(lab)
    blo, bhi = label_bbox(l.labels)
    # remaining margin is split evenly (left side gets the smaller half)
    left, right = blo, 7 - bhi
    assert np.all(np.abs(left - right) <= 1) and np.all(left <= right)


def test_crop_pads_outside_scan():
    lab = np.zeros((4, 4, 4), np.uint8)
    lab[0, 0, 0] = 1
    v, l = crop_roi(Volume(np.ones((4, 4, 4))), LabelMap(lab), (6, 6, 6), pad_value=0.0)
    assert v.data.sum() < 6 ** 3
    assert l.labels.sum() == 1


def test_roi_window_and_empty():
    with pytest.raises(ValidationError):
        roi_window(np.zeros((3, 3, 3), np.uint8), (2, 2, 2))


def test_normalize_bounds_and_constant():
    v = normalize(Volume(np.linspace(-5, 7, 27).reshape(3, 3, 3)))
    assert v.data.min() == 0.0 and v.data.max() == 1.0
    assert np.all(normalize(Volume(np.full((2, 2, 2), 3.0))).data == 0)


def test_preprocess_output_shape():
    lab = np.zeros((20, 20, 20), np.uint8)
    lab[8:12, 8:12, 8:12] = 2
    v, l = preprocess(Volume(np.random.default_rng(0).random((20, 20, 20)), (1.0, 1.0, 1.0)),
                      LabelMap(lab, (1.0, 1.0, 1.0)), (2.0, 2.0, 2.0), (8, 8, 8))
    assert v.dims == l.dims == (8, 8, 8) and v.spacing == (2.0, 2.0, 2.0)
    assert 0.0 <= v.data.min() and v.data.max() <= 1.0


def test_file_round_trip_bit_exact(tmp_path, rng):
    vol = Volume(rng.normal(size=(5, 6, 7)).astype(np.float32), (0.7, 1.5, 2.5))
    lab = LabelMap(rng.integers(0, NUM_LABELS, (5, 6, 7)).astype(np.uint8), (0.7, 1.5, 2.5))
    write_volume(vol, tmp_path / "a.vol")
    write_labelmap(lab, tmp_path / "a.lab")
    v2, l2 = read_volume(tmp_path / "a.vol"), read_labelmap(tmp_path / "a.lab")
    assert v2.data.tobytes() == vol.data.tobytes() and v2.spacing == vol.spacing
    assert l2.labels.tobytes() == lab.labels.tobytes() and l2.spacing == lab.spacing
    # payload is x-fastest
    raw = np.frombuffer((tmp_path / "a.vol.raw").read_bytes(), "<f4")
    assert raw[1] == vol.data[1, 0, 0]


def test_reader_rejects_bad_files(tmp_path):
    vol = Volume(np.zeros((2, 2, 2)))
    write_volume(vol, tmp_path / "v")
    with pytest.raises(FormatError):
        read_labelmap(tmp_path / "v")
    (tmp_path / "v.raw").write_bytes(b"\0" * 7)
    with pytest.raises(FormatError):
        read_volume(tmp_path / "v")
    hdr = json.loads((tmp_path / "v").read_text())
    hdr["dims"] = [2, 2]
    (tmp_path / "v").write_text(json.dumps(hdr))
    with pytest.raises(FormatError):
        read_volume(tmp_path / "v")
    (tmp_path / "junk").write_text("{not json")
    with pytest.raises(FormatError):
        read_volume(tmp_path / "junk")
    write_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "n")
    (tmp_path / "n.raw").write_bytes(np.full(8, np.nan, "<f4").tobytes())
    with pytest.raises(FormatError):
        read_volume(tmp_path / "n")
    write_labelmap(LabelMap(np.zeros((2, 2, 2), np.uint8)), tmp_path / "l")
    (tmp_path / "l.raw").write_bytes(bytes([12] * 8))
    with pytest.raises(FormatError):
        read_labelmap(tmp_path / "l")
