import numpy as np
import pytest
from hypothesis import given, strategies as st

from segqa import perturb
from segqa.errors import ValidationError
from segqa.grid import LabelMap, Volume


def _phantom(n=16):
    x, y, z = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
    r = np.sqrt((x - n / 2) ** 2 + (y - n / 2) ** 2 + (z - n / 2) ** 2)
    lab = np.where(r < n / 4, 1, 0).astype(np.uint8)
    lab[r < n / 8] = 9
    vol = np.where(lab > 0, 0.5, 0.2) + 0.05 * (lab == 9)
    return Volume(vol.astype(np.float32)), LabelMap(lab)


def test_poisson_sample_moments():
    rng = np.random.default_rng(0)
    for level in (32, 128, 255):
        for n in (1, 4, 8):
            s = perturb.poisson_sample(np.full(100_000, level), n, rng)
            sigma = np.sqrt(n * level / s.size)
            assert abs(s.mean() - level) < 3 * sigma
            assert abs(s.var() / (n * level) - 1) < 0.05


def test_poisson_noise_deterministic_and_bounded():
    vol, _ = _phantom()
    a = perturb.add_poisson_noise(vol, 4.0, seed=3)
    b = perturb.add_poisson_noise(vol, 4.0, seed=3)
    assert np.array_equal(a.data, b.data)
    assert 0.0 <= a.data.min() and a.data.max() <= 1.0
    with pytest.raises(ValidationError):
        perturb.add_poisson_noise(vol, 0.0, 1)


@given(st.floats(-0.3, 0.3))
def test_contrast_enhance_inside_mask(delta):
    vol, lab = _phantom(24)
    out = perturb.contrast_enhance(vol, lab.foreground(), delta)
    inside = lab.labels > 0
    want = np.clip(vol.data[inside].astype(np.float64) + delta, 0, 1)
    assert np.allclose(out.data[inside], want, atol=1e-6)
    far = np.ones_like(inside)
    far[1:-1, 1:-1, 1:-1] = False
    assert np.allclose(out.data[far], vol.data[far], atol=1e-6)


def test_contrast_rejects_empty_mask():
    vol, _ = _phantom()
    with pytest.raises(ValidationError):
        perturb.contrast_enhance(vol, np.zeros(vol.dims, bool), 0.1)


def test_flip_is_involution():
    vol, lab = _phantom()
    v2, l2 = perturb.flip_axis(*perturb.flip_axis(vol, lab, "y"), "y")
    assert np.array_equal(v2.data, vol.data) and np.array_equal(l2.labels, lab.labels)
    with pytest.raises(ValidationError):
        perturb.flip_axis(vol, lab, "w")


def test_resample_degrade_keeps_dims_and_labels():
    vol, lab = _phantom()
    v2, l2 = perturb.resample_degrade(vol, lab, 2.0)
    assert v2.dims == vol.dims and l2 is lab
    assert not np.array_equal(v2.data, vol.data)


def test_artifact_saturates_centre():
    vol, _ = _phantom()
    out = perturb.insert_artifact(vol, 5, center=(8, 8, 8))
    assert out.data[8, 8, 8] == 1.0
    assert np.array_equal(out.data, perturb.insert_artifact(vol, 5, center=(8, 8, 8)).data)


@given(st.floats(0.0, 4.0), st.integers(0, 100))
def test_displacement_field_peak(mag, seed):
    f = perturb.displacement_field((8, 8, 8), mag, seed)
    assert f.shape == (3, 8, 8, 8)
    assert np.sqrt((f ** 2).sum(axis=0)).max() == pytest.approx(mag, abs=1e-9)


def test_deform_zero_is_identity_and_labels_valid():
    vol, lab = _phantom()
    v0, l0 = perturb.deform(vol, lab, 0.0, 1)
    assert v0 is vol and l0 is lab
    v1, l1 = perturb.deform(vol, lab, 2.0, 1)
    assert set(np.unique(l1.labels)) <= set(np.unique(lab.labels))
    with pytest.raises(ValidationError):
        perturb.deform(vol, lab, -1.0, 1)
