import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtspine import datagen
from mtspine.datagen import (
    BoneQuality,
    DatasetError,
    DecomposedLabel,
    PhantomSpec,
    balance_subsample,
    decompose_label,
    generate_phantoms,
    recompose_label,
    threshold_crop,
)

SMALL = ((6, 2, 2), (4, 3, 3), (4, 3, 3), (4, 3, 3))


def test_label_bijection():
    table = {BoneQuality.NORMAL: (0, 0), BoneQuality.BLASTIC: (1, 0),
             BoneQuality.LYTIC: (0, 1), BoneQuality.MIXED: (1, 1)}
    for bq, (b, ly) in table.items():
        d = decompose_label(bq)
        assert (d.blastic, d.lytic) == (b, ly)
        assert recompose_label(d) == bq
    for b in (0, 1):
        for ly in (0, 1):
            assert decompose_label(recompose_label(DecomposedLabel(b, ly))) == DecomposedLabel(b, ly)


def test_empty_spec_gives_empty_list():
    assert generate_phantoms(PhantomSpec(counts=((0, 0, 0),) * 4)) == []


def test_generation_is_deterministic():
    a = generate_phantoms(PhantomSpec(seed=3, counts=SMALL))
    b = generate_phantoms(PhantomSpec(seed=3, counts=SMALL))
    c = generate_phantoms(PhantomSpec(seed=4, counts=SMALL))
    assert len(a) == sum(map(sum, SMALL))
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert (x.bq_label, x.pi_label, x.patient_id, x.vertebra_id) == \
               (y.bq_label, y.pi_label, y.patient_id, y.vertebra_id)
    assert any(x.image.tobytes() != z.image.tobytes() for x, z in zip(a, c))


def test_counts_grouping_and_ranges():
    spec = PhantomSpec(seed=1, counts=SMALL, slices_per_vertebra=3, vertebrae_per_patient=2)
    samples = generate_phantoms(spec)
    np.testing.assert_array_equal(datagen.class_counts(samples), np.array(SMALL))
    for s in samples:
        assert s.image.dtype == np.float32 and s.image.shape == (64, 64)
        assert s.image.min() >= -1024 and s.image.max() <= 3071
    groups = {}
    for s in samples:
        groups.setdefault((s.patient_id, s.vertebra_id), set()).add((s.bq_label, s.pi_label))
    assert all(len(v) == 1 for v in groups.values())  # one label per vertebra
    per_patient = {}
    for p, v in groups:
        per_patient.setdefault(p, set()).add(v)
    assert max(len(v) for v in per_patient.values()) <= 2


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(counts=((1, 1),) * 4)
    with pytest.raises(ValueError):
        PhantomSpec(counts=((-1, 0, 0),) + ((0, 0, 0),) * 3)
    with pytest.raises(ValueError):
        PhantomSpec(label_noise_rate=1.0)
    with pytest.raises(ValueError, match="limit"):
        generate_phantoms(PhantomSpec(counts=((10, 0, 0),) * 4, max_samples=20))


def oracle_predict(image, mask):
    """Two handcrafted statistics inside the vertebral-body mask."""
    bone = image[mask]
    bright = np.mean(bone > 700) > 0.02
    dark = np.mean(bone < 100) > 0.02
    return recompose_label(DecomposedLabel(int(bright), int(dark)))


@pytest.mark.parametrize("noise_std", [0.0, 20.0])
def test_separability_oracle(noise_std):
    spec = PhantomSpec(seed=7, noise_std=noise_std)
    samples, masks = generate_phantoms(spec, return_masks=True)
    pred = np.array([oracle_predict(s.image, m) for s, m in zip(samples, masks)])
    truth = np.array([s.bq_label for s in samples])
    assert np.mean(pred == truth) >= 0.95


def test_lesions_land_in_posterolateral_sectors():
    counts = ((0, 0, 0), (10, 10, 10), (0, 0, 0), (0, 0, 0))
    samples, masks = generate_phantoms(PhantomSpec(seed=2, counts=counts, noise_std=0.0), return_masks=True)
    for s, m in zip(samples, masks):
        ys, xs = np.nonzero(m)
        cy = (ys.min() + ys.max()) / 2
        lesion = s.image > 700
        ly, lx = np.nonzero(lesion)
        posterior = np.mean(ly > cy + 1)
        if s.pi_label == 0:
            assert posterior < 0.5
        else:
            assert posterior > 0.8
            left, right = np.any(lx < xs.mean()), np.any(lx > xs.mean())
            assert (left and right) == (s.pi_label == 2)


def test_label_noise_rate_is_binomially_plausible():
    counts = ((250, 0, 0), (84, 83, 83), (84, 83, 83), (84, 83, 83))
    samples = generate_phantoms(PhantomSpec(seed=11, counts=counts, label_noise_rate=0.2))
    assert len(samples) == 1000
    flipped = np.mean([s.bq_label != s.clean_bq_label for s in samples])
    assert 0.17 <= flipped <= 0.23
    assert all(s.bq_label in range(4) for s in samples)


def test_crop_single_bright_pixel_fixture():
    img = np.full((64, 64), -1000.0)
    img[10, 10] = 500.0
    crop = threshold_crop(img, 150.0, (32, 32))
    # window centred at (10, 10) clamps to rows/cols 0..31
    assert crop.shape == (32, 32)
    assert np.argwhere(crop == crop.max()).tolist() == [[10, 10]]

    img = np.full((64, 64), -1000.0)
    img[30, 40] = 500.0
    crop = threshold_crop(img, 150.0, (32, 32))
    # top = 30 - 16 = 14, left = 40 - 16 = 24
    assert np.argwhere(crop == crop.max()).tolist() == [[16, 16]]


def test_crop_uses_largest_component():
    img = np.full((64, 64), 0.0)
    img[2:4, 2:4] = 400.0           # 4 pixels
    img[40:50, 44:52] = 400.0       # 80 pixels
    crop = threshold_crop(img, 150.0, (16, 16))
    assert crop.max() > threshold_crop(np.zeros((64, 64)), 150.0, (16, 16)).max()
    # the large blob fills the centre of the window
    assert crop[8, 8] == crop.max()


def test_crop_fallback_and_normalisation():
    air = np.full((64, 64), -1000.0)
    crop = threshold_crop(air, 150.0, (32, 32))
    assert np.all(crop == crop[0, 0])
    assert crop[0, 0] == pytest.approx((-1000 + 1024) / 4095)
    with pytest.raises(ValueError):
        threshold_crop(air, 150.0, (65, 32))


def test_full_scale_crop_shape():
    img = np.full((512, 512), -1000.0)
    img[200:300, 220:330] = 400.0
    assert threshold_crop(img, 150.0, (224, 224)).shape == (224, 224)


@settings(max_examples=40, deadline=None)
@given(st.integers(16, 48), st.integers(16, 48), st.integers(0, 2**32 - 1))
def test_crop_shape_and_range(h, w, seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(-1500, 4000, size=(h, w))
    out = threshold_crop(img, 150.0, (min(h, 16), min(w, 16)))
    assert out.shape == (min(h, 16), min(w, 16))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_prepare_inputs_shape():
    samples = generate_phantoms(PhantomSpec(seed=0, counts=SMALL))
    x = datagen.prepare_inputs(samples, 150.0, (32, 32))
    assert x.shape == (len(samples), 1, 32, 32) and x.dtype == np.float64


def _toy(labels):
    img = np.zeros((16, 16), np.float32)
    return [datagen.SliceSample(img, c, 0, "p", f"v{i}") for i, c in enumerate(labels)]


def test_balance_subsample_examples():
    samples = _toy([0] * 100 + [3] * 10)
    out = balance_subsample(samples, 10, seed=1)
    assert [s.bq_label for s in out].count(0) == 10 and [s.bq_label for s in out].count(3) == 10
    ids = [int(s.vertebra_id[1:]) for s in out]
    assert ids == sorted(ids)
    assert [s.vertebra_id for s in balance_subsample(samples, 10, seed=1)] == [s.vertebra_id for s in out]
    assert balance_subsample(samples, 1000, seed=1) == samples
    with pytest.raises(ValueError):
        balance_subsample(samples, 0)


def test_dataset_round_trip(tmp_path):
    samples = generate_phantoms(PhantomSpec(seed=2, counts=SMALL))
    datagen.write_dataset(tmp_path, samples)
    back = datagen.read_dataset(tmp_path)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.image, b.image)
        assert (a.bq_label, a.pi_label, a.patient_id, a.vertebra_id) == \
               (b.bq_label, b.pi_label, b.patient_id, b.vertebra_id)
    header = (tmp_path / "manifest.csv").read_text().splitlines()[0]
    assert header == "file,patient_id,vertebra_id,bq_label,pi_label"


def test_slice_file_layout(tmp_path):
    img = np.arange(12, dtype=np.float32).reshape(3, 4) * 10 - 50
    path = tmp_path / "x.mtsl"
    datagen.write_slice(path, img)
    raw = path.read_bytes()
    assert raw[:4] == b"MTSL"
    assert struct.unpack("<III", raw[4:16]) == (1, 3, 4)
    np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f4").reshape(3, 4), img)


def test_corrupt_dataset_errors(tmp_path):
    with pytest.raises(DatasetError):
        datagen.read_dataset(tmp_path)
    path = tmp_path / "bad.mtsl"
    path.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(DatasetError):
        datagen.read_slice(path)
    datagen.write_slice(path, np.zeros((2, 2), np.float32))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DatasetError):
        datagen.read_slice(path)
    (tmp_path / "manifest.csv").write_text("file,patient_id,vertebra_id,bq_label,pi_label\nbad.mtsl,p,v,7,0\n")
    with pytest.raises(DatasetError, match="out of range"):
        datagen.read_dataset(tmp_path)
