import numpy as np
import pytest

from lesionactivity.volumes import (
    DegenerateInputError,
    ScanPair,
    Volume,
    filter_small_lesions,
    resample,
    standardize,
    _zscore,
)

from oracles import flood_fill_components


def random_volume(rng, shape=(12, 13, 11), kind="intensity", spacing=(1.0, 1.0, 1.0)):
    if kind == "label":
        data = (rng.random(shape) < 0.3).astype(np.uint8)
    elif kind == "probability":
        data = rng.random(shape).astype(np.float32)
    else:
        data = rng.normal(size=shape).astype(np.float32)
    return Volume(data, spacing, kind=kind)


class TestVolumeInvariants:
    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValueError, match="spacing"):
            Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))

    def test_rejects_wrong_ndim(self):
        with pytest.raises(ValueError, match="3D"):
            Volume(np.zeros((2, 2)), (1, 1, 1))

    def test_rejects_out_of_range_probability(self):
        with pytest.raises(ValueError, match="probability"):
            Volume(np.full((2, 2, 2), 1.5), (1, 1, 1), kind="probability")

    def test_rejects_nonbinary_label(self):
        with pytest.raises(ValueError, match="binary"):
            Volume(np.full((2, 2, 2), 2), (1, 1, 1), kind="label")

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            Volume(np.zeros((2, 2, 2)), (1, 1, 1), kind="mask")

    def test_data_is_frozen_and_detached(self):
        src = np.ones((3, 3, 3), dtype=np.float32)
        v = Volume(src, (1, 1, 1))
        assert not v.data.flags.writeable
        src[0, 0, 0] = 99.0  # caller's array stays mutable, volume unaffected
        assert v.data[0, 0, 0] == 1.0

    def test_voxel_volume_ml(self):
        v = Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0))
        assert v.voxel_volume_ml == pytest.approx(0.001)
        v2 = Volume(np.zeros((2, 2, 2)), (2.0, 2.0, 2.5))
        assert v2.voxel_volume_ml == pytest.approx(0.01)


class TestScanPair:
    def test_requires_matching_geometry(self):
        a = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
        b = Volume(np.zeros((4, 4, 5)), (1, 1, 1))
        with pytest.raises(ValueError, match="share shape and spacing"):
            ScanPair(a, b)

    def test_mask_kinds_checked(self):
        a = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
        with pytest.raises(ValueError, match="label"):
            ScanPair(a, a, activity_masks=(a,))

    def test_empty_activity_masks_allowed(self):
        a = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
        pair = ScanPair(a, a)
        assert pair.activity_masks == ()


class TestResample:
    def test_factor_two_upsampling_shape(self):
        v = Volume(np.random.default_rng(0).random((100, 100, 100)), (2, 2, 2))
        out = resample(v, (1, 1, 1))
        assert out.shape == (200, 200, 200)
        assert out.spacing == (1.0, 1.0, 1.0)

    def test_identity_is_bit_exact(self):
        rng = np.random.default_rng(1)
        v = random_volume(rng)
        out = resample(v, v.spacing)
        assert out.data is not None
        np.testing.assert_array_equal(out.data, v.data)

    def test_constant_stays_constant(self):
        v = Volume(np.full((10, 11, 12), 5.0, dtype=np.float32), (2.0, 1.5, 1.0))
        out = resample(v, (1.0, 1.0, 0.7))
        np.testing.assert_array_equal(out.data, np.float32(5.0))

    def test_range_bounds_preserved(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            v = random_volume(rng, shape=(9, 14, 11), spacing=(1.3, 0.8, 2.0))
            out = resample(v, tuple(rng.uniform(0.5, 2.5, 3)))
            assert out.data.min() >= v.data.min()
            assert out.data.max() <= v.data.max()

    def test_label_uses_nearest_and_stays_binary(self):
        rng = np.random.default_rng(3)
        v = random_volume(rng, kind="label", spacing=(2, 2, 2))
        out = resample(v, (1.1, 0.9, 1.4))
        assert out.kind == "label"
        assert set(np.unique(out.data)) <= {0, 1}

    def test_rejects_nonpositive_target(self):
        v = random_volume(np.random.default_rng(4))
        with pytest.raises(ValueError, match="target_spacing"):
            resample(v, (1.0, -1.0, 1.0))


class TestStandardize:
    def test_three_level_volume_zero_mean_and_noop_clip(self):
        # equally many -1, 0, +1 voxels: percentiles land on the extreme
        # values themselves, so the clip changes nothing and the mean is 0
        vals = np.repeat(np.array([-1.0, 0.0, 1.0]), 500)
        rng = np.random.default_rng(5)
        rng.shuffle(vals)
        v = Volume(vals.reshape(10, 10, 15), (1, 1, 1))
        out = standardize(v)
        assert abs(float(out.data.mean())) < 1e-6
        expected_extreme = 1.0 / np.std([-1.0, 0.0, 1.0])
        assert float(out.data.max()) == pytest.approx(expected_extreme, abs=1e-6)
        assert float(out.data.min()) == pytest.approx(-expected_extreme, abs=1e-6)

    def test_zscore_moments(self):
        rng = np.random.default_rng(6)
        for _ in range(3):
            data = rng.gamma(2.0, 3.0, size=(12, 12, 12))
            z = _zscore(data)
            assert abs(z.mean()) < 1e-5
            assert abs(z.std() - 1.0) < 1e-5

    def test_matches_independent_formula(self):
        rng = np.random.default_rng(7)
        data = rng.normal(3.0, 2.5, size=(14, 12, 10)).astype(np.float32)
        v = Volume(data, (1, 1, 1))
        out = standardize(v)
        x = data.astype(np.float64)
        z = (x - x.mean()) / x.std()
        lo, hi = np.percentile(z, [1, 99])
        np.testing.assert_array_equal(out.data, np.clip(z, lo, hi).astype(np.float32))

    def test_double_application_nearly_idempotent(self):
        rng = np.random.default_rng(8)
        v = Volume(rng.normal(0, 1, size=(16, 16, 16)).astype(np.float32), (1, 1, 1))
        once = standardize(v)
        twice = standardize(once)
        moved = np.abs(twice.data.astype(np.float64) - once.data.astype(np.float64))
        assert (moved > 0.1).mean() <= 0.02

    def test_constant_volume_raises(self):
        v = Volume(np.full((5, 5, 5), 3.0), (1, 1, 1))
        with pytest.raises(DegenerateInputError):
            standardize(v)

    def test_rejects_label(self):
        v = Volume(np.zeros((5, 5, 5), dtype=np.uint8), (1, 1, 1), kind="label")
        with pytest.raises(ValueError, match="intensity"):
            standardize(v)


def _blob_mask(shape, voxels):
    data = np.zeros(shape, dtype=np.uint8)
    for x, y, z in voxels:
        data[x, y, z] = 1
    return data


class TestFilterSmallLesions:
    def test_boundary_at_default_threshold(self):
        # 1 mm^3 voxels: 9 voxels = 0.009 ml -> removed, 10 voxels = 0.010 ml -> kept
        nine = [(0, 0, z) for z in range(9)]
        ten = [(5, 5, z) for z in range(10)]
        mask = Volume(_blob_mask((10, 10, 12), nine + ten), (1, 1, 1), kind="label")
        out = filter_small_lesions(mask)
        assert out.data[0, 0, 0] == 0
        assert out.data[5, 5, 0] == 1
        assert int(out.data.sum()) == 10

    def test_empty_mask(self):
        mask = Volume(np.zeros((6, 6, 6), dtype=np.uint8), (1, 1, 1), kind="label")
        out = filter_small_lesions(mask)
        assert int(out.data.sum()) == 0

    def test_matches_flood_fill_oracle(self):
        rng = np.random.default_rng(9)
        spacing = (1.2, 0.9, 1.1)
        voxel_ml = float(np.prod(spacing)) / 1000.0
        for _ in range(20):
            data = (rng.random((9, 9, 9)) < 0.25).astype(np.uint8)
            mask = Volume(data, spacing, kind="label")
            out = filter_small_lesions(mask, min_volume_ml=0.005)
            expected = np.zeros_like(data)
            for comp in flood_fill_components(data):
                if len(comp) * voxel_ml >= 0.005:
                    for vx in comp:
                        expected[vx] = 1
            np.testing.assert_array_equal(out.data, expected)

    def test_idempotent(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            data = (rng.random((10, 10, 10)) < 0.3).astype(np.uint8)
            mask = Volume(data, (0.8, 1.0, 1.3), kind="label")
            once = filter_small_lesions(mask)
            twice = filter_small_lesions(once)
            np.testing.assert_array_equal(once.data, twice.data)

    def test_rejects_intensity_volume(self):
        v = Volume(np.zeros((4, 4, 4)), (1, 1, 1))
        with pytest.raises(ValueError, match="label"):
            filter_small_lesions(v)

    def test_input_unchanged(self):
        rng = np.random.default_rng(11)
        data = (rng.random((8, 8, 8)) < 0.2).astype(np.uint8)
        mask = Volume(data, (1, 1, 1), kind="label")
        before = mask.data.copy()
        filter_small_lesions(mask)
        np.testing.assert_array_equal(mask.data, before)
