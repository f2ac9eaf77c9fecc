import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from seanet import data
from seanet.data import AugmentPolicy, DataError, DatasetManifest, PreprocessStats, Record


def disk_image(h, w, cy, cx, r, value=180):
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[np.hypot(yy - cy, xx - cx) <= r] = value
    return img


def smooth_image(size=64):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    return np.stack([np.sin(2 * yy + xx), np.cos(yy - xx), 0.5 * yy * xx], axis=-1)


class TestCrop:
    def test_disk_box_within_one_pixel(self):
        top, bottom, left, right = data.foreground_box(disk_image(100, 120, 40, 50, 20))
        assert abs(top - 20) <= 1 and abs(bottom - 60) <= 1
        assert abs(left - 30) <= 1 and abs(right - 70) <= 1

    def test_crop_resize_fills_frame(self):
        out = data.crop_resize(disk_image(100, 120, 40, 50, 20), 32)
        assert out.shape == (32, 32, 3)
        # corners of the cropped box are background, the centre is disk
        assert out[0, 0, 0] < 10 and out[16, 16, 0] == 180

    def test_all_background_rejected(self):
        with pytest.raises(DataError, match="background"):
            data.crop_resize(np.zeros((10, 10, 3), dtype=np.uint8), 8)

    def test_same_size_resize_is_identity(self, rng):
        img = rng.uniform(0, 255, size=(16, 16, 3))
        assert np.array_equal(data.resize_bilinear(img, 16, 16), img)

    def test_resize_preserves_linear_ramp(self):
        ramp = np.tile(np.arange(11.0)[None, :, None], (5, 1, 1))
        out = data.resize_bilinear(ramp, 5, 21)
        assert np.allclose(out[0, :, 0], np.arange(21) / 2)


class TestEqualize:
    def test_two_levels_spread_to_extremes(self):
        img = np.full((4, 4, 1), 50.0)
        img[2:] = 200
        out = data.hist_equalize(img)
        assert set(np.unique(out)) == {0.0, 255.0}

    def test_constant_channel_maps_to_zero(self):
        assert np.all(data.hist_equalize(np.full((3, 3, 2), 77.0)) == 0)

    def test_flattens_skewed_histogram(self, rng):
        img = (rng.beta(2, 8, size=(128, 128, 1)) * 255).round()
        out = data.hist_equalize(img).reshape(-1)
        levels = np.linspace(0, 255, 18)[1:-1]
        cdf = np.array([(out <= v).mean() for v in levels])
        assert np.max(np.abs(cdf - levels / 255)) < 0.05

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_and_in_range(self, seed):
        img = np.random.default_rng(seed).integers(0, 256, size=(12, 12, 3)).astype(float)
        out = data.hist_equalize(img)
        assert out.min() >= 0 and out.max() <= 255
        for c in range(3):
            order = np.argsort(img[..., c], axis=None, kind="stable")
            assert np.all(np.diff(out[..., c].reshape(-1)[order]) >= 0)


class TestStandardize:
    def test_hand_values(self):
        stats = PreprocessStats([1.0], [2.0])
        assert data.standardize(np.array([[[1.0], [5.0], [-3.0]]]), stats).reshape(-1).tolist() == [0.0, 2.0, -2.0]

    def test_stats_give_zero_mean_unit_std(self, rng):
        imgs = rng.uniform(0, 255, size=(5, 8, 8, 3))
        stats = PreprocessStats.from_images(imgs)
        z = data.standardize(imgs, stats)
        assert np.allclose(z.mean(axis=(0, 1, 2)), 0, atol=1e-12)
        assert np.allclose(z.std(axis=(0, 1, 2)), 1, atol=1e-12)

    def test_zero_std_rejected(self):
        with pytest.raises(DataError):
            PreprocessStats([0.0], [0.0])

    def test_csv_round_trip(self, tmp_path):
        stats = PreprocessStats([1.5, 2.25], [0.1, 3.0])
        stats.write_csv(tmp_path / "s.csv")
        back = PreprocessStats.read_csv(tmp_path / "s.csv")
        assert np.array_equal(back.mean, stats.mean) and np.array_equal(back.std, stats.std)


class TestAugment:
    def test_null_policy_is_identity(self, rng):
        img = rng.normal(size=(8, 8, 3))
        out = data.augment(img, AugmentPolicy(0, 0, 0), np.random.default_rng(0))
        assert np.array_equal(out, img)

    def test_forced_flips(self, rng):
        img = rng.normal(size=(6, 6, 3))
        out = data.augment(img, AugmentPolicy(0, 1, 1), np.random.default_rng(0))
        assert np.array_equal(out, img[::-1, ::-1])

    def test_flip_is_involution(self, rng):
        img = rng.normal(size=(6, 6, 3))
        policy = AugmentPolicy(0, 1, 0)
        twice = data.augment(data.augment(img, policy, np.random.default_rng(0)), policy, np.random.default_rng(1))
        assert np.array_equal(twice, img)

    @pytest.mark.parametrize("angle", [3.0, -7.5, 10.0])
    def test_rotation_round_trip(self, angle):
        img = smooth_image()
        back = data.rotate(data.rotate(img, angle), -angle)
        inner = slice(16, 48)
        assert np.max(np.abs(back[inner, inner] - img[inner, inner])) < 0.02

    def test_stream_position_independent_of_policy(self):
        img = np.zeros((4, 4, 1))
        a, b = np.random.default_rng(5), np.random.default_rng(5)
        data.augment(img, AugmentPolicy(0, 0, 0), a)
        data.augment(img, AugmentPolicy(10, 0.5, 0.5), b)
        assert a.random() == b.random()

    def test_bad_probability(self):
        with pytest.raises(DataError):
            AugmentPolicy(hflip_prob=1.5)


class TestStreams:
    def test_same_keys_same_draws(self):
        assert np.array_equal(data.stream(3, 1, 2).random(5), data.stream(3, 1, 2).random(5))

    def test_keys_separate_streams(self):
        assert not np.array_equal(data.stream(3, 1, 2).random(5), data.stream(3, 1, 3).random(5))

    def test_synth_image_stable(self):
        assert np.array_equal(data.synth_image(11, 3), data.synth_image(11, 3))


class TestManifest:
    def test_csv_round_trip(self, tmp_path):
        m = DatasetManifest([Record("a.png", 0, "train"), Record("synth:5", 2, "test")])
        m.write_csv(tmp_path / "m.csv")
        assert DatasetManifest.read_csv(tmp_path / "m.csv") == m

    def test_bad_labels_and_splits_all_reported(self):
        m = DatasetManifest([Record("a", 7, "train"), Record("b", 0, "val")])
        with pytest.raises(DataError, match="label 7.*split 'val'"):
            m.validate(5)

    def test_balanced_test_check(self):
        m = DatasetManifest([Record("a", 0, "test"), Record("b", 0, "test"), Record("c", 1, "test")])
        with pytest.raises(DataError, match="not balanced"):
            m.validate(2, balanced_test=True)

    def test_synth_manifest_counts(self):
        m = data.synth_manifest(3, 4, 2, seed=1)
        assert m.class_counts("train", 3).tolist() == [4, 4, 4]
        assert m.class_counts("test", 3).tolist() == [2, 2, 2]


class TestCache:
    def test_stats_use_training_split_only(self, tmp_path):
        train = data.synth_manifest(2, 3, 0, seed=0).records
        test_a = [Record(f"synth:{i}", i % 2, "test") for i in range(100, 104)]
        test_b = [Record(f"synth:{i}", 1 - i % 2, "test") for i in range(200, 206)]
        sa = data.prepare_cache(DatasetManifest(train + test_a), tmp_path / "a", size=16, num_classes=2)
        sb = data.prepare_cache(DatasetManifest(train + test_b), tmp_path / "b", size=16, num_classes=2)
        assert np.array_equal(sa.mean, sb.mean) and np.array_equal(sa.std, sb.std)

    def test_round_trip_and_file_images(self, tmp_path):
        path = tmp_path / "img.png"
        Image.fromarray(disk_image(40, 50, 20, 25, 15)).save(path)
        m = DatasetManifest([Record(str(path), 1, "train"), Record("synth:9", 0, "train"), Record("synth:4", 1, "test")])
        data.prepare_cache(m, tmp_path / "c", size=16, num_classes=2)
        tr = data.load_cache(tmp_path / "c", "train")
        te = data.load_cache(tmp_path / "c", "test")
        assert tr.images.shape == (2, 16, 16, 3) and tr.labels.tolist() == [1, 0]
        assert len(te) == 1

    def test_missing_sources(self, tmp_path):
        m = DatasetManifest([Record(str(tmp_path / "gone.png"), 0, "train"), Record("synth:1", 0, "train")])
        assert data.missing_sources(m) == [str(tmp_path / "gone.png")]


def test_synthetic_classes_separable_by_nearest_centroid():
    manifest, images = data.synth_dataset(classes=5, per_class=20, size=32, seed=0)
    labels = np.array([r.label for r in manifest.records])
    # lesion area raises the mean colour of the cropped disk
    feats = np.stack([data.crop_resize(im, 16).mean(axis=(0, 1)) for im in images])
    train = np.arange(len(labels)) % 2 == 0
    centroids = np.stack([feats[train & (labels == k)].mean(axis=0) for k in range(5)])
    dist = ((feats[~train, None, :] - centroids[None]) ** 2).sum(axis=2)
    acc = (dist.argmin(axis=1) == labels[~train]).mean()
    assert acc > 0.4  # chance is 0.2
