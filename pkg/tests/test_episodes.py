import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peft_forge import episodes as ep
from peft_forge.episodes import (
    AugmentConfig,
    Dataset,
    DatasetError,
    SamplerConfig,
    augment,
    episode_rng,
    sample_episode,
    synth_dataset,
)


def nearest_centroid_accuracy(episode):
    """Brute-force nearest-centroid oracle on mean-pixel features."""
    feat = lambda imgs: imgs.reshape(len(imgs), 3, -1).mean(axis=-1)
    fs, fq = feat(episode.support_images), feat(episode.query_images)
    cents = np.stack([fs[episode.support_labels == c].mean(axis=0)
                      for c in range(episode.n_classes)])
    d = ((fq[:, None] - cents[None]) ** 2).sum(-1)
    return float(np.mean(np.argmin(d, axis=1) == episode.query_labels))


class TestSampler:
    def test_degenerate_ranges_fixed_shape(self):
        ds = synth_dataset(6, 8, 4, separation=2.0, rng=0)
        cfg = SamplerConfig(way_range=(5, 5), shot_range=(1, 1), query_range=(3, 3))
        for i in range(5):
            e = sample_episode(ds, cfg, episode_rng(0, i))
            assert e.n_classes == 5
            assert len(e.support_labels) == 5
            assert all((e.support_labels == c).sum() == 1 for c in range(5))

    def test_same_seed_bitwise_identical(self):
        ds = synth_dataset(6, 8, 4, separation=2.0, rng=0)
        cfg = SamplerConfig(way_range=(2, 5), shot_range=(1, 3), query_range=(1, 4))
        a = sample_episode(ds, cfg, episode_rng(42, 3))
        b = sample_episode(ds, cfg, episode_rng(42, 3))
        assert np.array_equal(a.support_images, b.support_images)
        assert np.array_equal(a.query_labels, b.query_labels)

    def test_way_distribution_covers_range(self):
        ds = synth_dataset(10, 12, 4, separation=1.0, rng=1)
        cfg = SamplerConfig(way_range=(2, 10), shot_range=(1, 3), query_range=(1, 2))
        ways = {sample_episode(ds, cfg, episode_rng(7, i)).n_classes for i in range(1000)}
        assert ways == set(range(2, 11))

    def test_support_query_disjoint(self):
        ds = synth_dataset(5, 10, 4, separation=1.0, rng=2)
        cfg = SamplerConfig(way_range=(3, 5), shot_range=(1, 4), query_range=(1, 4))
        for i in range(20):
            e = sample_episode(ds, cfg, episode_rng(9, i))
            sup = {img.tobytes() for img in e.support_images}
            qry = {img.tobytes() for img in e.query_images}
            assert not sup & qry

    def test_insufficient_classes(self):
        ds = synth_dataset(3, 8, 4, separation=1.0, rng=3)
        cfg = SamplerConfig(way_range=(5, 5))
        with pytest.raises(DatasetError):
            sample_episode(ds, cfg, episode_rng(0, 0))

    def test_bounds_respected(self):
        ds = synth_dataset(8, 10, 4, separation=1.0, rng=4)
        cfg = SamplerConfig(way_range=(2, 6), shot_range=(1, 3), query_range=(1, 2))
        for i in range(100):
            e = sample_episode(ds, cfg, episode_rng(11, i))
            assert 2 <= e.n_classes <= 6
            for c in range(e.n_classes):
                assert 1 <= (e.support_labels == c).sum() <= 3


class TestSynthData:
    def test_zero_separation_is_chance_level(self):
        ds = synth_dataset(4, 30, 8, separation=0.0, rng=5)
        cfg = SamplerConfig(way_range=(4, 4), shot_range=(5, 5), query_range=(10, 10))
        accs = [nearest_centroid_accuracy(sample_episode(ds, cfg, episode_rng(1, i)))
                for i in range(20)]
        assert abs(np.mean(accs) - 0.25) < 0.15

    def test_large_separation_is_separable(self):
        ds = synth_dataset(5, 30, 8, separation=5.0, rng=6)
        cfg = SamplerConfig(way_range=(5, 5), shot_range=(5, 5), query_range=(10, 10))
        accs = [nearest_centroid_accuracy(sample_episode(ds, cfg, episode_rng(2, i)))
                for i in range(20)]
        assert np.mean(accs) >= 0.95

    def test_reproducible_from_seed(self):
        a = synth_dataset(3, 5, 4, separation=2.0, rng=7)
        b = synth_dataset(3, 5, 4, separation=2.0, rng=7)
        assert np.array_equal(a.images, b.images)

    def test_values_in_unit_interval(self):
        ds = synth_dataset(3, 5, 4, separation=3.0, rng=8)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


class TestAugment:
    def test_identity_config(self):
        imgs = synth_dataset(2, 3, 8, separation=1.0, rng=9).images
        out = augment(imgs, AugmentConfig(0.0, 0), episode_rng(3, 0))
        assert np.array_equal(out, imgs)

    def test_translation_moves_lit_pixel(self):
        img = np.zeros((1, 3, 8, 8), dtype=np.float32)
        img[0, :, 4, 4] = 1.0
        rng = episode_rng(4, 0)
        out = augment(img, AugmentConfig(0.0, 2), rng)
        ys, xs = np.nonzero(out[0, 0])
        assert len(ys) == 1
        assert abs(int(ys[0]) - 4) <= 2 and abs(int(xs[0]) - 4) <= 2

    def test_output_clamped(self):
        imgs = np.ones((4, 3, 8, 8), dtype=np.float32)
        out = augment(imgs, AugmentConfig(0.9, 2), episode_rng(5, 0))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_shape_and_count_preserved(self):
        imgs = synth_dataset(2, 4, 8, separation=1.0, rng=10).images
        out = augment(imgs, AugmentConfig(0.4, 2), episode_rng(6, 0))
        assert out.shape == imgs.shape

    @given(st.floats(0, 0.99), st.integers(0, 3))
    @settings(max_examples=25, deadline=None)
    def test_always_in_unit_interval(self, s, t):
        imgs = np.full((2, 3, 8, 8), 0.8, dtype=np.float32)
        out = augment(imgs, AugmentConfig(s, t), episode_rng(8, 0))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_invalid_jitter_rejected(self):
        with pytest.raises(DatasetError):
            AugmentConfig(1.0, 0).validate()


class TestImageFolder:
    def make_folder(self, tmp_path, n_classes=2, per_class=3, size=16):
        from PIL import Image

        rng = np.random.default_rng(0)
        for c in range(n_classes):
            d = tmp_path / f"class_{c}"
            d.mkdir()
            for i in range(per_class):
                arr = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
                Image.fromarray(arr).save(d / f"img_{i}.png")
        return tmp_path

    def test_census(self, tmp_path):
        root = self.make_folder(tmp_path)
        ds = ep.load_image_folder(root, resize_to=8)
        assert len(ds.images) == 6
        assert ds.n_classes == 2

    def test_constant_image_resize(self, tmp_path):
        from PIL import Image

        d = tmp_path / "c0"
        d.mkdir()
        Image.fromarray(np.full((64, 64, 3), 120, dtype=np.uint8)).save(d / "x.png")
        ds = ep.load_image_folder(tmp_path, resize_to=128)
        np.testing.assert_allclose(ds.images[0], 120 / 255.0, atol=1e-6)

    def test_deterministic_lexicographic_order(self, tmp_path):
        root = self.make_folder(tmp_path)
        a = ep.load_image_folder(root, resize_to=8)
        b = ep.load_image_folder(root, resize_to=8)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, np.sort(a.labels))

    def test_unreadable_file_skipped_with_warning(self, tmp_path):
        root = self.make_folder(tmp_path)
        (root / "class_0" / "broken.png").write_bytes(b"not an image")
        with pytest.warns(UserWarning, match="broken.png"):
            ds = ep.load_image_folder(root, resize_to=8)
        assert len(ds.images) == 6

    def test_unreadable_file_fail_fast(self, tmp_path):
        root = self.make_folder(tmp_path)
        (root / "class_0" / "broken.png").write_bytes(b"not an image")
        with pytest.raises(DatasetError):
            ep.load_image_folder(root, resize_to=8, skip_unreadable=False)

    def test_manifest(self, tmp_path):
        root = self.make_folder(tmp_path)
        m = ep.folder_manifest(root)
        assert len(m["samples"]) == 6
        assert m["checksum"] == ep.folder_manifest(root)["checksum"]
