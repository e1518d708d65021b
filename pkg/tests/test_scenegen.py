import gzip
import os

import numpy as np
import pytest

from occnet import scenegen
from occnet.scenegen import (
    CANVAS,
    DIGIT,
    RECORD_BYTES,
    IdxFormatError,
    composite,
    compose_scene,
    generate_dataset,
    load_dataset,
    load_mnist_idx,
    occlusion_fraction,
    pack_record,
    read_idx_images,
    read_idx_labels,
    read_manifest,
    render_stereo,
    to_model_input,
    unpack_records,
    write_idx_images,
    write_idx_labels,
)


def block_digit(rows=slice(0, DIGIT), cols=slice(0, DIGIT)):
    d = np.zeros((DIGIT, DIGIT), dtype=np.float32)
    d[rows, cols] = 1.0
    return d


class TestIdx:
    def test_images_roundtrip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, size=(5, 28, 28)).astype(np.uint8)
        p = tmp_path / "imgs"
        write_idx_images(p, imgs)
        assert np.array_equal(read_idx_images(p), imgs)

    def test_labels_roundtrip(self, tmp_path):
        labels = np.array([0, 9, 3, 7], dtype=np.uint8)
        p = tmp_path / "lbls"
        write_idx_labels(p, labels)
        assert np.array_equal(read_idx_labels(p), labels)

    def test_gzip_variant(self, tmp_path, rng):
        imgs = rng.integers(0, 256, size=(2, 4, 4)).astype(np.uint8)
        plain = tmp_path / "imgs"
        write_idx_images(plain, imgs)
        gz = tmp_path / "imgs.gz"
        gz.write_bytes(gzip.compress(plain.read_bytes()))
        assert np.array_equal(read_idx_images(gz), imgs)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"\x00\x00\x08\x01" + b"\x00" * 12)
        with pytest.raises(IdxFormatError, match="bad magic"):
            read_idx_images(p)

    def test_truncated_body(self, tmp_path, rng):
        imgs = rng.integers(0, 256, size=(3, 8, 8)).astype(np.uint8)
        p = tmp_path / "imgs"
        write_idx_images(p, imgs)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(IdxFormatError, match="truncated"):
            read_idx_images(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "imgs"
        p.write_bytes(b"\x00\x00\x08")
        with pytest.raises(IdxFormatError, match="truncated header"):
            read_idx_images(p)

    def test_count_mismatch(self, tmp_path, digits_dir, rng):
        for name in os.listdir(digits_dir):
            os.link(os.path.join(digits_dir, name), tmp_path / name)
        os.unlink(tmp_path / scenegen.TRAIN_LABELS)
        write_idx_labels(tmp_path / scenegen.TRAIN_LABELS, np.zeros(3, np.uint8))
        with pytest.raises(IdxFormatError, match="labels"):
            load_mnist_idx(tmp_path)


class TestSyntheticCorpus:
    def test_shapes_and_range(self, digits_dir):
        tx, ty, sx, sy = load_mnist_idx(digits_dir)
        assert tx.shape == (1497, 28, 28) and sx.shape == (300, 28, 28)
        assert tx.dtype == np.float32
        assert 0.0 <= tx.min() and tx.max() <= 1.0
        assert set(np.unique(ty)) == set(range(10))
        assert set(np.unique(sy)) == set(range(10))

    def test_deterministic(self, digits_dir, tmp_path):
        scenegen.synthesize_digit_corpus(tmp_path)
        assert scenegen.corpus_checksum(tmp_path) == scenegen.corpus_checksum(digits_dir)


class TestRendering:
    def test_front_ink_replaces_rear(self):
        rear = block_digit()
        front = block_digit(slice(0, 5), slice(0, 5)) * 0.5
        canvas = composite([rear, front], [(0, 0), (0, 0)])
        assert canvas[0, 0] == 0.5
        assert canvas[10, 10] == 1.0

    def test_zero_ink_does_not_erase(self):
        rear = block_digit()
        front = np.zeros((DIGIT, DIGIT), dtype=np.float32)
        canvas = composite([rear, front], [(0, 0), (0, 0)])
        assert canvas[:DIGIT, :DIGIT].min() == 1.0

    def test_off_canvas_clipping(self):
        canvas = composite([block_digit()], [(-10, -10)])
        assert canvas[:DIGIT - 10, :DIGIT - 10].min() == 1.0
        assert canvas[DIGIT - 10:, :].max() == 0.0

    def test_target_zero_disparity(self):
        left, right = render_stereo([block_digit()], [(2, 2)], (2, 4))
        assert np.array_equal(left, right)

    def test_occluder_shift_antisymmetric(self):
        target = np.zeros((DIGIT, DIGIT), dtype=np.float32)
        occ = block_digit(slice(0, 4), slice(0, 4))
        left, right = render_stereo([target, occ, target], [(0, 10), (4, 10), (0, 0)], (4, 2))
        # d_far = 4: +2 px in the left view, -2 px in the right view
        assert left[10, 4 + 2] == 1.0 and left[10, 4 + 1] == 0.0
        assert right[10, 4 - 2 + 3] == 1.0 and right[10, 4 + 2] == 0.0

    def test_odd_disparity_rejected(self):
        with pytest.raises(ValueError, match="even"):
            render_stereo([block_digit()] * 3, [(0, 0)] * 3, (2, 3))

    def test_occlusion_fraction_oracle(self):
        target = block_digit()
        occ1 = block_digit(slice(0, DIGIT), slice(0, 14))
        occ2 = np.zeros((DIGIT, DIGIT), dtype=np.float32)
        frac = occlusion_fraction([target, occ1, occ2], [(0, 0), (0, 0), (0, 0)])
        assert frac == 14 * 28 / (28 * 28)

    def test_occlusion_fraction_union_not_sum(self):
        target = block_digit()
        occ = block_digit(slice(0, DIGIT), slice(0, 14))
        frac = occlusion_fraction([target, occ, occ], [(0, 0), (0, 0), (0, 0)])
        assert frac == 0.5  # overlapping occluders are not double counted

    def test_empty_target(self):
        z = np.zeros((DIGIT, DIGIT), dtype=np.float32)
        assert occlusion_fraction([z, z, z], [(0, 0)] * 3) is None


@pytest.fixture(scope="module")
def pool(digits_dir):
    tx, ty, _, _ = load_mnist_idx(digits_dir)
    return tx[:200], ty[:200]


class TestComposeScene:
    def test_constraints(self, pool):
        imgs, labels = pool
        for i in range(10):
            rng = np.random.default_rng(i)
            s = compose_scene(imgs[i], labels[i], imgs, labels, rng)
            assert 0.20 <= s.occlusion_fraction <= 0.80
            assert s.label == labels[i]
            assert s.label not in s.occluder_labels
            assert s.occluder_labels[0] != s.occluder_labels[1]
            assert s.left.shape == (CANVAS, CANVAS)
            assert s.left.max() <= 1.0

    def test_deterministic_given_rng_state(self, pool):
        imgs, labels = pool
        a = compose_scene(imgs[0], labels[0], imgs, labels, np.random.default_rng(5))
        b = compose_scene(imgs[0], labels[0], imgs, labels, np.random.default_rng(5))
        assert np.array_equal(a.left, b.left)
        assert a.placements == b.placements

    def test_unoccluded_target_ink_matches_across_views(self, pool):
        imgs, labels = pool
        s = compose_scene(imgs[3], labels[3], imgs, labels, np.random.default_rng(2))
        tmask = scenegen._mask_on_canvas(imgs[3], *s.placements[0])
        # pixels where both views still show exactly the target's value
        (ty, tx_), = [np.nonzero(tmask)]
        same = s.left[ty, tx_] == s.right[ty, tx_]
        assert same.mean() > 0.1  # some target ink survives in both views

    def test_degenerate_pool_rejected(self):
        imgs = np.ones((4, DIGIT, DIGIT), dtype=np.float32)
        labels = np.array([3, 3, 5, 5], dtype=np.uint8)
        with pytest.raises(ValueError, match="at least 2 classes"):
            compose_scene(imgs[0], 3, imgs, labels, np.random.default_rng(0))


class TestShardFormat:
    def test_record_size(self):
        assert RECORD_BYTES == 2 + 4 + 4 + 1024 + 1024

    def test_pack_unpack_roundtrip(self, digits_dir):
        tx, ty, _, _ = load_mnist_idx(digits_dir)
        s = compose_scene(tx[0], ty[0], tx[:100], ty[:100], np.random.default_rng(1))
        buf = pack_record(s) * 3
        labels, occ, frac, left, right = unpack_records(buf)
        assert labels.shape == (3,) and (labels == s.label).all()
        assert tuple(occ[0]) == s.occluder_labels
        assert abs(frac[0] - s.occlusion_fraction) < 1e-6
        assert np.array_equal(left[0], (s.left * 255).round().astype(np.uint8))
        assert np.array_equal(right[2], (s.right * 255).round().astype(np.uint8))

    def test_ragged_shard_rejected(self):
        with pytest.raises(ValueError, match="multiple"):
            unpack_records(b"\x00" * (RECORD_BYTES + 1))


class TestGenerateDataset:
    def test_manifest_matches_shards(self, small_dataset_dir):
        m = read_manifest(os.path.join(small_dataset_dir, "manifest.txt"))
        for split in ("train", "test"):
            total = 0
            for k in range(m[f"{split}_shards"]):
                total += os.path.getsize(
                    os.path.join(small_dataset_dir, f"{split}_{k:03d}.bin"))
            assert total == m[f"{split}_count"] * RECORD_BYTES

    def test_full_scan_invariants(self, small_dataset_dir):
        for split in ("train", "test"):
            ds = load_dataset(small_dataset_dir, split)
            assert (ds["labels"] < 10).all()
            assert (0.20 <= ds["fractions"]).all() and (ds["fractions"] <= 0.80).all()
            assert (ds["occluder_labels"][:, 0] != ds["labels"]).all()
            assert (ds["occluder_labels"][:, 1] != ds["labels"]).all()
            assert (ds["occluder_labels"][:, 0] != ds["occluder_labels"][:, 1]).all()

    def test_regeneration_is_byte_identical(self, small_dataset_dir, digits_dir, tmp_path):
        generate_dataset(tmp_path, digits_dir, seed=3, samples_per_base=2, limit_bases=150)
        for name in sorted(os.listdir(small_dataset_dir)):
            if name.endswith(".bin"):
                a = open(os.path.join(small_dataset_dir, name), "rb").read()
                b = open(tmp_path / name, "rb").read()
                assert a == b, name

    def test_worker_count_does_not_change_output(self, digits_dir, tmp_path):
        d1, d2 = tmp_path / "w1", tmp_path / "w2"
        generate_dataset(d1, digits_dir, seed=8, samples_per_base=1, limit_bases=20,
                         workers=1)
        generate_dataset(d2, digits_dir, seed=8, samples_per_base=1, limit_bases=20,
                         workers=2)
        for name in sorted(os.listdir(d1)):
            if name.endswith(".bin"):
                assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_load_limit_and_checksum(self, small_dataset_dir):
        full = load_dataset(small_dataset_dir, "train")
        part = load_dataset(small_dataset_dir, "train", limit=10)
        assert len(part["labels"]) == 10
        assert part["checksum"] != full["checksum"]
        assert np.array_equal(part["left"], full["left"][:10])

    def test_missing_split(self, tmp_path, small_dataset_dir):
        os.link(os.path.join(small_dataset_dir, "manifest.txt"), tmp_path / "manifest.txt")
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path, "train")


class TestModelInput:
    def test_stereo_channels(self, rng):
        left = rng.integers(0, 256, (4, 32, 32)).astype(np.uint8)
        right = rng.integers(0, 256, (4, 32, 32)).astype(np.uint8)
        x = to_model_input(left, right, stereo=True)
        assert x.shape == (4, 32, 32, 2) and x.dtype == np.float32
        assert np.allclose(x[..., 0], left / 255.0)
        assert np.allclose(x[..., 1], right / 255.0)

    def test_mono_uses_left_view(self, rng):
        left = rng.integers(0, 256, (2, 32, 32)).astype(np.uint8)
        right = np.zeros_like(left)
        x = to_model_input(left, right, stereo=False)
        assert x.shape == (2, 32, 32, 1)
        assert np.allclose(x[..., 0], left / 255.0)
