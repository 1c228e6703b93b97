"""Tests for iprompt_lab/data.py"""

import struct
from pathlib import Path

import numpy as np
import pytest

from iprompt_lab.config import ExperimentConfig
from iprompt_lab.data import (
    DATASET_FILES,
    Dataset,
    SyntheticSpec,
    build_datasets,
    continual_class_ids,
    decode_dataset,
    encode_dataset,
    generate,
    iterate_batches,
    load_dataset,
    load_datasets,
    pretrain_class_ids,
    save_dataset,
    subset_by_classes,
)
from iprompt_lab.exceptions import FormatError, UsageError


@pytest.fixture
def small() -> Dataset:
    return generate(SyntheticSpec(num_classes=4, per_class_count=3, image_size=8, rng_seed=1))


class TestGenerate:
    def test_shapes_and_counts(self, small: Dataset) -> None:
        assert small.images.shape == (12, 3, 8, 8)
        assert small.images.dtype == np.uint8
        assert small.class_counts() == {0: 3, 1: 3, 2: 3, 3: 3}

    def test_deterministic(self) -> None:
        spec = SyntheticSpec(num_classes=3, per_class_count=2, image_size=8, rng_seed=5)
        assert generate(spec).images.tobytes() == generate(spec).images.tobytes()

    def test_seed_changes_pixels(self) -> None:
        a = generate(SyntheticSpec(num_classes=2, per_class_count=2, image_size=8, rng_seed=1))
        b = generate(SyntheticSpec(num_classes=2, per_class_count=2, image_size=8, rng_seed=2))
        assert a.images.tobytes() != b.images.tobytes()

    def test_class_subset_keeps_ids(self) -> None:
        data = generate(SyntheticSpec(num_classes=6, per_class_count=2, image_size=8, classes=(4, 1)))
        assert data.labels.tolist() == [4, 4, 1, 1]
        assert data.num_classes == 6

    def test_class_recipe_shared_across_splits(self) -> None:
        base = {"num_classes": 3, "per_class_count": 40, "image_size": 8, "noise_sigma": 0.0}
        train = generate(SyntheticSpec(**base, split="train"))  # type: ignore[arg-type]
        test = generate(SyntheticSpec(**base, split="test"))  # type: ignore[arg-type]
        train_means = [train.images[train.labels == c].mean(axis=0) for c in range(3)]
        test_means = [test.images[test.labels == c].mean(axis=0) for c in range(3)]
        for c in range(3):
            own = np.abs(train_means[c] - test_means[c]).mean()
            others = [np.abs(train_means[c] - test_means[o]).mean() for o in range(3) if o != c]
            assert own < min(others)

    def test_nearest_centroid_beats_chance(self) -> None:
        base = {"num_classes": 8, "per_class_count": 20, "image_size": 16}
        train = generate(SyntheticSpec(**base, split="train"))  # type: ignore[arg-type]
        test = generate(SyntheticSpec(**base, split="test"))  # type: ignore[arg-type]
        flat_train = train.float_images().reshape(len(train), -1)
        flat_test = test.float_images().reshape(len(test), -1)
        centroids = np.stack([flat_train[train.labels == c].mean(axis=0) for c in range(8)])
        distances = ((flat_test[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
        accuracy = float(np.mean(distances.argmin(axis=1) == test.labels))
        assert accuracy > 1.0 / 8

    def test_unknown_class_raises(self) -> None:
        with pytest.raises(UsageError):
            generate(SyntheticSpec(num_classes=2, per_class_count=1, image_size=8, classes=(2,)))


class TestBuildDatasets:
    def test_splits_use_disjoint_classes(self, config: ExperimentConfig) -> None:
        datasets = build_datasets(config)
        assert set(datasets["train"].classes) == set(continual_class_ids(config))
        assert set(datasets["test"].classes) == set(continual_class_ids(config))
        assert set(datasets["pretrain"].classes) == set(pretrain_class_ids(config))
        assert len(datasets["train"]) == 8 * 4
        assert len(datasets["test"]) == 8 * 2
        assert len(datasets["pretrain"]) == 4 * 6


class TestDataset:
    def test_label_out_of_range_raises(self) -> None:
        with pytest.raises(UsageError):
            Dataset(np.zeros((1, 3, 2, 2), np.uint8), np.array([3]), ["a", "b"], "train")

    def test_float_images_range(self, small: Dataset) -> None:
        pixels = small.float_images()
        assert pixels.min() >= -1.0 and pixels.max() <= 1.0

    def test_subset_by_classes(self, small: Dataset) -> None:
        subset = subset_by_classes(small, [3, 1])
        assert subset.labels.tolist() == [1, 1, 1, 3, 3, 3]

    def test_subset_unknown_class_raises(self, small: Dataset) -> None:
        with pytest.raises(UsageError):
            subset_by_classes(small, [7])

    def test_iterate_batches_covers_everything(self, small: Dataset) -> None:
        batches = list(iterate_batches(small, 5, np.random.default_rng(0)))
        assert [len(y) for _, y in batches] == [5, 5, 2]
        assert sorted(np.concatenate([y for _, y in batches]).tolist()) == sorted(small.labels.tolist())

    def test_iterate_batches_in_order_without_rng(self, small: Dataset) -> None:
        _, labels = next(iterate_batches(small, 4))
        assert labels.tolist() == [0, 0, 0, 1]


class TestIpdsFormat:
    def test_size_law(self, small: Dataset) -> None:
        blob = encode_dataset(small)
        assert len(blob) == 32 + 12 * 3 * 8 * 8 + 4 * 12 + 4

    def test_decode_restores_dataset(self, small: Dataset) -> None:
        decoded = decode_dataset(encode_dataset(small))
        assert decoded.images.tobytes() == small.images.tobytes()
        assert decoded.labels.tolist() == small.labels.tolist()
        assert decoded.split == "train"
        assert decoded.num_classes == 4

    def test_bad_magic(self, small: Dataset) -> None:
        blob = b"XXXX" + encode_dataset(small)[4:]
        with pytest.raises(FormatError, match="magic"):
            decode_dataset(blob)

    def test_bad_version(self, small: Dataset) -> None:
        blob = bytearray(encode_dataset(small))
        struct.pack_into("<I", blob, 4, 9)
        with pytest.raises(FormatError, match="version"):
            decode_dataset(bytes(blob))

    def test_truncated(self, small: Dataset) -> None:
        with pytest.raises(FormatError):
            decode_dataset(encode_dataset(small)[:-1])

    def test_trailing_bytes(self, small: Dataset) -> None:
        with pytest.raises(FormatError):
            decode_dataset(encode_dataset(small) + b"\x00")

    def test_crc_mismatch(self, small: Dataset) -> None:
        blob = bytearray(encode_dataset(small))
        blob[40] ^= 0xFF
        with pytest.raises(FormatError, match="CRC"):
            decode_dataset(bytes(blob))

    def test_save_and_load(self, small: Dataset, tmp_path: Path) -> None:
        path = tmp_path / "nested" / "train.ipds"
        save_dataset(path, small)
        assert load_dataset(path).images.tobytes() == small.images.tobytes()

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(UsageError):
            load_dataset(tmp_path / "absent.ipds")

    def test_load_datasets(self, config: ExperimentConfig, tmp_path: Path) -> None:
        datasets = build_datasets(config)
        for split, name in DATASET_FILES.items():
            save_dataset(tmp_path / name, datasets[split])
        loaded = load_datasets(tmp_path)
        assert {split: d.split for split, d in loaded.items()} == {s: s for s in DATASET_FILES}
