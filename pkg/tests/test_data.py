import logging
from collections import Counter

import numpy as np
import pandas as pd
import pytest
import torch
from PIL import Image

from app.utils.config import DataConfig
from app.utils.data import (
    Dataset,
    FaceDataset,
    ImageSample,
    balance_sampler,
    export_manifest,
    ingest_folder,
    load_manifest,
    preprocess,
    synth_generate,
)
from app.utils.errors import ConfigurationError, IngestionError, InputError, SamplerError


def _write_png(path, mode="RGB", size=(40, 30), value=128):
    path.parent.mkdir(parents=True, exist_ok=True)
    channels = 3 if mode == "RGB" else 1
    array = np.full((size[1], size[0], channels), value, dtype=np.uint8)
    Image.fromarray(array if channels == 3 else array[..., 0]).save(path)


def _labelled(labels, num_classes):
    samples = [ImageSample(pixels=torch.zeros(3, 4, 4), label=label) for label in labels]
    return Dataset(samples=samples, class_names=[f"c{k}" for k in range(num_classes)])


@pytest.fixture
def face_tree(tmp_path):
    root = tmp_path / "faces"
    _write_png(root / "b_happy" / "001.png")
    _write_png(root / "b_happy" / "002.png", mode="L")
    _write_png(root / "a_sad" / "001.png")
    (root / "a_sad" / "broken.png").write_bytes(b"not an image")
    (root / "c_empty").mkdir(parents=True)
    return root


def test_ingest_folder_orders_and_skips(face_tree, caplog):
    with caplog.at_level(logging.WARNING):
        dataset = ingest_folder(str(face_tree))
    assert dataset.class_names == ["a_sad", "b_happy", "c_empty"]
    assert dataset.labels == [0, 1, 1]
    assert len(dataset.skipped) == 1 and dataset.skipped[0].endswith("broken.png")
    assert dataset.samples[2].pixels.shape == (1, 30, 40)
    assert dataset.samples[0].pixels.shape == (3, 30, 40)
    assert "broken.png" in caplog.text
    assert "c_empty" in caplog.text


def test_ingest_folder_without_classes(tmp_path):
    with pytest.raises(IngestionError):
        ingest_folder(str(tmp_path))
    with pytest.raises(IngestionError):
        ingest_folder(str(tmp_path / "missing"))


def test_manifest_round_trip(face_tree, tmp_path):
    dataset = ingest_folder(str(face_tree))
    export_manifest(dataset, tmp_path / "manifest.csv")
    restored = load_manifest(tmp_path / "manifest.csv")
    assert restored.labels == dataset.labels
    assert restored.class_names == ["a_sad", "b_happy", "c_empty"]
    assert torch.equal(restored.samples[0].pixels, dataset.samples[0].pixels)


def test_manifest_paths_resolve_against_manifest_directory(face_tree, tmp_path, monkeypatch):
    manifest = face_tree / "manifest.csv"
    export_manifest(ingest_folder(str(face_tree)), manifest)
    assert pd.read_csv(manifest, keep_default_na=False)["path"].tolist()[0] == "a_sad/001.png"

    elsewhere = tmp_path / "elsewhere"
    elsewhere.mkdir()
    monkeypatch.chdir(elsewhere)
    restored = load_manifest(manifest)
    assert len(restored) == 3
    assert restored.class_names == ["a_sad", "b_happy", "c_empty"]


def test_manifest_without_decodable_files(tmp_path):
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("path,label,class_name\nmissing.png,0,a\nalso_missing.png,1,b\n", encoding="utf-8")
    with pytest.raises(IngestionError):
        load_manifest(manifest)
    with pytest.raises(IngestionError):
        load_manifest(tmp_path / "absent.csv")


def test_preprocess_expands_gray():
    pixels = torch.rand(1, 40, 50)
    out = preprocess(pixels, 64, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
    assert out.shape == (3, 64, 64)
    assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])


def test_preprocess_normalizes_without_resize_at_target_size():
    pixels = torch.rand(3, 32, 32)
    out = preprocess(pixels, 32, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
    assert torch.allclose(out, (pixels - 0.5) / 0.5)


def test_preprocess_constant_image():
    pixels = torch.full((3, 48, 48), 0.6)
    out = preprocess(pixels, 64)
    mean, std = DataConfig().mean, DataConfig().std
    for channel in range(3):
        expected = (0.6 - mean[channel]) / std[channel]
        assert torch.allclose(out[channel], torch.full((64, 64), expected), atol=1e-5)


def test_preprocess_errors():
    with pytest.raises(ConfigurationError):
        preprocess(torch.rand(3, 40, 40), 16)
    with pytest.raises(InputError):
        preprocess(torch.rand(3, 0, 40), 64)
    with pytest.raises(InputError):
        preprocess(torch.rand(2, 40, 40), 64)
    with pytest.raises(InputError):
        preprocess(torch.rand(1, 40, 40), 64, grayscale_expand=False)


def test_synth_generate_is_deterministic():
    a = synth_generate(seed=7, n_per_class=3, num_classes=3)
    b = synth_generate(seed=7, n_per_class=3, num_classes=3)
    assert a.labels == b.labels == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    assert all(torch.equal(x.pixels, y.pixels) for x, y in zip(a.samples, b.samples))
    assert [s.path for s in a.samples][:2] == ["class_0/00000.png", "class_0/00001.png"]


def test_synth_generate_symmetry():
    symmetric = synth_generate(seed=0, n_per_class=2, num_classes=2)
    for sample in symmetric.samples:
        assert sample.pixels.shape == (3, 64, 64)
        assert torch.equal(sample.pixels, torch.flip(sample.pixels, dims=[-1]))

    noisy = synth_generate(seed=0, n_per_class=2, num_classes=2, asymmetry=0.5)
    assert not torch.equal(noisy.samples[0].pixels, torch.flip(noisy.samples[0].pixels, dims=[-1]))


def test_synth_generate_quadrant_layout():
    dataset = synth_generate(seed=0, n_per_class=1, num_classes=4, layout="quadrant")
    for sample in dataset.samples:
        h2 = sample.pixels.shape[1] // 2
        quadrants = [
            sample.pixels[:, :h2, :h2], sample.pixels[:, :h2, h2:],
            sample.pixels[:, h2:, :h2], sample.pixels[:, h2:, h2:],
        ]
        assert int(np.argmax([float(q.mean()) for q in quadrants])) == sample.label


def test_synth_classes_are_separable_by_centroid():
    train = synth_generate(seed=0, n_per_class=10, num_classes=7)
    test = synth_generate(seed=1, n_per_class=10, num_classes=7)
    pixels = torch.stack([s.pixels.flatten() for s in train.samples])
    labels = torch.tensor(train.labels)
    centroids = torch.stack([pixels[labels == k].mean(dim=0) for k in range(7)])
    queries = torch.stack([s.pixels.flatten() for s in test.samples])
    predicted = torch.cdist(queries, centroids).argmin(dim=1)
    assert (predicted == torch.tensor(test.labels)).float().mean().item() >= 0.9


def test_synth_generate_rejects_bad_parameters():
    with pytest.raises(ConfigurationError):
        synth_generate(seed=0, n_per_class=1, num_classes=1)
    with pytest.raises(ConfigurationError):
        synth_generate(seed=0, n_per_class=1, num_classes=5, layout="quadrant")
    with pytest.raises(ConfigurationError):
        synth_generate(seed=0, n_per_class=1, num_classes=2, size=33)


def test_balance_sampler_equalizes_classes():
    dataset = _labelled([0] * 6 + [1] * 2, 2)
    plan = balance_sampler(dataset, "balance", seed=0)
    counts = Counter(dataset.labels[i] for i in plan.epoch_indices)
    assert counts == {0: 4, 1: 4}
    # the minority class is repeated whole, the majority subsampled without replacement
    assert Counter(plan.epoch_indices)[6] == 2 and Counter(plan.epoch_indices)[7] == 2
    majority = [i for i in plan.epoch_indices if i < 6]
    assert len(set(majority)) == 4


def test_balance_sampler_heavy_imbalance():
    dataset = _labelled([0] * 100 + [1] * 10, 2)
    plan = balance_sampler(dataset, "balance", seed=5)
    counts = Counter(dataset.labels[i] for i in plan.epoch_indices)
    assert counts == {0: 55, 1: 55}
    majority = [i for i in plan.epoch_indices if i < 100]
    assert len(set(majority)) == 55
    repeats = Counter(i for i in plan.epoch_indices if i >= 100)
    assert set(repeats) == set(range(100, 110))
    assert set(repeats.values()) <= {5, 6}


def test_balance_sampler_none_is_a_seeded_permutation():
    dataset = _labelled([0, 1, 0, 1, 1], 2)
    plan = balance_sampler(dataset, "none", seed=3)
    assert sorted(plan.epoch_indices) == list(range(5))
    assert balance_sampler(dataset, "none", seed=3).epoch_indices == plan.epoch_indices


def test_balance_sampler_errors():
    with pytest.raises(SamplerError):
        balance_sampler(_labelled([0, 1, 1], 3), "balance", seed=0)
    with pytest.raises(SamplerError):
        balance_sampler(_labelled([], 2), "none", seed=0)


def test_face_dataset_augmentation_is_keyed():
    dataset = synth_generate(seed=0, n_per_class=2, num_classes=2)
    faces = FaceDataset(dataset, 64, DataConfig(augment=True), seed=5)
    faces.set_epoch(1)
    first, label = faces[0]
    again, _ = faces[0]
    assert first.shape == (3, 64, 64)
    assert label == 0
    assert torch.equal(first, again)

    plain = FaceDataset(dataset, 64, DataConfig(augment=False))
    assert torch.equal(plain[1][0], plain.images[1])
