import struct

import numpy as np
import pytest

from dataopt.dataforge import (
    DataError, DatasetView, DistortionSpec,
    stratified_split, apply_imbalance, apply_label_noise, distort,
    load_idx, make_synthetic, save_container, load_container,
)


def toy_view(n_per_class=500, n_classes=2, size=8, seed=3):
    rng = np.random.default_rng(seed)
    n = n_per_class * n_classes
    images = rng.uniform(0, 1, size=(n, 1, size, size))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return DatasetView(images, labels, n_classes)


def test_view_invariants():
    v = toy_view(10, 2)
    with pytest.raises(ValueError):
        v.images[0, 0, 0, 0] = 0.5  # immutable
    with pytest.raises(DataError):
        DatasetView(np.ones((2, 1, 4, 4)), [0, 5], n_classes=2)
    with pytest.raises(DataError):
        DatasetView(np.full((2, 1, 4, 4), 2.0), [0, 1], n_classes=2)
    with pytest.raises(DataError):
        DatasetView(np.ones((2, 1, 4, 4)), [0, 1], 2, global_index=[7, 7])


def test_split_balanced_counts():
    v = toy_view(500, 2)
    train, valid = stratified_split(v, 0.2, fold_seed=1)
    assert valid.class_counts().tolist() == [100, 100]
    assert train.class_counts().tolist() == [400, 400]
    # disjoint union of identities
    got = np.union1d(train.global_index, valid.global_index)
    assert np.array_equal(got, v.global_index)
    assert np.intersect1d(train.global_index, valid.global_index).size == 0


def test_split_32_percent():
    v = toy_view(200, 10)
    train, valid = stratified_split(v, 0.32, fold_seed=9)
    assert len(valid) == round(0.32 * len(v))
    assert np.all(valid.class_counts() == 64)


def test_split_deterministic_and_fold_dependent():
    v = toy_view(50, 4)
    t1, v1 = stratified_split(v, 0.25, fold_seed=7)
    t2, v2 = stratified_split(v, 0.25, fold_seed=7)
    assert np.array_equal(v1.global_index, v2.global_index)
    assert np.array_equal(t1.global_index, t2.global_index)
    _, v3 = stratified_split(v, 0.25, fold_seed=8)
    assert not np.array_equal(v1.global_index, v3.global_index)


def test_split_small_class_errors():
    images = np.zeros((3, 1, 4, 4))
    labels = np.array([0, 0, 1])
    v = DatasetView(images, labels, 2)
    with pytest.raises(DataError):
        stratified_split(v, 0.5, fold_seed=0)


def test_imbalance_counts_two_class():
    v = toy_view(500, 2)
    out = apply_imbalance(v, DistortionSpec(ir=10, seed=5))
    assert out.class_counts().tolist() == [500, 50]
    # lower-half class untouched, and images never change
    kept = np.isin(v.global_index, out.global_index)
    assert np.array_equal(out.images, v.images[kept])


def test_imbalance_identity_and_determinism():
    v = toy_view(100, 4)
    assert apply_imbalance(v, DistortionSpec(ir=1, seed=0)) is v
    a = apply_imbalance(v, DistortionSpec(ir=7, seed=42))
    b = apply_imbalance(v, DistortionSpec(ir=7, seed=42))
    assert np.array_equal(a.global_index, b.global_index)


def test_imbalance_strong_keeps_at_least_one():
    v = toy_view(30, 10)
    out = apply_imbalance(v, DistortionSpec(ir=100, seed=1))
    counts = out.class_counts()
    assert np.all(counts[:5] == 30)
    assert np.all(counts[5:] == 1)  # max(1, round(30/100))


def test_label_noise_exact_count():
    v = toy_view(55, 10)  # N = 550
    out = apply_label_noise(v, DistortionSpec(nr=0.1, seed=11))
    assert int(np.sum(out.labels != v.labels)) == 55
    assert out.lineage["noise"]["n_flipped"] == 55
    mask_idx = out.lineage["noise"]["corrupted_global_index"]
    flipped = np.sort(v.global_index[out.labels != v.labels])
    assert np.array_equal(np.asarray(mask_idx), flipped)


def test_label_noise_zero_and_binary():
    v = toy_view(100, 2)
    assert apply_label_noise(v, DistortionSpec(nr=0.0, seed=3)) is v
    out = apply_label_noise(v, DistortionSpec(nr=0.1, seed=3))
    changed = out.labels != v.labels
    assert np.all(out.labels[changed] == 1 - v.labels[changed])


def test_distort_pipeline_deterministic():
    v = toy_view(100, 4)
    spec = DistortionSpec(ir=5, nr=0.2, seed=9)
    a = distort(v, spec)
    b = distort(v, spec)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.global_index, b.global_index)
    # distortions change membership and labels, never pixel data
    kept = np.isin(v.global_index, a.global_index)
    assert np.array_equal(a.images, v.images[kept])


def write_idx(tmp_path, images, labels, image_magic=0x803, label_magic=0x801,
              label_count=None):
    n, rows, cols = images.shape
    ip = tmp_path / "img.idx"
    lp = tmp_path / "lab.idx"
    with open(ip, "wb") as f:
        f.write(struct.pack(">IIII", image_magic, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with open(lp, "wb") as f:
        f.write(struct.pack(">II", label_magic, label_count if label_count is not None else n))
        f.write(labels.astype(np.uint8).tobytes())
    return ip, lp


def test_load_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(4, 28, 28)).astype(np.uint8)
    images[0, 0, 0] = 255
    labels = np.array([0, 1, 2, 3], dtype=np.uint8)
    ip, lp = write_idx(tmp_path, images, labels)
    view = load_idx(ip, lp)
    assert view.images.shape == (4, 1, 28, 28)
    assert view.images[0, 0, 0, 0] == 1.0
    assert np.allclose(view.images[:, 0], images / 255.0)
    assert view.labels.tolist() == [0, 1, 2, 3]


def test_load_idx_errors(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(4, 8, 8)).astype(np.uint8)
    labels = np.zeros(4, dtype=np.uint8)
    ip, lp = write_idx(tmp_path, images, labels, image_magic=0x804)
    with pytest.raises(DataError, match="magic"):
        load_idx(ip, lp)
    ip, lp = write_idx(tmp_path, images, labels, label_count=5)
    with pytest.raises(DataError, match="mismatch"):
        load_idx(ip, lp)
    ip, lp = write_idx(tmp_path, images, labels)
    with open(ip, "r+b") as f:
        f.truncate(40)
    with pytest.raises(DataError, match="truncated"):
        load_idx(ip, lp)


def test_make_synthetic_shapes_and_determinism():
    a = make_synthetic(200, 10, 16, seed=77)
    assert len(a) == 2000
    assert a.images.shape == (2000, 1, 16, 16)
    assert a.class_counts().tolist() == [200] * 10
    b = make_synthetic(200, 10, 16, seed=77)
    assert np.array_equal(a.images, b.images)
    c = make_synthetic(10, 10, 16, seed=78)
    assert not np.array_equal(a.images[:100], c.images[:100])


def test_make_synthetic_classes_distinct():
    # mean template of each class should differ clearly from every other class
    v = make_synthetic(40, 10, 16, seed=5)
    means = np.stack([v.images[v.labels == c, 0].mean(axis=0) for c in range(10)])
    for i in range(10):
        for j in range(i + 1, 10):
            assert np.abs(means[i] - means[j]).mean() > 0.02


def test_container_roundtrip(tmp_path):
    v = distort(make_synthetic(20, 4, 12, seed=3), DistortionSpec(ir=2, nr=0.1, seed=4))
    p = tmp_path / "data.dset"
    save_container(v, p)
    back = load_container(p)
    assert np.array_equal(back.images, v.images)
    assert np.array_equal(back.labels, v.labels)
    assert np.array_equal(back.global_index, v.global_index)
    assert back.n_classes == v.n_classes
    assert back.lineage == v.lineage
