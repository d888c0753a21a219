import numpy as np
import pytest

from portionmtl import data as D


@pytest.fixture(scope="module")
def small():
    return D.generate_synthetic_dataset(n_classes=5, per_class=8, image_size=16, seed=7)


def test_generation_shapes_and_labels(small):
    assert len(small) == 40 and small.n_classes == 5
    assert small.class_counts() == [8] * 5
    px = small.items[0].pixels
    assert px.shape == (16, 16, 3) and px.dtype == np.float32
    assert all(0.0 <= it.pixels.min() and it.pixels.max() <= 1.0 for it in small.items)
    assert len({tuple(it.pixels.ravel()[:8]) for it in small.items}) == 40


def test_portion_recoverable_from_pixels(small):
    for it in small.items:
        area = D.object_area_fraction(it.pixels)
        assert it.z == pytest.approx(small.densities[it.y] * area * D.Z_MAX, rel=1e-12, abs=1e-9)


def test_density_table():
    d = D.default_densities(21)
    assert d == D.default_densities(21)
    assert d[0] == 0.0 and all(0.2 <= v <= 1.0 for v in d[1:])


def test_generation_is_deterministic(small):
    again = D.generate_synthetic_dataset(n_classes=5, per_class=8, image_size=16, seed=7)
    assert D.datasets_equal(small, again)
    other = D.generate_synthetic_dataset(n_classes=5, per_class=8, image_size=16, seed=8)
    assert not D.datasets_equal(small, other)


def test_generation_rejects_bad_args():
    with pytest.raises(D.DatasetError):
        D.generate_synthetic_dataset(n_classes=1)
    with pytest.raises(D.DatasetError):
        D.generate_synthetic_dataset(image_size=4)


@pytest.mark.parametrize("op", D.AUG_OPS)
def test_ops_preserve_shape(small, op):
    px = small.items[3].pixels
    assert D.apply_op(px, op).shape == px.shape


def test_op_identities(small):
    px = small.items[0].pixels
    assert np.array_equal(D.apply_op(D.apply_op(px, "rot90"), "rot270"), px)
    assert np.array_equal(D.apply_op(D.apply_op(px, "flipX"), "flipX"), px)
    assert np.array_equal(D.apply_op(D.apply_op(px, "flipX"), "flipY"), D.apply_op(px, "flipXY"))
    with pytest.raises(ValueError):
        D.apply_op(px, "rot45")


def test_balanced_augment_hits_target(small):
    out = D.balanced_augment(small, 20, seed=0)
    assert out.class_counts() == [20] * 5
    aug = [it for it in out.items if it.provenance == "augmented"]
    by_uid = {it.uid: it for it in small.items}
    for it in aug:
        src = by_uid[it.source]
        assert (it.y, it.z) == (src.y, src.z)
        assert np.array_equal(it.pixels, D.apply_op(src.pixels, it.op))
    assert len({(it.source, it.op) for it in aug}) == len(aug)


def test_balanced_augment_ceiling(small):
    assert D.balanced_augment(small, 48, seed=0).class_counts() == [48] * 5
    with pytest.raises(D.DatasetError, match="unreachable"):
        D.balanced_augment(small, 49, seed=0)


def test_balanced_augment_leaves_full_classes(small):
    assert D.balanced_augment(small, 8, seed=0).items == small.items


def test_split_is_stratified_and_grouped(small):
    aug = D.balanced_augment(small, 16, seed=1)
    train, test = D.split_train_test(aug, 0.25, seed=0)
    assert len(train) + len(test) == len(aug)
    test_sources = {it.uid if it.source is None else it.source for it in test.items}
    assert not any((it.uid if it.source is None else it.source) in test_sources for it in train.items)
    assert all(c > 0 for c in test.class_counts())
    with pytest.raises(D.DatasetError):
        D.split_train_test(aug, 1.0, seed=0)


def test_prepare_dataset_orders():
    ds = D.prepare_dataset(n_classes=3, per_class=10, image_size=8, seed=0, test_fraction=0.2)
    train, test = ds.subset("train"), ds.subset("test")
    assert train.class_counts() == [8] * 3
    assert all(it.provenance == "original" for it in test.items)
    ds2 = D.prepare_dataset(n_classes=3, per_class=10, image_size=8, seed=0, test_fraction=0.2,
                            target_per_class=20, augment_first=True)
    assert sum(ds2.class_counts()) == 60


def test_arrays_layout(small):
    x, y, z = small.arrays()
    assert x.shape == (40, 3, 16, 16) and x.dtype == np.float64
    np.testing.assert_array_equal(x[0], small.items[0].pixels.transpose(2, 0, 1))
    assert y.dtype.kind == "i" and z.dtype == np.float64


def test_save_load_round_trip(small, tmp_path):
    D.save_dataset(small, tmp_path / "a")
    back = D.load_dataset(tmp_path / "a")
    assert D.datasets_equal(small, back)
    D.save_dataset(back, tmp_path / "b")
    assert (tmp_path / "a" / "images.bin").read_bytes() == (tmp_path / "b" / "images.bin").read_bytes()
    assert D.dataset_digest(tmp_path / "a") == D.dataset_digest(tmp_path / "b")


def test_load_detects_corruption(small, tmp_path):
    D.save_dataset(small, tmp_path)
    blob = bytearray((tmp_path / "images.bin").read_bytes())
    blob[100] ^= 0xFF
    (tmp_path / "images.bin").write_bytes(bytes(blob))
    with pytest.raises(D.ChecksumError):
        D.load_dataset(tmp_path)


def test_load_missing_and_bad_magic(tmp_path, small):
    with pytest.raises(D.DatasetFormatError):
        D.load_dataset(tmp_path / "nope")
    D.save_dataset(small, tmp_path)
    blob = (tmp_path / "images.bin").read_bytes()
    (tmp_path / "images.bin").write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(D.DatasetFormatError):
        D.load_dataset(tmp_path)
