import pickle

import numpy as np
import pytest
from hypothesis import given, strategies as st

from selftrain_backdoor.dataio import (CIFAR_RECORD, ImageDataset, SplitManifest, concat, load_cifar10,
                                       load_dataset, load_unlabeled_extra, make_split, make_synthetic,
                                       round_half_away, save_dataset, write_cifar_records)
from selftrain_backdoor.errors import (DataFormatError, EmptyDatasetError, InputError, ValidationError)


def _two_record_bytes():
    # record 0: label 3, every byte of the red plane 10, green 20, blue 30, except pixel (0,0) red = 255
    # record 1: label 7, byte k of the record body = k mod 251
    r0 = bytearray([3]) + bytes([10] * 1024 + [20] * 1024 + [30] * 1024)
    r0[1] = 255
    r1 = bytearray([7]) + bytes(k % 251 for k in range(3072))
    return bytes(r0 + r1)


def test_cifar_two_record_file_byte_exact(tmp_path):
    path = tmp_path / "two.bin"
    path.write_bytes(_two_record_bytes())
    ds = load_cifar10(path)
    assert len(ds) == 2 and ds.shape == (32, 32, 3)
    assert ds.labels.tolist() == [3, 7]
    assert ds.images[0, 0, 0, 0] == np.float32(255) / np.float32(255)
    assert ds.images[0, 0, 1, 0] == np.float32(10) / np.float32(255)
    assert ds.images[0, 5, 5, 1] == np.float32(20) / np.float32(255)
    assert ds.images[0, 31, 31, 2] == np.float32(30) / np.float32(255)
    # record 1: channel c, row i, column j sits at body offset c*1024 + i*32 + j
    for c, i, j in [(0, 0, 0), (0, 1, 2), (1, 3, 4), (2, 31, 31)]:
        byte = (c * 1024 + i * 32 + j) % 251
        assert ds.images[1, i, j, c] == np.float32(byte) / np.float32(255)


def test_cifar_writer_roundtrip(tmp_path, rng):
    imgs = rng.integers(0, 256, (5, 32, 32, 3), dtype=np.uint8)
    labels = [0, 9, 4, 4, 1]
    write_cifar_records(tmp_path / "x.bin", imgs, labels)
    assert (tmp_path / "x.bin").stat().st_size == 5 * CIFAR_RECORD
    ds = load_cifar10(tmp_path / "x.bin")
    assert np.array_equal(np.rint(ds.images * 255).astype(np.uint8), imgs)
    assert ds.labels.tolist() == labels


def test_cifar_directory_layout(tmp_path, rng):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        write_cifar_records(d / name, rng.integers(0, 256, (2, 32, 32, 3), dtype=np.uint8), [1, 2])
    assert len(load_cifar10(tmp_path, train=True)) == 10
    assert len(load_cifar10(tmp_path, train=False)) == 2


def test_cifar_errors(tmp_path):
    (tmp_path / "empty.bin").write_bytes(b"")
    with pytest.raises(EmptyDatasetError):
        load_cifar10(tmp_path / "empty.bin")
    (tmp_path / "short.bin").write_bytes(b"\x00" * (CIFAR_RECORD - 1))
    with pytest.raises(DataFormatError):
        load_cifar10(tmp_path / "short.bin")
    with pytest.raises(InputError):
        load_cifar10(tmp_path / "missing.bin")


def test_unlabeled_extra_formats(tmp_path, rng):
    imgs = rng.integers(0, 256, (100, 32, 32, 3), dtype=np.uint8)
    np.savez(tmp_path / "a.npz", data=imgs, labels=np.zeros(100))
    with open(tmp_path / "b.pickle", "wb") as fh:
        pickle.dump({"data": imgs, "extrapolated_targets": np.ones(100)}, fh)
    write_cifar_records(tmp_path / "c.bin", imgs, np.arange(100) % 10)
    np.save(tmp_path / "d.npy", imgs)
    for name in ("a.npz", "b.pickle", "c.bin", "d.npy"):
        ds = load_unlabeled_extra(tmp_path / name)
        assert len(ds) == 100 and ds.labels is None
        assert np.array_equal(np.rint(ds.images * 255).astype(np.uint8), imgs)


def test_unlabeled_extra_rejects_bad_shape(tmp_path):
    np.save(tmp_path / "bad.npy", np.zeros((3, 16, 16, 3), np.uint8))
    with pytest.raises(DataFormatError):
        load_unlabeled_extra(tmp_path / "bad.npy")


def test_dataset_invariants():
    with pytest.raises(ValidationError):
        ImageDataset(np.zeros((2, 4, 4, 3)), [0, 5], 3)
    with pytest.raises(ValidationError):
        ImageDataset(np.zeros((2, 4, 4, 3)), [0], 3)
    with pytest.raises(ValidationError):
        ImageDataset(np.full((1, 4, 4, 3), 1.5), None, 3)


@given(st.integers(1, 6), st.booleans(), st.booleans(), st.integers(0, 2**31 - 1))
def test_save_load_roundtrip(tmp_path_factory, n, on_grid, labeled, seed):
    rng = np.random.default_rng(seed)
    imgs = rng.random((n, 4, 4, 3), dtype=np.float32)
    if on_grid:
        imgs = rng.integers(0, 256, imgs.shape).astype(np.float32) / np.float32(255)
    ds = ImageDataset(imgs, rng.integers(0, 3, n) if labeled else None, 3, "rt")
    path = tmp_path_factory.mktemp("rt") / "ds.npz"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.images, ds.images)
    assert (back.labels is None) == (ds.labels is None)
    if labeled:
        assert np.array_equal(back.labels, ds.labels)
    assert back.checksum() == ds.checksum()


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, 2.4999, -0.5, 0.0)] == [1, 2, 3, 2, -1, 0]


def test_split_counts_example():
    ds = ImageDataset(np.zeros((100, 2, 2, 3), np.float32), np.arange(100) % 10, 10, "hundred")
    split, manifest = make_split(ds, 0.3, seed=7)
    assert np.bincount(split.labeled.labels, minlength=10).tolist() == [3] * 10
    assert split.unlabeled.labels is None and len(split.unlabeled) == 70
    again, m2 = make_split(ds, 0.3, seed=7)
    assert manifest.labeled_indices == m2.labeled_indices


def test_split_fraction_one_and_errors(small_fixture):
    split, _ = make_split(small_fixture, 1.0, 0)
    assert len(split.unlabeled) == 0 and len(split.labeled) == len(small_fixture)
    for bad in (0.0, -0.1, 1.01):
        with pytest.raises(ValidationError):
            make_split(small_fixture, bad, 0)


@given(st.floats(0.01, 1.0), st.integers(0, 1000), st.lists(st.integers(1, 15), min_size=1, max_size=5))
def test_split_partition_and_stratification(fraction, seed, sizes):
    labels = np.concatenate([np.full(s, c) for c, s in enumerate(sizes)])
    ds = ImageDataset(np.zeros((len(labels), 2, 2, 3), np.float32), labels, len(sizes), "p")
    split, m = make_split(ds, fraction, seed)
    li, ui = set(m.labeled_indices), set(m.unlabeled_indices)
    assert not li & ui and li | ui == set(range(len(ds)))
    per = np.bincount(labels[sorted(li)], minlength=len(sizes))
    for c, s in enumerate(sizes):
        assert abs(per[c] - fraction * s) <= 1


def test_split_manifest_roundtrip(tmp_path, small_fixture):
    split, m = make_split(small_fixture, 0.25, 3)
    m.save(tmp_path / "split.json")
    again = SplitManifest.load(tmp_path / "split.json").apply(small_fixture)
    assert np.array_equal(again.labeled.images, split.labeled.images)
    assert np.array_equal(again.unlabeled.images, split.unlabeled.images)
    other = make_synthetic(4, 12, 8, seed=99)
    with pytest.raises(DataFormatError):
        SplitManifest.load(tmp_path / "split.json").apply(other)
    text = (tmp_path / "split.json").read_text()
    assert text.index('"checksum"') < text.index('"labeled_indices"')


def test_synthetic_shape_and_determinism():
    a = make_synthetic(10, 100, 16, 0)
    b = make_synthetic(10, 100, 16, 0)
    assert len(a) == 1000 and a.shape == (16, 16, 3)
    assert np.bincount(a.labels).tolist() == [100] * 10
    assert a.checksum() == b.checksum()
    assert a.checksum() != make_synthetic(10, 100, 16, 1).checksum()
    with pytest.raises(ValidationError):
        make_synthetic(0, 10, 16, 0)


def test_concat(small_fixture):
    both = concat([small_fixture, small_fixture], "twice")
    assert len(both) == 2 * len(small_fixture) and both.labels is not None
    assert concat([small_fixture, small_fixture.without_labels()]).labels is None
