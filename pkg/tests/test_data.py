import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipshift.data import (
    CIFAR_PIXELS,
    Dataset,
    batch_iter,
    crop_at,
    load_cifar_binary,
    load_raw,
    mix_counts,
    nearest_centroid_accuracy,
    random_crop_pad,
    save_raw,
    synthetic_blobs,
)
from lipshift.exceptions import ContractError, FormatError


def _cifar_bytes(labels, variant="c10", seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for lab in labels:
        head = bytes([lab]) if variant == "c10" else bytes([lab % 20, lab])
        recs.append(head + rng.integers(0, 256, CIFAR_PIXELS, dtype=np.uint8).tobytes())
    return b"".join(recs)


def test_cifar10_roundtrip(tmp_path):
    raw = _cifar_bytes([3, 0, 9])
    (tmp_path / "b.bin").write_bytes(raw)
    ds = load_cifar_binary(tmp_path / "b.bin")
    assert ds.images.shape == (3, 3, 32, 32) and ds.num_classes == 10
    assert ds.labels.tolist() == [3, 0, 9]
    pixels = np.frombuffer(raw[1 : 1 + CIFAR_PIXELS], dtype=np.uint8).reshape(3, 32, 32)
    np.testing.assert_array_equal(ds.images[0], pixels / np.float32(255))


def test_cifar100_uses_fine_label(tmp_path):
    (tmp_path / "b.bin").write_bytes(_cifar_bytes([57, 99], variant="c100"))
    ds = load_cifar_binary(tmp_path / "b.bin", "c100")
    assert ds.labels.tolist() == [57, 99] and ds.num_classes == 100


def test_cifar_errors(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(b"")
    assert len(load_cifar_binary(p)) == 0
    raw = _cifar_bytes([1, 2])
    p.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match=f"offset {CIFAR_PIXELS + 1}"):
        load_cifar_binary(p)
    p.write_bytes(_cifar_bytes([1, 12]))
    with pytest.raises(FormatError, match=f"offset {CIFAR_PIXELS + 1}"):
        load_cifar_binary(p)
    with pytest.raises(ContractError):
        load_cifar_binary(p, "svhn")


def test_raw_roundtrip_and_errors(tmp_path):
    ds = synthetic_blobs(3, 2, seed=0)
    save_raw(tmp_path / "d.raw", ds)
    back = load_raw(tmp_path / "d.raw", 2)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    raw = (tmp_path / "d.raw").read_bytes()
    (tmp_path / "bad.raw").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_raw(tmp_path / "bad.raw")
    (tmp_path / "short.raw").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        load_raw(tmp_path / "short.raw")


def test_dataset_validation():
    with pytest.raises(ContractError):
        Dataset(np.full((1, 1, 2, 2), 1.5), [0], 2)
    with pytest.raises(ContractError):
        Dataset(np.zeros((1, 1, 2, 2)), [2], 2)
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 1, 2, 2)), [0], 2)


def test_crop_examples():
    img = np.arange(2 * 4 * 4, dtype=np.float32).reshape(2, 4, 4)
    np.testing.assert_array_equal(crop_at(img, 2, 2, 2), img)
    shifted = crop_at(img, 1, 0, 0)  # content moves down-right by one
    np.testing.assert_array_equal(shifted[:, 1:, 1:], img[:, :3, :3])
    assert np.all(shifted[:, 0, :] == 0)
    np.testing.assert_array_equal(random_crop_pad(img, 0, seed=1), img)
    with pytest.raises(ContractError):
        random_crop_pad(img, -1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_crop_properties(pad, seed):
    img = np.random.default_rng(seed).random((3, 8, 8)).astype(np.float32) + 0.01
    out = random_crop_pad(img, pad, seed=seed)
    assert out.shape == img.shape
    kept = out[out != 0]
    assert kept.size >= (8 - pad) ** 2 * 3
    assert np.isin(kept, img).all()
    np.testing.assert_array_equal(out, random_crop_pad(img, pad, seed=seed))


def test_blobs_properties():
    tr = synthetic_blobs(50, 3, separation=10.0, seed=0)
    te = synthetic_blobs(20, 3, separation=10.0, seed=1, center_seed=0)
    assert nearest_centroid_accuracy(tr, te) == 1.0
    assert tr.images.min() >= 0 and tr.images.max() <= 1
    assert np.bincount(tr.labels).tolist() == [50, 50, 50]
    again = synthetic_blobs(50, 3, separation=10.0, seed=0)
    np.testing.assert_array_equal(tr.images, again.images)
    with pytest.raises(ContractError):
        synthetic_blobs(5, 2, separation=0.0)


def test_batch_iter_covers_every_index():
    ds = synthetic_blobs(10, 2, seed=0)
    seen = [b for _, b in batch_iter(ds, 6, shuffle_seed=3)]
    assert [len(b) for b in seen] == [6, 6, 6, 2]
    assert sorted(np.concatenate(seen).tolist()) == sorted(ds.labels.tolist())
    images = np.concatenate([x for x, _ in batch_iter(ds, 7, shuffle_seed=None)])
    np.testing.assert_array_equal(images, ds.images)
    with pytest.raises(ContractError):
        next(batch_iter(ds, 21))


def test_mix_ratio_counts():
    assert mix_counts(128, (1, 3)) == (32, 96)
    ds = synthetic_blobs(64, 2, seed=0)
    x, _ = next(batch_iter(ds, 128, shuffle_seed=0, mix_ratio=(1, 3), pad=2))
    rng = np.random.default_rng(0)
    order = rng.permutation(128)
    np.testing.assert_array_equal(x[:32], ds.images[order[:32]])
    with pytest.raises(ContractError):
        next(batch_iter(ds, 8, mix_ratio=(0, 0)))
