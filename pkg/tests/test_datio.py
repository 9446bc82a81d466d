import struct

import numpy as np
import pytest

from binn import datio, nn
from binn.errors import DataError


def linear_probe_accuracy(images, labels, classes):
    """Least-squares one-vs-rest probe; independent of the package's nets."""
    x = images.reshape(len(labels), -1).astype(np.float64)
    x = np.hstack([x, np.ones((len(x), 1))])
    onehot = np.eye(classes)[labels]
    coef, *_ = np.linalg.lstsq(x, onehot, rcond=None)
    pred = (x @ coef).argmax(axis=1)
    return (pred == labels).mean()


# -------------------------------------------------------------------- toys


def test_blobs_zero_noise_linearly_separable():
    ds = datio.make_toy(datio.ToySpec("gaussian_blobs", 200, 4, noise=0.0, seed=0))
    assert linear_probe_accuracy(ds.images, ds.labels, 4) == 1.0


def test_toy_deterministic_under_seed():
    a = datio.make_toy(datio.ToySpec("gaussian_blobs", 100, 3, noise=0.1, seed=5))
    b = datio.make_toy(datio.ToySpec("gaussian_blobs", 100, 3, noise=0.1, seed=5))
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)
    c = datio.make_toy(datio.ToySpec("gaussian_blobs", 100, 3, noise=0.1, seed=6))
    assert a.images.tobytes() != c.images.tobytes()


def test_xor_rings_not_linearly_separable():
    ds = datio.make_toy(datio.ToySpec("xor_rings", 400, 2, noise=0.05, seed=1))
    assert linear_probe_accuracy(ds.images, ds.labels, 2) <= 0.75


def test_toy_classes_balanced_within_one():
    ds = datio.make_toy(datio.ToySpec("gaussian_blobs", 101, 4, noise=0.1, seed=2))
    counts = np.bincount(ds.labels, minlength=4)
    assert counts.max() - counts.min() <= 1


def test_toy_invariants_and_errors():
    with pytest.raises(DataError, match="smaller than class count"):
        datio.make_toy(datio.ToySpec("gaussian_blobs", 2, 4))
    with pytest.raises(DataError, match="generator"):
        datio.make_toy(datio.ToySpec("spirals", 10, 2))
    ds = datio.make_toy(datio.ToySpec("xor_rings", 64, 2, noise=0.3, seed=3))
    ds.validate()


def test_blob_images_rendering():
    ds = datio.make_blob_images(60, 4, noise=0.05, seed=0, size=8)
    assert ds.images.shape == (60, 1, 8, 8)
    ds.validate()
    assert linear_probe_accuracy(ds.images, ds.labels, 4) >= 0.9


# --------------------------------------------------------------- IDX format


def idx_images_bytes(arr):
    n, h, w = arr.shape
    return struct.pack(">HBBIII", 0, 8, 3, n, h, w) + arr.astype(np.uint8).tobytes()


def idx_labels_bytes(labels):
    return struct.pack(">HBBI", 0, 8, 1, len(labels)) + bytes(labels)


def test_idx_pixel_mapping_endpoints(tmp_path):
    img = np.array([[[0, 128], [255, 64]]], dtype=np.uint8)
    p = tmp_path / "img.idx"
    p.write_bytes(idx_images_bytes(img))
    ds = datio.load_idx(p)
    assert ds.images.shape == (1, 1, 2, 2)
    assert ds.images[0, 0, 0, 0] == -1.0
    assert ds.images[0, 0, 1, 0] == 1.0
    assert ds.images[0, 0, 0, 1] == pytest.approx(128 * 2 / 255 - 1)  # 0.00392...
    assert ds.images[0, 0, 0, 1] == pytest.approx(0.00392156862, abs=1e-8)


def test_idx_with_labels(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (5, 4, 4), dtype=np.uint8)
    labels = [3, 1, 4, 1, 5]
    pi = tmp_path / "img.idx"
    pl = tmp_path / "lab.idx"
    pi.write_bytes(idx_images_bytes(img))
    pl.write_bytes(idx_labels_bytes(labels))
    ds = datio.load_idx(pi, pl)
    assert ds.labels.tolist() == labels
    assert ds.images.shape == (5, 1, 4, 4)


def test_idx_bad_magic_and_truncations(tmp_path):
    img = np.zeros((2, 3, 3), dtype=np.uint8)
    blob = idx_images_bytes(img)
    p = tmp_path / "x.idx"
    p.write_bytes(b"\x12\x34" + blob[2:])
    with pytest.raises(DataError, match="magic"):
        datio.load_idx(p)
    # fuzz: every truncation errors cleanly, never crashes
    for cut in range(0, len(blob), 3):
        p.write_bytes(blob[:cut])
        with pytest.raises(DataError):
            datio.load_idx(p)
    p.write_bytes(blob + b"\x00")
    with pytest.raises(DataError):
        datio.load_idx(p)


def test_idx_label_count_mismatch(tmp_path):
    pi = tmp_path / "img.idx"
    pl = tmp_path / "lab.idx"
    pi.write_bytes(idx_images_bytes(np.zeros((3, 2, 2), dtype=np.uint8)))
    pl.write_bytes(idx_labels_bytes([1, 2]))
    with pytest.raises(DataError, match="label count"):
        datio.load_idx(pi, pl)


# ------------------------------------------------------------------ CIFAR-10


def test_cifar_single_record(tmp_path):
    rec = bytes([9]) + bytes(range(256)) * 12
    p = tmp_path / "batch.bin"
    p.write_bytes(rec)
    ds = datio.load_cifar10_bin(p)
    assert len(ds) == 1
    assert ds.labels[0] == 9
    assert ds.images.shape == (1, 3, 32, 32)
    ds.validate()


def test_cifar_size_arithmetic(tmp_path):
    p = tmp_path / "batch.bin"
    p.write_bytes(bytes(3073 * 4))
    assert len(datio.load_cifar10_bin(p)) == 4
    p.write_bytes(bytes(3073 * 2 + 1))
    with pytest.raises(DataError, match="3073"):
        datio.load_cifar10_bin(p)


# ------------------------------------------------------------- checkpoints


def small_trained_net(seed=0, variant="SB"):
    cfg = nn.mlp_config((1, 1, 6), [16], 3, variant=variant)
    net = nn.Network.from_config(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (64, 1, 1, 6)).astype(np.float32)
    y = rng.integers(0, 3, 64)
    opt = nn.Adam(net.parameters(), lr=1e-2)
    for _ in range(10):
        nn.backward_and_step(net, x, y, opt, rng=rng)
    return net, x


def test_checkpoint_roundtrip_byte_identical():
    net, x = small_trained_net()
    blob = datio.checkpoint_bytes(net)
    again = datio.load_checkpoint_bytes(blob)
    assert datio.checkpoint_bytes(again) == blob
    assert np.array_equal(net.forward(x), again.forward(x))


def test_checkpoint_corruption_detected(tmp_path):
    net, _ = small_trained_net()
    blob = bytearray(datio.checkpoint_bytes(net))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(DataError, match="hash"):
        datio.load_checkpoint_bytes(bytes(blob))


def test_checkpoint_version_refused():
    net, _ = small_trained_net()
    blob = bytearray(datio.checkpoint_bytes(net))
    blob[4] = 99  # version field
    body = bytes(blob[:-32])
    import hashlib

    with pytest.raises(DataError, match="version"):
        datio.load_checkpoint_bytes(body + hashlib.sha256(body).digest())


def test_packed_export_reload_identical_predictions():
    net, x = small_trained_net(variant="AB")
    packed = datio.load_packed_bytes(datio.packed_export_bytes(net))
    assert np.array_equal(net.forward(x), packed.forward(x))
    # and through a float-checkpoint roundtrip as well
    f = datio.load_checkpoint_bytes(datio.checkpoint_bytes(net))
    assert np.array_equal(f.forward(x).argmax(1), packed.forward(x).argmax(1))


def test_packed_export_smaller_than_float():
    cfg = nn.mlp_config((1, 1, 64), [256], 4, variant="AB", batchnorm=False, bias=False)
    net = nn.Network.from_config(cfg, seed=1)
    fsize = len(datio.checkpoint_bytes(net))
    psize = len(datio.packed_export_bytes(net))
    assert fsize / psize > 10


def test_split_dataset_tags():
    ds = datio.make_toy(datio.ToySpec("gaussian_blobs", 100, 4, noise=0.1, seed=0))
    tr, te = datio.split_dataset(ds, 80)
    assert len(tr) == 80 and len(te) == 20
    assert tr.split == "train" and te.split == "test"
