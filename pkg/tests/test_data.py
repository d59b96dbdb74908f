import csv
import gzip
import struct
import zlib

import numpy as np
import pytest

from mbnn.crossbar import PARALLEL, VariationSpec
from mbnn.data import (
    RESULT_COLUMNS,
    BadMagicError,
    CheckpointError,
    ChecksumError,
    CountMismatchError,
    Dataset,
    ResultRecord,
    TruncatedFileError,
    VersionError,
    checkpoint_bytes,
    load_checkpoint,
    load_crossbars,
    load_mnist,
    load_mnist_dir,
    pack_bits,
    read_results_csv,
    save_checkpoint,
    save_crossbars,
    split,
    unpack_bits,
    write_idx_images,
    write_idx_labels,
    write_results_csv,
)
from mbnn.mapping import map_model
from mbnn.nn import FP8, FR32, NetworkModel, make_optimizer_config, train


def write_pair(d, images, labels):
    write_idx_images(d / "img", images)
    write_idx_labels(d / "lab", labels)
    return d / "img", d / "lab"


def test_load_scales_pixels(tmp_path):
    images = np.zeros((3, 28, 28), np.uint8)
    images[0, 0, 0] = 255
    img, lab = write_pair(tmp_path, images, [1, 2, 3])
    ds = load_mnist(img, lab)
    assert ds.images.shape == (3, 1, 28, 28) and ds.images.dtype == np.float32
    assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[1].max() == 0.0
    assert ds.labels.tolist() == [1, 2, 3]


def test_header_layout_is_big_endian(tmp_path):
    img, _ = write_pair(tmp_path, np.zeros((2, 28, 28), np.uint8), [0, 0])
    assert img.read_bytes()[:16] == bytes.fromhex("00000803 00000002 0000001c 0000001c".replace(" ", ""))


def test_gzip_input(tmp_path):
    img, lab = write_pair(tmp_path, np.full((2, 28, 28), 51, np.uint8), [4, 5])
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    assert load_mnist(gz, lab).images[0, 0, 0, 0] == pytest.approx(0.2)


def test_bad_magic(tmp_path):
    img, lab = write_pair(tmp_path, np.zeros((2, 28, 28), np.uint8), [0, 0])
    buf = bytearray(img.read_bytes())
    buf[3] = 0x01
    img.write_bytes(bytes(buf))
    with pytest.raises(BadMagicError):
        load_mnist(img, lab)


def test_truncated_file_reports_sizes(tmp_path):
    img, lab = write_pair(tmp_path, np.zeros((2, 28, 28), np.uint8), [0, 0])
    img.write_bytes(img.read_bytes()[:-10])
    with pytest.raises(TruncatedFileError, match=r"expected 1584 bytes, got 1574"):
        load_mnist(img, lab)


def test_count_mismatch(tmp_path):
    img, lab = write_pair(tmp_path, np.zeros((2, 28, 28), np.uint8), [0, 0, 0])
    with pytest.raises(CountMismatchError):
        load_mnist(img, lab)


def test_missing_directory_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="t10k-images"):
        load_mnist_dir(tmp_path, "test")


def make_dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, 1, 28, 28)).astype(np.float32), rng.integers(0, 10, n))


def test_split_sizes_and_partition():
    ds = make_dataset(10)
    ds.images[:, 0, 0, 0] = np.arange(10)
    a, b = split(ds, 0.8, seed=3)
    assert (len(a), len(b)) == (8, 2)
    ids = sorted(a.images[:, 0, 0, 0].tolist() + b.images[:, 0, 0, 0].tolist())
    assert ids == list(range(10))
    a2, _ = split(ds, 0.8, seed=3)
    np.testing.assert_array_equal(a.images, a2.images)
    assert [len(p) for p in split(ds, 0.9)] == [9, 1]


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.2])
def test_split_rejects_degenerate_fraction(fraction):
    with pytest.raises(ValueError):
        split(make_dataset(4), fraction)


def test_bit_packing():
    w = np.where(np.random.default_rng(0).random((16, 1, 2, 2)) > 0.5, 1.0, -1.0)
    payload = pack_bits(w)
    assert len(payload) == 8
    np.testing.assert_array_equal(unpack_bits(payload, w.shape), w)
    assert pack_bits(np.array([1, -1, -1, -1, -1, -1, -1, 1])) == b"\x81"


@pytest.fixture(scope="module")
def trained_pair():
    ds = make_dataset(16, seed=1)
    models = {}
    for rep in (FP8, FR32):
        m = NetworkModel.initialize(t_clip=0.89, representation=rep, seed=2)
        train(m, make_optimizer_config("adam", 1e-2, 8), ds.images, ds.labels, epochs=2)
        models[rep] = m
    return ds, models


@pytest.mark.parametrize("rep", [FP8, FR32])
def test_checkpoint_round_trip(tmp_path, trained_pair, rep):
    ds, models = trained_pair
    model = models[rep]
    path = save_checkpoint(tmp_path / "m.mbnn", model, {"optimizer": "adam"})
    ck = load_checkpoint(path)
    assert ck.metadata == {"optimizer": "adam"}
    np.testing.assert_array_equal(ck.model.predict_logits(ds.images), model.predict_logits(ds.images))
    for a, b in zip(ck.model.binary_weights, model.binary_weights):
        np.testing.assert_array_equal(a, b)
    assert np.abs(ck.model.w1).max() <= model.t_clip
    assert checkpoint_bytes(ck.model, ck.metadata) == path.read_bytes()


def test_checkpoint_detects_corruption(tmp_path, trained_pair):
    path = save_checkpoint(tmp_path / "m.mbnn", trained_pair[1][FP8])
    buf = bytearray(path.read_bytes())
    buf[100] ^= 0x01
    path.write_bytes(bytes(buf))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_checkpoint_rejects_unknown_version(tmp_path, trained_pair):
    buf = bytearray(checkpoint_bytes(trained_pair[1][FP8])[:-4])
    buf[4:6] = struct.pack("<H", 7)
    path = tmp_path / "v7.mbnn"
    path.write_bytes(bytes(buf) + struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF))
    with pytest.raises(VersionError):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.mbnn"
    path.write_bytes(b"hello world, definitely not a model")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_crossbar_snapshot_round_trip(tmp_path, trained_pair):
    model = trained_pair[1][FP8]
    for mode in ("sequential", PARALLEL):
        backend = map_model(model, mode=mode, variation=VariationSpec(40.0, seed=3), ks=(3500.0, 4200.0))
        path = save_crossbars(tmp_path / f"{mode}.xbar", backend.crossbars)
        for a, b in zip(load_crossbars(path), backend.crossbars):
            np.testing.assert_array_equal(a.conductance, b.conductance)
            np.testing.assert_array_equal(a.weights, b.weights)
            assert (a.k, a.mode, a.variation) == (b.k, b.mode, b.variation)


def test_results_csv(tmp_path):
    path = write_results_csv([], tmp_path / "empty.csv")
    assert path.read_bytes() == (",".join(RESULT_COLUMNS) + "\n").encode()

    rec = ResultRecord("sweep", "TFP-8 MBNN", "adam", 40.0, 3, 3512.25, 4000.0, 0.9731)
    path = write_results_csv([rec, ResultRecord("train", "FP-8 BNN", "sgd-m0.8", accuracy=0.94)],
                             tmp_path / "r.csv")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 3 and all(len(r) == 8 for r in rows)
    assert b"\r" not in path.read_bytes()
    assert read_results_csv(path)[0] == rec
    assert read_results_csv(path)[1].sigma is None
