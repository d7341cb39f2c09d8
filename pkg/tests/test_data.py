import gzip
import struct

import numpy as np
import pytest

from sparsefront import data as D

from conftest import needs_mnist


def write_idx_pair(tmp_path, images, labels, image_magic=D.IMAGE_MAGIC,
                   label_magic=D.LABEL_MAGIC, truncate_images=0):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    img_path = tmp_path / "images-idx3-ubyte"
    blob = struct.pack(">IIII", image_magic, n, rows, cols) + images.tobytes()
    if truncate_images:
        blob = blob[:-truncate_images]
    img_path.write_bytes(blob)
    lbl_path = tmp_path / "labels-idx1-ubyte"
    lbl_path.write_bytes(struct.pack(">II", label_magic, labels.size) + labels.tobytes())
    return img_path, lbl_path


class TestLoadIdx:
    def test_parse_and_normalize(self, tmp_path):
        images = np.zeros((3, 4, 4), dtype=np.uint8)
        images[0, 0, 0] = 255
        images[1, 2, 3] = 128
        img, lbl = write_idx_pair(tmp_path, images, [7, 1, 0])
        ds = D.load_idx(img, lbl)
        assert ds.images.shape == (3, 16)
        assert ds.images[0, 0] == 1.0
        assert ds.images[1, 2 * 4 + 3] == pytest.approx(128 / 255)
        assert ds.images.min() == 0.0
        assert list(ds.labels) == [7, 1, 0]

    def test_gzip_transparent(self, tmp_path):
        images = np.arange(32, dtype=np.uint8).reshape(2, 4, 4)
        img, lbl = write_idx_pair(tmp_path, images, [1, 2])
        for p in (img, lbl):
            with open(p, "rb") as f_in, gzip.open(str(p) + ".gz", "wb") as f_out:
                f_out.write(f_in.read())
        ds = D.load_idx(str(img) + ".gz", str(lbl) + ".gz")
        assert ds.images.shape == (2, 16)

    def test_bad_magic_names_offset(self, tmp_path):
        img, lbl = write_idx_pair(tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), [0],
                                  image_magic=0xDEADBEEF)
        with pytest.raises(D.IdxFormatError, match="offset 0"):
            D.load_idx(img, lbl)

    def test_truncated_file(self, tmp_path):
        img, lbl = write_idx_pair(tmp_path, np.zeros((2, 3, 3), dtype=np.uint8), [0, 1],
                                  truncate_images=5)
        with pytest.raises(D.IdxFormatError, match="truncated"):
            D.load_idx(img, lbl)

    def test_count_mismatch(self, tmp_path):
        other = tmp_path / "other"
        other.mkdir()
        img, _ = write_idx_pair(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), [0, 1])
        _, lbl = write_idx_pair(other, np.zeros((3, 2, 2), dtype=np.uint8), [0, 1, 2])
        with pytest.raises(D.IdxFormatError, match="count"):
            D.load_idx(img, lbl)

    @needs_mnist
    def test_full_mnist_shapes(self, mnist_train, mnist_test):
        assert mnist_train.images.shape == (60000, 784)
        assert mnist_test.images.shape == (10000, 784)
        assert mnist_train.images.min() >= 0.0 and mnist_train.images.max() <= 1.0
        assert set(np.unique(mnist_test.labels)) == set(range(10))

    @needs_mnist
    def test_repeated_loads_identical(self):
        a = D.load_mnist(split="test")
        b = D.load_mnist(split="test")
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)


class TestFilterPair:
    def test_relabel_and_order(self, tmp_path):
        images = np.arange(5 * 4, dtype=np.uint8).reshape(5, 2, 2)
        img, lbl = write_idx_pair(tmp_path, images, [3, 7, 1, 7, 3])
        ds = D.load_idx(img, lbl)
        pair = D.filter_pair(ds, 3, 7)
        assert list(pair.labels) == [1, -1, -1, 1]
        # order preserved: first retained sample is the original first "3"
        assert np.array_equal(pair.images[0], ds.images[0])
        assert np.array_equal(pair.images[1], ds.images[1])

    def test_same_digit_rejected(self, tmp_path):
        img, lbl = write_idx_pair(tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), [3])
        ds = D.load_idx(img, lbl)
        with pytest.raises(ValueError):
            D.filter_pair(ds, 3, 3)

    def test_empty_result_rejected(self, tmp_path):
        img, lbl = write_idx_pair(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), [1, 2])
        ds = D.load_idx(img, lbl)
        with pytest.raises(ValueError):
            D.filter_pair(ds, 3, 7)

    @needs_mnist
    def test_mnist_pair_counts(self, mnist_test, pair_test):
        threes = int((mnist_test.labels == 3).sum())
        sevens = int((mnist_test.labels == 7).sum())
        assert len(pair_test) == threes + sevens
        assert int((pair_test.labels == 1).sum()) == threes

    @needs_mnist
    def test_no_label_leakage(self, mnist_test, pair_test):
        # every retained (image, label) pair appears unchanged in the source
        src = {hash(img.tobytes()): lab for img, lab in zip(mnist_test.images, mnist_test.labels)}
        for img, lab in zip(pair_test.images[:200], pair_test.labels[:200]):
            digit = src[hash(img.tobytes())]
            assert lab == (1 if digit == 3 else -1)


class TestChecksums:
    def test_archive_table(self):
        assert set(D.MNIST_ARCHIVES) == {
            "train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
            "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz",
        }
        sizes = [size for size, _ in D.MNIST_ARCHIVES.values()]
        assert sizes == [9912422, 28881, 1648877, 4542]

    @needs_mnist
    def test_fetch_skips_verified_archives(self, capsys):
        # populated data dir with matching checksums: fetch is a no-op and
        # never touches the network
        directory = D.data_dir()
        if not all((directory / name).exists() for name in D.MNIST_ARCHIVES):
            pytest.skip("data dir holds unpacked files only")
        out = D.fetch_mnist(directory, base_url="http://unreachable.invalid")
        assert out == directory
        assert capsys.readouterr().out.count("checksum OK") == 4
