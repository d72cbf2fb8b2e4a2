import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crsapprox.data import (
    DATA_DIR_ENV,
    IdxParseError,
    ReportRow,
    decode_idx,
    encode_idx,
    gen_gaussian_matrix,
    load_mnist,
    load_mnist_splits,
    read_report,
    resolve_data_dir,
    write_report,
)
from crsapprox.tensor import make_rng


def write_mnist(directory, n_train, n_test, seed=0, compress=False):
    rng = make_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "train-images-idx3-ubyte": rng.integers(0, 256, (n_train, 28, 28), dtype=np.uint8),
        "train-labels-idx1-ubyte": rng.integers(0, 10, n_train, dtype=np.uint8),
        "t10k-images-idx3-ubyte": rng.integers(0, 256, (n_test, 28, 28), dtype=np.uint8),
        "t10k-labels-idx1-ubyte": rng.integers(0, 10, n_test, dtype=np.uint8),
    }
    for name, arr in files.items():
        raw = encode_idx(arr)
        if compress:
            (directory / (name + ".gz")).write_bytes(gzip.compress(raw, mtime=0))
        else:
            (directory / name).write_bytes(raw)
    return files


def test_idx_header_layout():
    raw = encode_idx(np.arange(6, dtype=np.uint8).reshape(2, 3))
    assert raw[:4] == bytes([0, 0, 0x08, 2])
    assert struct.unpack(">II", raw[4:12]) == (2, 3)
    assert raw[12:] == bytes(range(6))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=3),
       st.sampled_from([np.uint8, np.int8, ">i2", ">i4", ">f4", ">f8"]),
       st.integers(0, 2**31))
def test_idx_round_trip(shape, dtype, seed):
    rng = make_rng(seed)
    arr = (rng.standard_normal(shape) * 100).astype(dtype)
    back = decode_idx(encode_idx(arr))
    assert back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"\x01" + b[1:], 0),              # nonzero leading bytes
    (lambda b: b[:2] + b"\x07" + b[3:], 0),      # unknown type code
    (lambda b: b[:2], 0),                        # truncated magic
    (lambda b: b[:9], 9),                        # truncated dimensions
    (lambda b: b[:-1], 27),                      # truncated payload
    (lambda b: b + b"\x00", 28),                 # trailing byte
])
def test_idx_errors_report_offset(mutate, offset):
    raw = encode_idx(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(IdxParseError) as info:
        decode_idx(mutate(raw))
    assert info.value.offset == offset
    assert f"byte offset {offset}" in str(info.value)


def test_load_mnist_scales_and_reshapes(tmp_path):
    files = write_mnist(tmp_path, 20, 5)
    ds = load_mnist(tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte")
    assert ds.images.shape == (20, 28, 28, 1)
    assert ds.images.dtype == np.float64
    np.testing.assert_allclose(ds.images[..., 0] * 255.0, files["train-images-idx3-ubyte"])
    np.testing.assert_array_equal(ds.labels, files["train-labels-idx1-ubyte"])


def test_load_mnist_rejects_swapped_files(tmp_path):
    write_mnist(tmp_path, 4, 2)
    with pytest.raises(IdxParseError):
        load_mnist(tmp_path / "train-labels-idx1-ubyte", tmp_path / "train-images-idx3-ubyte")


def test_load_mnist_rejects_count_mismatch(tmp_path):
    write_mnist(tmp_path, 4, 2)
    (tmp_path / "short").write_bytes(encode_idx(np.zeros(3, dtype=np.uint8)))
    with pytest.raises(IdxParseError):
        load_mnist(tmp_path / "train-images-idx3-ubyte", tmp_path / "short")


@pytest.mark.parametrize("compress", [False, True])
def test_splits_hold_out_first_training_examples(tmp_path, compress):
    files = write_mnist(tmp_path, 30, 7, compress=compress)
    splits = load_mnist_splits(tmp_path, val_size=10)
    assert (len(splits.train), len(splits.val), len(splits.test)) == (20, 10, 7)
    np.testing.assert_array_equal(splits.val.labels, files["train-labels-idx1-ubyte"][:10])
    np.testing.assert_array_equal(splits.train.labels, files["train-labels-idx1-ubyte"][10:])


def test_missing_data_and_env_override(tmp_path, monkeypatch):
    with pytest.raises(FileNotFoundError) as info:
        load_mnist_splits(tmp_path)
    assert "train-images-idx3-ubyte" in str(info.value)
    monkeypatch.setenv(DATA_DIR_ENV, str(tmp_path / "elsewhere"))
    assert resolve_data_dir() == tmp_path / "elsewhere"
    assert resolve_data_dir(tmp_path) == tmp_path


def test_gaussian_matrix_moments():
    m = gen_gaussian_matrix(400, 500, 1.0, 2.0, make_rng(0))
    assert m.shape == (400, 500)
    np.testing.assert_allclose(m.mean(), 1.0, atol=0.02)
    np.testing.assert_allclose(m.std(), 2.0, atol=0.02)
    with pytest.raises(ValueError):
        gen_gaussian_matrix(2, 2, 0.0, -1.0, make_rng(0))


def sample_rows():
    return [
        ReportRow("synth-matmul/n11", "nps", "true", "false", 0.1, 10, 1000,
                  "normalized_frobenius", 0.1 + 0.2, 1e-17, 0.9, 17),
        ReportRow("train-mlp", "mlp/fwd-topk-0.4", "na", "na", 0.4, 0, 1,
                  "final_test_accuracy", 0.9816, 0.0, 0.7588, 0),
    ]


@pytest.mark.parametrize("fmt,suffix", [("csv", ".csv"), ("jsonl", ".jsonl")])
def test_report_round_trip_is_bit_exact(tmp_path, fmt, suffix):
    path = tmp_path / ("r" + suffix)
    write_report(sample_rows(), path, fmt)
    assert read_report(path) == sample_rows()


def test_report_append_writes_header_once(tmp_path):
    path = tmp_path / "r.csv"
    write_report(sample_rows()[:1], path, append=True)
    write_report(sample_rows()[1:], path, append=True)
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("experiment,")
    assert read_report(path) == sample_rows()


def test_report_validation(tmp_path):
    with pytest.raises(ValueError):
        ReportRow("x", "p", "na", "na", 0.5, 1, 0, "m", 0.0, 0.0, 0.0, 0)
    with pytest.raises(ValueError):
        write_report(sample_rows(), tmp_path / "r.txt", fmt="xml")
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        write_report(sample_rows(), blocker / "r.csv")
