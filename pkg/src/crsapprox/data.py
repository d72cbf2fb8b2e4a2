"""MNIST IDX ingestion, synthetic operands and experiment report files."""

import csv
import gzip
import json
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "APPROX_DATA_DIR"
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

_IDX_TYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IdxParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------- IDX

def decode_idx(buf):
    """Decode an IDX byte string into an array of its native dtype."""
    if len(buf) < 4:
        raise IdxParseError("truncated magic number", 0)
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim < 1:
        raise IdxParseError(f"bad magic number 0x{int.from_bytes(buf[:4], 'big'):08X}", 0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxParseError("truncated dimension header", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = len(buf) - header
    if payload < expected:
        raise IdxParseError(f"payload has {payload} bytes, dimensions {dims} need {expected}",
                            len(buf))
    if payload > expected:
        raise IdxParseError(f"{payload - expected} trailing bytes after payload", header + expected)
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def encode_idx(arr):
    arr = np.asarray(arr)
    for code, dtype in _IDX_TYPES.items():
        if arr.dtype.kind == dtype.kind and arr.dtype.itemsize == dtype.itemsize:
            break
    else:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    head = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(dtype, copy=False).tobytes()


def _read_bytes(path):
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


@dataclass
class Dataset:
    """Images (N, 28, 28, 1) in [0, 1] and integer labels 0-9."""

    images: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.split)


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def load_mnist(images_path, labels_path, split=""):
    """Read an IDX image/label file pair; pixels are scaled by 1/255."""
    img_buf = _read_bytes(images_path)
    lab_buf = _read_bytes(labels_path)
    if len(img_buf) >= 4 and int.from_bytes(img_buf[:4], "big") != IMAGE_MAGIC:
        raise IdxParseError(f"{images_path}: expected image magic 0x{IMAGE_MAGIC:08X}", 0)
    if len(lab_buf) >= 4 and int.from_bytes(lab_buf[:4], "big") != LABEL_MAGIC:
        raise IdxParseError(f"{labels_path}: expected label magic 0x{LABEL_MAGIC:08X}", 0)
    images = decode_idx(img_buf)
    labels = decode_idx(lab_buf)
    if len(images) != len(labels):
        raise IdxParseError(f"{len(images)} images but {len(labels)} labels", 4)
    if labels.size and labels.max() > 9:
        raise IdxParseError("label outside 0-9", 8 + int(np.argmax(labels > 9)))
    images = images.reshape(images.shape + (1,)).astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), split)


def resolve_data_dir(data_dir=None):
    if data_dir is not None:
        return Path(data_dir)
    return Path(os.environ.get(DATA_DIR_ENV, "data/mnist"))


def _find(directory, name):
    for candidate in (directory / name, directory / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(str(directory / name))


def load_mnist_splits(data_dir=None, val_size=5000):
    """Train/validation/test splits; the first ``val_size`` training
    examples form the validation set (55k/5k/10k on standard MNIST)."""
    directory = resolve_data_dir(data_dir)
    train_files = [_find(directory, f) for f in MNIST_FILES["train"]]
    test_files = [_find(directory, f) for f in MNIST_FILES["test"]]
    full = load_mnist(*train_files, split="train")
    test = load_mnist(*test_files, split="test")
    val = Dataset(full.images[:val_size], full.labels[:val_size], "val")
    train = Dataset(full.images[val_size:], full.labels[val_size:], "train")
    return Splits(train, val, test)


# ---------------------------------------------------------------- synthetic

def gen_gaussian_matrix(m, n, mean, std, rng):
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return mean + std * rng.standard_normal((m, n))


# ---------------------------------------------------------------- reports

@dataclass
class ReportRow:
    experiment: str
    policy: str
    replacement: str
    scaled: str
    ratio: float
    k: int
    trials: int
    metric_name: str
    mean: float
    std: float
    compute_reduction: float
    seed: int

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trial count must be >= 1")
        if self.std < 0:
            raise ValueError("std must be non-negative")


REPORT_COLUMNS = [f.name for f in fields(ReportRow)]
_FLOATS = {"ratio", "mean", "std", "compute_reduction"}
_INTS = {"k", "trials", "seed"}


def _fmt(name, value):
    if name in _FLOATS:
        return format(float(value), ".17g")
    return str(value)


def write_report(rows, path, fmt="csv", append=False):
    """Write report rows as CSV (header first) or JSON lines.

    With ``append`` the header is only written when the file is new or empty.
    """
    path = Path(path)
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown report format {fmt!r}")
    fresh = not append or not path.exists() or path.stat().st_size == 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a" if append else "w", newline="") as fh:
            if fmt == "csv":
                writer = csv.writer(fh, lineterminator="\n")
                if fresh:
                    writer.writerow(REPORT_COLUMNS)
                for row in rows:
                    writer.writerow([_fmt(c, getattr(row, c)) for c in REPORT_COLUMNS])
            else:
                for row in rows:
                    rec = {c: (float(_fmt(c, v)) if c in _FLOATS else v)
                           for c, v in asdict(row).items()}
                    fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc


def _parse(name, value):
    if name in _FLOATS:
        return float(value)
    if name in _INTS:
        return int(value)
    return value


def read_report(path, fmt=None):
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    with open(path, newline="") as fh:
        if fmt == "csv":
            return [ReportRow(**{c: _parse(c, r[c]) for c in REPORT_COLUMNS})
                    for r in csv.DictReader(fh)]
        return [ReportRow(**{c: _parse(c, v) for c, v in json.loads(line).items()})
                for line in fh if line.strip()]
