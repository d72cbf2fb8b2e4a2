import numpy as np
import pytest

from crsapprox.data import encode_idx
from crsapprox.tensor import make_rng

# one line per acceptance criterion, printed in the terminal summary
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    def record(number, description, passed, detail=""):
        status = "PASS" if passed else "FAIL"
        CRITERIA.append(f"criterion {number:>2} {status}  {description}  {detail}".rstrip())
        return passed
    return record


@pytest.fixture(scope="session")
def fake_mnist_dir(tmp_path_factory):
    """MNIST-shaped IDX files: 5100 training images (5000 go to validation)
    and 50 test images of random pixels."""
    directory = tmp_path_factory.mktemp("mnist")
    rng = make_rng(0)
    arrays = {
        "train-images-idx3-ubyte": rng.integers(0, 256, (5100, 28, 28), dtype=np.uint8),
        "train-labels-idx1-ubyte": rng.integers(0, 10, 5100, dtype=np.uint8),
        "t10k-images-idx3-ubyte": rng.integers(0, 256, (50, 28, 28), dtype=np.uint8),
        "t10k-labels-idx1-ubyte": rng.integers(0, 10, 50, dtype=np.uint8),
    }
    for name, arr in arrays.items():
        (directory / name).write_bytes(encode_idx(arr))
    return directory
