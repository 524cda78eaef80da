import gzip
import importlib.util
from pathlib import Path

import numpy as np
import pytest

from cepam.fl.data import MNIST_FILES, write_idx


def _mnist_csv() -> Path | None:
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        return None
    path = Path(spec.submodule_search_locations[0]) / "data" / "data" / "mnist_5k.csv.gz"
    return path if path.is_file() else None


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """IDX copy of the 5000 real MNIST digits bundled with mlxtend, or None.

    The sample is sorted by label; a stratified split puts 400 digits of
    each class in the training files and 100 in the test files, so the IDX
    loader is exercised exactly as with full MNIST.
    """
    src = _mnist_csv()
    if src is None:
        return None
    with gzip.open(src, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    rank = np.zeros(len(labels), dtype=np.int64)
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        rank[idx] = np.arange(len(idx))
    test = rank % 5 == 4
    train_idx = np.flatnonzero(~test)
    test_idx = np.flatnonzero(test)
    out = tmp_path_factory.mktemp("mnist")
    write_idx(out / MNIST_FILES["train_images"], images[train_idx])
    write_idx(out / MNIST_FILES["train_labels"], labels[train_idx])
    write_idx(out / (MNIST_FILES["test_images"] + ".gz"), images[test_idx])
    write_idx(out / (MNIST_FILES["test_labels"] + ".gz"), labels[test_idx])
    return out


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
