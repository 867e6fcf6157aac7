import os

# bitwise repeatability is only promised for single-threaded BLAS
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from shiftvit.data import write_cifar_file  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_cifar_dir(root, per_file=40, test=40, classes=10, seed=0):
    """Write a miniature CIFAR-10 binary tree whose classes differ in mean colour."""
    root.mkdir(parents=True, exist_ok=True)
    r = np.random.default_rng(seed)
    palette = r.integers(30, 225, size=(classes, 3))

    def records(n):
        labels = np.arange(n) % classes
        noise = r.integers(-30, 31, size=(n, 3, 32, 32))
        imgs = np.clip(palette[labels][:, :, None, None] + noise, 0, 255).astype(np.uint8)
        return imgs, labels.astype(np.uint8)

    for i in range(1, 6):
        write_cifar_file(root / f"data_batch_{i}.bin", *records(per_file))
    write_cifar_file(root / "test_batch.bin", *records(test))
    return root


@pytest.fixture
def cifar_dir(tmp_path):
    return make_cifar_dir(tmp_path / "cifar")
