import numpy as np
import pytest

from lkdist.core import Dataset, Metric
from lkdist.oracle import build_kdist_table


def line_dataset(values, metric=Metric.EUCLIDEAN):
    return Dataset(np.asarray(values, dtype=np.float64).reshape(-1, 1), metric)


def blobs(n=300, d=2, seed=0):
    rng = np.random.default_rng(seed)
    half = n // 2
    pts = np.vstack([rng.normal(0.0, 0.3, size=(half, d)), rng.normal(3.0, 1.0, size=(n - half, d))])
    return Dataset(pts)


@pytest.fixture(scope="session")
def small_blobs():
    ds = blobs(200, 2, seed=3)
    return ds, build_kdist_table(ds, 16)


@pytest.fixture
def toy_line():
    # the three-point line {1, 2, 4}
    return line_dataset([1.0, 2.0, 4.0])


def pytest_terminal_summary(terminalreporter):
    import verdicts

    if not verdicts.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in verdicts.summary_lines():
        terminalreporter.write_line(line)
