import time

import pytest

from eigenseg.neuralef import TrainConfig
from eigenseg.pipeline import oracle_labels
from eigenseg.synthetic import SceneSpec, generate_synthetic
from reference import E2E_CONFIG, ORACLE_CLUSTERS, ORACLE_EIGVECS

# one line per acceptance criterion, echoed in the terminal summary
CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    def report(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])


@pytest.fixture(scope="session")
def scenes():
    return generate_synthetic(SceneSpec(seed=0))


@pytest.fixture(scope="session")
def scene_oracle(scenes):
    """Exact spectral clustering of the scene set (dense Jacobi, 1280 patches) and its wall time."""
    start = time.perf_counter()
    res = oracle_labels(scenes.container, TrainConfig(**E2E_CONFIG), ORACLE_EIGVECS, ORACLE_CLUSTERS)
    return res, time.perf_counter() - start
