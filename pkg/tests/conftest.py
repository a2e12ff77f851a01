import pytest

from sisa_unlearn.data import featurize_dataset, synth_generate
from sisa_unlearn.learner import ModelDims

SMALL_DIMS = ModelDims(256, 16, 2)


@pytest.fixture(scope="session")
def small_table():
    ds = synth_generate(2, 200, 12, 300, 0.9, 1)
    return featurize_dataset(ds, SMALL_DIMS.input_dim, 64)


@pytest.fixture(scope="session")
def three_class_table():
    ds = synth_generate(3, 300, 12, 240, 0.9, 2)
    return featurize_dataset(ds, 256, 64)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an exit criterion, then assert it."""
    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"
        print(line)
        _CRITERIA[number] = line
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
