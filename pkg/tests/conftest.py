import numpy as np
import pytest

from maskbev.scenes import GeneratorConfig, GridSpec, write_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """16 train + 4 val scenes on a 16x16 grid."""
    root = tmp_path_factory.mktemp("small_ds")
    write_dataset(root, 20, 5, GeneratorConfig(grid=GridSpec(16, 16, 1.0)), val_count=4)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.setdefault(number, []).append((passed, detail))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        entries = ACCEPTANCE[number]
        ok = all(p for p, _ in entries)
        details = "; ".join(d for _, d in entries)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {details}")
