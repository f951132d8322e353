import numpy as np
import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def verdict():
    """Print and collect one PASS/FAIL (or SKIP) line for an acceptance criterion, then assert it."""

    def record(name: str, ok: bool | None, detail: str) -> None:
        tag = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"{tag} {name}: {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        if ok is None:
            pytest.skip(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
