import sys
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def example_sentence() -> bytes:
    return (FIXTURES / "worked_example.txt").read_bytes()


_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class AcceptanceRecorder:
    def __call__(self, number: int, title: str, ok: bool, detail: str = "") -> None:
        _ACCEPTANCE[number] = (title, ok, detail)
        print(_line(number, title, ok, detail))


def _line(number: int, title: str, ok: bool, detail: str) -> str:
    return f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")


@pytest.fixture
def acceptance() -> AcceptanceRecorder:
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_line(number, *_ACCEPTANCE[number]))
