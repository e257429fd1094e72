import os
from pathlib import Path

import pytest

from compdesign.desk import ensure_desk

REPO = Path(__file__).resolve().parents[1]
_LINES: list[str] = []


@pytest.fixture(scope="session")
def accept():
    """Recorder for acceptance verdicts: ``accept(name, ok, detail)``; lines are printed in the summary."""

    def record(name: str, ok: bool, detail: str) -> bool:
        _LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok
    return record


@pytest.fixture(scope="session")
def desk():
    """Trained desk artifacts, cached under ``$COMPDESIGN_DESK`` (default ``<repo>/.desk``).

    Missing artifacts are trained on first use (about 25 min on one core);
    set ``COMPDESIGN_DESK_TRAIN=0`` to skip instead.
    """
    root = Path(os.environ.get("COMPDESIGN_DESK", REPO / ".desk"))
    try:
        return ensure_desk(root, train_missing=os.environ.get("COMPDESIGN_DESK_TRAIN", "1") != "0")
    except FileNotFoundError as exc:
        pytest.skip(str(exc))


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance")
        for line in _LINES:
            terminalreporter.write_line(line)
