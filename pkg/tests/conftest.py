from __future__ import annotations

import pytest
import torch

from vtbr.attributes import IDENTITY, SCENE, AttributeSchema, Category


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def small_schema() -> AttributeSchema:
    return AttributeSchema(
        (
            Category("hair", IDENTITY, ("long", "short")),
            Category("weather", SCENE, ("sunny", "rainy")),
        )
    )


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line; the line is printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
