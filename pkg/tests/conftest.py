from contextlib import contextmanager

import pytest


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion.

    The yielded dict collects details printed alongside the verdict.
    """

    @contextmanager
    def run(number: int, title: str):
        detail: dict = {}
        ok = False
        try:
            yield detail
            ok = True
        finally:
            extra = "  ".join(f"{k}={v}" for k, v in detail.items())
            line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  {extra}".rstrip()
            request.config.acceptance_lines.append(line)
            print(line)

    return run
