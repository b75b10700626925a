"""Shared fixtures: port allocation and acceptance-criteria reporting."""

import socket

import pytest

_next_base = [21000]


def _range_free(base: int, count: int) -> bool:
    for port in range(base, base + count):
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
            s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                s.bind(("127.0.0.1", port))
            except OSError:
                return False
    return True


@pytest.fixture
def port_block():
    """Return a function handing out a free contiguous port range."""

    def allocate(count: int = 8) -> int:
        while _next_base[0] < 60000:
            base = _next_base[0]
            _next_base[0] += count + 2
            if _range_free(base, count):
                return base
        raise RuntimeError("no free port range found")

    return allocate


_acceptance_results = []


def record_acceptance(number: int, name: str, passed: bool, detail: str = ""):
    _acceptance_results.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_acceptance_results):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d} [{status}] {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
