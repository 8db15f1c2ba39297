"""Shared fixtures: 64-bit single-threaded numerics for every test, one
session-scoped tiny dataset, and the acceptance-line registry that prints a
pass/fail line per acceptance criterion at the end of the run."""

import os
import subprocess
import sys

import pytest

from physrec import precision
from physrec.scenes import generate, make_scene


@pytest.fixture(autouse=True)
def _serial_float64():
    # verification mode: gradient checks and conservation bounds assume doubles
    precision.set_precision(64)
    precision.set_threads(1)
    yield
    precision.set_precision(64)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """tiny-elastic scene rendered to disk once per session (2 views, 64
    particles, free fall onto the sticky ground)."""
    precision.set_precision(64)
    root = tmp_path_factory.mktemp("tiny_ds")
    generate(make_scene("tiny-elastic"), root)
    return root


def run_cli(args, timeout=600):
    """Run the CLI in a subprocess; returns CompletedProcess."""
    return subprocess.run(
        [sys.executable, "-m", "physrec.cli"] + [str(a) for a in args],
        capture_output=True, text=True, timeout=timeout,
        env={**os.environ, "MPLBACKEND": "Agg"})


# ---------------------------------------------------------------------------
# acceptance reporting

_ACCEPT_LINES = []


def record_acceptance(criterion: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    _ACCEPT_LINES.append((criterion, line))
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPT_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPT_LINES):
        terminalreporter.write_line(line)
