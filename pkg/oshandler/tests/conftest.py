import os
import subprocess
import sys

import pytest

REPO_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".."))
SCENARIO_DIR = os.path.join(REPO_ROOT, "scenarios")

HANDLER_ARGV = f"{sys.executable} -m oshandler.handler"


def run_vmsim(args: list[str]) -> subprocess.CompletedProcess:
    """Invoke the simulator CLI: the only interface this package consumes."""
    return subprocess.run(
        [sys.executable, "-m", "vmsim.cli", *args],
        capture_output=True, text=True, timeout=300,
    )


@pytest.fixture(scope="session")
def scenario_dir():
    if not os.path.isdir(SCENARIO_DIR):
        pytest.skip("simulator scenarios not found")
    return SCENARIO_DIR
