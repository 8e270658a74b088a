import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import RESULTS as ACCEPTANCE  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        verdict, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {verdict}  {detail}")


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(1234)
