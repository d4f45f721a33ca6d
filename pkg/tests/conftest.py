import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from checks import REPORT

    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for name, (verdict, detail) in REPORT.items():
        terminalreporter.write_line(f"{verdict}  {name}: {detail}")
