import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _suite import toy_suite  # noqa: E402


@pytest.fixture(scope="session")
def suite():
    return toy_suite()
