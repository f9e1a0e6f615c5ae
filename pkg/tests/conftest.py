import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wbcrescue.core import default_label_set


@pytest.fixture(scope="session")
def labels13():
    return default_label_set()
