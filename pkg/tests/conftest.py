"""Suite-wide fixtures."""
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from filterfusion import diffcore as dc


@pytest.fixture(autouse=True)
def fresh_tape():
    """Isolate tests from tape entries left by an unconsumed forward pass."""
    dc.reset_tape()
    yield
    dc.reset_tape()
