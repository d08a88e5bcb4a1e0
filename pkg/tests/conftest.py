import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import dnfode  # noqa: E402,F401  (enables float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


GOLDEN = Path(__file__).parent / "golden"
