import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from floc.data import procedural_image


@pytest.fixture(scope="session")
def natural_image():
    """Fixed 'natural' test image: smooth procedural scene, seed-pinned."""
    return procedural_image(np.random.default_rng(1234), 96)
