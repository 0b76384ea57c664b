# tests/conftest.py

import os
import sys
from pathlib import Path

import pytest

# Add project root to sys.path so 'import polar_grid' works
ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

CONFIGS = ROOT / "configs"


def pytest_collection_modifyitems(config, items):
    if os.getenv("EQUIDESIGN_SKIP_SLOW") == "1":
        skip_slow = pytest.mark.skip(reason="EQUIDESIGN_SKIP_SLOW=1")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def small_grid():
    from polar_grid import build_grid

    return build_grid(16, 12)


@pytest.fixture(scope="session")
def check_grid():
    from polar_grid import build_grid

    return build_grid(32, 24)


@pytest.fixture
def configs_dir():
    return CONFIGS
