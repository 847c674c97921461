import os

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("SPLITSTOCH_LONG"):
        return
    skip = pytest.mark.skip(reason="long reproduction; set SPLITSTOCH_LONG=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
