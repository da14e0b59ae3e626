import os

import pytest


def pytest_collection_modifyitems(config, items):
    """Skip all integration tests when MULTER_RUN_SLOW is not set."""
    if os.environ.get("MULTER_RUN_SLOW"):
        return

    skip_marker = pytest.mark.skip(reason="MULTER_RUN_SLOW environment variable is not set")
    for item in items:
        if item.get_closest_marker("integration"):
            item.add_marker(skip_marker)


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "integration: mark test as a slow experiment that trains full synthetic runs",
    )
