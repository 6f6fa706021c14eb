"""
Configure settings for pytest
"""

import pytest

from maseya.measure.synth import default_spec, generate, write_synthetic


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: runs a full statistical evaluation")


@pytest.fixture(scope="session")
def planted():
    """A small draw of the planted synthetic survey."""
    return generate(default_spec(seed=7, n=1200))


@pytest.fixture(scope="session")
def planted_dir(planted, tmp_path_factory):
    """The planted survey written in the pipeline's file formats."""
    out_dir = tmp_path_factory.mktemp("planted")
    return write_synthetic(planted, str(out_dir))
