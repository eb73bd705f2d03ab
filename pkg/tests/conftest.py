import numpy as np
import pytest

from asd.synthgen import DEFAULT_MACHINES, generate_corpus


@pytest.fixture(scope="session")
def ci_corpus(tmp_path_factory):
    """Small two-machine development-shaped corpus shared by the slower tests."""
    root = tmp_path_factory.mktemp("ci_corpus")
    catalog, truth = generate_corpus(DEFAULT_MACHINES, root, "ci")
    return root, catalog, truth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
