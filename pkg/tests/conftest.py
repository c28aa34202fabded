import numpy as np
import pytest

from sfcnext import data


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """16 tiny volumes shared by the data/train/cli tests."""
    root = tmp_path_factory.mktemp("ds-small")
    return data.generate_synthetic(n=16, dims=(24, 24, 24), seed=11,
                                   out_dir=str(root))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
