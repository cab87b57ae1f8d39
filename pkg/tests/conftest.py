import numpy as np
import pytest

from facediff import headmodel


@pytest.fixture(scope="session")
def tiny_assets():
    """Small head-model assets shared across tests (nonzero pose basis)."""
    cfg = headmodel.SynthAssetConfig(n_vertices=60, n_shape=12, n_expr=6,
                                     n_joints=3, seed=3, nonzero_pose_basis=True)
    return headmodel.synthesize_assets(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
