import numpy as np
import pytest

from straighten.compress import CompressionConfig, compress_global, compress_local, global_flow_trace
from straighten.scenes import builtin


@pytest.fixture(scope="session")
def twist():
    return builtin("twist")


@pytest.fixture(scope="session")
def twist_global(twist):
    return compress_global(twist.manifold, twist.frame, CompressionConfig())


@pytest.fixture(scope="session")
def twist_global_flow(twist):
    return global_flow_trace(twist.manifold, twist.frame, CompressionConfig())


@pytest.fixture(scope="session")
def twist_local(twist):
    cfg = CompressionConfig(epsilon_budget=twist.overrides["epsilon_budget"])
    return compress_local(twist.manifold, twist.frame, cfg)


@pytest.fixture(scope="session")
def twist_relative(twist):
    fixed = ~np.asarray(twist.meta["support"], bool)
    cfg = CompressionConfig(epsilon_budget=twist.overrides["epsilon_budget"], relative=fixed)
    return compress_local(twist.manifold, twist.frame, cfg)


@pytest.fixture(scope="session")
def multi_circle():
    return builtin("multi_circle")
