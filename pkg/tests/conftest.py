import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numba", "numpy"])
def kernel_backend(request):
    """Run a test under both kernel backends, restoring the default after."""
    from tmfnet import kernels

    previous = kernels.current_backend()
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)
