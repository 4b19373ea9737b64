import numpy as np
import pytest

from mfvfi import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    return request.param
