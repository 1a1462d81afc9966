import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from volreg import kernels

_DEFAULT_BACKEND = kernels.active_backend()


@pytest.fixture(params=list(kernels.available_backends()))
def backend(request):
    """Run a test under each kernel backend, restoring the default after."""
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(_DEFAULT_BACKEND)


@pytest.fixture(autouse=True)
def _restore_backend():
    yield
    if kernels.active_backend() != _DEFAULT_BACKEND:
        kernels.use_backend(_DEFAULT_BACKEND)
